"""Binary checkpoint format (all integers little-endian).

::

    b"QVIT" | version u32 | n_fields u32 | config fields u32[n_fields]
    | n_sections u32 | section*

    section = name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u32[ndim]
              | payload

dtype 0 is a float32 tensor (row-major payload). dtype 1 is a list of
quantizer records, ``dims == [n]``, each record packed as
``scheme u8, bits u8, scale f32, zero_point i32, alpha i32, beta i32``.
Weight sections come first in parameter order, then quantizer sections named
``quant/<site>``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import Mode, ViT, ViTConfig, all_sites, param_shapes
from .quant import QuantParams, Scheme

MAGIC = b"QVIT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_QPARAMS = 1
_QP = struct.Struct("<BBfiii")
QUANT_PREFIX = "quant/"


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _config_fields() -> list[str]:
    return [f.name for f in fields(ViTConfig)]


def dumps(model: ViT) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    names = _config_fields()
    buf.write(struct.pack("<I", len(names) + 1))
    for name in names:
        buf.write(struct.pack("<I", int(getattr(model.config, name))))
    buf.write(struct.pack("<I", int(model.mode)))

    quant_sites = [s for s in all_sites(model.config) if s in model.quant]
    buf.write(struct.pack("<I", len(model.params) + len(quant_sites)))
    for name in param_shapes(model.config):
        arr = model.params[name]
        _section_header(buf, name, DTYPE_F32, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for site in quant_sites:
        qps = model.quant[site]
        _section_header(buf, QUANT_PREFIX + site, DTYPE_QPARAMS, (len(qps),))
        for qp in qps:
            buf.write(_QP.pack(int(qp.scheme), qp.bits, qp.scale, qp.zero_point, qp.alpha, qp.beta))
    return buf.getvalue()


def _section_header(buf, name: str, dtype: int, shape) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", dtype, len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(data: bytes) -> ViT:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a QVIT checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_fields,) = r.unpack("<I")
    names = _config_fields()
    if n_fields != len(names) + 1:
        raise CheckpointError(f"config block has {n_fields} fields, expected {len(names) + 1}")
    values = r.unpack(f"<{n_fields}I")
    kwargs = {}
    for f, v in zip(fields(ViTConfig), values):
        kwargs[f.name] = bool(v) if f.type in (bool, "bool") else int(v)
    try:
        cfg = ViTConfig(**kwargs)
        mode = Mode(values[-1])
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc

    (n_sections,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    quant: dict[str, tuple[QuantParams, ...]] = {}
    for _ in range(n_sections):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        dtype, ndim = r.unpack("<BI")
        shape = r.unpack(f"<{ndim}I")
        if dtype == DTYPE_F32:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
            arr.setflags(write=False)
            params[name] = arr
        elif dtype == DTYPE_QPARAMS:
            if not name.startswith(QUANT_PREFIX) or ndim != 1:
                raise CheckpointError(f"malformed quantizer section {name!r}")
            recs = []
            for _ in range(shape[0]):
                scheme, bits, s, zp, lo, hi = _QP.unpack(r.take(_QP.size))
                try:
                    recs.append(QuantParams(Scheme(scheme), bits, s, zp, lo, hi))
                except ValueError as exc:
                    raise CheckpointError(f"invalid quantizer in {name!r}: {exc}") from exc
            quant[name[len(QUANT_PREFIX):]] = tuple(recs)
        else:
            raise CheckpointError(f"unknown section dtype {dtype} in {name!r}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last section")

    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise CheckpointError(f"checkpoint weights do not match config (missing {missing[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name} has shape {params[name].shape}, expected {shape}")
    ordered = {name: params[name] for name in expected}
    model = ViT(cfg, ordered, quant, Mode.FULL_PRECISION)
    if mode == Mode.FAKE_QUANT:
        if not model.is_calibrated:
            raise CheckpointError("fake-quant checkpoint is missing quantizer sections")
        model = model.with_mode(Mode.FAKE_QUANT)
    return model


def save_checkpoint(model: ViT, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> ViT:
    return loads(Path(path).read_bytes())
