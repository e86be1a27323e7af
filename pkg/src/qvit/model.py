"""A small pre-norm Vision Transformer with optional fake quantization.

Block forward (``fq_*`` marks a fake-quant site active in quantized mode)::

    x   = fq_block_in(x)
    h   = layernorm1(x)
    qkv = fq_qkv(h @ fq(W_qkv) + b_qkv)
    a   = fq_softmax(softmax(q k^T / sqrt(d_head)))       # log2 quantizer
    x   = x + fq_proj(merge(a v) @ fq(W_proj) + b_proj)
    g   = fq_gelu(gelu(layernorm2(x) @ fq(W_fc1) + b_fc1))
    x   = fq_block_out(x + g @ fq(W_fc2) + b_fc2)

Outside the blocks the patch-embedding and head weights are quantized, plus
the head input activation. Their scales are not part of any block's search
vector. Biases, LayerNorm parameters, the class token and the position
embedding stay full precision.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .quant import (
    MinMaxObserver,
    QuantParams,
    Scheme,
    fake_quant,
    fake_quant_channels,
    minmax_calibrate_weights,
)

WEIGHT_SITES = ("attn.qkv.weight", "attn.proj.weight", "mlp.fc1.weight", "mlp.fc2.weight")
ACT_SITES = ("block_in", "qkv", "softmax", "proj", "gelu", "block_out")


class Mode(enum.IntEnum):
    FULL_PRECISION = 0
    FAKE_QUANT = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: int = 2
    num_blocks: int = 4
    num_classes: int = 10
    bits_weights: int = 8
    bits_activations: int = 8
    per_channel: bool = False
    quantize_softmax: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.num_blocks < 1:
            raise ValueError("need at least one block")
        if self.bits_weights < 2 or self.bits_activations < 2:
            raise ValueError("bit-widths must be >= 2")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.in_chans, self.image_size, self.image_size)


PRESETS = {
    "desk": ViTConfig(),
    "tiny": ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_heads=2, num_blocks=2),
}


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes = {
        "patch_embed.weight": (cfg.in_chans * cfg.patch_size**2, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.num_tokens, d),
    }
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,),
            p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden),
            p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d),
            p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.weight": (d,),
        "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    })
    return shapes


def init_params(cfg: ViTConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded stand-in for pretrained weights.

    Linear weights ~ N(0, 1/fan_in); linear biases, class token and position
    embedding ~ N(0, 0.02^2); LayerNorm gain 1 and bias 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x71]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            arr = np.ones(shape)
        elif "norm" in name:
            arr = np.zeros(shape)
        elif name.endswith(".weight"):
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = _frozen(arr)
    return params


def _frozen(arr) -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScaleSlot:
    site: str
    scheme: Scheme
    channel: int = 0


@dataclass(frozen=True, eq=False)
class ScaleVector:
    """All searchable scales of one block, stacked in a fixed layout."""

    values: np.ndarray
    layout: tuple[ScaleSlot, ...]

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32).reshape(-1)
        if len(vals) != len(self.layout):
            raise ValueError(f"{len(vals)} values for a layout of {len(self.layout)}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScaleVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def replace_values(self, values) -> "ScaleVector":
        return ScaleVector(values, self.layout)


def block_weight_sites(b: int) -> list[str]:
    return [f"blocks.{b}.{w}" for w in WEIGHT_SITES]


def block_act_sites(b: int) -> list[str]:
    return [f"blocks.{b}.act.{a}" for a in ACT_SITES]


def all_sites(cfg: ViTConfig) -> list[str]:
    sites = ["patch_embed.weight"]
    for b in range(cfg.num_blocks):
        sites += block_weight_sites(b) + block_act_sites(b)
    return sites + ["act.head_in", "head.weight"]


@dataclass
class ViT:
    """Model with shared real-valued weights and per-site quantizer state.

    ``quant`` maps each site name to a tuple of :class:`QuantParams` (one entry
    per tensor, or one per output channel for per-channel weights).
    """

    config: ViTConfig
    params: dict[str, np.ndarray]
    quant: dict[str, tuple[QuantParams, ...]] = field(default_factory=dict)
    mode: Mode = Mode.FULL_PRECISION
    _wcache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_seed(cls, cfg: ViTConfig, seed: int) -> "ViT":
        return cls(cfg, init_params(cfg, seed))

    # views -----------------------------------------------------------------

    def with_mode(self, mode: Mode) -> "ViT":
        """A view sharing weights and quantizer state, in the given mode."""
        if mode == Mode.FAKE_QUANT and not self.is_calibrated:
            raise RuntimeError("model is not calibrated")
        return ViT(self.config, self.params, self.quant, Mode(mode), self._wcache)

    def full_precision(self) -> "ViT":
        return self.with_mode(Mode.FULL_PRECISION)

    def copy(self) -> "ViT":
        """Independent quantizer state; weights stay shared (they are read-only)."""
        return ViT(self.config, self.params, dict(self.quant), self.mode, {})

    @property
    def is_calibrated(self) -> bool:
        return all(s in self.quant for s in all_sites(self.config))

    # forward ---------------------------------------------------------------

    def _weight(self, name: str) -> np.ndarray:
        w = self.params[name]
        if self.mode != Mode.FAKE_QUANT:
            return w
        qps = self.quant[name]
        hit = self._wcache.get(name)
        if hit is not None and hit[0] == qps:
            return hit[1]
        deq = fake_quant_channels(w, qps, axis=-1)
        deq.setflags(write=False)
        self._wcache[name] = (qps, deq)
        return deq

    def _act(self, site: str, x: np.ndarray, hook) -> np.ndarray:
        if hook is not None:
            hook(site, x)
        if self.mode == Mode.FAKE_QUANT:
            if site.endswith(".softmax") and not self.config.quantize_softmax:
                return x
            return fake_quant(x, self.quant[site][0])
        return x

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.config.image_shape:
            raise ValueError(
                f"expected batch of shape (B, {', '.join(map(str, self.config.image_shape))}),"
                f" got {batch.shape}"
            )

    def patchify(self, batch: np.ndarray) -> np.ndarray:
        cfg = self.config
        b = batch.shape[0]
        g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        x = batch.reshape(b, cfg.in_chans, g, p, g, p)
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        return x.reshape(b, g * g, cfg.in_chans * p * p)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        self._check_batch(batch)
        p = self.params
        x = T.linear(self.patchify(np.asarray(batch, dtype=np.float32)),
                     self._weight("patch_embed.weight"), p["patch_embed.bias"])
        cls = np.broadcast_to(p["cls_token"], (x.shape[0], 1, x.shape[2]))
        x = np.concatenate([cls, x], axis=1)
        return T.add(x, np.broadcast_to(p["pos_embed"], x.shape))

    def block(self, b: int, x: np.ndarray, hook=None, capture=None) -> np.ndarray:
        cfg, p = self.config, self.params
        pre = f"blocks.{b}."
        act = pre + "act."
        n, t, d = x.shape
        h_, dh = cfg.num_heads, cfg.head_dim

        x = self._act(act + "block_in", x, hook)
        h = T.layernorm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"])
        qkv = T.linear(h, self._weight(pre + "attn.qkv.weight"), p[pre + "attn.qkv.bias"])
        qkv = self._act(act + "qkv", qkv, hook)
        qkv = T.transpose(qkv.reshape(n, t, 3, h_, dh), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = self._act(act + "softmax", T.softmax(scores, axis=-1), hook)
        if capture is not None:
            capture.append(attn)
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(n, t, d)
        proj = T.linear(ctx, self._weight(pre + "attn.proj.weight"), p[pre + "attn.proj.bias"])
        x = T.add(x, self._act(act + "proj", proj, hook))

        h = T.layernorm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"])
        g = T.gelu(T.linear(h, self._weight(pre + "mlp.fc1.weight"), p[pre + "mlp.fc1.bias"]))
        g = self._act(act + "gelu", g, hook)
        out = T.linear(g, self._weight(pre + "mlp.fc2.weight"), p[pre + "mlp.fc2.bias"])
        return self._act(act + "block_out", T.add(x, out), hook)

    def head(self, x: np.ndarray, hook=None) -> np.ndarray:
        p = self.params
        cls = T.layernorm(x[:, 0], p["norm.weight"], p["norm.bias"])
        cls = self._act("act.head_in", cls, hook)
        return T.linear(cls, self._weight("head.weight"), p["head.bias"])

    def forward(self, batch: np.ndarray, hook=None, capture=None) -> np.ndarray:
        """Logits of shape (B, num_classes)."""
        x = self.embed(batch)
        for b in range(self.config.num_blocks):
            x = self.block(b, x, hook, capture)
        return self.head(x, hook)

    __call__ = forward

    def forward_prefix(self, batch: np.ndarray, upto: int) -> np.ndarray:
        """Hidden state entering block ``upto`` (before its input quantizer)."""
        x = self.embed(batch)
        for b in range(upto):
            x = self.block(b, x)
        return x

    def forward_from(self, start: int, x: np.ndarray) -> np.ndarray:
        for b in range(start, self.config.num_blocks):
            x = self.block(b, x)
        return self.head(x)

    def attention_maps(self, batch: np.ndarray) -> np.ndarray:
        """Post-softmax (post-quantizer in fake-quant mode) maps, (N, B, H, T, T)."""
        maps: list[np.ndarray] = []
        self.forward(batch, capture=maps)
        return np.stack(maps)

    # calibration -----------------------------------------------------------

    def calibrate(self, batches: Iterable[np.ndarray]) -> "ViT":
        """MinMax weights, running min/max activations, log2 (scale 1) softmax.

        Returns a new fake-quant model sharing this model's weights.
        """
        cfg = self.config
        quant: dict[str, tuple[QuantParams, ...]] = {}
        for site in all_sites(cfg):
            if site.endswith(".weight"):
                qp = minmax_calibrate_weights(self.params[site], cfg.bits_weights,
                                              per_channel=cfg.per_channel, axis=-1)
                quant[site] = qp if isinstance(qp, tuple) else (qp,)

        observers = {s: MinMaxObserver(cfg.bits_activations)
                     for s in all_sites(cfg) if not s.endswith(".weight") and not s.endswith(".softmax")}

        def hook(site, x):
            if site in observers:
                observers[site].observe(x)

        fp = ViT(cfg, self.params, {}, Mode.FULL_PRECISION)
        seen = 0
        for batch in batches:
            fp.forward(batch, hook=hook)
            seen += 1
        if not seen:
            raise ValueError("calibration set is empty")
        for site, obs in observers.items():
            quant[site] = (obs.params(),)
        for b in range(cfg.num_blocks):
            quant[f"blocks.{b}.act.softmax"] = (QuantParams.log2(cfg.bits_activations, 1.0),)
        return ViT(cfg, self.params, quant, Mode.FAKE_QUANT)

    # scale vectors ---------------------------------------------------------

    def _block_sites(self, b: int, include_activations: bool) -> list[str]:
        if not 0 <= b < self.config.num_blocks:
            raise IndexError(f"block index {b} out of range")
        sites = block_weight_sites(b)
        if include_activations:
            sites += block_act_sites(b)
        return sites

    def get_scales(self, b: int, include_activations: bool = True) -> ScaleVector:
        if not self.is_calibrated:
            raise RuntimeError("model is not calibrated")
        values, layout = [], []
        for site in self._block_sites(b, include_activations):
            for ch, qp in enumerate(self.quant[site]):
                values.append(qp.scale)
                layout.append(ScaleSlot(site, qp.scheme, ch))
        return ScaleVector(np.array(values, dtype=np.float32), tuple(layout))

    def set_scales(self, b: int, sv: ScaleVector) -> None:
        include = any(".act." in slot.site for slot in sv.layout)
        expected = self.get_scales(b, include_activations=include).layout
        if sv.layout != expected:
            raise ValueError(f"scale layout does not match block {b}")
        if not (sv.values > 0).all():
            raise ValueError("scales must be positive")
        grouped: dict[str, list[float]] = {}
        for slot, v in zip(sv.layout, sv.values):
            grouped.setdefault(slot.site, []).append(float(v))
        for site, vals in grouped.items():
            old = self.quant[site]
            self.quant[site] = tuple(qp.with_scale(v) for qp, v in zip(old, vals))


def agreement(model_q: ViT, model_f: ViT, batches: Iterable[np.ndarray]) -> float:
    """Fraction of images where both models pick the same top-1 class."""
    same = total = 0
    for batch in batches:
        a = T.argmax_rows(model_q(batch))
        b = T.argmax_rows(model_f(batch))
        same += sum(int(x == y) for x, y in zip(a, b))
        total += len(a)
    if total == 0:
        raise ValueError("no images to compare")
    return same / total


def average_attention(maps: np.ndarray) -> np.ndarray:
    """Average (N, B, H, T, T) maps over blocks, images and heads -> (T, T)."""
    return maps.astype(np.float64).mean(axis=(0, 1, 2))


def weight_bytes_digest(model: ViT) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].tobytes())
    return h.hexdigest()

