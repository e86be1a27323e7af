"""CSV / PGM analysis artifacts: weight histograms and attention maps."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .model import Mode, ViT, average_attention

HIST_COLUMNS = ("bin", "lo", "hi", "fp_count", "quant_count")
ATTMAP_COLUMNS = ("mode", "row", "col", "value")
SEED_COLUMNS = ("seed", "initial_fitness", "final_fitness", "initial_agreement",
                "final_agreement", "improved")
ABLATE_COLUMNS = ("sweep", "value", "seed", "initial_fitness", "final_fitness",
                  "initial_agreement", "final_agreement")


def write_csv(path, columns, rows, run_key: str | None = None) -> None:
    out = io.StringIO()
    if run_key:
        out.write(f"# run_key={run_key}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    Path(path).write_text(out.getvalue())


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def weight_histogram(model: ViT, site: str, bins: int = 64):
    """Rows of (bin, lo, hi, fp_count, quant_count) over the joint value range."""
    if site not in model.params or not site.endswith(".weight"):
        raise KeyError(f"no quantized weight named {site!r}")
    fp = np.asarray(model.params[site], dtype=np.float64).ravel()
    quant = np.asarray(model.with_mode(Mode.FAKE_QUANT)._weight(site), dtype=np.float64).ravel()
    lo = min(fp.min(), quant.min())
    hi = max(fp.max(), quant.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    fp_counts, _ = np.histogram(fp, edges)
    q_counts, _ = np.histogram(quant, edges)
    return [(i, float(edges[i]), float(edges[i + 1]), int(fp_counts[i]), int(q_counts[i]))
            for i in range(bins)]


def write_pgm(path, image: np.ndarray, comment: str | None = None) -> None:
    """8-bit binary PGM, values scaled so the map maximum is white."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D map")
    peak = img.max()
    pix = np.zeros(img.shape, np.uint8) if peak <= 0 else np.rint(255 * np.clip(img, 0, None) / peak).astype(np.uint8)
    h, w = img.shape
    head = "P5\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + w * h], np.uint8).reshape(h, w)


def attention_report(model: ViT, images: np.ndarray, out_dir, run_key: str | None = None) -> dict:
    """Block-averaged FP and quantized attention maps as PGM images plus one CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = {"fp": average_attention(model.full_precision().attention_maps(images))}
    if model.is_calibrated:
        maps["quant"] = average_attention(model.with_mode(Mode.FAKE_QUANT).attention_maps(images))
    rows = []
    for mode, m in maps.items():
        write_pgm(out_dir / f"attmap_{mode}.pgm", m, f"run_key={run_key}" if run_key else None)
        rows += [(mode, r, c, float(m[r, c])) for r in range(m.shape[0]) for c in range(m.shape[1])]
    write_csv(out_dir / "attmaps.csv", ATTMAP_COLUMNS, rows, run_key)
    return maps
