"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``-m acceptance``).
"""
import json
import math
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from qvit.cli import main
from qvit.experiments import baseline_agreement, eval_set, seed_run
from qvit.losses import info_nce, info_nce_from_logits
from qvit.model import ScaleSlot, ScaleVector, ViTConfig
from qvit.quant import QuantParams, Scheme, fake_quant, uniform_quantize
from qvit.search import SearchConfig, SearchTarget, build_target, run_search, search_block

pytestmark = pytest.mark.acceptance


def record(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_quantizer_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10_000
    bits = rng.choice([3, 4, 8], size=n)
    scales = np.float32(np.exp(rng.uniform(np.log(1e-4), np.log(1.0), size=n)))
    xs = np.float32(rng.normal(size=n) * scales * 2.0 ** (bits - 1))
    mismatches = 0
    for x, s, b in zip(xs, scales, bits):
        qp = QuantParams.symmetric(int(b), float(s))
        ref = min(max(round(float(np.float32(x) / np.float32(qp.scale))), qp.alpha), qp.beta)
        mismatches += int(uniform_quantize(np.array([x]), qp)[0] != ref)
    worst = 0.0
    for b in (3, 4, 8):
        qp = QuantParams.symmetric(b, 0.0213)
        grid = np.linspace(qp.alpha * qp.scale, qp.beta * qp.scale, 50_001, dtype=np.float32)
        err = np.abs(grid.astype(np.float64) - fake_quant(grid, qp)) - np.spacing(np.float32(grid.max()))
        worst = max(worst, float(err.max()) / qp.scale)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 0.5 and elapsed < 1.0
    record(1, "quantizer oracle equivalence", ok,
           f"{mismatches} mismatches / {n}, max round-trip error {worst:.4f} delta, {elapsed:.2f}s")


def test_criterion_2_info_nce_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    b1 = info_nce(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)))
    b2 = info_nce(np.eye(2), np.eye(2), tau=1.0)
    uni = info_nce(np.ones((5, 3)), np.ones((5, 3)), tau=0.1)
    pos_ok = neg_ok = 0
    for _ in range(100):
        s = rng.uniform(-1, 1, size=(6, 6))
        i, j = rng.choice(6, size=2, replace=False)
        bump = rng.uniform(0.01, 0.5)
        up = s.copy()
        up[i, i] += bump
        pos_ok += info_nce_from_logits(up / 0.1) < info_nce_from_logits(s / 0.1)
        up = s.copy()
        up[i, j] += bump
        neg_ok += info_nce_from_logits(up / 0.1) > info_nce_from_logits(s / 0.1)
    elapsed = time.perf_counter() - t0
    ok = (b1 == 0.0 and abs(b2 - 0.31326) <= 1e-5 and abs(uni - math.log(5)) <= 1e-6
          and pos_ok == 100 and neg_ok == 100 and elapsed < 1.0)
    record(2, "infoNCE closed forms", ok,
           f"B=1 {b1:.2g}, B=2 {b2:.5f}, uniform {uni:.6f} vs log5, monotone {pos_ok}+{neg_ok}/200, "
           f"{elapsed:.2f}s")


def _desk_target(seed: int, cfg: SearchConfig):
    from qvit.experiments import calib_set, calibrate
    from qvit.model import ViT
    vit = ViTConfig(bits_weights=4)
    calib = calib_set(vit, 64, seed)
    mq = calibrate(ViT.from_seed(vit, 0), calib, cfg.batch_size, seed)
    return build_target(mq, calib, cfg)


def test_criterion_3_search_invariants():
    t0 = time.perf_counter()
    cfg = SearchConfig(passes=3, gamma=1e-4, seed=4)
    sizes_ok, monotone_ok, max_dev = True, True, 0.0
    state = {}

    def observer(k, b, cycle, pop):
        nonlocal sizes_ok, monotone_ok, max_dev
        sizes_ok &= len(pop) == cfg.population
        best = pop.best()
        if cycle == -1:
            state["start"], state["best"] = pop.members[0].scales.values.astype(np.float64), best.fitness
            return
        monotone_ok &= best.fitness >= state["best"]
        state["best"] = best.fitness
        if cycle == cfg.cycles - 1:
            max_dev = max(max_dev, float(np.abs(best.scales.values - state["start"]).max()))

    trace_a = run_search(_desk_target(1, cfg), cfg, observer)
    trace_b = run_search(_desk_target(1, cfg), cfg)
    same = trace_a.to_csv() == trace_b.to_csv()
    elapsed = time.perf_counter() - t0
    bound = cfg.gamma * cfg.cycles
    ok = sizes_ok and monotone_ok and max_dev <= bound and same and elapsed < 60
    record(3, "search invariants", ok,
           f"|pop|==P {sizes_ok}, monotone best {monotone_ok}, max deviation {max_dev:.3g} <= {bound:.3g}, "
           f"identical traces {same}, {elapsed:.1f}s")


class OneScale(SearchTarget):
    """f(delta) = -(delta - target)^2 over a single scale."""

    num_blocks = 1

    def __init__(self, start: float, target: float):
        self.sv = ScaleVector(np.array([start], np.float32), (ScaleSlot("x", Scheme.UNIFORM_SYMMETRIC),))
        self.target = target

    def get_scales(self, b):
        return self.sv

    def set_scales(self, b, sv):
        self.sv = sv

    def evaluate(self):
        return -(float(self.sv.values[0]) - self.target) ** 2


def test_criterion_4_rigged_landscape():
    t0 = time.perf_counter()
    cfg0 = SearchConfig(gamma=1e-4)  # cycles 3, population 15, samples 10
    radius = cfg0.gamma * cfg0.cycles
    start = 0.05
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DD]))
        target = start + rng.uniform(-radius, radius)
        grid = np.linspace(start - radius, start + radius, 20_001)
        oracle = grid[np.argmax(-(grid - target) ** 2)]
        t = OneScale(start, target)
        got = float(search_block(t, 0, SearchConfig(gamma=cfg0.gamma, seed=seed)).scales.values[0])
        hits += abs(got - oracle) <= cfg0.gamma
    elapsed = time.perf_counter() - t0
    ok = hits >= 95 and elapsed < 10
    record(4, "rigged-landscape oracle", ok, f"{hits}/100 seeds within gamma of the grid optimum, {elapsed:.1f}s")


def test_criterion_5_end_to_end_improvement():
    t0 = time.perf_counter()
    vit = ViTConfig(num_blocks=4, embed_dim=64, bits_weights=4, bits_activations=8)
    cfg = SearchConfig(passes=10, cycles=3, population=15, samples=10, gamma=1e-4)
    evaluation = eval_set(vit)
    results = [seed_run(vit, cfg, seed, n_calib=256, evaluation=evaluation, threads=1) for seed in range(12)]
    improved = sum(r.improved for r in results)
    delta = float(np.mean([r.final_agreement - r.initial_agreement for r in results]))
    elapsed = time.perf_counter() - t0
    ok = improved >= 9 and delta >= -0.005 and elapsed < 30 * 60
    record(5, "end-to-end improvement", ok,
           f"improved {improved}/12, mean agreement change {100 * delta:+.2f} points, {elapsed:.0f}s")


def test_criterion_6_bit_width_trend():
    t0 = time.perf_counter()
    evaluation = eval_set(ViTConfig())
    means = {}
    for bits in (3, 4, 8):
        cfg = ViTConfig(bits_weights=bits)
        means[bits] = float(np.mean([baseline_agreement(cfg, s, evaluation=evaluation) for s in range(5)]))
    elapsed = time.perf_counter() - t0
    ok = means[3] <= means[4] <= means[8] and elapsed < 300
    record(6, "bit-width trend", ok,
           ", ".join(f"{b}-bit {m:.3f}" for b, m in means.items()) + f", {elapsed:.0f}s")


def _calibrate_desk(tmp_path, name="q.qvit"):
    out = tmp_path / name
    assert main(["calibrate", "--seed", "0", "--bits-w", "4", "--calib", "synth:256",
                 "--out", str(out)]) == 0
    return out


def test_criterion_7_loss_comparison(tmp_path):
    t0 = time.perf_counter()
    q = _calibrate_desk(tmp_path)
    headers, lengths, summary = set(), set(), {}
    for loss in ("contrastive", "mse", "cosine", "kl"):
        trace = tmp_path / f"trace_{loss}.csv"
        code = main(["search", "--checkpoint", str(q), "--calib", "synth:256", "--loss", loss, "--seed", "0",
                     "--trace-out", str(trace), "--out", str(tmp_path / f"{loss}.qvit")])
        assert code == 0
        lines = trace.read_text().splitlines()
        headers.add(lines[1])
        lengths.add(len(lines))
        summary[loss] = json.loads((tmp_path / f"{loss}.qvit.manifest.json").read_text())
    c = summary["contrastive"]
    elapsed = time.perf_counter() - t0
    ok = len(headers) == 1 and len(lengths) == 1 and c["final_fitness"] >= c["initial_fitness"] and elapsed < 900
    record(7, "loss-comparison artifacts", ok,
           f"schemas identical {len(headers) == 1}, contrastive {c['initial_fitness']:.4f} -> "
           f"{c['final_fitness']:.4f}, {elapsed:.0f}s")


def test_criterion_8_determinism_closure(tmp_path):
    t0 = time.perf_counter()
    q = _calibrate_desk(tmp_path)
    out, trace = tmp_path / "s.qvit", tmp_path / "trace.csv"
    assert main(["search", "--checkpoint", str(q), "--calib", "synth:256", "--seed", "3",
                 "--trace-out", str(trace), "--out", str(out)]) == 0
    replay = tmp_path / "replay"
    assert main(["replay", str(tmp_path / "q.qvit.manifest.json"), "--out-dir", str(replay)]) == 0
    assert main(["replay", str(tmp_path / "s.qvit.manifest.json"), "--out-dir", str(replay)]) == 0
    same = {
        "calibrated": (replay / "q.qvit").read_bytes() == q.read_bytes(),
        "searched": (replay / "s.qvit").read_bytes() == out.read_bytes(),
        "trace": (replay / "trace.csv").read_bytes() == trace.read_bytes(),
    }
    elapsed = time.perf_counter() - t0
    ok = all(same.values()) and elapsed < 300
    record(8, "determinism closure", ok,
           ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()) + f", {elapsed:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
