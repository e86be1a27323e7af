"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, Dataset, load_raw
from .experiments import EVAL_SEED, calib_set, seed_run
from .losses import LOSS_TAGS, LossKind, default_threads
from .model import PRESETS, ViT, ViTConfig, agreement, all_sites
from .reports import (ABLATE_COLUMNS, HIST_COLUMNS, SEED_COLUMNS, attention_report,
                      weight_histogram, write_csv)
from .search import SearchConfig, default_gamma, run
from .tensor import NumericError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
OUTPUT_KEYS = ("out", "trace_out", "manifest", "out_dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_key(command: str, args: dict) -> str:
    closure = {k: v for k, v in args.items() if k not in OUTPUT_KEYS and k != "threads"}
    return hashlib.sha256(canonical_json({"command": command, "args": closure}).encode()).hexdigest()


def version_string() -> str:
    rev = os.environ.get("QVIT_GIT_REV")
    return f"qvit {__version__}" + (f" ({rev})" if rev else "")


# data sources ---------------------------------------------------------------

def parse_source(source: str, cfg: ViTConfig, default_seed: int) -> Dataset:
    """``synth:N[:SEED]`` or a path to a QDAT file."""
    if source.startswith("synth:"):
        parts = source.split(":")
        try:
            n = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else default_seed
        except (IndexError, ValueError):
            raise UsageError(f"bad synthetic source {source!r}; use synth:N[:SEED]") from None
        if n < 1:
            raise UsageError("synthetic source needs N >= 1")
        return calib_set(cfg, n, seed)
    ds = load_raw(source)
    if tuple(ds.images.shape[1:]) != cfg.image_shape:
        raise DataFormatError(f"{source}: images are {ds.images.shape[1:]}, model needs {cfg.image_shape}")
    return ds


def _abs(path):
    return None if path is None else str(Path(path).resolve())


def _input_hashes(args: dict) -> dict:
    out = {}
    for key in ("weights", "checkpoint"):
        if args.get(key):
            out[key] = sha256_file(args[key])
    for key in ("calib", "eval", "images"):
        source = args.get(key)
        if source and not source.startswith("synth:"):
            out[key] = sha256_file(source)
    return out


def write_manifest(path, command: str, args: dict, results: dict, t0: float, **extra) -> dict:
    manifest = {
        "command": command,
        "args": args,
        "run_key": run_key(command, args),
        "version": version_string(),
        "inputs": _input_hashes(args),
        **extra,
        **results,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# commands -------------------------------------------------------------------

def _vit_config(args: dict) -> ViTConfig:
    base = PRESETS[args["model"]]
    return replace(base, bits_weights=args["bits_w"], bits_activations=args["bits_a"],
                   per_channel=args["per_channel"], quantize_softmax=not args["no_softmax_quant"])


def cmd_calibrate(args: dict) -> dict:
    t0 = time.perf_counter()
    if args["weights"] is None and args["seed"] is None:
        raise UsageError("calibrate needs --weights or --seed")
    cfg = _vit_config(args)
    if args["weights"]:
        loaded = load_checkpoint(args["weights"])
        if replace(loaded.config, bits_weights=cfg.bits_weights, bits_activations=cfg.bits_activations,
                   per_channel=cfg.per_channel, quantize_softmax=cfg.quantize_softmax) != cfg:
            raise DataFormatError("--weights checkpoint architecture does not match --model")
        base = ViT(cfg, loaded.params)
    else:
        base = ViT.from_seed(cfg, args["seed"])
    data_seed = args["seed"] or 0
    calib = parse_source(args["calib"], cfg, data_seed)
    evaluation = parse_source(args["eval"], cfg, EVAL_SEED).batched(64, EVAL_SEED)
    mq = base.calibrate(calib.batched(args["batch"], data_seed).iter_batches())
    agree = agreement(mq, base, evaluation.iter_batches())
    save_checkpoint(mq, args["out"])
    manifest = write_manifest(
        args["manifest"] or args["out"] + ".manifest.json", "calibrate", args,
        {"baseline_agreement": agree, "outputs": {"out": sha256_file(args["out"])}}, t0,
        vit_config=asdict(cfg), dataset=calib.describe(),
    )
    print(f"baseline top-1 agreement: {agree:.4f}")
    return manifest


def _search_config(args: dict, bits_weights: int) -> SearchConfig:
    gamma = args["gamma"] if args["gamma"] is not None else default_gamma(bits_weights)
    return SearchConfig(
        passes=args["K"], cycles=args["C"], population=args["P"], samples=args["S"], gamma=gamma,
        seed=args["seed"], loss=LossKind(args["loss"], args["tau"], not args["raw_logits"]),
        batch_size=args["batch"], init_jitter=args["init_jitter"], relative=args["relative"],
        search_activations=not args["weights_only"],
    )


def cmd_search(args: dict) -> dict:
    t0 = time.perf_counter()
    mq = load_checkpoint(args["checkpoint"])
    if not mq.is_calibrated:
        raise DataFormatError(f"{args['checkpoint']} is not a calibrated checkpoint")
    try:
        scfg = _search_config(args, mq.config.bits_weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    calib = parse_source(args["calib"], mq.config, args["seed"])
    evaluation = parse_source(args["eval"], mq.config, EVAL_SEED).batched(64, EVAL_SEED)
    fp = mq.full_precision()
    a0 = agreement(mq, fp, evaluation.iter_batches())
    searched, trace = run(mq, calib, scfg, args["threads"], timing=args["timing"])
    a1 = agreement(searched, fp, evaluation.iter_batches())
    save_checkpoint(searched, args["out"])
    key = run_key("search", args)
    if args["trace_out"]:
        Path(args["trace_out"]).write_text(trace.to_csv(args["timing"], f"run_key={key}"))
    outputs = {"out": sha256_file(args["out"])}
    if args["trace_out"]:
        outputs["trace_out"] = sha256_file(args["trace_out"])
    manifest = write_manifest(
        args["manifest"] or args["out"] + ".manifest.json", "search", args,
        {"initial_fitness": trace.initial_fitness, "final_fitness": trace.final_fitness,
         "initial_agreement": a0, "final_agreement": a1, "outputs": outputs}, t0,
        search_config=scfg.to_dict(), vit_config=asdict(mq.config), dataset=calib.describe(),
    )
    print(f"fitness {trace.initial_fitness:.6f} -> {trace.final_fitness:.6f}; "
          f"agreement {a0:.4f} -> {a1:.4f}")
    return manifest


def cmd_ablate(args: dict) -> dict:
    t0 = time.perf_counter()
    cfg = _vit_config(args)
    key = run_key("ablate", args)
    rows = []
    for value in args["values"]:
        sweep_args = dict(args)
        if args["sweep"] == "passes":
            sweep_args["K"] = int(value)
        elif args["sweep"] == "cycles":
            sweep_args["C"] = int(value)
        else:
            sweep_args["tau"] = float(value)
        scfg = _search_config(sweep_args, cfg.bits_weights)
        for seed in range(args["seeds"]):
            r = seed_run(cfg, scfg, seed, args["n_calib"], args["weights_seed"], threads=args["threads"])
            rows.append((args["sweep"], value, seed, r.initial_fitness, r.final_fitness,
                         r.initial_agreement, r.final_agreement))
            print(f"{args['sweep']}={value} seed={seed}: fitness {r.final_fitness:.6f}, "
                  f"agreement {r.final_agreement:.4f}")
    write_csv(args["out"], ABLATE_COLUMNS, rows, key)
    return write_manifest(args["manifest"] or args["out"] + ".manifest.json", "ablate", args,
                          {"rows": len(rows), "outputs": {"out": sha256_file(args["out"])}}, t0,
                          vit_config=asdict(cfg))


def cmd_report(args: dict) -> dict:
    t0 = time.perf_counter()
    out_dir = Path(args["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    key = run_key("report", args)
    results: dict = {}
    what = args["what"]
    if what in ("hist", "attmaps"):
        if not args["checkpoint"]:
            raise UsageError(f"report {what} needs --checkpoint")
        model = load_checkpoint(args["checkpoint"])
        if not model.is_calibrated:
            raise DataFormatError("report needs a calibrated checkpoint")
    if what == "hist":
        sites = [args["layer"]] if args["layer"] else [s for s in all_sites(model.config) if s.endswith(".weight")]
        files = []
        for site in sites:
            try:
                rows = weight_histogram(model, site, args["bins"])
            except KeyError as exc:
                raise UsageError(str(exc)) from None
            path = out_dir / f"hist_{site}.csv"
            write_csv(path, HIST_COLUMNS, rows, key)
            files.append(path.name)
        results["files"] = files
    elif what == "attmaps":
        imgs = parse_source(args["images"], model.config, 0).images
        attention_report(model, imgs, out_dir, key)
        results["files"] = ["attmap_fp.pgm", "attmap_quant.pgm", "attmaps.csv"]
    else:
        cfg = _vit_config(args)
        scfg = _search_config(args, cfg.bits_weights)
        rows, improved = [], 0
        for seed in range(args["n"]):
            r = seed_run(cfg, scfg, seed, args["n_calib"], args["weights_seed"], threads=args["threads"])
            improved += r.improved
            rows.append((seed, r.initial_fitness, r.final_fitness, r.initial_agreement,
                         r.final_agreement, int(r.improved)))
        write_csv(out_dir / "seeds.csv", SEED_COLUMNS, rows, key)
        results.update(files=["seeds.csv"], improved=improved, runs=args["n"])
        print(f"improved {improved}/{args['n']}")
    return write_manifest(out_dir / f"report_{what}.manifest.json", "report", args, results, t0)


def cmd_replay(args: dict) -> dict:
    manifest = json.loads(Path(args["manifest_in"]).read_text())
    command, recorded = manifest["command"], dict(manifest["args"])
    for key, digest in manifest.get("inputs", {}).items():
        if sha256_file(recorded[key]) != digest:
            raise DataFormatError(f"input {key} ({recorded[key]}) changed since the recorded run")
    out_dir = Path(args["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for key in OUTPUT_KEYS:
        if recorded.get(key):
            recorded[key] = str(out_dir / Path(recorded[key]).name) if key != "out_dir" else str(out_dir)
    if args["threads"] is not None:
        recorded["threads"] = args["threads"]
    return COMMANDS[command](recorded)


COMMANDS = {
    "calibrate": cmd_calibrate,
    "search": cmd_search,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "replay": cmd_replay,
}


# argument parsing -----------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--model", choices=sorted(PRESETS), default="desk")
    p.add_argument("--bits-w", type=int, default=8, choices=(3, 4, 8, 16))
    p.add_argument("--bits-a", type=int, default=8)
    p.add_argument("--per-channel", action="store_true", help="per-output-channel weight scales")
    p.add_argument("--no-softmax-quant", action="store_true", help="leave attention maps unquantized")


def _add_search_args(p, seed_default=0):
    p.add_argument("--loss", choices=LOSS_TAGS, default="contrastive")
    p.add_argument("--K", type=int, default=10, help="passes over all blocks")
    p.add_argument("--C", type=int, default=3, help="cycles per block")
    p.add_argument("--P", type=int, default=15, help="population size")
    p.add_argument("--S", type=int, default=10, help="tournament sample size")
    p.add_argument("--gamma", type=float, default=None,
                   help="mutation range (default 1e-3 for >=8-bit weights, else 1e-4)")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--init-jitter", action="store_true")
    p.add_argument("--relative", action="store_true", help="multiplicative mutation")
    p.add_argument("--weights-only", action="store_true", help="search weight scales only")
    p.add_argument("--raw-logits", action="store_true", help="skip L2 normalization in infoNCE")


def _add_common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="fitness worker threads (default: $QSEARCH_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qvit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="build and calibrate a quantized model")
    _add_model_args(p)
    p.add_argument("--weights", help="full-precision checkpoint supplying the weights")
    p.add_argument("--seed", type=int, help="seeded random weights (and calibration data seed)")
    p.add_argument("--calib", default="synth:256", help="QDAT file or synth:N[:SEED]")
    p.add_argument("--eval", default="synth:512", help="held-out set for top-1 agreement")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_common(p)

    p = sub.add_parser("search", help="block-wise evolutionary scale search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calib", default="synth:256")
    p.add_argument("--eval", default="synth:512")
    _add_search_args(p)
    p.add_argument("--trace-out")
    p.add_argument("--timing", action="store_true", help="record wall_ms (makes traces non-reproducible)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_common(p)

    p = sub.add_parser("ablate", help="sweep passes, cycles or temperature over seeds")
    _add_model_args(p)
    _add_search_args(p)
    p.add_argument("--sweep", choices=("passes", "cycles", "tau"), required=True)
    p.add_argument("--values", nargs="+", type=float, required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n-calib", type=int, default=256)
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_common(p)

    p = sub.add_parser("report", help="weight histograms, attention maps, seed study")
    p.add_argument("--what", choices=("hist", "attmaps", "seeds"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--layer", help="single weight site for hist (default: all)")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--images", default="synth:8:0", help="images for attmaps")
    p.add_argument("--n", type=int, default=12, help="number of seeds for the seed study")
    p.add_argument("--n-calib", type=int, default=256)
    p.add_argument("--weights-seed", type=int, default=0)
    _add_model_args(p)
    _add_search_args(p)
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest_in", metavar="MANIFEST")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=None)
    return parser


def _normalize(ns: argparse.Namespace) -> tuple[str, dict]:
    args = vars(ns).copy()
    command = args.pop("command")
    for key in ("weights", "checkpoint", "out", "trace_out", "manifest", "out_dir", "manifest_in"):
        if args.get(key):
            args[key] = _abs(args[key])
    for key in ("calib", "eval", "images"):
        if args.get(key) and not args[key].startswith("synth:"):
            args[key] = _abs(args[key])
    if "values" in args:
        args["values"] = [int(v) if args["sweep"] != "tau" and float(v).is_integer() else v
                          for v in args["values"]]
    if "threads" in args and args["threads"] is None:
        args["threads"] = default_threads()
    return command, args


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    command, args = _normalize(ns)
    try:
        COMMANDS[command](args)
    except UsageError as exc:
        print(f"qvit {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"qvit {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataFormatError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"qvit {command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
