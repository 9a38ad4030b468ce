"""Command-line entry point: ``yldcvt {synth,train,gradcheck,eval}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import train as TR

logger = logging.getLogger("yldcvt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


def _year_range(text: str) -> tuple[int, int]:
    try:
        first, _, last = text.partition("-")
        lo, hi = int(first), int(last or first)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid year range {text!r}; expected e.g. 2003-2021") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"invalid year range {text!r}: start after end")
    return lo, hi


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"yldcvt-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"yldcvt-{__version__}"


# -- checkpoints ----------------------------------------------------------
def save_checkpoint(path: Path, cfg: M.ModelConfig, params: M.ParamStore, train_cfg: TR.TrainConfig) -> None:
    D.write_params(params.arrays(), path)
    meta = {
        "model_config": cfg.to_dict(),
        "precision": train_cfg.precision,
        "eval_batch_size": train_cfg.eval_batch_size,
        "buffers": {k: v.tolist() for k, v in params.buffers.items()},
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[M.ModelConfig, M.ParamStore, dict]:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    cfg = M.ModelConfig.from_dict(meta["model_config"])
    dtype = TR.DTYPES[meta.get("precision", "float32")]
    arrays = D.read_params(path)
    expected = M.param_shapes(cfg)
    if list(arrays) != list(expected) or any(arrays[k].shape != expected[k] for k in expected):
        raise ValueError(f"checkpoint {path} does not match its model configuration")
    buffers = {k: np.asarray(v, dtype=dtype) for k, v in meta.get("buffers", {}).items()}
    params = M.ParamStore.from_arrays({k: v.astype(dtype) for k, v in arrays.items()}, buffers=buffers)
    return cfg, params, meta


# -- commands -------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    gen = D.GeneratorParams.from_json(Path(args.generator).read_text()) if args.generator else D.GeneratorParams()
    overrides = {}
    if args.sigma_noise is not None:
        overrides["sigma_noise"] = args.sigma_noise
    if args.years is not None:
        overrides["first_year"], overrides["last_year"] = args.years
    try:
        gen = dataclasses.replace(gen, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = D.generate_synthetic(args.n, args.seed, gen)
    D.write_dataset(ds, args.out)
    y = ds.yields
    print(
        f"wrote {len(ds)} samples to {args.out}: yield mean {y.mean():.3f} std {y.std():.3f} "
        f"(target {gen.yield_mean} / {gen.yield_std}), years {gen.first_year}-{gen.last_year}"
    )
    return EXIT_OK


def _load_manifest_args(args) -> None:
    manifest = json.loads(Path(args.manifest).read_text())
    args.data = args.data or manifest["dataset"]["path"]
    digest = file_digest(args.data)
    if digest != manifest["dataset"]["sha256"]:
        raise ValueError(f"dataset {args.data} does not match the manifest digest")
    args.model = manifest["preset"]
    args.test_year = manifest["test_years"]
    args.in_year = manifest["in_year"]
    args.model_config = M.ModelConfig.from_dict(manifest["model_config"])
    args.train_config = TR.TrainConfig(**manifest["train_config"])


def cmd_train(args) -> int:
    started = time.time()
    if args.manifest:
        _load_manifest_args(args)
        model_cfg, train_cfg = args.model_config, args.train_config
    else:
        if not args.data or not args.test_year:
            raise UsageError("--data and --test-year are required (or --manifest)")
        overrides = {"runs": args.runs, "seed": args.seed, "precision": args.precision}
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        if args.lr is not None:
            overrides["learning_rate"] = args.lr
        if args.batch_size is not None:
            overrides["batch_size"] = args.batch_size
        train_cfg = TR.train_config_for(args.model, **overrides)
        width = D.IN_YEAR_INTERVALS if args.in_year else D.INTERVALS
        model_cfg = M.preset(args.model, kv_stride=args.kv_stride, input_width=width, proj_norm=args.proj_norm)

    ds = D.read_dataset(args.data)
    if args.in_year:
        ds = D.truncate_dataset(ds)
    out_dir = Path(args.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_cell(cell: TR.CellResult) -> None:
        save_checkpoint(ckpt_dir / f"ckpt_{cell.year}_run{cell.run}.yldh", cell.model_cfg, cell.params, train_cfg)
        print(f"year {cell.year} run {cell.run}: rmse {cell.metrics.rmse:.3f} r2 {cell.metrics.r2:.3f} (best epoch {cell.best_epoch})")

    report = TR.run_experiment(model_cfg, train_cfg, ds, args.test_year, on_cell=on_cell)
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "runs.csv").write_text(report.runs_csv())
    (out_dir / "report.md").write_text(report.to_markdown(args.model))
    manifest = {
        "preset": args.model,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "parameter_count": M.num_parameters(model_cfg),
        "dataset": {"path": str(Path(args.data).resolve()), "sha256": file_digest(args.data)},
        "test_years": list(args.test_year),
        "in_year": bool(args.in_year),
        "seeds": {f"{c.year}/{c.run}": c.seed for c in report.cells},
        "build": build_id(),
        "duration_s": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(report.to_markdown(args.model), end="")
    return EXIT_OK


def gradcheck_groups(result: M.ModelGradCheck) -> dict[str, float]:
    groups: dict[str, float] = {}
    for g in result.groups:
        key = g.name.split(".")[0] if g.name.startswith("head") else ".".join(g.name.split(".")[:2])
        groups[key] = max(groups.get(key, 0.0), g.max_relative_error)
    return groups


def cmd_gradcheck(args) -> int:
    cfg = M.preset(args.model)
    params, x, target = M.gradcheck_setup(cfg, args.seed, residual=args.residual)
    started = time.time()
    names = [n for n in params if n.startswith(args.only)] if args.only else None
    if names == []:
        raise UsageError(f"no parameters match prefix {args.only!r}")
    result = M.model_grad_check(cfg, params, x, target, eps=args.eps, corrupt=args.corrupt_grad, names=names)
    for name, err in gradcheck_groups(result).items():
        print(f"{name:<16} max relative error {err:.3e}")
    worst = result.worst
    print(f"checked {sum(g.size for g in result.groups)} entries in {time.time() - started:.1f}s")
    if result.passed(GRADCHECK_TOLERANCE):
        print(f"PASS max relative error {result.max_relative_error:.3e} < {GRADCHECK_TOLERANCE:.0e}")
        return EXIT_OK
    print(
        f"FAIL max relative error {worst.max_relative_error:.3e} >= {GRADCHECK_TOLERANCE:.0e} "
        f"at {worst.name}{list(worst.worst_entry)}"
    )
    return EXIT_FAIL


def cmd_eval(args) -> int:
    cfg, params, meta = load_checkpoint(args.checkpoint)
    ds = D.read_dataset(args.data)
    if args.in_year:
        ds = D.truncate_dataset(ds)
    model_shape = (cfg.input_channels, cfg.input_height, cfg.input_width)
    if tuple(ds.grid_shape) != model_shape:
        raise ValueError(f"dataset grids are {tuple(ds.grid_shape)} but the checkpoint expects {model_shape}")
    test = ds.subset(np.flatnonzero(ds.years == args.test_year))
    if len(test) == 0:
        raise ValueError(f"no samples for year {args.test_year}; available years: {sorted(set(ds.years.tolist()))}")
    metrics = TR.evaluate(params, cfg, test, meta.get("eval_batch_size", 64))
    print(f"year {args.test_year}: mse {metrics.mse!r} rmse {metrics.rmse!r} r2 {metrics.r2!r}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["year", "mse", "rmse", "r2"])
            w.writerow([args.test_year, repr(metrics.mse), repr(metrics.rmse), repr(metrics.r2)])
    return EXIT_OK


# -- parser ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yldcvt", description="CvT yield regression on histogram data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic YLDH dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-noise", type=float, default=None, help="noise std in units of the yield std")
    p.add_argument("--years", type=_year_range, default=None, help="e.g. 2003-2021")
    p.add_argument("--generator", help="JSON file with generator parameters")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the year-split experiment and write reports")
    p.add_argument("--data")
    p.add_argument("--model", choices=sorted(M.PRESETS), default="tiny")
    p.add_argument("--test-year", type=int, action="append", help="repeat for several years")
    p.add_argument("--kv-stride", type=int, choices=(1, 2), default=2)
    p.add_argument("--runs", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--in-year", action="store_true", help="truncate grids to the first 19 intervals")
    p.add_argument("--epochs", type=_positive_int, default=None, help="default: preset value")
    p.add_argument("--lr", type=float, default=None, help="default 0.00025")
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--precision", choices=sorted(TR.DTYPES), default="float32")
    p.add_argument("--proj-norm", choices=("layer", "batch"), default="layer")
    p.add_argument("--manifest", help="re-run the experiment recorded in a manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    p.add_argument("--model", choices=sorted(M.PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=M.GRADCHECK_EPS)
    p.add_argument("--residual", type=float, default=M.GRADCHECK_RESIDUAL, help=argparse.SUPPRESS)
    p.add_argument("--corrupt-grad", type=float, default=1.0, help=argparse.SUPPRESS)
    p.add_argument("--only", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one year of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-year", type=int, required=True)
    p.add_argument("--in-year", action="store_true")
    p.add_argument("--out", help="write the metrics row to this CSV file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limit = os.environ.get("YLDCVT_THREADS")
    try:
        if limit:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(limit)):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"yldcvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"yldcvt: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
