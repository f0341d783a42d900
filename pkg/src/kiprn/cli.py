"""``kiprn`` command line: synth, train, eval, ablate, benchmark, gradcheck, cam.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
All files are written under ``--out``.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .classifier import save_cam_pngs
from .config import RunConfig, load_run_config, parse_run_config
from .resizer import ConfigError
from .synthpave import (NORM_MEAN, NORM_STD, DatasetManifest, ImageCache, load_png, synth_generate)

log = logging.getLogger("kiprn")

GRADCHECK_TOL = 1e-6
BENCH_MODES = ("single-scale", "bilinear-multiscale", "kiprn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _globals(defaults: bool) -> argparse.ArgumentParser:
    # the subparser copies must not clobber values given before the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = _Parser(add_help=False)
    p.add_argument("--config", default=d(None), help="JSON run config (every field optional)")
    p.add_argument("--seed", type=int, default=d(None), help="override every seed field")
    p.add_argument("--out", default=d(None), help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kiprn", description="Learned image-pyramid resizer and classifier",
                     parents=[_globals(True)])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    common = [_globals(False)]

    p = sub.add_parser("synth", parents=common, help="render the synthetic pavement corpus")
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--render-size", type=int, help="square render size in pixels")

    p = sub.add_parser("train", parents=common, help="train resizer and classifier jointly")
    p.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--mode", choices=BENCH_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=common, help="score a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("ablate", parents=common, help="train the kernel/placement ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default="all", help="'all' or one preset name, e.g. Inversed, 3x3, Last")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("benchmark", parents=common, help="per-epoch wall time of each mode")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=2)

    p = sub.add_parser("gradcheck", parents=common, help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("cam", parents=common, help="export a class activation heatmap and overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="RGB PNG")
    p.add_argument("--class", dest="class_index", type=int, help="class index (default: predicted)")
    return parser


def _thread_count() -> int | None:
    raw = os.environ.get("KIPRN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"KIPRN_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"KIPRN_THREADS must be a non-negative integer, got {raw!r}")
    return n or None


@contextlib.contextmanager
def _thread_limit(n: int | None):
    if n is None:
        yield
        return
    import scipy.fft
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n), scipy.fft.set_workers(n):
        yield


def _run_config(args) -> RunConfig:
    if args.config is None:
        rc = parse_run_config({})
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        rc = load_run_config(path)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        rc.train.seed = args.seed
        rc.dataset.seed = args.seed
    return rc


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _manifest(args) -> DatasetManifest:
    path = _existing(args.data, "dataset")
    if path.is_dir():
        path = _existing(path / "manifest.jsonl", "manifest")
    return DatasetManifest.load(path)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, rc: RunConfig) -> int:
    out = _out_dir(args)
    spec = rc.dataset
    if args.samples_per_class is not None:
        spec.samples_per_class = args.samples_per_class
    if args.render_size is not None:
        spec.render_size = (args.render_size, args.render_size)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = synth_generate(spec, out)
    print(f"wrote {len(manifest.records)} images and {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from .engine import train, write_metrics_csv

    cfg = rc.train
    if args.mode is not None:
        cfg.mode = args.mode
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    manifest = _manifest(args)
    resume = checkpoint_load(_existing(args.resume, "checkpoint")) if args.resume else None
    if resume is not None:
        from .engine import TrainConfig

        saved = TrainConfig.from_dict(resume.config)
        saved.epochs = cfg.epochs
        cfg = saved.validate()
    out = _out_dir(args)
    ckpt, rows = train(cfg, manifest, resume=resume)
    checkpoint_save(ckpt, out / "checkpoint.kprn")
    write_metrics_csv(rows, out / "metrics.csv")
    _write_json(out / "run_config.json", cfg.to_dict())
    if rows:
        print(f"epoch {rows[-1].epoch}: train_acc {rows[-1].train_acc:.4f} test_acc {rows[-1].test_acc:.4f}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    from .engine import PdrModel, predict, write_predictions_csv

    manifest = _manifest(args)
    model = PdrModel.from_checkpoint(checkpoint_load(_existing(args.checkpoint, "checkpoint")))
    out = _out_dir(args)
    preds = predict(model, manifest, args.split)
    acc = sum(p == y for _, y, p in preds) / len(preds) if preds else 0.0
    write_predictions_csv(preds, out / "predictions.csv")
    _write_json(out / "eval.json", {"split": args.split, "samples": len(preds), "accuracy": acc})
    print(f"{args.split} accuracy {acc:.4f} ({len(preds)} samples)")
    return 0


def cmd_ablate(args, rc: RunConfig) -> int:
    from .engine import ablate, write_ablation_csv

    cfg = rc.train
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    manifest = _manifest(args)
    out = _out_dir(args)
    try:
        rows = ablate(cfg, args.preset, manifest)
    except ValueError as exc:
        if "unknown preset" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    write_ablation_csv(rows, out / "ablation.csv")
    for r in rows:
        print(f"{r.preset:10s} {r.kernel_mode:10s} {r.pyconv_placement:9s} test_acc {r.test_acc:.4f}")
    return 0


def cmd_benchmark(args, rc: RunConfig) -> int:
    import copy

    from .engine import benchmark, write_benchmark_csv

    if args.epochs < 1:
        raise UsageError("benchmark: --epochs must be at least 1")
    manifest = _manifest(args)
    out = _out_dir(args)
    configs = []
    for mode in BENCH_MODES:
        cfg = copy.deepcopy(rc.train)
        cfg.mode = mode
        configs.append((mode, cfg.validate()))
    rows = benchmark(configs, manifest, args.epochs, cache=ImageCache())
    write_benchmark_csv(rows, out / "benchmark.csv")
    for r in rows:
        print(f"{r.name:20s} {r.mean_seconds:.3f} s/epoch (std {r.std_seconds:.3f})")
    return 0


def cmd_gradcheck(args, rc: RunConfig) -> int:
    from .gradcheck import run_suite

    if args.seeds < 1:
        raise UsageError("gradcheck: --seeds must be at least 1")
    reports = run_suite(args.seeds)
    worst = 0.0
    for r in reports:
        status = "ok" if r.max_rel_err < GRADCHECK_TOL else "FAIL"
        print(f"{r.name:24s} max_rel_err {r.max_rel_err:.3e}  checked {r.checked:6d}  "
              f"kinks {r.skipped:3d}  {status}")
        worst = max(worst, r.max_rel_err)
    if args.out is not None:
        out = _out_dir(args)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["op", "max_rel_err", "checked", "skipped"])
            for r in reports:
                w.writerow([r.name, repr(r.max_rel_err), r.checked, r.skipped])
    if worst >= GRADCHECK_TOL:
        print(f"gradient check failed: worst error {worst:.3e} >= {GRADCHECK_TOL}", file=sys.stderr)
        return 2
    return 0


def cmd_cam(args, rc: RunConfig) -> int:
    from .engine import PdrModel, model_cam

    model = PdrModel.from_checkpoint(checkpoint_load(_existing(args.checkpoint, "checkpoint")))
    image = load_png(_existing(args.image, "image"))
    out = _out_dir(args)
    x = ((image - NORM_MEAN) / NORM_STD)[None].astype(np.float32)
    heat, cls = model_cam(model, x, args.class_index)
    save_cam_pngs(heat, image, out / "cam_heatmap.png", out / "cam_overlay.png")
    print(f"class {cls}: wrote {out / 'cam_heatmap.png'} and {out / 'cam_overlay.png'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "benchmark": cmd_benchmark,
    "gradcheck": cmd_gradcheck,
    "cam": cmd_cam,
}


def dispatch(argv=None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _thread_count()
        rc = _run_config(args)
        with _thread_limit(threads):
            return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"kiprn: config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"kiprn: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
