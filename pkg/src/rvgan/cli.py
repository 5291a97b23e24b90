"""Command-line entry point: ``rvgan {prepare,train,infer,evaluate,plot}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O or dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_override
from .container import ContainerError
from .data import (
    DatasetError,
    FovError,
    extract_dataset_patches,
    load_dataset,
    load_folds,
    load_patch_cache,
    make_folds,
    patches_per_axis,
    save_folds,
    save_patch_cache,
    split_train_test,
)
from .evaluation import EvalReport, EvaluationError, emit_roc_artifacts, evaluate_dataset, read_roc_csv
from .inference import predict_image
from .training import CheckpointError, NonFiniteLossError, checkpoint_load, latest_checkpoint, train

log = logging.getLogger("rvgan")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("-c", "--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set train.epochs=3 (repeatable)")
    p.add_argument("--dataset", choices=["DRIVE", "CHASE_DB1", "STARE"], help="dataset id")
    p.add_argument("--data-root", help="dataset root directory")
    p.add_argument("--work-dir", help="parent directory for run outputs")
    p.add_argument("--run-name", help="run directory name (default: dataset + config hash)")
    p.add_argument("--seed", type=int, help="training / fold seed")
    p.add_argument("--desk-scale", action="store_true", default=None,
                   help="16 base channels and a single epoch")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="loader threads (default: CPU count)")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rvgan", description="Multi-scale GAN retinal vessel segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="load a dataset, cache training patches, write CV folds")
    _common(p)

    p = sub.add_parser("train", help="train on one cross-validation fold")
    _common(p)
    p.add_argument("--fold", type=int, default=0, help="fold index (0-based)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint of this fold")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")

    p = sub.add_parser("infer", help="predict confidence maps for test images")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="training checkpoint (.rvgc)")
    p.add_argument("--stride", type=int, help="test-time patch stride (default from config: 3)")
    p.add_argument("--out", help="output directory (default: <run>/predictions)")
    p.add_argument("images", nargs="*", help="image files; default is the dataset's test split")

    p = sub.add_parser("evaluate", help="score predictions against the test split")
    _common(p)
    p.add_argument("--predictions", help="prediction directory (default: <run>/predictions)")
    p.add_argument("--out", help="report directory (default: <run>/eval)")

    p = sub.add_parser("plot", help="redraw ROC curve and overlays from an existing evaluation")
    _common(p)
    p.add_argument("--predictions", help="prediction directory (default: <run>/predictions)")
    p.add_argument("--out", help="report directory (default: <run>/eval)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = [parse_override(o) for o in args.overrides]
    flags: dict = {}
    if args.dataset:
        flags["dataset_id"] = args.dataset
    if args.run_name:
        flags["run_name"] = args.run_name
    if args.data_root:
        flags.setdefault("paths", {})["data_root"] = args.data_root
    if args.work_dir:
        flags.setdefault("paths", {})["work_dir"] = args.work_dir
    if args.seed is not None:
        flags.setdefault("train", {})["seed"] = args.seed
        flags.setdefault("data", {})["fold_seed"] = args.seed
    if args.desk_scale:
        flags.setdefault("train", {})["desk_scale"] = True
    if getattr(args, "max_steps", None) is not None:
        flags.setdefault("train", {})["max_steps"] = args.max_steps
    cfg = load_config(args.config, overrides + [flags]).resolved()
    if cfg.specs.g_fine.input_size != cfg.data.patch_size:
        raise ConfigError(f"specs.g_fine.input_size ({cfg.specs.g_fine.input_size}) "
                          f"must equal data.patch_size ({cfg.data.patch_size})")
    return cfg


def _cache_path(cfg: RunConfig) -> Path:
    return cfg.run_dir / "cache" / f"patches_{cfg.dataset_id.value}_p{cfg.data.patch_size}_s{cfg.data.train_stride}.rvgc"


def _load_records(cfg: RunConfig, workers: int):
    if not cfg.paths.data_root:
        raise UsageError("no dataset root given (use --data-root or paths.data_root)")
    return load_dataset(cfg.paths.data_root, cfg.dataset_id, workers=workers)


def cmd_prepare(cfg: RunConfig, args) -> int:
    records = _load_records(cfg, args.workers)
    train_recs, test_recs = split_train_test(records)
    if len(train_recs) < cfg.data.n_folds:
        raise DatasetError(f"{len(train_recs)} training images cannot form {cfg.data.n_folds} folds")
    patches = extract_dataset_patches(train_recs, cfg.data.patch_size, cfg.data.train_stride, args.workers)
    cache = save_patch_cache(_cache_path(cfg), patches, {
        "dataset_id": cfg.dataset_id.value, "patch_size": cfg.data.patch_size, "stride": cfg.data.train_stride})
    folds = make_folds(train_recs, cfg.data.n_folds, cfg.data.fold_seed)
    save_folds(cfg.run_dir / "folds.json", folds, cfg.data.fold_seed)
    (cfg.run_dir / "config.yaml").write_text(cfg.dump())
    print(f"{'image_id':<20} {'height':>6} {'width':>6} {'rows':>5} {'cols':>5} {'patches':>8}")
    for r in train_recs:
        h, w = r.shape
        nr = patches_per_axis(h, cfg.data.patch_size, cfg.data.train_stride)
        nc = patches_per_axis(w, cfg.data.patch_size, cfg.data.train_stride)
        print(f"{r.image_id:<20} {h:>6} {w:>6} {nr:>5} {nc:>5} {nr * nc:>8}")
    print(f"total: {len(patches)} patches from {len(train_recs)} training images "
          f"({len(test_recs)} test images held out)")
    print(f"cache: {cache}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    folds_path = cfg.run_dir / "folds.json"
    cache = _cache_path(cfg)
    if not folds_path.exists() or not cache.exists():
        raise UsageError(f"no prepared data under {cfg.run_dir}; run 'rvgan prepare' first")
    folds = load_folds(folds_path)
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"fold {args.fold} out of range 0..{len(folds) - 1}")
    patches, _ = load_patch_cache(cache)
    fold_dir = cfg.run_dir / f"fold{args.fold}"
    resume = None
    if args.resume:
        resume = latest_checkpoint(fold_dir / "checkpoints")
        if resume is None:
            raise UsageError(f"--resume given but no checkpoint found in {fold_dir / 'checkpoints'}")
        print(f"resuming from {resume}")
    t0 = time.perf_counter()
    result = train(cfg.train, cfg.specs, patches, folds[args.fold], fold_dir, resume_from=resume,
                   on_step=lambda s, bd: log.info("step %d total_g=%.4f total_d=%.4f", s, bd.total_g, bd.total_d))
    print(f"trained {result.state.step} steps in {time.perf_counter() - t0:.1f} s; "
          f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def _read_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return np.ascontiguousarray(arr)


def save_confidence_png(path: Path, conf: np.ndarray):
    q = np.clip(np.rint(np.asarray(conf) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_prediction(pred_dir: Path, image_id: str) -> np.ndarray | None:
    npy = pred_dir / f"{image_id}.npy"
    if npy.exists():
        return np.load(npy)
    png = pred_dir / f"{image_id}.png"
    if png.exists():
        return np.asarray(Image.open(png), dtype=np.float64) / 65535.0
    return None


def cmd_infer(cfg: RunConfig, args) -> int:
    state = checkpoint_load(args.checkpoint, specs=cfg.specs)
    stride = args.stride or cfg.eval.test_stride
    out = Path(args.out) if args.out else cfg.run_dir / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    if args.images:
        items = [(Path(p).stem, _read_rgb(Path(p))) for p in args.images]
    else:
        _, test_recs = split_train_test(_load_records(cfg, args.workers))
        items = [(r.image_id, r.fundus) for r in test_recs]
    timings = {}
    for image_id, fundus in items:
        t0 = time.perf_counter()
        stitched = predict_image(state.g_coarse, state.g_fine, fundus, stride=stride,
                                 patch_size=cfg.data.patch_size, batch_size=cfg.eval.infer_batch_size)
        timings[image_id] = time.perf_counter() - t0
        np.save(out / f"{image_id}.npy", stitched.confidence.astype(np.float32))
        save_confidence_png(out / f"{image_id}.png", stitched.confidence)
        print(f"{image_id}: {fundus.shape[1]}x{fundus.shape[0]} stride {stride} "
              f"in {timings[image_id]:.3f} s ({int((~stitched.covered).sum())} mirror-filled px)")
    (out / "timing.json").write_text(json.dumps({"stride": stride, "seconds": timings}, indent=2) + "\n")
    return EXIT_OK


def _collect_predictions(pred_dir: Path, records):
    confs, missing = {}, []
    for r in records:
        p = load_prediction(pred_dir, r.image_id)
        if p is None:
            missing.append(r.image_id)
        else:
            confs[r.image_id] = p.astype(np.float64)
    if missing:
        raise EvaluationError(f"missing predictions in {pred_dir} for image ids: {missing}")
    return confs


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pred_dir = Path(args.predictions) if args.predictions else cfg.run_dir / "predictions"
    out = Path(args.out) if args.out else cfg.run_dir / "eval"
    _, test_recs = split_train_test(_load_records(cfg, args.workers))
    confs = _collect_predictions(pred_dir, test_recs)
    report = evaluate_dataset(confs, test_recs, cfg.eval.threshold, cfg.eval.ssim_mode)
    report.write(out)
    emit_roc_artifacts(report, out, test_recs, confs, cfg.eval.threshold)
    mean = report.mean()
    print(" ".join(f"{k}={v:.4f}" for k, v in mean.items()))
    print(f"report: {out / 'report.csv'}")
    return EXIT_OK


def cmd_plot(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.run_dir / "eval"
    report_json, roc_csv = out / "report.json", out / "roc.csv"
    if not report_json.exists() or not roc_csv.exists():
        raise UsageError(f"no evaluation found in {out}; run 'rvgan evaluate' first")
    data = json.loads(report_json.read_text())
    report = EvalReport(data["images"], read_roc_csv(roc_csv), data["dataset_id"])
    pred_dir = Path(args.predictions) if args.predictions else cfg.run_dir / "predictions"
    records, confs = (), None
    if pred_dir.exists() and cfg.paths.data_root:
        _, records = split_train_test(_load_records(cfg, args.workers))
        confs = _collect_predictions(pred_dir, records)
    for p in emit_roc_artifacts(report, out, records, confs, cfg.eval.threshold):
        print(p)
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "infer": cmd_infer,
            "evaluate": cmd_evaluate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.dump(), end="")
            return EXIT_OK
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"rvgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"rvgan: numerical failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(f"rvgan: diagnostic snapshot written to {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, EvaluationError) as exc:
        print(f"rvgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FovError, ContainerError, OSError) as exc:
        print(f"rvgan: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
