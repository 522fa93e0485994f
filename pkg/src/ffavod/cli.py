"""Command-line entry point: ``ffavod <command> ...`` (or ``python -m ffavod``).

Commands: generate, train, detect, eval, ablate-fusion, sweep-n.  Every
command writes its outputs plus one ``run_manifest.json`` into ``--out``.
When ``--out`` is omitted it defaults to ``$FFAVOD_OUT/<command>``.

Exit codes: 0 success, 2 usage error, 3 bad input or incompatible
configuration, 4 runtime failure (for example divergence), 5 output
directory exists and ``--force`` was not given.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence


from . import __version__
from .detector import ConfigError, Detector, DetectorConfig, load_checkpoint, load_state, save_checkpoint
from .evaluation import DEFAULT_IOU, detections_csv, evaluate, metrics_csv, metrics_metadata, pr_curve_csv, \
    read_detections_csv
from .experiments import ExperimentConfig, rows_csv, run_ablation, run_sweep, \
    frame_size, sequence_detections, summarize_ablation
from .frame_window import stats_csv
from .fusion import TAGS
from .synth_video import PROFILES, Dataset, PlacementError, benchmark_suite, load_dataset, read_gt_csv, save_dataset
from .trainer import DivergenceError, TrainConfig, train_stage1, train_stage2

log = logging.getLogger("ffavod")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME, EXIT_EXISTS = 0, 2, 3, 4, 5
MANIFEST = "run_manifest.json"
OUT_ENV = "FFAVOD_OUT"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------
# output directories and manifests

def _resolve_out(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if not root:
        raise CliError(f"--out is required (or set {OUT_ENV})", EXIT_USAGE)
    return Path(root) / args.command


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory", EXIT_EXISTS)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(f"{out} is not empty; pass --force to overwrite", EXIT_EXISTS)
        if not (out / MANIFEST).exists():
            raise CliError(f"{out} was not written by ffavod (no {MANIFEST}); refusing to clear it", EXIT_EXISTS)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args, started: float, dataset_hash: Optional[str] = None,
                    checkpoints: Sequence[str] = ()) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    outputs = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
               if p.is_file() and p.name != MANIFEST}
    manifest = {
        "command": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "dataset_hash": dataset_hash,
        "checkpoints": list(checkpoints),
        "outputs": outputs,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _load_data(path: str) -> tuple[Dataset, str]:
    root = Path(path)
    if not (root / "dataset.txt").exists():
        raise CliError(f"{root} is not a generated dataset (missing dataset.txt)", EXIT_INPUT)
    ds = load_dataset(root)
    meta = dict(item.split("=", 1) for item in (root / "dataset.txt").read_text().split())
    return ds, meta.get("hash", "")


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig(channels=args.channels, attention=args.attention, stage1_epochs=args.stage1_epochs,
                            stage2_epochs=args.stage2_epochs, batch_size=args.batch_size, lr=args.lr,
                            iou_threshold=args.iou_thresh)


# ----------------------------------------------------------------------------
# commands

def cmd_generate(args) -> None:
    out = _resolve_out(args)
    _prepare_out(out, args.force)
    started = time.perf_counter()
    try:
        ds = benchmark_suite(args.profile, args.seed, args.train, args.val, args.test, args.length, args.size)
    except PlacementError as exc:
        raise CliError(f"{exc}; use a larger --size", EXIT_INPUT) from exc
    digest = save_dataset(ds, out, args.frames)
    log.info("dataset %s written to %s", digest, out)
    _write_manifest(out, args, started, digest)


def cmd_train(args) -> None:
    if args.stage == 2 and not args.init_from:
        raise CliError("stage 2 requires --init-from <stage-1 checkpoint>", EXIT_USAGE)
    fusion = args.fusion or ("learned" if args.stage == 2 else "none")
    n = args.n if args.n is not None else (2 if args.stage == 2 else 0)
    if args.stage == 1 and (fusion != "none" or n != 0):
        raise CliError("stage 1 trains the single-frame baseline: use --fusion none --n 0", EXIT_USAGE)
    if args.stage == 2 and (fusion == "none" or n < 1):
        raise CliError("stage 2 needs a fusion strategy and --n >= 1", EXIT_USAGE)
    out = _resolve_out(args)
    ds, digest = _load_data(args.data)
    started = time.perf_counter()
    tcfg = TrainConfig(stage="single_frame" if args.stage == 1 else "fusion", epochs=args.epochs,
                       batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer, seed=args.seed,
                       unfreeze=args.unfreeze, halve_on_plateau=args.halve_on_plateau)
    hw = frame_size(ds)
    try:
        if args.stage == 1:
            cfg = DetectorConfig(**hw, channels=args.channels,
                                 attention=args.attention).validate()
            det = Detector(cfg, seed=args.seed)
            _prepare_out(out, args.force)
            res = train_stage1(det, ds, tcfg)
        else:
            base = load_checkpoint(args.init_from)
            cfg = replace(base.cfg, fusion=fusion, n=n, past_only=args.past_only, fusion_mode=args.fusion_mode,
                          fusion_bias=args.fusion_bias).validate()
            det = Detector(cfg, seed=args.seed)
            _prepare_out(out, args.force)
            res = train_stage2(det, ds, tcfg, base.state())
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_RUNTIME) from exc
    save_checkpoint(det, out, {"stage": args.stage, "best_epoch": res.best_epoch, "best_val": repr(res.best_val),
                               "dataset_hash": digest})
    (out / "curve.csv").write_text(res.curve_csv())
    _write_manifest(out, args, started, digest, [args.init_from] if args.init_from else [])


def cmd_detect(args) -> None:
    out = _resolve_out(args)
    try:
        det = load_checkpoint(args.ckpt)
    except (ConfigError, FileNotFoundError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_INPUT) from exc
    ds, digest = _load_data(args.data)
    seqs = ds.sequences(None if args.split == "all" else args.split)
    for seq in seqs:
        if seq.length and seq.frames.shape[2:] != (det.cfg.height, det.cfg.width):
            raise CliError(f"{seq.sequence_id}: frames {seq.frames.shape[2:]} do not match checkpoint input "
                           f"{det.cfg.height}x{det.cfg.width}", EXIT_INPUT)
    _prepare_out(out, args.force)
    started = time.perf_counter()
    dets, stats = sequence_detections(det, seqs, cache=args.cache == "on")
    rows = [(seq_id, frame, c, score, *box) for (seq_id, frame), items in dets.items() for c, score, box in items]
    (out / "detections.csv").write_text(detections_csv(rows))
    (out / "cache_stats.csv").write_text(stats_csv(stats))
    _write_manifest(out, args, started, digest, [args.ckpt])


def cmd_eval(args) -> None:
    gt_path, det_path = Path(args.gt), Path(args.dets)
    if gt_path.is_dir():
        gt_path = gt_path / "gt.csv"
    for p in (gt_path, det_path):
        if not p.is_file():
            raise CliError(f"missing input file {p}", EXIT_INPUT)
    if not 0 < args.iou_thresh < 1:
        raise CliError("--iou-thresh must be in (0, 1)", EXIT_USAGE)
    out = _resolve_out(args)
    _prepare_out(out, args.force)
    started = time.perf_counter()
    gt_all = read_gt_csv(gt_path)
    keep = _split_members(gt_path.parent, args.split)
    ground_truth = {}
    for seq_id, frames in gt_all.items():
        if keep is None or seq_id in keep:
            for t, boxes in frames.items():
                ground_truth[(seq_id, t)] = [(b.cls, b.box) for b in boxes]
    detections = read_detections_csv(det_path)
    if keep is not None:
        detections = {k: v for k, v in detections.items() if k[0] in keep}
    classes = sorted({c for v in ground_truth.values() for c, _ in v} | {d[0] for v in detections.values() for d in v})
    try:
        report = evaluate(detections, ground_truth, args.iou_thresh, classes=classes)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    (out / "metrics.csv").write_text(metrics_csv(report))
    (out / "metrics_meta.txt").write_text(metrics_metadata(report))
    (out / "pr_curve.csv").write_text(pr_curve_csv(report))
    print(f"mAP {report.map:.6f}")
    _write_manifest(out, args, started)


def _split_members(root: Path, split: str) -> Optional[set[str]]:
    """Sequence ids of ``split`` from a splits.csv next to the ground truth; None means all sequences."""
    path = root / "splits.csv"
    if split == "all" or not path.exists():
        return None
    lines = path.read_text().splitlines()[1:]
    return {seq for seq, s in (line.split(",") for line in lines) if s == split}


def _ablation_cell(payload):
    data, seed, exp, init = payload
    ds = load_dataset(data)
    return run_ablation(ds, [seed], exp, stage1_state=init)


def cmd_ablate_fusion(args) -> None:
    out = _resolve_out(args)
    ds, digest = _load_data(args.data)
    init = load_state(args.init_from) if args.init_from else None
    _prepare_out(out, args.force)
    started = time.perf_counter()
    exp = _experiment(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            parts = list(pool.map(_ablation_cell, [(args.data, s, exp, init) for s in seeds]))
        rows = [r for part in parts for r in part]
    else:
        rows = run_ablation(ds, seeds, exp, stage1_state=init)
    (out / "ablation_runs.csv").write_text(rows_csv(rows, ("strategy", "n", "seed", "map", "best_epoch")))
    (out / "ablation.csv").write_text(rows_csv(summarize_ablation(rows),
                                               ("strategy", "n", "map_mean", "map_spread", "seeds")))
    _write_manifest(out, args, started, digest, [args.init_from] if args.init_from else [])


def cmd_sweep_n(args) -> None:
    out = _resolve_out(args)
    ds, digest = _load_data(args.data)
    init = load_state(args.init_from) if args.init_from else None
    _prepare_out(out, args.force)
    started = time.perf_counter()
    rows = run_sweep(ds, args.max_n, args.seed, _experiment(args), init)
    (out / "sweep.csv").write_text(rows_csv(rows, ("n", "map")))
    _write_manifest(out, args, started, digest, [args.init_from] if args.init_from else [])


# ----------------------------------------------------------------------------
# parser

def _add_out(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
    p.add_argument("--force", action="store_true", help="replace an existing output directory written by ffavod")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int, default=32, help="backbone width (default 32)")
    p.add_argument("--attention", choices=("none", "three_conv", "unet"), default="none")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)


def _add_experiment(p: argparse.ArgumentParser) -> None:
    _add_model(p)
    p.add_argument("--data", required=True, help="dataset directory written by 'generate'")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--stage1-epochs", type=int, default=ExperimentConfig.stage1_epochs)
    p.add_argument("--stage2-epochs", type=int, default=ExperimentConfig.stage2_epochs)
    p.add_argument("--iou-thresh", type=float, default=DEFAULT_IOU)
    p.add_argument("--init-from", help="stage-1 checkpoint to share across runs instead of training one per seed")
    _add_out(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffavod", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"ffavod {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic video benchmark")
    p.add_argument("--profile", choices=PROFILES, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", choices=("fftn", "ppm"), default="fftn", help="frame storage format")
    p.add_argument("--train", type=int, default=20, help="training sequences")
    p.add_argument("--val", type=int, default=4, help="validation sequences")
    p.add_argument("--test", type=int, default=6, help="test sequences")
    p.add_argument("--length", type=int, default=40, help="frames per sequence")
    p.add_argument("--size", type=int, default=64, help="frame height and width")
    _add_out(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="stage 1 (single frame) or stage 2 (fusion) training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, help="half-window; window is 2n+1 frames (default 0 / 2 by stage)")
    p.add_argument("--fusion", choices=TAGS, help="fusion strategy (default none / learned by stage)")
    p.add_argument("--fusion-mode", choices=("shared", "per_channel"), default="shared")
    p.add_argument("--fusion-bias", action="store_true")
    p.add_argument("--past-only", action="store_true", help="window t-2n..t instead of t-n..t+n")
    p.add_argument("--init-from", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--unfreeze", action="store_true", help="train the backbone in stage 2 as well")
    p.add_argument("--halve-on-plateau", type=int, default=0, metavar="EPOCHS",
                   help="halve the learning rate after this many epochs without improvement (0: off)")
    _add_model(p)
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--cache", choices=("on", "off"), default="on")
    _add_out(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="per-class AP and mAP of a detection CSV")
    p.add_argument("--dets", required=True, help="detections.csv from 'detect'")
    p.add_argument("--gt", required=True, help="gt.csv or a dataset directory")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="restrict to this split when splits.csv sits next to the ground truth")
    p.add_argument("--iou-thresh", type=float, default=DEFAULT_IOU)
    _add_out(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-fusion", help="test mAP of every fusion strategy over several seeds")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (one seed each)")
    _add_experiment(p)
    p.set_defaults(func=cmd_ablate_fusion)

    p = sub.add_parser("sweep-n", help="test mAP of learned fusion for n = 0..max-n")
    p.add_argument("--max-n", type=int, required=True)
    _add_experiment(p)
    p.set_defaults(func=cmd_sweep_n)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except CliError as exc:
        print(f"ffavod {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"ffavod {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, FloatingPointError) as exc:
        print(f"ffavod {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
