"""Why does max fusion trail the single-frame detector, and does longer or gentler stage-2 training close the gap?

Stage-1 models are trained once per seed and cached as checkpoints, then
each stage-2 setting is tried on top of them.  Gaps are reported at IoU
0.5 and 0.7: max fusion keeps up at the loose threshold and falls behind
at the strict one, i.e. it loses localization, not recall.

    python demos/max_fusion_gap.py --seeds 5 --cache /tmp/stage1_cache
"""
import argparse
import dataclasses
import logging
from pathlib import Path

import numpy as np

from ffavod.detector import Detector, load_checkpoint, save_checkpoint
from ffavod.experiments import ExperimentConfig, evaluate_detector, frame_size
from ffavod.synth_video import benchmark_suite
from ffavod.trainer import TrainConfig, train_stage1, train_stage2


def stage1_model(ds, seed, exp, cache: Path):
    path = cache / f"seed{seed}"
    if (path / "manifest.txt").exists():
        return load_checkpoint(path)
    det = Detector(exp.detector_config(**frame_size(ds)), seed=seed)
    train_stage1(det, ds, TrainConfig(epochs=exp.stage1_epochs, batch_size=exp.batch_size, lr=exp.lr, seed=seed))
    save_checkpoint(det, path)
    return det


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--cache", type=Path, default=Path("/tmp/stage1_cache"))
    ap.add_argument("--strategies", default="max,learned,past", help="fusion tags; 'past' is past-only learned")
    ap.add_argument("--settings", default="10:1e-3,20:1e-3,10:3e-4", help="comma list of epochs:lr")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    ds = benchmark_suite("occlusion_heavy", 0)
    test = ds.sequences("test")
    exp = ExperimentConfig()
    settings = [(int(e), float(lr)) for e, lr in (s.split(":") for s in args.settings.split(","))]
    gaps = {}
    for seed in range(args.seeds):
        base = stage1_model(ds, seed, exp, args.cache)
        base_map = {thr: evaluate_detector(base, test, thr).map for thr in (0.5, 0.7)}
        line = [f"seed {seed} base {base_map[0.7]:.4f}"]
        for tag in args.strategies.split(","):
            for epochs, lr in settings:
                fusion, past = ("learned", True) if tag == "past" else (tag, False)
                det = Detector(dataclasses.replace(base.cfg, fusion=fusion, n=2, past_only=past), seed=seed)
                res = train_stage2(det, ds, TrainConfig(stage="fusion", epochs=epochs, lr=lr, seed=seed), base.state())
                m = {thr: evaluate_detector(det, test, thr).map for thr in (0.5, 0.7)}
                gaps.setdefault((tag, epochs, lr), []).append([100 * (m[t] - base_map[t]) for t in (0.5, 0.7)])
                line.append(f"{tag}/{epochs}/{lr:g} {m[0.7]:.4f} (best ep {res.best_epoch})")
        print(" | ".join(line), flush=True)
    for (tag, epochs, lr), g in gaps.items():
        g = np.array(g)
        print(f"{tag:>8} epochs {epochs:>2} lr {lr:g}: mean gap @0.5 {g[:, 0].mean():+.2f} pts, "
              f"@0.7 {g[:, 1].mean():+.2f} pts; per seed @0.7 " + " ".join(f"{x:+.1f}" for x in g[:, 1]))


if __name__ == "__main__":
    main()
