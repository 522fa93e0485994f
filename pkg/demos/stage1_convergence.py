"""How long does the single-frame detector need to converge on the occlusion-heavy benchmark?

Trains stage 1 for a given width and epoch count, prints the validation
curve, and reports test mAP of the best-validation weights.

    python demos/stage1_convergence.py --channels 32 --epochs 30
"""
import argparse
import logging
import time

from ffavod.detector import Detector, DetectorConfig
from ffavod.experiments import evaluate_detector
from ffavod.synth_video import benchmark_suite
from ffavod.trainer import TrainConfig, train_stage1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--halve-on-plateau", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = benchmark_suite("occlusion_heavy", 0)
    det = Detector(DetectorConfig(channels=args.channels), seed=args.seed)
    t0 = time.perf_counter()
    res = train_stage1(det, ds, TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed,
                                            halve_on_plateau=args.halve_on_plateau))
    print(f"trained in {time.perf_counter() - t0:.0f}s; best epoch {res.best_epoch}, val loss {res.best_val:.4f}")
    print(f"test mAP {evaluate_detector(det, ds.sequences('test')).map:.4f}")


if __name__ == "__main__":
    main()
