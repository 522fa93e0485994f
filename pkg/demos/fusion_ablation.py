"""Does learned temporal fusion beat the single-frame detector, and by how much?

Trains one single-frame model per seed on the occlusion-heavy benchmark,
then fine-tunes every fusion strategy on top of it with the backbone
frozen.  Prints per-seed test mAP and the mean/spread table.

    python demos/fusion_ablation.py --seeds 5 --out /tmp/ablation.csv
"""
import argparse
import logging
import time
from pathlib import Path

from ffavod.experiments import ExperimentConfig, rows_csv, run_ablation, summarize_ablation
from ffavod.synth_video import benchmark_suite


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--channels", type=int, default=ExperimentConfig.channels)
    ap.add_argument("--stage1-epochs", type=int, default=ExperimentConfig.stage1_epochs)
    ap.add_argument("--stage2-epochs", type=int, default=ExperimentConfig.stage2_epochs)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = benchmark_suite("occlusion_heavy", 0)
    exp = ExperimentConfig(channels=args.channels, stage1_epochs=args.stage1_epochs,
                           stage2_epochs=args.stage2_epochs)
    t0 = time.perf_counter()
    rows = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        rows += run_ablation(ds, [seed], exp)
        if args.out:
            args.out.write_text(rows_csv(rows, ("strategy", "n", "seed", "map", "best_epoch")))
    print(f"finished in {time.perf_counter() - t0:.0f}s")

    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[(r["strategy"], r["n"])] = r["map"]
    for seed, cells in by_seed.items():
        print(seed, " ".join(f"{s}/{n}={m:.3f}" for (s, n), m in cells.items()))
    for r in summarize_ablation(rows):
        print(f"{r['strategy']:>18} n={r['n']}  {r['map_mean']:.4f} +- {r['map_spread']:.4f}")
    learned = [c[("learned", 2)] for c in by_seed.values()]
    base = [c[("none", 0)] for c in by_seed.values()]
    past = [c[("learned_past_only", 2)] for c in by_seed.values()]
    print("learned >= baseline:", sum(a >= b for a, b in zip(learned, base)), "of", len(base))
    print("past-only <= learned:", sum(p <= a for p, a in zip(past, learned)), "of", len(base))


if __name__ == "__main__":
    main()
