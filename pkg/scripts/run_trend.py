#!/usr/bin/env python3
"""Run the scale-stratified recall trend experiment.

Per seed: generate a long-tail phantom dataset, train the multi-scale model
at desk scale, evaluate the test split under modes {none, ttca, sattca}, and
report per-bin recall deltas plus the adaptation overhead. Results land under
--work-dir and are reused on reruns (delete the directory to start fresh).
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sattca import harness, segnet  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", default="runs/trend")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--cases", type=int, default=600)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--batch-size", type=int, default=1)
    parser.add_argument("--lr", type=float, default=6e-3)
    parser.add_argument("--base-channels", type=int, default=4)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--tta-epochs", type=int, default=10)
    parser.add_argument("--quick", action="store_true",
                        help="tiny run for smoke-testing the pipeline")
    args = parser.parse_args()

    if args.quick:
        args.cases = 60
        args.epochs = 2
        args.seeds = args.seeds[:1]

    net_cfg = segnet.NetworkConfig(base_channels=args.base_channels,
                                   depth=args.depth, ms_enabled=True)
    train_cfg = harness.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                    lr_max=args.lr)
    results = harness.run_scale_trend(
        args.work_dir, seeds=args.seeds, cases=args.cases,
        train_cfg=train_cfg, net_cfg=net_cfg, tta_epochs=args.tta_epochs)

    summary = harness.trend_summary(results)
    print("\nmean per-bin recall delta vs. no adaptation (across seeds):")
    for mode in ("ttca", "sattca"):
        row = "  ".join(f"{name}={summary[mode].get(name, float('nan')):+.3f}"
                        for name in ("Micro", "Small", "Medium", "Mass")
                        if name in summary[mode])
        print(f"  {mode:>7}: {row}")
    infer_ms = sum(r.mean_infer_ms for r in results) / len(results)
    for mode in ("ttca", "sattca"):
        ms = [r.mean_adapt_ms[mode] for r in results if mode in r.mean_adapt_ms]
        if ms:
            mean_ms = sum(ms) / len(ms)
            print(f"  {mode} overhead: {mean_ms:.0f} ms/sample vs {infer_ms:.0f} ms "
                  f"plain inference ({mean_ms / max(infer_ms, 1e-9):.1f}x)")

    out = Path(args.work_dir) / "trend_summary.json"
    out.write_text(json.dumps({
        "seeds": args.seeds,
        "cases": args.cases,
        "summary": summary,
        "per_seed": [{"seed": r.seed, "delta_recall": r.delta_recall,
                      "mean_adapt_ms": r.mean_adapt_ms,
                      "mean_infer_ms": r.mean_infer_ms} for r in results],
    }, indent=2, sort_keys=True))
    print(f"\nsummary written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
