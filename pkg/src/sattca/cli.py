"""Command-line interface: synth, train, predict, adapt, eval, report.

Every run writes a resolved-config JSON next to its outputs. Exit codes:
0 success; 2 configuration/usage error; 3 data-format error; 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def _write_resolved(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out_dir / "config.resolved").write_text(
        json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def cmd_synth(args) -> int:
    from .phantom import PhantomConfig, generate_dataset

    cfg = PhantomConfig(count=args.cases, seed=args.seed,
                        tail_mass=args.tail_mass,
                        noise_sigma_hu=args.noise_sigma,
                        rim_softness=args.rim_softness,
                        irregularity=args.irregularity)
    out = Path(args.out)
    _write_resolved(out, args)
    manifest = generate_dataset(cfg, out)
    counts = {name: len(manifest.split(name)) for name in ("train", "val", "test")}
    print(f"wrote {len(manifest.cases)} cases to {out} (splits {counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import harness, segnet
    from .phantom import load_manifest

    out = Path(args.out)
    _write_resolved(out, args)
    manifest = load_manifest(args.data)
    net_cfg = segnet.NetworkConfig(base_channels=args.base_channels,
                                   depth=args.depth,
                                   ms_enabled=not args.no_multiscale)
    if args.profile == "desk":
        cfg = harness.desk_train_config(epochs=args.epochs or 20,
                                        batch_size=args.batch_size or 4,
                                        seed=args.seed)
    else:
        cfg = harness.TrainConfig(epochs=args.epochs or 200,
                                  batch_size=args.batch_size or 32,
                                  seed=args.seed)
    model = segnet.build_model(net_cfg, args.seed)
    ckpt = harness.train(model, manifest, cfg, out)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _predict_like(args, mode: str) -> int:
    from . import adapt, segnet
    from .phantom import load_manifest, write_mask
    from .objective import LossWeights

    out = Path(args.out)
    _write_resolved(out, args)
    manifest = load_manifest(args.data)
    model, _ = segnet.load_checkpoint(args.checkpoint)
    cfg = adapt.AdaptationConfig(
        mode=mode, epochs=args.epochs if mode != "none" else 0,
        step_size=args.step_size, threshold=args.threshold,
        weights=LossWeights(sigma=args.sigma, gamma=args.gamma))
    entries = manifest.split(args.split)
    samples = [manifest.load_roi_sample(e) for e in entries]
    results = adapt.batch_adapt(model, samples, cfg)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    traces = []
    n_ok = 0
    for entry, (mask, trace) in zip(entries, results):
        traces.append(trace)
        if mask is not None:
            write_mask(mask, out / "predictions" / f"{entry.case_id}.smsk")
            n_ok += 1
    adapt.write_traces(traces, out / "traces.log")
    print(f"predicted {n_ok}/{len(entries)} cases (mode={mode}) into {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    return _predict_like(args, "none")


def cmd_adapt(args) -> int:
    return _predict_like(args, args.mode)


def cmd_eval(args) -> int:
    from . import evalmetrics
    from .phantom import load_manifest, read_mask

    out = Path(args.out)
    _write_resolved(out, args)
    manifest = load_manifest(args.data)
    pred_dir = Path(args.pred) / "predictions"
    pairs = []
    for entry in manifest.split(args.split):
        pred_path = pred_dir / f"{entry.case_id}.smsk"
        if not pred_path.exists():
            continue
        pred = read_mask(pred_path)
        _, gt = manifest.load_case(entry)
        pairs.append((entry.case_id, entry.diameter_mm, pred, gt))
    report = evalmetrics.evaluate_run(pairs, tolerance_mm=args.tolerance,
                                      run_name=args.name)
    evalmetrics.write_records(report, out / "metrics.records")
    table = evalmetrics.means_table([report])
    (out / "metrics.table").write_text(table)
    with open(out / "scatter.records", "w") as fh:
        for rec in report.scatter_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import evalmetrics

    reports = {}
    for name, path in zip(args.compare, args.records):
        reports[name] = evalmetrics.read_records(path)
    base_name = args.compare[0]
    parts = [evalmetrics.means_table([reports[n] for n in args.compare])]
    for name in args.compare[1:]:
        delta = evalmetrics.stratified_delta(reports[base_name], reports[name])
        delta.run_name = name
        delta.baseline_name = base_name
        parts.append(evalmetrics.delta_table(delta))
    table = "\n".join(parts)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(out, args)
        (out / "metrics.table").write_text(table)
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sattca",
        description="Scale-aware test-time click adaptation on a synthetic "
                    "long-tail lesion phantom benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tail-mass", type=float, default=0.08, dest="tail_mass")
    p.add_argument("--noise-sigma", type=float, default=80.0, dest="noise_sigma")
    p.add_argument("--rim-softness", type=float, default=0.35, dest="rim_softness")
    p.add_argument("--irregularity", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("paper", "desk"), default="desk")
    p.add_argument("--epochs", type=int, default=0, help="0 = profile default")
    p.add_argument("--batch-size", type=int, default=0, dest="batch_size",
                   help="0 = profile default")
    p.add_argument("--base-channels", type=int, default=8, dest="base_channels")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--no-multiscale", action="store_true", dest="no_multiscale")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    def add_predict_args(p, with_mode: bool):
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--threshold", type=float, default=0.5)
        if with_mode:
            p.add_argument("--mode", choices=("ttca", "sattca"), default="sattca")
            p.add_argument("--epochs", type=int, default=10)
            p.add_argument("--step-size", type=float, default=1e-3, dest="step_size")
            p.add_argument("--sigma", type=float, default=0.5)
            p.add_argument("--gamma", type=float, default=1.0)
        else:
            p.set_defaults(epochs=0, step_size=1e-3, sigma=0.5, gamma=1.0)

    p = sub.add_parser("predict", help="plain inference on a split")
    add_predict_args(p, with_mode=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("adapt", help="test-time click adaptation on a split")
    add_predict_args(p, with_mode=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score saved predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="prediction run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tolerance", type=float, default=1.0)
    p.add_argument("--name", default="run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="stratified delta table between runs")
    p.add_argument("--compare", nargs="+", required=True,
                   help="run names; first is the baseline")
    p.add_argument("--records", nargs="+", required=True,
                   help="metrics.records paths, one per compared run")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (FileNotFoundError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        from .phantom import VolumeFormatError

        if isinstance(exc, VolumeFormatError):
            print(f"format error: {exc}", file=sys.stderr)
            return EXIT_FORMAT
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
