"""Supervised training, experiment orchestration, and run-directory output.

Training uses AdamW with a cosine-annealed learning rate evaluated explicitly
each epoch (so the schedule is a testable closed form), selects the best
checkpoint by validation DSC, and is fully reproducible from (config, seed).
Experiments evaluate a frozen checkpoint under several adaptation modes on
the identical test split and emit per-bin mean and delta tables.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import adapt, evalmetrics, objective, segnet
from .phantom import DatasetManifest, PhantomConfig, generate_dataset, load_manifest
from .volgrid import BinaryMask3D, RoiSample, build_pyramid

logger = logging.getLogger("sattca")


class NonFiniteLossError(RuntimeError):
    """Training diverged to a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0 < self.lr_min <= self.lr_max):
            raise ValueError("need 0 < lr_min <= lr_max")


def desk_train_config(epochs: int = 20, batch_size: int = 4, seed: int = 0) -> TrainConfig:
    """Small-machine profile; schedule endpoints stay at the full-scale values."""
    return TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 1e-3,
              lr_min: float = 1e-6) -> float:
    """lr at ``epoch``: lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * t))
    with t the completed fraction of training; t=0 at the first epoch and
    t=1 at the last."""
    if total_epochs <= 1:
        return lr_max
    t = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


def _batched(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _stack_pyramids(samples: Sequence[RoiSample], dtype):
    xs = [[], [], []]
    for s in samples:
        pyr = build_pyramid(s)
        for k, level in enumerate(pyr.levels):
            xs[k].append(torch.as_tensor(level.data, dtype=dtype))
    return tuple(torch.stack(x).unsqueeze(1) for x in xs)


def _val_dsc(model: segnet.SegModel, samples: Sequence[RoiSample],
             threshold: float = 0.5) -> float:
    scores = []
    for s in samples:
        probs = segnet.predict_probs(model, build_pyramid(s))
        pred = BinaryMask3D(probs.data > threshold, s.image.spacing)
        scores.append(evalmetrics.dsc(pred, s.gt))
    return float(np.mean(scores)) if scores else math.nan


def train(model: segnet.SegModel, manifest: DatasetManifest, cfg: TrainConfig,
          out_dir, val_every: int = 1) -> Path:
    """Train on the manifest's train split, select the checkpoint with the
    best validation DSC, and write it (plus the training log) to ``out_dir``.
    Returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries or not val_entries:
        raise ValueError("manifest must provide non-empty train and val splits")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_max,
                                  weight_decay=cfg.weight_decay)
    val_samples = [manifest.load_roi_sample(e) for e in val_entries]

    log: List[dict] = []
    best = {"dsc": -1.0, "epoch": -1}
    ckpt_path = out / "checkpoint"
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(train_entries))
        model.train()
        epoch_losses = []
        for batch_idx in _batched(order, cfg.batch_size):
            samples = [manifest.load_roi_sample(train_entries[i]) for i in batch_idx]
            x0, x1, x2 = _stack_pyramids(samples, dtype)
            target = torch.stack(
                [torch.as_tensor(s.gt.data, dtype=dtype) for s in samples]).unsqueeze(1)
            optimizer.zero_grad()
            probs = torch.sigmoid(model(x0, x1, x2))
            loss = objective.train_loss(probs, target)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        model.eval()
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(epoch_losses))}
        if epoch % val_every == 0 or epoch == cfg.epochs - 1:
            vdsc = _val_dsc(model, val_samples)
            entry["val_dsc"] = vdsc
            # ties go to the later epoch: with tiny val splits early epochs can
            # all score identically and the freshest weights are the better bet
            if vdsc >= best["dsc"]:
                best = {"dsc": vdsc, "epoch": epoch}
                segnet.save_checkpoint(model, ckpt_path, cfg.seed,
                                       extra={"val_dsc": vdsc, "epoch": epoch,
                                              "train_config": asdict(cfg)})
        log.append(entry)
        logger.info("epoch %d lr %.2e loss %.4f val_dsc %s", epoch, lr,
                    entry["train_loss"], entry.get("val_dsc"))
    (out / "training_log.json").write_text(json.dumps(
        {"config": asdict(cfg), "log": log, "best": best}, indent=2, sort_keys=True))
    return ckpt_path


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    dataset_root: str
    checkpoint: str
    modes: Tuple[str, ...] = ("none", "ttca", "sattca")
    tta_epochs: int = 10
    step_size: float = 1e-3
    threshold: float = 0.5
    tolerance_mm: float = 1.0
    sigma: float = 0.5
    gamma: float = 1.0
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if len(set(self.modes)) != len(self.modes) or not self.modes:
            raise ValueError("modes must be a non-empty set of distinct names")
        for m in self.modes:
            if m not in adapt.MODES:
                raise ValueError(f"unknown mode {m!r}")


def _adaptation_config(spec: ExperimentSpec, mode: str) -> adapt.AdaptationConfig:
    return adapt.AdaptationConfig(
        mode=mode, epochs=spec.tta_epochs, step_size=spec.step_size,
        weights=objective.LossWeights(sigma=spec.sigma, gamma=spec.gamma),
        threshold=spec.threshold)


def evaluate_mode(model: segnet.SegModel, samples: Sequence[RoiSample],
                  cfg: adapt.AdaptationConfig, tolerance_mm: float,
                  run_name: str, frozen_sha: str,
                  ) -> Tuple[evalmetrics.MetricReport, List[adapt.AdaptationTrace]]:
    results = adapt.batch_adapt(model, samples, cfg)
    pairs = []
    traces = []
    for sample, (mask, trace) in zip(samples, results):
        traces.append(trace)
        if mask is None:
            continue
        pairs.append((sample.sample_id, sample.lesion_diameter_mm, mask, sample.gt))
    report = evalmetrics.evaluate_run(pairs, tolerance_mm, run_name, frozen_sha)
    return report, traces


def run_experiment(spec: ExperimentSpec,
                   ) -> Dict[str, evalmetrics.MetricReport]:
    """Evaluate every mode in ``spec.modes`` on the test split with the same
    frozen checkpoint; write tables, records, traces and scatter data under
    ``spec.out_dir``. Returns reports keyed by mode, plus ``"delta:<mode>"``
    entries against mode "none" when it is present."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(
        json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")

    manifest = load_manifest(spec.dataset_root)
    model, _ = segnet.load_checkpoint(spec.checkpoint)
    frozen_sha = segnet.frozen_checksum(model)
    samples = [manifest.load_roi_sample(e) for e in manifest.split("test")]
    if not samples:
        raise ValueError("test split is empty")

    reports: Dict[str, evalmetrics.MetricReport] = {}
    all_traces: List[adapt.AdaptationTrace] = []
    for mode in spec.modes:
        t0 = time.perf_counter()
        report, traces = evaluate_mode(
            model, samples, _adaptation_config(spec, mode),
            spec.tolerance_mm, mode, frozen_sha)
        logger.info("mode %s evaluated in %.1fs", mode, time.perf_counter() - t0)
        reports[mode] = report
        all_traces.extend(traces)
        evalmetrics.write_records(report, out / f"metrics.records.{mode}")
        with open(out / f"scatter.records.{mode}", "w") as fh:
            for rec in report.scatter_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    table_parts = [evalmetrics.means_table([reports[m] for m in spec.modes])]
    if "none" in spec.modes:
        for mode in spec.modes:
            if mode == "none":
                continue
            delta = evalmetrics.stratified_delta(reports["none"], reports[mode])
            reports[f"delta:{mode}"] = delta
            table_parts.append(evalmetrics.delta_table(delta))
            evalmetrics.write_records(delta, out / f"metrics.records.delta_{mode}")
    (out / "metrics.table").write_text("\n".join(table_parts))
    adapt.write_traces(all_traces, out / "traces.log")
    return reports


# ---------------------------------------------------------------------------
# The scale-trend experiment (long-tail recall study)
# ---------------------------------------------------------------------------

@dataclass
class TrendResult:
    """Per-seed stratified recall deltas for both adaptation modes."""

    seed: int
    delta_recall: Dict[str, Dict[str, Optional[float]]]  # mode -> bin -> delta
    mean_adapt_ms: Dict[str, float]
    mean_infer_ms: float


def run_scale_trend(work_dir, seeds: Sequence[int], cases: int = 600,
                    train_cfg: Optional[TrainConfig] = None,
                    net_cfg: Optional[segnet.NetworkConfig] = None,
                    phantom_kwargs: Optional[dict] = None,
                    tta_epochs: int = 10) -> List[TrendResult]:
    """Full pipeline per seed: generate a long-tail dataset, train the
    multi-scale model, evaluate modes {none, ttca, sattca} on the test split,
    and collect per-bin recall deltas."""
    work = Path(work_dir)
    results: List[TrendResult] = []
    for seed in seeds:
        seed_dir = work / f"seed_{seed}"
        ds_dir = seed_dir / "data"
        pk = dict(phantom_kwargs or {})
        pcfg = PhantomConfig(count=cases, seed=seed, **pk)
        if (ds_dir / "manifest.json").exists():
            manifest = load_manifest(ds_dir)
        else:
            manifest = generate_dataset(pcfg, ds_dir)
        ncfg = net_cfg or segnet.NetworkConfig()
        tcfg = train_cfg or desk_train_config(seed=seed)
        ckpt = seed_dir / "train" / "checkpoint"
        if not ckpt.exists():
            model = segnet.build_model(ncfg, seed)
            ckpt = train(model, manifest, tcfg, seed_dir / "train")
        spec = ExperimentSpec(dataset_root=str(ds_dir), checkpoint=str(ckpt),
                              modes=("none", "ttca", "sattca"),
                              tta_epochs=tta_epochs,
                              out_dir=str(seed_dir / "experiment"))
        reports = run_experiment(spec)
        traces = adapt.read_traces(Path(spec.out_dir) / "traces.log")
        by_mode: Dict[str, List[float]] = {}
        for tr in traces:
            by_mode.setdefault(tr["mode"], []).append(tr["wall_ms"])
        delta_recall = {}
        for mode in ("ttca", "sattca"):
            delta = reports[f"delta:{mode}"]
            delta_recall[mode] = {name: row["recall"]
                                  for name, row in delta.deltas.items()}
        results.append(TrendResult(
            seed=seed,
            delta_recall=delta_recall,
            mean_adapt_ms={m: float(np.mean(v)) for m, v in by_mode.items()
                           if m != "none"},
            mean_infer_ms=float(np.mean(by_mode.get("none", [math.nan]))),
        ))
    return results


def trend_summary(results: Sequence[TrendResult]) -> Dict[str, Dict[str, float]]:
    """Mean per-bin recall delta across seeds, per mode; bins missing in any
    seed are averaged over the seeds that have them."""
    out: Dict[str, Dict[str, float]] = {}
    for mode in ("ttca", "sattca"):
        per_bin: Dict[str, List[float]] = {}
        for res in results:
            for name, value in res.delta_recall[mode].items():
                if value is not None:
                    per_bin.setdefault(name, []).append(value)
        out[mode] = {name: float(np.mean(vals)) for name, vals in per_bin.items()}
    return out
