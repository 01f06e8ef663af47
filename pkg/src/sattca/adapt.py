"""Instance-level test-time adaptation.

One adaptation episode: pre-segment the sample, build the click mask once
(scale-aware ellipsoid, or the bare click voxel in the ablation mode), run a
fixed number of gradient steps on the normalization affine parameters against
the test-time loss, threshold the adapted prediction, and restore the
pre-adaptation parameters so samples stay independent.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import clickgeom, objective, segnet
from .volgrid import BinaryMask3D, RoiSample, build_pyramid, roi_center

MODES = ("none", "ttca", "sattca")


@dataclass(frozen=True)
class AdaptationConfig:
    mode: str = "sattca"
    epochs: int = 10
    step_size: float = 1e-3
    optimizer: str = "adamw"
    weights: objective.LossWeights = field(default_factory=objective.LossWeights)
    threshold: float = 0.5
    episodic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer: {self.optimizer!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass
class AdaptationTrace:
    """Per-sample record of one adaptation episode."""

    sample_id: str = ""
    mode: str = "none"
    epochs: List[dict] = field(default_factory=list)
    mask_voxels: int = 0
    bbox_extents_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    degenerate: bool = False
    wall_ms: float = 0.0
    aborted: bool = False
    error: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "mode": self.mode,
            "epochs": self.epochs,
            "mask_voxels": self.mask_voxels,
            "bbox_extents_mm": list(self.bbox_extents_mm),
            "degenerate": self.degenerate,
            "wall_ms": self.wall_ms,
            "aborted": self.aborted,
            "error": self.error,
        }


def _threshold_mask(probs: torch.Tensor, threshold: float,
                    spacing: Tuple[float, float, float]) -> BinaryMask3D:
    return BinaryMask3D(probs.detach().cpu().numpy() > threshold, spacing)


def build_supervision_mask(
    probs_np: np.ndarray, sample: RoiSample, cfg: AdaptationConfig,
) -> Tuple[BinaryMask3D, clickgeom.ClickMaskSpec, clickgeom.BBoxExtents]:
    """The frozen pseudo-target M for one episode, plus the pre-segmentation
    bounding-box extents recorded in the trace."""
    spacing = sample.image.spacing
    binary = BinaryMask3D(probs_np > cfg.threshold, spacing)
    extents = clickgeom.bbox_extents(clickgeom.largest_component(binary), spacing)
    if cfg.mode == "ttca":
        spec = clickgeom.ClickMaskSpec(
            semi_axes_mm=(0.0, 0.0, 0.0), degenerate=True, center=sample.click)
    else:
        spec = clickgeom.make_click_spec(extents, sample.click)
    mask = clickgeom.rasterize_ellipsoid(spec, sample.image.dims, spacing)
    return mask, spec, extents


def adapt_and_predict(model: segnet.SegModel, sample: RoiSample,
                      cfg: AdaptationConfig) -> Tuple[BinaryMask3D, AdaptationTrace]:
    """Run one adaptation episode and return the thresholded prediction.

    mode="none" or epochs=0 reproduce plain inference exactly. The supervision
    mask is computed once from the pre-segmentation and stays fixed across
    epochs. On a non-finite loss the episode aborts, parameters are restored,
    and the baseline prediction is returned with a flagged trace.
    """
    t_start = time.perf_counter()
    spacing = sample.image.spacing
    trace = AdaptationTrace(sample_id=sample.sample_id, mode=cfg.mode)
    pyramid = build_pyramid(sample)
    x0, x1, x2 = segnet.pyramid_tensors(pyramid, dtype=next(model.parameters()).dtype)

    model.eval()
    with torch.no_grad():
        pre_probs = torch.sigmoid(model(x0, x1, x2))[0, 0]

    if cfg.mode == "none" or cfg.epochs == 0:
        out = _threshold_mask(pre_probs, cfg.threshold, spacing)
        trace.wall_ms = (time.perf_counter() - t_start) * 1e3
        return out, trace

    mask, spec, extents = build_supervision_mask(pre_probs.cpu().numpy(), sample, cfg)
    trace.mask_voxels = mask.count()
    trace.bbox_extents_mm = extents.as_tuple()
    trace.degenerate = spec.degenerate

    snap = segnet.snapshot_norm(model)
    registry = segnet.param_registry(model)
    mask_t = torch.as_tensor(mask.data, dtype=x0.dtype)
    optimizer = torch.optim.AdamW(registry.norm_parameters(), lr=cfg.step_size,
                                  weight_decay=0.0)
    aborted = False
    frozen = registry.frozen_parameters()
    frozen_grad_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)  # only norm affine params are optimized
    try:
        for _ in range(cfg.epochs):
            optimizer.zero_grad()
            probs = torch.sigmoid(model(x0, x1, x2))[0, 0]
            parts = objective.tt_loss_components(probs, mask_t, cfg.weights)
            total = parts["total"]
            if not torch.isfinite(total):
                aborted = True
                break
            total.backward()
            optimizer.step()
            entry = {k: float(v.detach()) for k, v in parts.items()}
            with torch.no_grad():
                entry["fg_in_mask"] = int(((probs > cfg.threshold) & (mask_t > 0)).sum())
            trace.epochs.append(entry)
    finally:
        for p, flag in zip(frozen, frozen_grad_flags):
            p.requires_grad_(flag)

    if aborted:
        segnet.restore_norm(model, snap)
        trace.aborted = True
        out = _threshold_mask(pre_probs, cfg.threshold, spacing)
        trace.wall_ms = (time.perf_counter() - t_start) * 1e3
        return out, trace

    with torch.no_grad():
        post_probs = torch.sigmoid(model(x0, x1, x2))[0, 0]
    out = _threshold_mask(post_probs, cfg.threshold, spacing)
    if cfg.episodic:
        segnet.restore_norm(model, snap)
    trace.wall_ms = (time.perf_counter() - t_start) * 1e3
    return out, trace


def batch_adapt(model: segnet.SegModel, samples: Sequence[RoiSample],
                cfg: AdaptationConfig | Sequence[AdaptationConfig],
                ) -> List[Tuple[Optional[BinaryMask3D], AdaptationTrace]]:
    """Adapt each sample independently on the shared model instance.

    Requires episodic configs (otherwise results would depend on sample
    order). A per-sample failure is recorded in its trace and does not abort
    the batch.
    """
    if isinstance(cfg, AdaptationConfig):
        cfgs = [cfg] * len(samples)
    else:
        cfgs = list(cfg)
        if len(cfgs) != len(samples):
            raise ValueError("one config per sample required")
        if len({c.mode for c in cfgs}) > 1:
            raise ValueError("mixed adaptation modes in one batch are unsupported")
    if any(not c.episodic for c in cfgs):
        raise ValueError("batch_adapt requires episodic=True")
    results: List[Tuple[Optional[BinaryMask3D], AdaptationTrace]] = []
    for sample, c in zip(samples, cfgs):
        try:
            results.append(adapt_and_predict(model, sample, c))
        except Exception as exc:  # noqa: BLE001 - isolate per-sample failures
            trace = AdaptationTrace(sample_id=sample.sample_id, mode=c.mode,
                                    aborted=True, error=f"{type(exc).__name__}: {exc}")
            results.append((None, trace))
    return results


def write_traces(traces: Sequence[AdaptationTrace], path) -> None:
    """One JSON record per line, one line per sample."""
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_record(), sort_keys=True) + "\n")


def read_traces(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mean_wall_ms(traces: Sequence[AdaptationTrace]) -> float:
    if not traces:
        return math.nan
    return float(np.mean([t.wall_ms for t in traces]))
