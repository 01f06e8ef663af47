"""Volumetric data types, HU preprocessing, ROI cropping and the input pyramid.

Volumes are dense (D, H, W) grids stored slice-major (D outermost, W
innermost), which is plain C-order for a numpy array of that shape. All
physical geometry is expressed in millimeters via the per-axis voxel spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

ROI_SHAPE = (64, 96, 96)
PYRAMID_SHAPES = ((64, 96, 96), (32, 48, 48), (16, 24, 24))


def _check_dims(dims) -> Tuple[int, int, int]:
    d, h, w = (int(x) for x in dims)
    if d <= 0 or h <= 0 or w <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    return (d, h, w)


@dataclass
class Volume3D:
    """A scalar 3D grid with physical voxel spacing in mm.

    ``data`` holds raw HU or normalized intensities as float32, shape (D, H, W).
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass
class BinaryMask3D:
    """A boolean 3D grid aligned with a Volume3D."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())


def roi_center(dims: Tuple[int, int, int]) -> Tuple[int, int, int]:
    """The click point: (D/2, H/2, W/2), rounded down."""
    return (dims[0] // 2, dims[1] // 2, dims[2] // 2)


@dataclass
class RoiSample:
    """A preprocessed ROI: clipped+normalized image, optional ground truth,
    the center click and the true lesion diameter (used only for binning)."""

    image: Volume3D
    gt: Optional[BinaryMask3D] = None
    click: Tuple[int, int, int] = field(default=None)  # type: ignore[assignment]
    lesion_diameter_mm: float = 0.0
    sample_id: str = ""

    def __post_init__(self):
        if self.image.dims != ROI_SHAPE:
            raise ValueError(f"ROI image must be {ROI_SHAPE}, got {self.image.dims}")
        if self.click is None:
            self.click = roi_center(self.image.dims)
        if self.gt is not None and self.gt.dims != self.image.dims:
            raise ValueError("gt dims must match image dims")


@dataclass
class InputPyramid:
    """Three center-aligned crops of one ROI, halving per level."""

    level0: Volume3D
    level1: Volume3D
    level2: Volume3D

    def __post_init__(self):
        d0, h0, w0 = self.level0.dims
        if self.level1.dims != (d0 // 2, h0 // 2, w0 // 2):
            raise ValueError(
                f"level1 dims {self.level1.dims} are not half of level0 {self.level0.dims}")
        if self.level2.dims != (d0 // 4, h0 // 4, w0 // 4):
            raise ValueError(
                f"level2 dims {self.level2.dims} are not a quarter of level0 {self.level0.dims}")

    @property
    def levels(self) -> Tuple[Volume3D, Volume3D, Volume3D]:
        return (self.level0, self.level1, self.level2)


def clip_hu(vol: Volume3D, lo: float, hi: float) -> Volume3D:
    """Clamp intensities to [lo, hi]; in-range values are unchanged."""
    if lo >= hi:
        raise ValueError(f"clip range invalid: lo={lo} >= hi={hi}")
    return Volume3D(np.clip(vol.data, lo, hi), vol.spacing)


def minmax_normalize(vol: Volume3D) -> Volume3D:
    """Rescale to [0, 1]; a constant volume maps to all zeros."""
    vmin = float(vol.data.min())
    vmax = float(vol.data.max())
    if vmax == vmin:
        return Volume3D(np.zeros_like(vol.data), vol.spacing)
    return Volume3D((vol.data - vmin) / (vmax - vmin), vol.spacing)


def crop_centered(vol: Volume3D, center: Tuple[int, int, int],
                  shape: Tuple[int, int, int]) -> Volume3D:
    """Extract a fixed-shape patch whose center voxel is ``center``.

    Out-of-bounds regions are padded with the source minimum, so the output
    always has exactly the requested shape.
    """
    shape = _check_dims(shape)
    src = vol.data
    pad_value = float(src.min()) if src.size else 0.0
    out = np.full(shape, pad_value, dtype=src.dtype)
    starts = [int(center[a]) - shape[a] // 2 for a in range(3)]
    src_lo = [max(0, starts[a]) for a in range(3)]
    src_hi = [min(src.shape[a], starts[a] + shape[a]) for a in range(3)]
    if all(src_hi[a] > src_lo[a] for a in range(3)):
        dst_lo = [src_lo[a] - starts[a] for a in range(3)]
        dst_hi = [dst_lo[a] + (src_hi[a] - src_lo[a]) for a in range(3)]
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            src[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return Volume3D(out, vol.spacing)


def build_pyramid(roi: RoiSample) -> InputPyramid:
    """Build the three-level pyramid by center-cropping the ROI (no resampling)."""
    if roi.image.dims != ROI_SHAPE:
        raise ValueError(f"ROI image must be {ROI_SHAPE}, got {roi.image.dims}")
    center = roi_center(roi.image.dims)
    level1 = crop_centered(roi.image, center, PYRAMID_SHAPES[1])
    level2 = crop_centered(roi.image, center, PYRAMID_SHAPES[2])
    return InputPyramid(roi.image, level1, level2)


def preprocess_hu(vol: Volume3D, lo: float = -1350.0, hi: float = 150.0) -> Volume3D:
    """Standard preprocessing: clip HU to [lo, hi], then min-max normalize."""
    return minmax_normalize(clip_hu(vol, lo, hi))
