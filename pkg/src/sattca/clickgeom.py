"""Geometry between a raw prediction and the test-time supervision mask.

Pipeline: threshold the probability map, keep the largest 26-connected
component, project it onto the three axes to get bounding-box extents in mm,
map each extent through the scale function, and rasterize the resulting
filled ellipsoid around the click. Lesions whose extents are all below 7 mm
degenerate into the single click voxel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .volgrid import BinaryMask3D, Volume3D, roi_center

# All 26 neighbours count as connected when extracting the main component.
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)

DEGENERATE_LIMIT_MM = 7.0


@dataclass(frozen=True)
class BBoxExtents:
    """Axis-aligned bounding-box extents of a mask, in mm per axis."""

    d: float
    h: float
    w: float

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.d, self.h, self.w)

    @property
    def max_extent(self) -> float:
        return max(self.d, self.h, self.w)


@dataclass(frozen=True)
class ClickMaskSpec:
    """Parameters of the supervision ellipsoid: semi-axes in mm, a degenerate
    flag (single-voxel mask) and the center voxel."""

    semi_axes_mm: Tuple[float, float, float]
    degenerate: bool
    center: Tuple[int, int, int]


def largest_component(mask: BinaryMask3D) -> BinaryMask3D:
    """Keep only the largest 26-connected foreground component.

    Ties go to the component containing the first foreground voxel in
    (d, h, w) raster order, which scipy's label numbering already guarantees.
    """
    data = mask.data
    if not data.any():
        return BinaryMask3D(np.zeros_like(data), mask.spacing)
    labels, n = ndimage.label(data, structure=CONNECTIVITY_26)
    if n == 1:
        return BinaryMask3D(data.copy(), mask.spacing)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    best = int(np.argmax(counts))  # first max -> lowest label -> raster tie-break
    return BinaryMask3D(labels == best, mask.spacing)


def bbox_extents(mask: BinaryMask3D,
                 spacing: Tuple[float, float, float] | None = None) -> BBoxExtents:
    """Per-axis extent of the mask's bounding box in mm; (0, 0, 0) when empty."""
    if spacing is None:
        spacing = mask.spacing
    data = mask.data
    if not data.any():
        return BBoxExtents(0.0, 0.0, 0.0)
    extents = []
    for axis in range(3):
        proj = np.any(data, axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        extents.append(float((idx[-1] - idx[0] + 1) * spacing[axis]))
    return BBoxExtents(*extents)


def scale_map_R(extent_mm: float) -> float:
    """Map a bounding-box side length to an ellipsoid semi-axis length:
    min(0.02 * x^2, 0.8 * x). Quadratic up to the crossover at 40 mm, linear
    beyond it."""
    x = float(extent_mm)
    if x < 0:
        raise ValueError(f"extent must be nonnegative, got {x}")
    return min(0.02 * x * x, 0.8 * x)


def make_click_spec(extents: BBoxExtents, center: Tuple[int, int, int]) -> ClickMaskSpec:
    """Build the ellipsoid spec for a bounding box; all extents under 7 mm
    collapse to the single click voxel."""
    degenerate = extents.max_extent < DEGENERATE_LIMIT_MM
    if degenerate:
        semi = (0.0, 0.0, 0.0)
    else:
        semi = (scale_map_R(extents.d), scale_map_R(extents.h), scale_map_R(extents.w))
    return ClickMaskSpec(semi_axes_mm=semi, degenerate=degenerate, center=tuple(center))


def rasterize_ellipsoid(spec: ClickMaskSpec, dims: Tuple[int, int, int],
                        spacing: Tuple[float, float, float]) -> BinaryMask3D:
    """Fill the ellipsoid: voxel v is foreground iff
    sum_axis ((v_a - c_a) * s_a)^2 / R_a^2 <= 1, clipped to the grid.

    A zero semi-axis collapses that axis to the center plane; a degenerate
    spec yields exactly the center voxel.
    """
    dims = tuple(int(x) for x in dims)
    center = spec.center
    if any(not (0 <= center[a] < dims[a]) for a in range(3)):
        raise ValueError(f"center {center} outside grid {dims}")
    out = np.zeros(dims, dtype=bool)
    if spec.degenerate:
        out[center] = True
        return BinaryMask3D(out, spacing)
    axes = []
    for a in range(3):
        offsets_mm = (np.arange(dims[a]) - center[a]) * spacing[a]
        r = spec.semi_axes_mm[a]
        if r > 0:
            axes.append(offsets_mm ** 2 / r ** 2)
        else:
            # collapsed axis: only the center plane contributes 0, rest is out
            term = np.full(dims[a], np.inf)
            term[offsets_mm == 0] = 0.0
            axes.append(term)
    lhs = (axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :])
    out = lhs <= 1.0
    return BinaryMask3D(out, spacing)


def click_mask_from_prediction(
    prob_map: Volume3D,
    spacing: Tuple[float, float, float] | None = None,
    threshold: float = 0.5,
) -> Tuple[BinaryMask3D, ClickMaskSpec]:
    """Derive the supervision mask from a pre-segmentation probability map.

    An all-background thresholded map falls back to the degenerate
    single-voxel mask at the click, which is always available.
    """
    if spacing is None:
        spacing = prob_map.spacing
    center = roi_center(prob_map.dims)
    binary = BinaryMask3D(prob_map.data > threshold, spacing)
    main = largest_component(binary)
    extents = bbox_extents(main, spacing)
    spec = make_click_spec(extents, center)
    mask = rasterize_ellipsoid(spec, prob_map.dims, spacing)
    return mask, spec
