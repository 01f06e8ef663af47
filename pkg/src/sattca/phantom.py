"""Synthetic lung-phantom ROI generation with a long-tail lesion size
distribution, plus the on-disk volume format and the dataset manifest.

Each case is a 64x96x96 ROI at 1 mm isotropic spacing containing one radially
perturbed blob centered on the click point. Lesion intensity fades to the
parenchyma level across an outer rim whose physical thickness scales with the
lesion radius, so large lesions have proportionally large low-contrast rims.
That is the long-tail failure mode this benchmark exists to probe: a model
fitted mostly to small lesions under-covers the rims of rare large ones.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .clickgeom import bbox_extents
from .volgrid import BinaryMask3D, RoiSample, Volume3D, preprocess_hu, roi_center

ROI_DIMS = (64, 96, 96)
ISO_SPACING = (1.0, 1.0, 1.0)
HU_RANGE = (-1350.0, 150.0)
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
VOLUME_MAGIC = b"SVOL"
MASK_MAGIC = b"SMSK"
_HEADER = struct.Struct("<4sIIIIfff")  # magic, version, dims, spacing

SPLIT_NAMES = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Corrupt or truncated volume/mask file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PhantomConfig:
    count: int = 100
    seed: int = 0
    diameter_range_mm: Tuple[float, float] = (3.0, 60.0)
    tail_mass: float = 0.08          # fraction of lesions above mass_threshold_mm
    mass_threshold_mm: float = 30.0
    lesion_hu: float = -100.0
    parenchyma_hu: float = -850.0
    noise_sigma_hu: float = 80.0
    rim_softness: float = 0.35       # rim thickness as a fraction of the radius
    irregularity: float = 0.15       # low-order radial perturbation amplitude

    def __post_init__(self):
        lo, hi = self.diameter_range_mm
        if not (2.0 <= lo < hi <= 64.0):
            raise ValueError(
                f"diameter range must satisfy 2 <= lo < hi <= 64 mm, got {self.diameter_range_mm}")
        if not (0.0 <= self.tail_mass < 1.0):
            raise ValueError(f"tail_mass must be in [0, 1), got {self.tail_mass}")
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if self.irregularity < 0 or self.irregularity >= 1:
            raise ValueError(f"irregularity must be in [0, 1), got {self.irregularity}")
        if self.rim_softness < 0 or self.rim_softness > 1:
            raise ValueError(f"rim_softness must be in [0, 1], got {self.rim_softness}")

    def config_sha(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def split_counts(count: int) -> Dict[str, int]:
    """7:1:2 split; exact for counts divisible by 10."""
    n_val = round(count * 0.1)
    n_test = round(count * 0.2)
    return {"train": count - n_val - n_test, "val": n_val, "test": n_test}


def sample_diameter(rng: np.random.Generator, cfg: PhantomConfig) -> float:
    """Log-uniform body below the mass threshold; a configurable tail mass
    above it."""
    lo, hi = cfg.diameter_range_mm
    thr = cfg.mass_threshold_mm
    if hi > thr and rng.random() < cfg.tail_mass:
        lo_t, hi_t = thr, hi
    else:
        lo_t, hi_t = lo, min(hi, thr)
    return float(np.exp(rng.uniform(np.log(lo_t), np.log(hi_t))))


def _radial_perturbation(rng: np.random.Generator, unit: np.ndarray,
                         amplitude: float) -> np.ndarray:
    """Smooth low-order perturbation over unit directions, normalized to
    [-1, 0] so the nominal radius is never exceeded."""
    if amplitude == 0.0:
        return np.zeros(unit.shape[:-1])
    ux, uy, uz = unit[..., 0], unit[..., 1], unit[..., 2]
    basis = [ux, uy, uz, ux * uy, uy * uz, ux * uz, ux * ux - uy * uy, uy * uy - uz * uz]
    coeffs = rng.normal(size=len(basis))
    g = sum(c * b for c, b in zip(coeffs, basis))
    g_min, g_max = float(g.min()), float(g.max())
    if g_max == g_min:
        return np.zeros_like(g)
    g = (g - g_max) / (g_max - g_min)  # in [-1, 0]
    return amplitude * g


def generate_case(rng: np.random.Generator, cfg: PhantomConfig,
                  diameter_mm: float | None = None,
                  ) -> Tuple[Volume3D, BinaryMask3D, float]:
    """One raw-HU ROI, its exact lesion mask, and the measured lesion
    diameter (max-axis bounding-box extent, in mm)."""
    if diameter_mm is None:
        diameter_mm = sample_diameter(rng, cfg)
    if diameter_mm > ROI_DIMS[0] * ISO_SPACING[0]:
        raise ValueError(
            f"diameter {diameter_mm} mm does not fit the {ROI_DIMS[0]} mm ROI depth")
    center = roi_center(ROI_DIMS)
    radius = diameter_mm / 2.0

    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in ROI_DIMS), indexing="ij")
    offsets = np.stack([(g - c) * s for g, c, s in zip(grids, center, ISO_SPACING)], axis=-1)
    dist = np.sqrt((offsets ** 2).sum(axis=-1))
    with np.errstate(invalid="ignore"):
        unit = np.where(dist[..., None] > 0, offsets / np.maximum(dist, 1e-12)[..., None], 0.0)

    pert = _radial_perturbation(rng, unit, cfg.irregularity)
    local_radius = radius * (1.0 + pert)
    mask = dist <= local_radius

    # lesion intensity: solid core fading linearly to parenchyma over the rim
    contrast = cfg.lesion_hu - cfg.parenchyma_hu
    t = np.divide(dist, np.maximum(local_radius, 1e-12))
    if cfg.rim_softness > 0:
        w = np.clip((1.0 - t) / cfg.rim_softness, 0.0, 1.0)
    else:
        w = (t <= 1.0).astype(np.float64)
    hu = cfg.parenchyma_hu + contrast * np.where(mask, w, 0.0)
    hu += rng.normal(scale=cfg.noise_sigma_hu, size=ROI_DIMS)
    hu = np.clip(hu, HU_RANGE[0], HU_RANGE[1])

    mask3d = BinaryMask3D(mask, ISO_SPACING)
    measured = bbox_extents(mask3d, ISO_SPACING).max_extent
    return Volume3D(hu.astype(np.float32), ISO_SPACING), mask3d, float(measured)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _write_header(fh, magic: bytes, dims, spacing) -> None:
    fh.write(_HEADER.pack(magic, FORMAT_VERSION, *[int(d) for d in dims],
                          *[float(s) for s in spacing]))


def _read_header(data: bytes, magic: bytes, path) -> Tuple[Tuple[int, int, int],
                                                           Tuple[float, float, float]]:
    if len(data) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header", len(data))
    got_magic, version, d, h, w, s0, s1, s2 = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise VolumeFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}", 4)
    return (d, h, w), (s0, s1, s2)


def write_volume(vol: Volume3D, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, VOLUME_MAGIC, vol.dims, vol.spacing)
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume3D:
    data = Path(path).read_bytes()
    dims, spacing = _read_header(data, VOLUME_MAGIC, path)
    expect = int(np.prod(dims)) * 4
    payload = data[_HEADER.size:]
    if len(payload) != expect:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expect}",
            _HEADER.size + min(len(payload), expect))
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume3D(voxels.copy(), spacing)


def write_mask(mask: BinaryMask3D, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, MASK_MAGIC, mask.dims, mask.spacing)
        fh.write(np.ascontiguousarray(mask.data, dtype=np.uint8).tobytes())


def read_mask(path) -> BinaryMask3D:
    data = Path(path).read_bytes()
    dims, spacing = _read_header(data, MASK_MAGIC, path)
    expect = int(np.prod(dims))
    payload = data[_HEADER.size:]
    if len(payload) != expect:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expect}",
            _HEADER.size + min(len(payload), expect))
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return BinaryMask3D(bits != 0, spacing)


# ---------------------------------------------------------------------------
# Dataset + manifest
# ---------------------------------------------------------------------------

@dataclass
class CaseEntry:
    case_id: str
    volume: str
    mask: str
    center: Tuple[int, int, int]
    diameter_mm: float
    split: str

    def to_record(self) -> dict:
        return {"id": self.case_id, "volume": self.volume, "mask": self.mask,
                "center": list(self.center), "diameter_mm": self.diameter_mm,
                "split": self.split}


@dataclass
class DatasetManifest:
    root: Path
    spacing: Tuple[float, float, float]
    config: dict
    config_sha: str
    cases: List[CaseEntry] = field(default_factory=list)

    def split(self, name: str) -> List[CaseEntry]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return [c for c in self.cases if c.split == name]

    def load_case(self, entry: CaseEntry) -> Tuple[Volume3D, BinaryMask3D]:
        return (read_volume(self.root / entry.volume),
                read_mask(self.root / entry.mask))

    def load_roi_sample(self, entry: CaseEntry) -> RoiSample:
        """Preprocessed (clipped + normalized) sample ready for the network."""
        vol, mask = self.load_case(entry)
        return RoiSample(image=preprocess_hu(vol), gt=mask,
                         click=tuple(entry.center),
                         lesion_diameter_mm=entry.diameter_mm,
                         sample_id=entry.case_id)


def generate_dataset(cfg: PhantomConfig, out_dir) -> DatasetManifest:
    """Generate ``cfg.count`` cases under ``out_dir`` with a 7:1:2 split and
    write the manifest. Fully deterministic: per-case generators are derived
    from (seed, case index)."""
    root = Path(out_dir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    counts = split_counts(cfg.count)
    split_of = (["train"] * counts["train"] + ["val"] * counts["val"]
                + ["test"] * counts["test"])
    cases: List[CaseEntry] = []
    for idx in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, idx])
        vol, mask, diameter = generate_case(rng, cfg)
        case_id = f"case_{idx:04d}"
        vol_rel = f"volumes/{case_id}.svol"
        mask_rel = f"masks/{case_id}.smsk"
        write_volume(vol, root / vol_rel)
        write_mask(mask, root / mask_rel)
        cases.append(CaseEntry(case_id=case_id, volume=vol_rel, mask=mask_rel,
                               center=roi_center(ROI_DIMS), diameter_mm=diameter,
                               split=split_of[idx]))
    manifest = DatasetManifest(root=root, spacing=ISO_SPACING, config=asdict(cfg),
                               config_sha=cfg.config_sha(), cases=cases)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "spacing": list(manifest.spacing),
        "config": manifest.config,
        "config_sha": manifest.config_sha,
        "cases": [c.to_record() for c in manifest.cases],
    }
    path = manifest.root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported manifest version", 0)
    cases = [CaseEntry(case_id=rec["id"], volume=rec["volume"], mask=rec["mask"],
                       center=tuple(rec["center"]), diameter_mm=rec["diameter_mm"],
                       split=rec["split"])
             for rec in doc["cases"]]
    return DatasetManifest(root=root, spacing=tuple(doc["spacing"]),
                           config=doc["config"], config_sha=doc["config_sha"],
                           cases=cases)
