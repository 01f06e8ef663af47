"""The segmentation network: a small 3D encoder-decoder whose encoder can be
fed a three-level input pyramid through extra convolution paths, plus the
parameter registry that separates normalization affine parameters (the only
ones touched by test-time adaptation) from everything else.

The two auxiliary paths process the 1/2- and 1/4-scale crops; their features
are concatenated with the main trunk at the 1/4-resolution encoder stage and
projected back to the trunk width. Normalization is instance-style with
learnable per-channel scale and shift, so batch statistics never enter and
the affine parameters are the entire adaptable state.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn

from .volgrid import InputPyramid, Volume3D

CHECKPOINT_FORMAT_VERSION = 1
FUSION_STAGE = 2  # 1/4 resolution


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 8
    depth: int = 4
    norm_kind: str = "instance"
    ms_enabled: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.ms_enabled and self.depth < FUSION_STAGE + 1:
            raise ValueError(
                f"ms_enabled requires depth >= {FUSION_STAGE + 1} "
                f"(fusion happens at the 1/4-resolution stage), got depth={self.depth}")
        if self.norm_kind != "instance":
            raise ValueError(f"unsupported norm_kind: {self.norm_kind!r}")


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm3d(channels, affine=True)


def _stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, padding=1),
        _norm(cout),
        nn.SiLU(),
    )


class MultiScaleEncoder(nn.Module):
    """Input paths for the 1/2- and 1/4-scale crops plus the fusion projection.

    The 1/2-scale path applies one stride-2 downsampling; the 1/4-scale path
    none. Both end at the trunk's 1/4-resolution scale, where the three
    feature maps are concatenated and projected back to the trunk width.
    """

    def __init__(self, base: int, trunk_channels: int):
        super().__init__()
        self.path1 = nn.Sequential(
            _stage(1, base),
            nn.Conv3d(base, base, kernel_size=2, stride=2),
            _norm(base),
            nn.SiLU(),
        )
        self.path2 = _stage(1, base)
        self.fuse = nn.Sequential(
            nn.Conv3d(trunk_channels + 2 * base, trunk_channels, kernel_size=1),
            _norm(trunk_channels),
            nn.SiLU(),
        )

    def forward(self, trunk_feat: torch.Tensor, x1: torch.Tensor,
                x2: torch.Tensor) -> torch.Tensor:
        f1 = self.path1(x1)
        f2 = self.path2(x2)
        return self.fuse(torch.cat([trunk_feat, f1, f2], dim=1))


class SegModel(nn.Module):
    """Encoder-decoder over (N, 1, D, H, W) inputs with optional multi-scale
    input encoder. Fully convolutional: any dims divisible by 2**(depth-1)
    (and by 4 for the pyramid levels) work."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        widths = [b * (2 ** k) for k in range(cfg.depth)]
        self.enc_stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for k, w in enumerate(widths):
            cin = 1 if k == 0 else widths[k - 1]
            if k > 0:
                self.downs.append(nn.Conv3d(cin, w, kernel_size=2, stride=2))
                cin = w
            self.enc_stages.append(_stage(cin, w))
        self.ms_encoder = MultiScaleEncoder(b, widths[FUSION_STAGE]) if cfg.ms_enabled else None
        self.ups = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        for k in range(cfg.depth - 2, -1, -1):
            self.ups.append(nn.ConvTranspose3d(widths[k + 1], widths[k], kernel_size=2, stride=2))
            self.dec_stages.append(_stage(2 * widths[k], widths[k]))
        self.head = nn.Conv3d(widths[0], 1, kernel_size=1)
        # foreground voxels are rare; a negative prior on the output keeps the
        # untrained net from predicting lesion everywhere and speeds convergence
        with torch.no_grad():
            self.head.bias.fill_(-4.0)

    def forward(self, x0: torch.Tensor, x1: torch.Tensor | None = None,
                x2: torch.Tensor | None = None) -> torch.Tensor:
        if x0.ndim != 5:
            raise ValueError(f"expected (N, 1, D, H, W) input, got shape {tuple(x0.shape)}")
        div = 2 ** (self.cfg.depth - 1)
        if any(s % div for s in x0.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x0.shape[2:])} not divisible by {div}")
        if self.ms_encoder is not None:
            if x1 is None or x2 is None:
                raise ValueError("multi-scale model requires all three pyramid levels")
            for name, x, f in (("level1", x1, 2), ("level2", x2, 4)):
                want = tuple(s // f for s in x0.shape[2:])
                if tuple(x.shape[2:]) != want:
                    raise ValueError(f"{name} must have spatial dims {want}, "
                                     f"got {tuple(x.shape[2:])}")
        skips: List[torch.Tensor] = []
        feat = x0
        for k, stage in enumerate(self.enc_stages):
            if k > 0:
                feat = self.downs[k - 1](feat)
            feat = stage(feat)
            if k == FUSION_STAGE and self.ms_encoder is not None:
                feat = self.ms_encoder(feat, x1, x2)
            if k < self.cfg.depth - 1:
                skips.append(feat)
        for up, dec, skip in zip(self.ups, self.dec_stages, reversed(skips)):
            feat = dec(torch.cat([up(feat), skip], dim=1))
        return self.head(feat)


def build_model(cfg: NetworkConfig, seed: int) -> SegModel:
    """Deterministically initialized model; identical (cfg, seed) pairs yield
    parameter-identical networks."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SegModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Parameter registry and snapshots
# ---------------------------------------------------------------------------

@dataclass
class ParamRegistry:
    """Partition of all trainable parameters into normalization affine
    (scale/shift) tensors and everything else, in deterministic name order."""

    norm_affine: List[Tuple[str, nn.Parameter]]
    frozen: List[Tuple[str, nn.Parameter]]

    def norm_parameters(self) -> List[nn.Parameter]:
        return [p for _, p in self.norm_affine]

    def frozen_parameters(self) -> List[nn.Parameter]:
        return [p for _, p in self.frozen]


def param_registry(model: SegModel) -> ParamRegistry:
    norm_param_ids = set()
    for module in model.modules():
        if isinstance(module, nn.InstanceNorm3d):
            for p in module.parameters(recurse=False):
                norm_param_ids.add(id(p))
    norm_affine, frozen = [], []
    for name, p in model.named_parameters():
        (norm_affine if id(p) in norm_param_ids else frozen).append((name, p))
    return ParamRegistry(norm_affine=norm_affine, frozen=frozen)


def frozen_checksum(model: SegModel) -> str:
    """SHA-256 over the non-normalization parameters, in registry order."""
    reg = param_registry(model)
    digest = hashlib.sha256()
    for name, p in reg.frozen:
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class ParamSnapshot:
    """Deep copy of the normalization affine tensors plus a checksum of the
    frozen parameters at snapshot time."""

    names: List[str]
    values: List[torch.Tensor]
    frozen_sha: str


def snapshot_norm(model: SegModel) -> ParamSnapshot:
    reg = param_registry(model)
    return ParamSnapshot(
        names=[n for n, _ in reg.norm_affine],
        values=[p.detach().clone() for _, p in reg.norm_affine],
        frozen_sha=frozen_checksum(model),
    )


def restore_norm(model: SegModel, snap: ParamSnapshot) -> None:
    reg = param_registry(model)
    names = [n for n, _ in reg.norm_affine]
    if names != snap.names or any(
            p.shape != v.shape for (_, p), v in zip(reg.norm_affine, snap.values)):
        raise ValueError("snapshot does not match this model's architecture")
    with torch.no_grad():
        for (_, p), v in zip(reg.norm_affine, snap.values):
            p.copy_(v)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def pyramid_tensors(pyramid: InputPyramid, dtype=torch.float32):
    """Pyramid levels as (1, 1, D, H, W) tensors."""
    return tuple(
        torch.as_tensor(level.data, dtype=dtype).unsqueeze(0).unsqueeze(0)
        for level in pyramid.levels
    )


def forward_volume(model: SegModel, pyramid: InputPyramid) -> Volume3D:
    """Logits for one pyramid, as a volume aligned with level0."""
    x0, x1, x2 = pyramid_tensors(pyramid, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        logits = model(x0, x1, x2)
    return Volume3D(logits[0, 0].cpu().numpy(), pyramid.level0.spacing)


def predict_probs(model: SegModel, pyramid: InputPyramid) -> Volume3D:
    """Sigmoid probabilities for one pyramid, in (0, 1)."""
    x0, x1, x2 = pyramid_tensors(pyramid, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        probs = torch.sigmoid(model(x0, x1, x2))
    return Volume3D(probs[0, 0].cpu().numpy(), pyramid.level0.spacing)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: SegModel, path, seed: int, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "seed": int(seed),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, expected_cfg: NetworkConfig | None = None) -> Tuple[SegModel, dict]:
    """Rebuild the model stored at ``path``. If ``expected_cfg`` is given and
    differs from the stored config, raise instead of silently reinterpreting."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version!r}")
    cfg = NetworkConfig(**payload["config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expected_cfg}")
    model = SegModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def clone_model(model: SegModel) -> SegModel:
    """Independent copy sharing no tensors; used for per-worker adaptation."""
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    buf.seek(0)
    clone = SegModel(model.cfg)
    clone.to(next(model.parameters()).dtype)
    clone.load_state_dict(torch.load(buf, weights_only=True))
    clone.eval()
    return clone


def count_parameters(module: nn.Module) -> int:
    return int(sum(p.numel() for p in module.parameters()))


def model_checksum(model: SegModel) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
