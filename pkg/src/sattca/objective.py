"""Loss functions: BCE, soft Dice, per-voxel entropy, the click loss and the
combined test-time loss, plus the supervised training loss.

All losses reduce by voxel mean so magnitudes do not depend on ROI size, and
all are torch-differentiable; tensors or numpy arrays are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    """Weights of the test-time loss: total = bce + sigma * dice + gamma * entropy."""

    sigma: float = 0.5
    gamma: float = 1.0
    smooth_eps: float = 1e-5
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.sigma < 0 or self.gamma < 0:
            raise ValueError("sigma and gamma must be nonnegative")
        if self.smooth_eps <= 0 or self.prob_clamp <= 0:
            raise ValueError("smooth_eps and prob_clamp must be positive")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


def _pair(probs, target):
    p = _as_tensor(probs)
    t = _as_tensor(target).to(p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    return p, t


def bce(probs, target, clamp: float = 1e-7) -> torch.Tensor:
    """Voxel-mean binary cross entropy with probabilities clamped to
    [clamp, 1 - clamp] for log safety."""
    p, t = _pair(probs, target)
    p = p.clamp(clamp, 1.0 - clamp)
    return (-(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))).mean()


def soft_dice(probs, target, eps: float = 1e-5) -> torch.Tensor:
    """1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    p, t = _pair(probs, target)
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps)


def entropy(probs, clamp: float = 1e-7) -> torch.Tensor:
    """Voxel-mean binary entropy of the probability map."""
    p = _as_tensor(probs).clamp(clamp, 1.0 - clamp)
    return (-(p * torch.log(p) + (1.0 - p) * torch.log(1.0 - p))).mean()


def masked_prediction(probs, mask) -> torch.Tensor:
    """Zero the probability map outside the mask (elementwise product)."""
    p, m = _pair(probs, mask)
    return p * m


def click_loss(probs, mask, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """BCE + sigma * Dice between the masked prediction and the mask itself."""
    p, m = _pair(probs, mask)
    masked = p * m
    return (bce(masked, m, weights.prob_clamp)
            + weights.sigma * soft_dice(masked, m, weights.smooth_eps))


def tt_loss(probs, mask, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """The test-time loss: click loss plus gamma times the entropy of the full
    (unmasked) probability map."""
    return click_loss(probs, mask, weights) + weights.gamma * entropy(probs, weights.prob_clamp)


def tt_loss_components(probs, mask, weights: LossWeights = LossWeights()) -> dict:
    """The three raw components (bce, dice, entropy) plus the weighted total."""
    p, m = _pair(probs, mask)
    masked = p * m
    l_bce = bce(masked, m, weights.prob_clamp)
    l_dice = soft_dice(masked, m, weights.smooth_eps)
    l_ent = entropy(p, weights.prob_clamp)
    total = l_bce + weights.sigma * l_dice + weights.gamma * l_ent
    return {"bce": l_bce, "dice": l_dice, "entropy": l_ent, "total": total}


def train_loss(probs, gt, clamp: float = 1e-7, eps: float = 1e-5) -> torch.Tensor:
    """Supervised loss: equally weighted BCE plus soft Dice."""
    return bce(probs, gt, clamp) + soft_dice(probs, gt, eps)
