"""Joint segmentation objective: per-task Dice + cross-entropy, combined as a
weighted sum over the brain and vessel heads (defaults alpha = beta = 1)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DataError

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # brain term
    beta: float = 1.0  # vessel term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DataError("loss weights must be non-negative")
        if self.alpha + self.beta <= 0:
            raise DataError("at least one loss weight must be positive")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def dice_loss(probs, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s) over the whole patch."""
    probs = _as_tensor(probs)
    target = _as_tensor(target).to(probs.dtype)
    if probs.shape != target.shape:
        raise DataError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def ce_loss(logits, target) -> torch.Tensor:
    """Mean voxel-wise cross-entropy; logits (2, *spatial), target binary (*spatial)."""
    logits = _as_tensor(logits)
    target = _as_tensor(target)
    if logits.ndim != target.ndim + 1 or logits.shape[0] != 2 or logits.shape[1:] != target.shape:
        raise DataError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    logp = F.log_softmax(logits, dim=0)
    t = target.to(logits.dtype)
    picked = t * logp[1] + (1.0 - t) * logp[0]
    return -picked.mean()


def task_loss(logits, target) -> torch.Tensor:
    """Dice (foreground channel) + cross-entropy; identical form for both tasks."""
    logits = _as_tensor(logits)
    fg_probs = F.softmax(logits, dim=0)[1]
    return dice_loss(fg_probs, target) + ce_loss(logits, target)


def joint_loss(pred, brain_target, vessel_target, weights: LossWeights = LossWeights()):
    """alpha * task_loss(brain) + beta * task_loss(vessel).

    `pred` must carry both heads (joint mode). Returns (total, breakdown) where
    breakdown holds the unweighted per-task loss tensors.
    """
    if pred.brain_logits is None or pred.vessel_logits is None:
        raise DataError("joint_loss requires both heads; got a single-task prediction")
    l_brain = task_loss(pred.brain_logits, brain_target)
    l_vessel = task_loss(pred.vessel_logits, vessel_target)
    total = weights.alpha * l_brain + weights.beta * l_vessel
    return total, {"brain": l_brain, "vessel": l_vessel}
