"""Free adversarial training: weight updates and input-perturbation ascent are
interleaved over N replays of each mini-batch, recycling the same backward pass.
The perturbation buffer persists across mini-batches (and epochs) of one
fine-tuning run and is always L-inf projected to [-eps, +eps]."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DataError, NumericalError
from .model import LatticeNet, forward

DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_REPLAYS = 5


@dataclass(frozen=True)
class ATConfig:
    epsilon: float = DEFAULT_EPSILON
    n_replays: int = DEFAULT_REPLAYS
    enabled: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise DataError("epsilon must be >= 0")
        if self.n_replays < 1:
            raise DataError("n_replays must be >= 1")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "n_replays": self.n_replays, "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d: dict) -> "ATConfig":
        return cls(**d)


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Per-voxel clamp to [-epsilon, +epsilon] (idempotent)."""
    return torch.clamp(delta, -epsilon, epsilon)


@dataclass
class FreeATStats:
    n_forward: int = 0
    n_backward: int = 0
    n_weight_updates: int = 0
    replay_losses: list = field(default_factory=list)
    max_abs_delta: list = field(default_factory=list)


def free_at_epoch(
    model: LatticeNet,
    batch_stream,
    at: ATConfig,
    optimizer: torch.optim.Optimizer,
    loss_fn,
    delta: torch.Tensor | None = None,
) -> tuple[torch.Tensor, FreeATStats]:
    """One epoch of free adversarial training.

    batch_stream yields (image, brain, vessel) patch triples; the perturbation is
    added to the image channel only. loss_fn(pred, brain, vessel) -> scalar tensor.
    Returns the carried perturbation buffer and per-replay statistics.
    """
    if not at.enabled:
        raise DataError("free_at_epoch called with at.enabled=False")
    model.train()
    stats = FreeATStats()
    for image, brain, vessel in batch_stream:
        image = image if isinstance(image, torch.Tensor) else torch.as_tensor(image, dtype=torch.float32)
        if image.ndim == 3:
            image = image.unsqueeze(0)
        brain_t = torch.as_tensor(brain, dtype=torch.float32)
        vessel_t = torch.as_tensor(vessel, dtype=torch.float32)
        if delta is None:
            delta = torch.zeros_like(image)
        for _ in range(at.n_replays):
            d = delta.clone().requires_grad_(True)
            pred = forward(model, image + d)
            loss = loss_fn(pred, brain_t, vessel_t)
            stats.n_forward += 1
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite adversarial training loss: {loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            stats.n_backward += 1
            optimizer.step()
            stats.n_weight_updates += 1
            with torch.no_grad():
                grad = d.grad if d.grad is not None else torch.zeros_like(d)
                delta = project_linf(delta + at.epsilon * torch.sign(grad), at.epsilon)
            stats.replay_losses.append(float(loss.detach()))
            stats.max_abs_delta.append(float(delta.abs().max()))
    if delta is None:
        raise DataError("free_at_epoch received an empty batch stream")
    return delta, stats
