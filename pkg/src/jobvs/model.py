"""Lattice segmentation network with a dual task head.

The backbone is an initial two-conv module followed by a triangular lattice:
lattice_length+1 columns of multi-scale nodes, where column c keeps levels
0..n_levels-1-c. Each node receives the sum of its same-level predecessor, the
strided-conv downsampling of the level above, and the trilinear-upsampled (plus
1x1x1 conv) level below, then applies two 3x3x3 conv + InstanceNorm + LeakyReLU
blocks. Each task head projects every retained level of the final column with a
1x1x1 conv, upsamples to full resolution, and sums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericalError
from .volume import CohortStats

TASK_MODES = ("joint", "vessel_only", "brain_only")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class LatticeConfig:
    lattice_length: int = 2
    n_levels: int = 4
    base_channels: int = 16
    channel_growth: int = 2
    patch_size: tuple[int, int, int] = (64, 64, 64)
    n_classes_per_task: int = 2
    task_mode: str = "joint"

    def __post_init__(self):
        patch = self.patch_size
        if isinstance(patch, int):
            patch = (patch,) * 3
        patch = tuple(int(p) for p in patch)
        if len(patch) != 3:
            raise DataError(f"patch_size must have 3 components, got {patch}")
        object.__setattr__(self, "patch_size", patch)
        if self.lattice_length < 1:
            raise DataError("lattice_length must be >= 1")
        if self.n_levels < 2:
            raise DataError("n_levels must be >= 2")
        if self.n_levels < self.lattice_length + 1:
            raise DataError(
                f"n_levels={self.n_levels} too small: the final lattice column needs "
                f"at least one level (require n_levels >= lattice_length + 1)"
            )
        divisor = 2 ** (self.n_levels - 1)
        if any(p % divisor for p in patch):
            raise DataError(f"patch_size {patch} must be divisible by {divisor}")
        if self.task_mode not in TASK_MODES:
            raise DataError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.base_channels < 1 or self.channel_growth < 1:
            raise DataError("base_channels and channel_growth must be >= 1")
        if self.n_classes_per_task != 2:
            raise DataError("only binary tasks (n_classes_per_task=2) are supported")

    def channels(self, level: int) -> int:
        return int(round(self.base_channels * self.channel_growth**level))

    @property
    def heads(self) -> tuple[str, ...]:
        if self.task_mode == "joint":
            return ("vessel", "brain")
        return ("vessel",) if self.task_mode == "vessel_only" else ("brain",)

    def column_height(self, column: int) -> int:
        return self.n_levels - column

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeConfig":
        d = dict(d)
        if "patch_size" in d and not isinstance(d["patch_size"], int):
            d["patch_size"] = tuple(d["patch_size"])
        return cls(**d)


@dataclass
class PredictionPair:
    """Per-task logits at full patch resolution; absent heads are None."""

    vessel_logits: torch.Tensor | None = None
    brain_logits: torch.Tensor | None = None

    def __post_init__(self):
        if self.vessel_logits is None and self.brain_logits is None:
            raise DataError("prediction must carry at least one head")
        shapes = {tuple(t.shape) for t in (self.vessel_logits, self.brain_logits) if t is not None}
        if len(shapes) > 1:
            raise DataError(f"head shapes differ: {shapes}")

    @property
    def heads(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.vessel_logits is not None:
            out["vessel"] = self.vessel_logits
        if self.brain_logits is not None:
            out["brain"] = self.brain_logits
        return out


class _Node(nn.Module):
    """Two 3x3x3 conv + InstanceNorm + LeakyReLU blocks."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)

    def forward(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        return F.leaky_relu(self.norm2(self.conv2(x)), LEAKY_SLOPE)


class _Upsample(nn.Module):
    """Trilinear x2 upsampling followed by a channel-mapping 1x1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv3d(in_channels, out_channels, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return self.proj(x)


class LatticeNet(nn.Module):
    def __init__(self, config: LatticeConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.stem = _Node(1, cfg.channels(0))

        self.nodes = nn.ModuleDict()
        self.downs = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for col in range(cfg.lattice_length + 1):
            for lev in range(cfg.column_height(col)):
                key = f"col{col}_lev{lev}"
                self.nodes[key] = _Node(cfg.channels(lev), cfg.channels(lev))
                if lev > 0:
                    self.downs[key] = nn.Conv3d(cfg.channels(lev - 1), cfg.channels(lev), 3, stride=2, padding=1)
                if col > 0:  # the level below always exists in the previous column
                    self.ups[key] = _Upsample(cfg.channels(lev + 1), cfg.channels(lev))

        self.heads = nn.ModuleDict()
        final_levels = cfg.column_height(cfg.lattice_length)
        for task in cfg.heads:
            self.heads[task] = nn.ModuleList(
                [nn.Conv3d(cfg.channels(lev), cfg.n_classes_per_task, 1) for lev in range(final_levels)]
            )

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.config
        feats = []
        cur = self.stem(x)
        for lev in range(cfg.column_height(0)):
            if lev > 0:
                cur = self.downs[f"col0_lev{lev}"](feats[-1])
            cur = self.nodes[f"col0_lev{lev}"](cur)
            feats.append(cur)
        for col in range(1, cfg.lattice_length + 1):
            new_feats = []
            for lev in range(cfg.column_height(col)):
                key = f"col{col}_lev{lev}"
                t = feats[lev] + self.ups[key](feats[lev + 1])
                if lev > 0:
                    t = t + self.downs[key](feats[lev - 1])
                new_feats.append(self.nodes[key](t))
            feats = new_feats

        out = {}
        for task, convs in self.heads.items():
            logits = convs[0](feats[0])
            for lev in range(1, len(convs)):
                up = F.interpolate(convs[lev](feats[lev]), scale_factor=2**lev, mode="trilinear", align_corners=False)
                logits = logits + up
            out[task] = logits
        return out

    def reset_parameters(self, seed: int) -> None:
        """He fan-in initialization for convs, identity for norms, driven by one seed."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    std = (2.0 / fan_in) ** 0.5
                    p.copy_(torch.randn(p.shape, generator=gen) * std)
                else:
                    p.fill_(1.0 if name.endswith(".weight") else 0.0)


def build_model(cfg: LatticeConfig, seed: int = 0) -> LatticeNet:
    """Construct and deterministically initialize the network."""
    model = LatticeNet(cfg)
    model.reset_parameters(seed)
    return model


def forward(model: LatticeNet, patch) -> PredictionPair:
    """Run one (1, x, y, z) patch through the network; logits per active head."""
    t = patch if isinstance(patch, torch.Tensor) else torch.as_tensor(np.asarray(patch), dtype=torch.float32)
    if t.ndim != 4 or t.shape[0] != 1:
        raise DataError(f"patch must have shape (1, x, y, z), got {tuple(t.shape)}")
    if tuple(t.shape[1:]) != model.config.patch_size:
        raise DataError(f"patch spatial shape {tuple(t.shape[1:])} != configured {model.config.patch_size}")
    out = model(t.unsqueeze(0))
    return PredictionPair(
        vessel_logits=out["vessel"][0] if "vessel" in out else None,
        brain_logits=out["brain"][0] if "brain" in out else None,
    )


def softmax_probs(pred: PredictionPair) -> dict[str, torch.Tensor]:
    """Per-head class probabilities (softmax over the class dimension)."""
    probs = {}
    for task, logits in pred.heads.items():
        if torch.isnan(logits).any():
            raise NumericalError(f"NaN logits in {task} head")
        probs[task] = F.softmax(logits, dim=0)
    return probs


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_checksum(model_or_state) -> str:
    """SHA-256 over parameter names, shapes, and little-endian bytes (sorted by name)."""
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    digest = hashlib.sha256()
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def save_checkpoint(path, model: LatticeNet, stats: CohortStats | None = None, extra: dict | None = None) -> None:
    """Single .npz archive: config echo (JSON), optional cohort stats and metadata,
    and every named weight tensor."""
    arrays = {
        f"param::{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    arrays["__config__"] = np.str_(json.dumps(model.config.to_dict()))
    arrays["__stats__"] = np.str_(stats.to_json() if stats is not None else "")
    arrays["__extra__"] = np.str_(json.dumps(extra or {}))
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_checkpoint(path) -> tuple[LatticeNet, CohortStats | None, dict]:
    """Rebuild the model from a checkpoint archive; returns (model, stats, extra)."""
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError as exc:
        raise DataError(f"no such checkpoint: {path}") from exc
    if "__config__" not in archive:
        raise DataError(f"{path} is not a checkpoint archive (missing config)")
    cfg = LatticeConfig.from_dict(json.loads(str(archive["__config__"])))
    model = LatticeNet(cfg)
    state = {}
    for key in archive.files:
        if key.startswith("param::"):
            state[key[len("param::") :]] = torch.from_numpy(archive[key])
    model.load_state_dict(state)
    model.eval()
    stats_json = str(archive["__stats__"]) if "__stats__" in archive else ""
    stats = CohortStats.from_json(stats_json) if stats_json else None
    extra = json.loads(str(archive["__extra__"])) if "__extra__" in archive else {}
    return model, stats, extra
