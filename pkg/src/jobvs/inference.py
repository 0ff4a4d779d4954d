"""Whole-volume prediction by sliding-window tiling with Gaussian blending, and
the BM/NBM evaluation pathways: NBM scores the raw prediction over the full
volume, BM re-scores it with the vessel probabilities zeroed outside a brain
mask (the model's own predicted mask when it has a brain head)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .model import LatticeNet
from .volume import (
    CohortStats,
    LabelVolume,
    SubjectRecord,
    Volume,
    normalize,
    resample_grid_to_shape,
    resample_to_spacing,
)

log = logging.getLogger(__name__)

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class PredictionVolume:
    """Per-task foreground probabilities on the input image grid."""

    vessel_prob: np.ndarray | None
    brain_prob: np.ndarray | None
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        grids = [g for g in (self.vessel_prob, self.brain_prob) if g is not None]
        if not grids:
            raise DataError("prediction must carry at least one probability grid")
        shapes = {g.shape for g in grids}
        if len(shapes) > 1:
            raise DataError(f"probability grid shapes differ: {shapes}")
        for g in grids:
            if g.min() < -1e-6 or g.max() > 1 + 1e-6:
                raise DataError("probabilities must lie in [0, 1]")

    @property
    def shape(self):
        grid = self.vessel_prob if self.vessel_prob is not None else self.brain_prob
        return grid.shape


def gaussian_weight(patch_size, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian tile weight (sigma = patch_size * sigma_scale per axis),
    centered on the tile and strictly positive everywhere."""
    axes = []
    for n in patch_size:
        x = np.arange(n, dtype=np.float64)
        c = (n - 1) / 2.0
        sigma = max(n * sigma_scale, 1e-8)
        axes.append(np.exp(-0.5 * ((x - c) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, np.finfo(np.float64).tiny)


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    """Start offsets covering [0, length) with the final tile clamped to the end."""
    if length <= patch:
        return [0]
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def sliding_window_predict(
    model: LatticeNet,
    vol: Volume,
    patch_size=None,
    overlap: float = 0.5,
) -> PredictionVolume:
    """Tile a (normalized) volume, blend per-tile softmax probabilities with a
    Gaussian window, and return per-head probability grids. Accumulation runs in
    float64, so tile visiting order is immaterial."""
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must be in [0, 1), got {overlap}")
    patch = model.config.patch_size if patch_size is None else (
        (patch_size,) * 3 if isinstance(patch_size, int) else tuple(patch_size)
    )
    data = vol.data.astype(np.float32)
    orig_shape = data.shape
    pads = [(0, max(0, p - s)) for p, s in zip(patch, orig_shape)]
    if any(p[1] for p in pads):
        data = np.pad(data, pads, mode="edge")
    shape = data.shape

    weight = gaussian_weight(patch)
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch]
    starts = [tile_starts(n, p, s) for n, p, s in zip(shape, patch, strides)]

    heads = model.config.heads
    num = {task: np.zeros(shape, dtype=np.float64) for task in heads}
    den = np.zeros(shape, dtype=np.float64)

    model.eval()
    with torch.no_grad():
        for sx in starts[0]:
            for sy in starts[1]:
                for sz in starts[2]:
                    sl = (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]), slice(sz, sz + patch[2]))
                    tile = torch.as_tensor(data[sl], dtype=torch.float32)[None, None]
                    out = model(tile)
                    for task in heads:
                        probs = torch.softmax(out[task], dim=1)[0, 1].numpy().astype(np.float64)
                        num[task][sl] += probs * weight
                    den[sl] += weight

    def finalize(task):
        grid = num[task] / den
        grid = grid[: orig_shape[0], : orig_shape[1], : orig_shape[2]]
        return np.clip(grid, 0.0, 1.0).astype(np.float32)

    return PredictionVolume(
        vessel_prob=finalize("vessel") if "vessel" in heads else None,
        brain_prob=finalize("brain") if "brain" in heads else None,
        spacing=vol.spacing,
        origin=vol.origin,
    )


def binarize(prob, threshold: float = 0.5, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> LabelVolume:
    """Threshold a probability grid; voxels >= threshold become foreground."""
    prob = np.asarray(prob)
    if prob.min() < -1e-6 or prob.max() > 1 + 1e-6:
        raise DataError("binarize expects probabilities in [0, 1]")
    return LabelVolume(data=(prob >= threshold).astype(np.uint8), spacing=spacing, origin=origin)


def apply_brain_mask(pred: PredictionVolume, mask: LabelVolume) -> PredictionVolume:
    """Zero the vessel probabilities outside the mask; brain probabilities untouched."""
    if pred.vessel_prob is None:
        raise DataError("prediction has no vessel probabilities to mask")
    if mask.shape != pred.shape:
        raise DataError(f"mask shape {mask.shape} != prediction shape {pred.shape}")
    return PredictionVolume(
        vessel_prob=pred.vessel_prob * (mask.data > 0),
        brain_prob=pred.brain_prob,
        spacing=pred.spacing,
        origin=pred.origin,
    )


def predict_record(
    model: LatticeNet,
    image: Volume,
    stats: CohortStats,
    patch_size=None,
    overlap: float = 0.5,
) -> PredictionVolume:
    """Full preprocessing + sliding-window pipeline for one image: resample to the
    cohort median spacing, normalize, predict, and resample the probabilities back
    to the original grid."""
    work = resample_to_spacing(image, stats.median_spacing)
    pv = sliding_window_predict(model, normalize(work, stats), patch_size=patch_size, overlap=overlap)
    if work.shape == image.shape and all(a == b for a, b in zip(work.spacing, image.spacing)):
        return PredictionVolume(
            vessel_prob=pv.vessel_prob, brain_prob=pv.brain_prob,
            spacing=image.spacing, origin=image.origin,
        )

    def back(grid):
        if grid is None:
            return None
        out = resample_grid_to_shape(grid, work.spacing, image.shape, image.spacing)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    return PredictionVolume(
        vessel_prob=back(pv.vessel_prob),
        brain_prob=back(pv.brain_prob),
        spacing=image.spacing,
        origin=image.origin,
    )


def evaluate_modes(
    model: LatticeNet,
    rec: SubjectRecord,
    stats: CohortStats,
    patch_size=None,
    overlap: float = 0.5,
    mask_source: str = "auto",
) -> dict[str, PredictionVolume]:
    """NBM: raw sliding-window prediction. BM: vessel probabilities masked by the
    model's own binarized brain prediction when it has a brain head, else the
    ground-truth brain mask (the protocol used for single-task baselines)."""
    if mask_source not in ("auto", "predicted", "ground_truth"):
        raise DataError(f"unknown mask_source {mask_source!r}")
    nbm = predict_record(model, rec.image, stats, patch_size=patch_size, overlap=overlap)
    has_brain = nbm.brain_prob is not None
    if mask_source == "ground_truth" or not has_brain:
        if mask_source == "predicted":
            log.warning("subject %s: predicted brain mask requested but the model has no brain head; "
                        "falling back to the ground-truth mask", rec.id)
        mask = rec.brain
    else:
        mask = binarize(nbm.brain_prob, 0.5, spacing=nbm.spacing, origin=nbm.origin)
    return {"NBM": nbm, "BM": apply_brain_mask(nbm, mask)}


def render_mip(image: Volume, mask: LabelVolume | None, out_prefix) -> list[Path]:
    """Write one maximum-intensity-projection PNG per axis, with the mask's own
    projection overlaid in red when given."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.image import imsave

    if mask is not None and mask.shape != image.shape:
        raise DataError(f"mask shape {mask.shape} != image shape {image.shape}")
    out_prefix = Path(out_prefix)
    if out_prefix.parent != Path("") and not out_prefix.parent.exists():
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for axis in range(3):
        mip = image.data.max(axis=axis).astype(np.float64)
        span = mip.max() - mip.min()
        gray = (mip - mip.min()) / span if span > 0 else np.zeros_like(mip)
        rgb = np.stack([gray, gray, gray], axis=-1)
        if mask is not None:
            overlay = mask.data.max(axis=axis) > 0
            rgb[overlay] = [1.0, 0.15, 0.15]
        path = out_prefix.parent / f"{out_prefix.name}_mip_axis{axis}.png"
        imsave(path, rgb)
        paths.append(path)
    return paths
