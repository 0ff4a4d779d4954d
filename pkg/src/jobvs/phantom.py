"""Synthetic TOF-MRA-like phantoms: ellipsoidal brain, bright skull shell, and a
branching vessel tree confined to the brain interior.

The skull intensity is deliberately close to the vessel intensity so that a
whole-volume segmenter cannot separate vessels by thresholding alone; it must
learn where the brain is. That is the failure mode these phantoms exercise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .errors import DataError
from .volume import LabelVolume, SubjectRecord, Volume, load_label, load_volume, save_volume


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    spacing: float = 0.5
    brain_axes: tuple[float, float, float] = (0.38, 0.35, 0.32)
    skull_gap: int = 1
    skull_thickness: int = 2
    n_vessel_roots: int = 3
    branch_depth: int = 3
    vessel_radius_range: tuple[float, float] = (1.0, 2.0)
    background_intensity: float = 0.05
    brain_intensity: float = 0.35
    skull_intensity: float = 0.90
    vessel_intensity: float = 0.95
    # fraction of vessel voxels with flow-saturation signal loss (dim, like real
    # TOF in-plane saturation); anchors the low vessel-intensity percentile so the
    # cohort clip window spans the full dynamic range
    flow_void_fraction: float = 0.03
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise DataError(f"phantom size must be >= 32, got {self.size}")
        if self.spacing <= 0:
            raise DataError("spacing must be positive")
        if abs(self.skull_intensity - self.vessel_intensity) > 0.10 * abs(self.vessel_intensity):
            raise DataError("skull intensity must lie within 10% of vessel intensity")
        lo, hi = self.vessel_radius_range
        if not 1.0 <= lo <= hi:
            raise DataError(f"vessel radii must satisfy 1 <= lo <= hi, got {self.vessel_radius_range}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if not 0.0 <= self.flow_void_fraction < 1.0:
            raise DataError("flow_void_fraction must be in [0, 1)")
        if self.n_vessel_roots < 1 or self.branch_depth < 0:
            raise DataError("need at least one vessel root and branch_depth >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("brain_axes", "vessel_radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


def _random_perpendicular(direction: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        p = v - np.dot(v, direction) * direction
        if np.linalg.norm(p) > 1e-6:
            return _unit(p)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues rotation of v around a unit axis
    return (
        v * np.cos(angle)
        + np.cross(axis, v) * np.sin(angle)
        + axis * np.dot(axis, v) * (1 - np.cos(angle))
    )


def _stamp_capsule(mask: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> None:
    """Set voxels within `radius` of segment ab (capsule) on a bounding-box window."""
    size = mask.shape
    lo = np.maximum(np.floor(np.minimum(a, b) - radius - 1).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(a, b) + radius + 1).astype(int) + 1, size)
    if np.any(lo >= hi):
        return
    grids = np.meshgrid(*[np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)], indexing="ij")
    pts = np.stack(grids, axis=-1)
    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom == 0.0:
        dist2 = np.sum((pts - a) ** 2, axis=-1)
    else:
        t = np.clip(np.einsum("...k,k->...", pts - a, ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        dist2 = np.sum((pts - closest) ** 2, axis=-1)
    window = mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    window |= dist2 <= radius * radius


def _grow_tree(
    tubes: np.ndarray,
    pos: np.ndarray,
    direction: np.ndarray,
    radius: float,
    length: float,
    depth_left: int,
    cfg: PhantomConfig,
    rng: np.random.Generator,
) -> None:
    end = pos + direction * length
    mid = (pos + end) / 2 + _random_perpendicular(direction, rng) * length * rng.uniform(0.0, 0.2)
    _stamp_capsule(tubes, pos, mid, radius)
    _stamp_capsule(tubes, mid, end, radius)
    if depth_left == 0:
        return
    r_child = max(radius * 0.7, cfg.vessel_radius_range[0])
    for sign in (1.0, -1.0):
        axis = _random_perpendicular(direction, rng)
        angle = sign * rng.uniform(np.deg2rad(25), np.deg2rad(50))
        child_dir = _unit(_rotate(direction, axis, angle))
        _grow_tree(tubes, end, child_dir, r_child, length * 0.75, depth_left - 1, cfg, rng)


def generate_phantom(cfg: PhantomConfig, subject_index: int) -> SubjectRecord:
    """Deterministically synthesize one subject from (cfg.seed, subject_index)."""
    rng = np.random.default_rng([cfg.seed, subject_index])
    n = cfg.size
    center = n / 2.0 + rng.uniform(-0.02, 0.02, size=3) * n
    semi = np.array(cfg.brain_axes) * n * (1.0 + rng.uniform(-0.05, 0.05, size=3))

    ax = [np.arange(n, dtype=np.float64) for _ in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    rho2 = (
        ((gx - center[0]) / semi[0]) ** 2
        + ((gy - center[1]) / semi[1]) ** 2
        + ((gz - center[2]) / semi[2]) ** 2
    )
    brain = rho2 <= 1.0

    inner = binary_dilation(brain, iterations=cfg.skull_gap) if cfg.skull_gap else brain
    outer = binary_dilation(inner, iterations=cfg.skull_thickness)
    skull = outer & ~inner

    tubes = np.zeros_like(brain)
    interior = rho2 <= 0.35
    interior_idx = np.argwhere(interior)
    for _ in range(cfg.n_vessel_roots):
        root = interior_idx[rng.integers(len(interior_idx))].astype(np.float64)
        direction = _unit(rng.normal(size=3))
        length = n * 0.2 * (1.0 + rng.uniform(-0.2, 0.2))
        _grow_tree(tubes, root, direction, cfg.vessel_radius_range[1], length, cfg.branch_depth, cfg, rng)
    vessel = tubes & binary_erosion(brain, iterations=1)

    img = np.full((n, n, n), cfg.background_intensity, dtype=np.float64)
    img[brain] = cfg.brain_intensity
    img[skull] = cfg.skull_intensity
    img[vessel] = cfg.vessel_intensity
    if cfg.flow_void_fraction > 0:
        vox = np.argwhere(vessel)
        k = int(round(cfg.flow_void_fraction * len(vox)))
        if k:
            picked = vox[rng.choice(len(vox), size=k, replace=False)]
            img[picked[:, 0], picked[:, 1], picked[:, 2]] = rng.uniform(
                0.02, 0.3 * cfg.vessel_intensity, size=k
            )
    if cfg.noise_std > 0:
        img += rng.normal(0.0, cfg.noise_std, size=img.shape)

    spacing = (cfg.spacing,) * 3
    return SubjectRecord(
        id=f"phantom_{subject_index:03d}",
        image=Volume(data=img.astype(np.float32), spacing=spacing),
        brain=LabelVolume(data=brain.astype(np.uint8), spacing=spacing),
        vessel=LabelVolume(data=vessel.astype(np.uint8), spacing=spacing),
    )


def generate_cohort(cfg: PhantomConfig, n: int) -> list[SubjectRecord]:
    """n phantoms with subject indices 0..n-1 (pairwise distinct vessel trees)."""
    if n < 1:
        raise DataError(f"cohort size must be >= 1, got {n}")
    return [generate_phantom(cfg, i) for i in range(n)]


def save_cohort(records: list[SubjectRecord], outdir, cfg: PhantomConfig | None = None) -> Path:
    """Write <id>_image/_brain/_vessel volumes plus a cohort.json manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        save_volume(rec.image, outdir / f"{rec.id}_image.nii.gz")
        save_volume(rec.brain, outdir / f"{rec.id}_brain.nii.gz")
        save_volume(rec.vessel, outdir / f"{rec.id}_vessel.nii.gz")
    manifest = {
        "ids": [rec.id for rec in records],
        "config": cfg.to_dict() if cfg is not None else None,
    }
    path = outdir / "cohort.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_cohort(cohort_dir) -> list[SubjectRecord]:
    """Read a cohort written by save_cohort back into memory."""
    cohort_dir = Path(cohort_dir)
    manifest_path = cohort_dir / "cohort.json"
    if not manifest_path.exists():
        raise DataError(f"no cohort.json manifest in {cohort_dir}")
    manifest = json.loads(manifest_path.read_text())
    records = []
    for sid in manifest["ids"]:
        records.append(
            SubjectRecord(
                id=sid,
                image=load_volume(cohort_dir / f"{sid}_image.nii.gz"),
                brain=load_label(cohort_dir / f"{sid}_brain.nii.gz"),
                vessel=load_label(cohort_dir / f"{sid}_vessel.nii.gz"),
            )
        )
    return records
