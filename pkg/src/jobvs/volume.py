"""Volume containers, NIfTI-1 / raw file I/O, cohort statistics, and preprocessing.

The intensity pipeline follows the TOF-MRA recipe: resample every volume to the
training cohort's median voxel spacing, z-score each image, clip to the
[0.5, 99.5] percentiles of the pooled vessel-voxel intensities, then re-standardize
with the cohort-wide mean/std.
"""

from __future__ import annotations

import gzip
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DataError
from .utils import num_workers

Triple = tuple[float, float, float]


def _as_triple(values) -> Triple:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise DataError(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with per-axis voxel spacing (mm) and physical origin (mm).

    Immutable after construction; the data array is marked read-only so records
    can be shared across workers. Intensities are stored as float32.
    """

    data: np.ndarray
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DataError(f"volume payload must be 3D, got {data.ndim}D")
        if min(data.shape) < 1:
            raise DataError(f"every axis must have length >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        spacing = _as_triple(self.spacing)
        if min(spacing) <= 0:
            raise DataError(f"spacing must be positive, got {spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelVolume:
    """Binary 3D grid ({0,1}, uint8) sharing the grid conventions of Volume."""

    data: np.ndarray
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError(f"label payload must be 3D, got {data.ndim}D")
        if min(data.shape) < 1:
            raise DataError(f"every axis must have length >= 1, got {data.shape}")
        if not np.all(np.isin(data, (0, 1))):
            raise DataError("label volume must be strictly binary")
        data = data.astype(np.uint8)
        spacing = _as_triple(self.spacing)
        if min(spacing) <= 0:
            raise DataError(f"spacing must be positive, got {spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class SubjectRecord:
    """One annotated subject: image plus brain and vessel label volumes."""

    id: str
    image: Volume
    brain: LabelVolume
    vessel: LabelVolume

    def __post_init__(self):
        for name, lab in (("brain", self.brain), ("vessel", self.vessel)):
            if lab.shape != self.image.shape:
                raise DataError(f"{name} label shape {lab.shape} != image shape {self.image.shape}")
            if not np.allclose(lab.spacing, self.image.spacing):
                raise DataError(f"{name} label spacing {lab.spacing} != image spacing {self.image.spacing}")


@dataclass(frozen=True)
class CohortStats:
    """Training-cohort statistics driving resampling and intensity normalization."""

    median_spacing: Triple
    vessel_clip_lo: float
    vessel_clip_hi: float
    global_mean: float
    global_std: float

    def __post_init__(self):
        object.__setattr__(self, "median_spacing", _as_triple(self.median_spacing))
        if not self.vessel_clip_lo < self.vessel_clip_hi:
            raise DataError("vessel_clip_lo must be < vessel_clip_hi")
        if not self.global_std > 0:
            raise DataError("global_std must be > 0")

    def to_json(self) -> str:
        return json.dumps(
            {
                "median_spacing": list(self.median_spacing),
                "vessel_clip_lo": self.vessel_clip_lo,
                "vessel_clip_hi": self.vessel_clip_hi,
                "global_mean": self.global_mean,
                "global_std": self.global_std,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CohortStats":
        d = json.loads(text)
        return cls(
            median_spacing=tuple(d["median_spacing"]),
            vessel_clip_lo=float(d["vessel_clip_lo"]),
            vessel_clip_hi=float(d["vessel_clip_hi"]),
            global_mean=float(d["global_mean"]),
            global_std=float(d["global_std"]),
        )


# ---------------------------------------------------------------------------
# NIfTI-1 I/O (minimal: 3D, little/big endian, scl slope/inter, sform/qform origin)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}


def _open_maybe_gzip(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _read_nifti(path: Path) -> tuple[np.ndarray, Triple, Triple]:
    with _open_maybe_gzip(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise DataError(f"{path}: truncated NIfTI file")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise DataError(f"{path}: malformed NIfTI header (sizeof_hdr={sizeof_hdr})")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3:
        raise DataError(f"{path}: payload is {ndim}D, need 3D")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise DataError(f"{path}: payload has {ndim} non-singleton dimensions, need 3D")
    shape = tuple(int(d) for d in dim[1:4])
    (datatype, bitpix) = struct.unpack_from(endian + "2h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise DataError(f"{path}: non-positive voxel spacing {spacing}")
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    slope, inter = struct.unpack_from(endian + "2f", blob, 112)
    qform_code, sform_code = struct.unpack_from(endian + "2h", blob, 252)
    if sform_code > 0:
        srow = struct.unpack_from(endian + "12f", blob, 280)
        origin = (float(srow[3]), float(srow[7]), float(srow[11]))
    elif qform_code > 0:
        q = struct.unpack_from(endian + "3f", blob, 268)
        origin = (float(q[0]), float(q[1]), float(q[2]))
    else:
        origin = (0.0, 0.0, 0.0)

    offset = int(vox_offset) if vox_offset else 352
    count = int(np.prod(shape))
    payload = blob[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise DataError(f"{path}: data payload shorter than header promises")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        s = slope if slope != 0.0 else 1.0
        data = data.astype(np.float64) * s + inter
    return np.ascontiguousarray(data), spacing, origin


def _write_nifti(path: Path, data: np.ndarray, spacing: Triple, origin: Triple) -> None:
    if data.dtype == np.uint8:
        datatype, bitpix = 2, 8
    else:
        data = np.asarray(data, dtype=np.float32)
        datatype, bitpix = 16, 32
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 2)  # spatial units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on (RAS diagonal)
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # no header extensions
        fh.write(np.asfortranarray(data).tobytes(order="F"))


# ---------------------------------------------------------------------------
# Raw + JSON sidecar format (test convenience)
# ---------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_raw(path: Path) -> tuple[np.ndarray, Triple, Triple]:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise DataError(f"missing JSON sidecar for {path}")
    meta = json.loads(sidecar.read_text())
    shape = tuple(int(v) for v in meta["shape"])
    if len(shape) != 3:
        raise DataError(f"{path}: sidecar shape {shape} is not 3D")
    payload = path.read_bytes()
    count = int(np.prod(shape))
    if len(payload) != count * 4:
        raise DataError(f"{path}: raw payload size {len(payload)} != {count * 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return data.copy(), _as_triple(meta["spacing"]), _as_triple(meta["origin"])


def _write_raw(path: Path, data: np.ndarray, spacing: Triple, origin: Triple) -> None:
    path.write_bytes(np.asarray(data, dtype="<f4").tobytes(order="C"))
    _sidecar_path(path).write_text(
        json.dumps({"shape": list(data.shape), "spacing": list(spacing), "origin": list(origin)})
    )


def _dispatch_suffix(path: Path) -> str:
    name = path.name
    if name.endswith(".nii.gz") or name.endswith(".nii"):
        return "nifti"
    if name.endswith(".raw"):
        return "raw"
    raise DataError(f"unsupported volume format: {path} (use .nii, .nii.gz or .raw)")


def load_volume(path) -> Volume:
    """Read a Volume from .nii/.nii.gz or .raw (+JSON sidecar)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    kind = _dispatch_suffix(path)
    data, spacing, origin = _read_nifti(path) if kind == "nifti" else _read_raw(path)
    return Volume(data=data, spacing=spacing, origin=origin)


def load_label(path) -> LabelVolume:
    """Read a LabelVolume; values must already be binary."""
    vol = load_volume(path)
    return LabelVolume(data=vol.data.astype(np.uint8), spacing=vol.spacing, origin=vol.origin)


def save_volume(vol: Volume | LabelVolume, path) -> None:
    """Write a volume; format chosen by suffix. Round-trips data bit-exactly."""
    path = Path(path)
    if not path.parent.exists():
        raise DataError(f"output directory does not exist: {path.parent}")
    kind = _dispatch_suffix(path)
    data = vol.data if isinstance(vol, LabelVolume) else vol.data.astype(np.float32)
    if kind == "nifti":
        _write_nifti(path, data, vol.spacing, vol.origin)
    else:
        _write_raw(path, data.astype(np.float32), vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def resample_to_spacing(vol: Volume | LabelVolume, target) -> Volume | LabelVolume:
    """Resample to a new voxel spacing.

    Output shape per axis is round(n * spacing / target), floored at 1. Images are
    interpolated trilinearly, labels nearest-neighbor; voxel (0,0,0) keeps its
    physical position, so the origin is unchanged.
    """
    target = _as_triple(target)
    if min(target) <= 0:
        raise DataError(f"target spacing must be positive, got {target}")
    in_shape = vol.shape
    out_shape = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(in_shape, vol.spacing, target)
    )
    if out_shape == in_shape and all(t == s for t, s in zip(target, vol.spacing)):
        return type(vol)(data=vol.data, spacing=target, origin=vol.origin)

    axes = [np.arange(m, dtype=np.float64) * t / s for m, t, s in zip(out_shape, target, vol.spacing)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    if isinstance(vol, LabelVolume):
        out = map_coordinates(vol.data, coords, order=0, mode="nearest").reshape(out_shape)
        return LabelVolume(data=out.astype(np.uint8), spacing=target, origin=vol.origin)
    out = map_coordinates(vol.data.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(data=out.reshape(out_shape).astype(np.float32), spacing=target, origin=vol.origin)


def resample_grid_to_shape(data: np.ndarray, from_spacing, to_shape, to_spacing) -> np.ndarray:
    """Trilinearly resample a scalar grid onto an explicit target grid (shape +
    spacing), holding the physical position of voxel (0,0,0) fixed. Used to map
    probability volumes back to the original image grid."""
    from_spacing = _as_triple(from_spacing)
    to_spacing = _as_triple(to_spacing)
    axes = [
        np.arange(m, dtype=np.float64) * t / s
        for m, t, s in zip(to_shape, to_spacing, from_spacing)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    out = map_coordinates(np.asarray(data, dtype=np.float64), coords, order=1, mode="nearest")
    return out.reshape(tuple(to_shape))


def resample_record(rec: SubjectRecord, target) -> SubjectRecord:
    """Resample image (trilinear) and both labels (nearest) to a common spacing."""
    return SubjectRecord(
        id=rec.id,
        image=resample_to_spacing(rec.image, target),
        brain=resample_to_spacing(rec.brain, target),
        vessel=resample_to_spacing(rec.vessel, target),
    )


def _zscore(data: np.ndarray) -> np.ndarray:
    x = data.astype(np.float64)
    std = float(x.std())
    if std == 0.0:
        raise DataError("constant image: per-image std is zero")
    return (x - float(x.mean())) / std


def normalize(vol: Volume, stats: CohortStats) -> Volume:
    """Per-image z-score, clip to the cohort vessel percentiles, global z-score."""
    z = _zscore(vol.data)
    z = np.clip(z, stats.vessel_clip_lo, stats.vessel_clip_hi)
    out = (z - stats.global_mean) / stats.global_std
    return Volume(data=out.astype(np.float32), spacing=vol.spacing, origin=vol.origin)


def _subject_stats(rec: SubjectRecord) -> tuple[Triple, np.ndarray, int, float, float]:
    z = _zscore(rec.image.data)
    vessel_vals = z[rec.vessel.data > 0]
    return rec.image.spacing, vessel_vals, z.size, float(z.sum()), float(np.square(z).sum())


def compute_cohort_stats(train_set: list[SubjectRecord], workers: int | None = None) -> CohortStats:
    """Pool training-cohort statistics: median spacing, vessel-intensity clip
    percentiles (on the per-image z-scored scale), and global mean/std.
    """
    if not train_set:
        raise DataError("cannot compute cohort statistics for an empty cohort")
    n_workers = num_workers(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            per_subject = list(pool.map(_subject_stats, train_set))
    else:
        per_subject = [_subject_stats(rec) for rec in train_set]

    spacings = np.array([s for s, *_ in per_subject], dtype=np.float64)
    median_spacing = tuple(float(v) for v in np.median(spacings, axis=0))
    pooled = np.concatenate([v for _, v, *_ in per_subject]) if per_subject else np.empty(0)
    if pooled.size == 0:
        raise DataError("cohort has no vessel-labeled voxels")
    clip_lo, clip_hi = np.percentile(pooled, [0.5, 99.5])
    n = sum(s[2] for s in per_subject)
    s1 = sum(s[3] for s in per_subject)
    s2 = sum(s[4] for s in per_subject)
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    return CohortStats(
        median_spacing=median_spacing,
        vessel_clip_lo=float(clip_lo),
        vessel_clip_hi=float(clip_hi),
        global_mean=float(mean),
        global_std=float(np.sqrt(var)),
    )
