import json

import numpy as np
import pytest

from jobvs import (
    CohortStats,
    DataError,
    LabelVolume,
    SubjectRecord,
    Volume,
    compute_cohort_stats,
    load_label,
    load_volume,
    normalize,
    resample_to_spacing,
    save_volume,
)
from jobvs.volume import _zscore


def _random_volume(rng, shape=(8, 8, 8), spacing=(0.5, 0.5, 0.5)):
    return Volume(data=rng.normal(size=shape).astype(np.float32), spacing=spacing)


def test_volume_invariants():
    with pytest.raises(DataError):
        Volume(data=np.zeros((4, 4)), spacing=(1, 1, 1))
    with pytest.raises(DataError):
        Volume(data=np.zeros((4, 4, 4)), spacing=(1, 0, 1))
    with pytest.raises(DataError):
        Volume(data=np.full((2, 2, 2), np.nan), spacing=(1, 1, 1))
    vol = Volume(data=np.zeros((2, 2, 2)), spacing=(1, 1, 1))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 3.0  # read-only


def test_label_volume_binary():
    with pytest.raises(DataError):
        LabelVolume(data=np.full((2, 2, 2), 2), spacing=(1, 1, 1))
    lab = LabelVolume(data=np.eye(3)[None].repeat(3, axis=0), spacing=(1, 1, 1))
    assert lab.data.dtype == np.uint8


def test_subject_record_shape_check(rng):
    img = _random_volume(rng)
    lab = LabelVolume(data=np.zeros((4, 4, 4), dtype=np.uint8), spacing=img.spacing)
    with pytest.raises(DataError):
        SubjectRecord(id="s", image=img, brain=lab, vessel=lab)


@pytest.mark.parametrize("suffix", [".nii.gz", ".nii", ".raw"])
def test_save_load_roundtrip(tmp_path, rng, suffix):
    vol = _random_volume(rng, spacing=(0.3, 0.3, 0.6))
    path = tmp_path / f"vol{suffix}"
    save_volume(vol, path)
    back = load_volume(path)
    assert np.array_equal(back.data, vol.data)  # bit-exact
    assert np.allclose(back.spacing, (0.3, 0.3, 0.6), atol=1e-6)


def test_roundtrip_label_and_origin(tmp_path):
    lab = LabelVolume(
        data=(np.arange(27).reshape(3, 3, 3) % 2).astype(np.uint8),
        spacing=(1.0, 2.0, 3.0),
        origin=(-4.0, 5.5, 0.25),
    )
    path = tmp_path / "lab.nii.gz"
    save_volume(lab, path)
    back = load_label(path)
    assert np.array_equal(back.data, lab.data)
    assert np.allclose(back.origin, lab.origin, atol=1e-5)


def test_load_errors(tmp_path, rng):
    with pytest.raises(DataError):
        load_volume(tmp_path / "missing.nii.gz")
    with pytest.raises(DataError):
        load_volume(tmp_path / "bad.xyz")
    # malformed header
    path = tmp_path / "garbage.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(DataError):
        load_volume(path)
    # 2D payload via the raw format
    raw = tmp_path / "flat.raw"
    raw.write_bytes(np.zeros(16, dtype="<f4").tobytes())
    (tmp_path / "flat.json").write_text(json.dumps({"shape": [4, 4], "spacing": [1, 1, 1], "origin": [0, 0, 0]}))
    with pytest.raises(DataError):
        load_volume(raw)


def test_load_rejects_zero_spacing(tmp_path, rng):
    vol = _random_volume(rng)
    path = tmp_path / "zero.nii"
    save_volume(vol, path)
    blob = bytearray(path.read_bytes())
    import struct

    struct.pack_into("<8f", blob, 76, 1.0, 0.0, 0.5, 0.5, 0, 0, 0, 0)
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_volume(path)


def test_save_to_missing_directory(tmp_path, rng):
    with pytest.raises(DataError):
        save_volume(_random_volume(rng), tmp_path / "nope" / "vol.nii.gz")


def test_resample_shapes_and_identity(rng):
    vol = Volume(data=rng.normal(size=(10, 10, 10)).astype(np.float32), spacing=(0.6, 0.6, 0.6))
    out = resample_to_spacing(vol, (0.3, 0.3, 0.3))
    assert out.shape == (20, 20, 20)
    ident = resample_to_spacing(vol, vol.spacing)
    assert np.array_equal(ident.data, vol.data)
    assert ident.spacing == vol.spacing


def test_resample_constant_and_labels(rng):
    const = Volume(data=np.full((6, 6, 6), 3.25, dtype=np.float32), spacing=(1, 1, 1))
    out = resample_to_spacing(const, (0.7, 1.3, 0.4))
    assert np.allclose(out.data, 3.25, atol=1e-6)
    lab = LabelVolume(data=(rng.random((6, 6, 6)) > 0.5).astype(np.uint8), spacing=(1, 1, 1))
    out = resample_to_spacing(lab, (0.55, 0.8, 1.9))
    assert set(np.unique(out.data)) <= {0, 1}


def test_resample_extent_bound(rng):
    for _ in range(25):
        shape = tuple(int(v) for v in rng.integers(3, 12, size=3))
        spacing = tuple(float(v) for v in rng.uniform(0.2, 2.0, size=3))
        target = tuple(float(v) for v in rng.uniform(0.2, 2.0, size=3))
        vol = Volume(data=rng.normal(size=shape).astype(np.float32), spacing=spacing)
        out = resample_to_spacing(vol, target)
        for n_out, t, n_in, s in zip(out.shape, target, shape, spacing):
            assert abs(n_out * t - n_in * s) <= max(t, s) + 1e-9


def _stats_for(records):
    return compute_cohort_stats(records)


def test_cohort_stats_median_spacing(rng):
    def rec(spacing, idx):
        img = Volume(data=rng.normal(size=(5, 5, 5)).astype(np.float32), spacing=spacing)
        ves = np.zeros((5, 5, 5), dtype=np.uint8)
        ves[2, 2, :] = 1
        brain = np.ones((5, 5, 5), dtype=np.uint8)
        return SubjectRecord(
            id=f"s{idx}",
            image=img,
            brain=LabelVolume(data=brain, spacing=spacing),
            vessel=LabelVolume(data=ves, spacing=spacing),
        )

    records = [rec((0.3, 0.3, 0.6), 0), rec((0.3, 0.3, 0.5), 1), rec((0.4, 0.4, 0.6), 2)]
    stats = _stats_for(records)
    assert stats.median_spacing == (0.3, 0.3, 0.6)
    single = _stats_for([records[1]])
    assert single.median_spacing == (0.3, 0.3, 0.5)


def test_cohort_stats_percentiles_uniform(rng):
    # vessel intensities uniform after z-score: percentile oracle is the pooled array
    n = 40
    data = rng.uniform(0.0, 1.0, size=(n, n, n)).astype(np.float32)
    vessel = np.ones((n, n, n), dtype=np.uint8)
    brain = np.ones_like(vessel)
    record = SubjectRecord(
        id="u",
        image=Volume(data=data, spacing=(1, 1, 1)),
        brain=LabelVolume(data=brain, spacing=(1, 1, 1)),
        vessel=LabelVolume(data=vessel, spacing=(1, 1, 1)),
    )
    stats = _stats_for([record])
    pooled = _zscore(record.image.data).ravel()
    lo, hi = np.percentile(pooled, [0.5, 99.5])
    assert stats.vessel_clip_lo == pytest.approx(float(lo), abs=1e-12)
    assert stats.vessel_clip_hi == pytest.approx(float(hi), abs=1e-12)
    # uniform [0,1] maps to z-scores; invert to check ~0.005 / ~0.995 quantiles
    mean, std = data.mean(), data.std()
    assert lo * std + mean == pytest.approx(0.005, abs=0.005)
    assert hi * std + mean == pytest.approx(0.995, abs=0.005)


def test_cohort_stats_errors(small_cohort):
    with pytest.raises(DataError):
        compute_cohort_stats([])
    rec = small_cohort[0]
    no_vessel = SubjectRecord(
        id="nv",
        image=rec.image,
        brain=rec.brain,
        vessel=LabelVolume(data=np.zeros_like(rec.vessel.data), spacing=rec.vessel.spacing),
    )
    with pytest.raises(DataError):
        compute_cohort_stats([no_vessel])


def test_normalize_pipeline(small_cohort):
    stats = compute_cohort_stats(list(small_cohort))
    rec = small_cohort[0]
    z = _zscore(rec.image.data)
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1.0) < 1e-6
    clipped = np.clip(z, stats.vessel_clip_lo, stats.vessel_clip_hi)
    assert clipped.max() <= stats.vessel_clip_hi + 1e-12
    out = normalize(rec.image, stats)
    expected = (clipped - stats.global_mean) / stats.global_std
    assert np.allclose(out.data, expected.astype(np.float32), atol=1e-6)
    # determinism: bit-identical on repeat
    again = normalize(rec.image, stats)
    assert np.array_equal(out.data, again.data)


def test_normalize_rejects_constant():
    stats = CohortStats(median_spacing=(1, 1, 1), vessel_clip_lo=-1, vessel_clip_hi=1, global_mean=0, global_std=1)
    const = Volume(data=np.zeros((3, 3, 3)), spacing=(1, 1, 1))
    with pytest.raises(DataError):
        normalize(const, stats)


def test_cohort_stats_json_roundtrip(small_cohort):
    stats = compute_cohort_stats(list(small_cohort))
    back = CohortStats.from_json(stats.to_json())
    assert back == stats


def test_cohort_stats_parallel_matches_serial(small_cohort, monkeypatch):
    # per-subject reduction accumulates in subject order regardless of workers
    monkeypatch.setenv("JOBVS_NUM_WORKERS", "4")
    parallel = compute_cohort_stats(list(small_cohort), workers=4)
    monkeypatch.delenv("JOBVS_NUM_WORKERS")
    serial = compute_cohort_stats(list(small_cohort))
    assert parallel == serial
