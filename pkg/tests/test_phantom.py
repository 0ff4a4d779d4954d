import numpy as np
import pytest
from scipy.ndimage import label

from jobvs import DataError, PhantomConfig, generate_cohort, generate_phantom, load_cohort, save_cohort
from jobvs.metrics import dsc


def test_config_validation():
    with pytest.raises(DataError):
        PhantomConfig(size=16)
    with pytest.raises(DataError):
        PhantomConfig(skull_intensity=0.5, vessel_intensity=0.95)  # confound must exist
    with pytest.raises(DataError):
        PhantomConfig(vessel_radius_range=(0.4, 2.0))


def test_determinism(small_cfg):
    a = generate_phantom(small_cfg, 3)
    b = generate_phantom(small_cfg, 3)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.brain.data, b.brain.data)
    assert np.array_equal(a.vessel.data, b.vessel.data)
    assert a.id == b.id


def test_vessels_inside_brain(small_cohort):
    for rec in small_cohort:
        outside = rec.vessel.data.astype(bool) & ~rec.brain.data.astype(bool)
        assert not outside.any()


def test_brain_single_component_and_skull_disjoint(small_cfg):
    rec = generate_phantom(small_cfg, 0)
    _, n = label(rec.brain.data, structure=np.ones((3, 3, 3)))
    assert n == 1
    # skull voxels: bright shell outside the brain
    skull = (rec.image.data > 0.7) & ~rec.brain.data.astype(bool)
    assert skull.any()
    assert not (skull & rec.brain.data.astype(bool)).any()


def test_skull_vessel_confound():
    cfg = PhantomConfig(noise_std=0.0)
    rec = generate_phantom(cfg, 0)
    vessel = rec.vessel.data.astype(bool)
    brain = rec.brain.data.astype(bool)
    skull = (rec.image.data > 0.7) & ~brain
    mean_vessel = rec.image.data[vessel].mean()
    mean_skull = rec.image.data[skull].mean()
    assert abs(mean_skull - mean_vessel) <= 0.10 * mean_vessel


def test_cohort_contract(small_cfg):
    with pytest.raises(DataError):
        generate_cohort(small_cfg, 0)
    cohort = generate_cohort(small_cfg, 10)
    assert len(cohort) == 10
    assert len({rec.id for rec in cohort}) == 10
    for rec in cohort:
        frac = rec.vessel.data.sum() / rec.brain.data.sum()
        assert 0.001 <= frac <= 0.05
    # distinct seeds give distinct trees
    other = generate_phantom(PhantomConfig(**{**small_cfg.to_dict(), "seed": small_cfg.seed + 1}), 0)
    d = dsc(cohort[0].vessel.data, other.vessel.data)
    assert d < 0.9


def test_default_scale_vessel_fraction():
    cohort = generate_cohort(PhantomConfig(), 3)
    for rec in cohort:
        frac = rec.vessel.data.sum() / rec.brain.data.sum()
        assert 0.001 <= frac <= 0.05


def test_save_load_cohort(tmp_path, small_cfg, small_cohort):
    manifest = save_cohort(list(small_cohort), tmp_path / "cohort", small_cfg)
    assert manifest.exists()
    for rec in small_cohort:
        for suffix in ("image", "brain", "vessel"):
            assert (tmp_path / "cohort" / f"{rec.id}_{suffix}.nii.gz").exists()
    back = load_cohort(tmp_path / "cohort")
    assert [r.id for r in back] == [r.id for r in small_cohort]
    for a, b in zip(back, small_cohort):
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.vessel.data, b.vessel.data)
        assert np.allclose(a.image.spacing, (small_cfg.spacing,) * 3, atol=1e-6)
