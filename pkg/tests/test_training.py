import json
import math

import numpy as np
import pytest
import torch

from jobvs import (
    ATConfig,
    DataError,
    LatticeConfig,
    TrainConfig,
    augment,
    lr_schedule,
    make_folds,
    param_checksum,
    preprocess_record,
    sample_patch,
    train,
)
from jobvs.volume import LabelVolume, SubjectRecord, Volume, compute_cohort_stats

TINY_TRAIN = dict(
    lattice=LatticeConfig(base_channels=4, n_levels=3, patch_size=(16, 16, 16)),
    max_epochs=3,
    steps_per_epoch=4,
    seed=5,
    num_threads=1,
)


def test_train_config_defaults_match_stated_hyperparameters():
    cfg = TrainConfig()
    assert cfg.lr0 == 5e-4
    assert cfg.weight_decay == 1e-5
    assert cfg.batch_size == 1
    assert cfg.max_epochs == 1000
    assert cfg.loss_weights.alpha == 1.0 and cfg.loss_weights.beta == 1.0
    assert cfg.at.epsilon == pytest.approx(8 / 255)
    assert cfg.at.n_replays == 5
    assert cfg.lattice.lattice_length == 2


def test_train_config_validation():
    with pytest.raises(DataError):
        TrainConfig(batch_size=0)
    with pytest.raises(DataError):
        TrainConfig(lr0=1e-7, lr_floor=1e-6)


def test_train_config_json_roundtrip():
    cfg = TrainConfig(**TINY_TRAIN, at=ATConfig(enabled=True, epsilon=0.01))
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_lr_schedule():
    cfg = TrainConfig(max_epochs=100)
    assert lr_schedule(0, cfg) == 5e-4
    assert lr_schedule(100, cfg) == 0.0
    values = [lr_schedule(e, cfg) for e in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert lr_schedule(50, cfg) == pytest.approx(5e-4 * 0.5**0.9)


def test_make_folds_sizes_and_coverage():
    ids = [f"s{i:02d}" for i in range(57)]
    folds = make_folds(ids, k=2, seed=0)
    sizes = sorted(len(f.test_ids) for f in folds)
    assert sizes == [28, 29]
    ten = make_folds([f"p{i}" for i in range(10)], k=2, seed=1)
    assert sorted(len(f.test_ids) for f in ten) == [5, 5]
    seen = [sid for f in ten for sid in f.test_ids]
    assert sorted(seen) == sorted(f"p{i}" for i in range(10))
    for f in ten:
        assert not set(f.train_ids) & set(f.test_ids)
        assert sorted(set(f.train_ids) | set(f.test_ids)) == sorted(f"p{i}" for i in range(10))


def test_make_folds_too_small():
    with pytest.raises(DataError):
        make_folds(["a"], k=2)


def test_sample_patch_fg_bias_one(small_cohort, rng):
    rec = small_cohort[0]
    for _ in range(20):
        _, _, vessel = sample_patch(rec, 12, fg_bias=1.0, rng=rng)
        assert vessel.sum() >= 1


def test_sample_patch_determinism(small_cohort):
    rec = small_cohort[0]
    a = sample_patch(rec, 12, 0.5, np.random.default_rng(42))
    b = sample_patch(rec, 12, 0.5, np.random.default_rng(42))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_sample_patch_pads_small_volumes(rng):
    img = Volume(data=rng.normal(size=(5, 5, 5)).astype(np.float32), spacing=(1, 1, 1))
    lab = LabelVolume(data=np.zeros((5, 5, 5), dtype=np.uint8), spacing=(1, 1, 1))
    rec = SubjectRecord(id="tiny", image=img, brain=lab, vessel=lab)
    patch = sample_patch(rec, 8, 0.0, rng)
    assert patch[0].shape == (8, 8, 8)


def test_sample_patch_coverage_oracle(rng):
    # fg_bias=0: empirical vessel-containing rate matches exact enumeration of centers
    n, p = 16, 8
    vessel = np.zeros((n, n, n), dtype=np.uint8)
    vessel[2:4, 9:11, 5:6] = 1
    img = Volume(data=rng.normal(size=(n, n, n)).astype(np.float32), spacing=(1, 1, 1))
    lab = LabelVolume(data=vessel, spacing=(1, 1, 1))
    rec = SubjectRecord(id="cov", image=img, brain=lab, vessel=lab)

    hits = 0
    total = 0
    for cx in range(n):
        for cy in range(n):
            for cz in range(n):
                start = np.clip(np.array([cx, cy, cz]) - p // 2, 0, n - p)
                window = vessel[start[0]:start[0] + p, start[1]:start[1] + p, start[2]:start[2] + p]
                hits += bool(window.any())
                total += 1
    exact = hits / total

    draws = 1000
    got = 0
    for _ in range(draws):
        _, _, v = sample_patch(rec, p, 0.0, rng)
        got += bool(v.any())
    phat = got / draws
    sigma = math.sqrt(exact * (1 - exact) / draws)
    assert abs(phat - exact) <= 3 * sigma + 1e-9


def test_augment_identity_when_disabled(small_cohort, rng):
    rec = small_cohort[0]
    triple = sample_patch(rec, 12, 1.0, rng)
    out = augment(triple, rng, flip_p=0.0, rot_p=0.0, scale_p=0.0, gamma_p=0.0)
    for a, b in zip(out, triple):
        assert np.array_equal(a, b)


def test_augment_labels_stay_binary(small_cohort, rng):
    rec = small_cohort[0]
    triple = sample_patch(rec, 12, 1.0, rng)
    for _ in range(10):
        _, brain, vessel = augment(triple, rng)
        assert set(np.unique(brain)) <= {0, 1}
        assert set(np.unique(vessel)) <= {0, 1}


def test_double_flip_is_identity(rng):
    x = rng.normal(size=(4, 4, 4))
    assert np.array_equal(np.flip(np.flip(x, axis=1), axis=1), x)


def test_train_smoke_loss_decreases(small_cohort, tmp_path):
    cfg = TrainConfig(**{**TINY_TRAIN, "max_epochs": 5})
    cohort = list(small_cohort)[:2]
    split = make_folds(cohort, k=2, seed=0)[0]
    result = train(cfg, cohort, split, outdir=tmp_path / "run")
    base_rows = [r for r in result.history if r["phase"] == "base"]
    assert base_rows[-1]["loss_total"] < base_rows[0]["loss_total"]
    assert (tmp_path / "run" / "checkpoint.npz").exists()
    log_lines = (tmp_path / "run" / "train_log.ndjson").read_text().strip().splitlines()
    row = json.loads(log_lines[0])
    for key in ("epoch", "lr", "loss_total", "loss_brain", "loss_vessel"):
        assert key in row
    assert row["lr"] == 5e-4


def test_train_early_stop_exact():
    # lr(e) = lr0 * (1 - e/4)^0.9; with floor just above lr(3) it must stop at epoch 3
    cfg = TrainConfig(
        lattice=LatticeConfig(base_channels=4, n_levels=2, patch_size=(8, 8, 8), lattice_length=1),
        max_epochs=4,
        steps_per_epoch=1,
        lr_floor=lr_schedule(3, TrainConfig(max_epochs=4)) + 1e-9,
        seed=1,
        num_threads=1,
    )
    shape = (8, 8, 8)
    rng = np.random.default_rng(0)
    recs = []
    for i in range(2):
        ves = np.zeros(shape, dtype=np.uint8)
        ves[3:5, 3:5, i + 2] = 1
        recs.append(
            SubjectRecord(
                id=f"r{i}",
                image=Volume(data=rng.normal(size=shape).astype(np.float32), spacing=(1, 1, 1)),
                brain=LabelVolume(data=np.ones(shape, dtype=np.uint8), spacing=(1, 1, 1)),
                vessel=LabelVolume(data=ves, spacing=(1, 1, 1)),
            )
        )
    split = make_folds(recs, k=2, seed=0)[0]
    result = train(cfg, recs, split)
    epochs = [r["epoch"] for r in result.history if r["phase"] == "base"]
    assert epochs == [0, 1, 2]  # epoch 3 not run: lr(3) < floor


def test_train_determinism(small_cohort, tmp_path):
    cohort = list(small_cohort)[:2]
    split = make_folds(cohort, k=2, seed=0)[0]
    cfg = TrainConfig(**{**TINY_TRAIN, "max_epochs": 2})
    a = train(cfg, cohort, split)
    b = train(cfg, cohort, split)
    assert param_checksum(a.model) == param_checksum(b.model)


def test_train_non_finite_aborts_with_checkpoint(small_cohort, tmp_path, monkeypatch):
    import torch as _torch

    import jobvs.training as tr

    calls = {"n": 0}
    real = tr._batch_loss

    def poisoned(model, batch, cfg):
        calls["n"] += 1
        if calls["n"] >= 3:
            return _torch.tensor(float("nan"), requires_grad=True), None, None
        return real(model, batch, cfg)

    monkeypatch.setattr(tr, "_batch_loss", poisoned)
    cohort = list(small_cohort)[:2]
    split = make_folds(cohort, k=2, seed=0)[0]
    cfg = TrainConfig(**{**TINY_TRAIN, "max_epochs": 2})
    from jobvs import NumericalError

    with pytest.raises(NumericalError):
        train(cfg, cohort, split, outdir=tmp_path / "aborted")
    assert (tmp_path / "aborted" / "checkpoint.npz").exists()  # last good state retained


def test_preprocess_record(small_cohort):
    cohort = list(small_cohort)
    stats = compute_cohort_stats(cohort)
    rec = preprocess_record(cohort[0], stats)
    assert rec.image.spacing == stats.median_spacing
    assert rec.brain.shape == rec.image.shape
    assert set(np.unique(rec.vessel.data)) <= {0, 1}


def test_num_workers_env_cap(monkeypatch):
    from jobvs.utils import num_workers

    monkeypatch.delenv("JOBVS_NUM_WORKERS", raising=False)
    assert num_workers() == 0
    assert num_workers(4) == 0
    monkeypatch.setenv("JOBVS_NUM_WORKERS", "2")
    assert num_workers() == 2
    assert num_workers(8) == 2
    assert num_workers(1) == 1


def test_batch_stream_prefetch_matches_serial(small_cohort, monkeypatch):
    # per-step seeding makes prefetched batches identical to the serial ones
    from jobvs.training import _batch_stream

    cohort = list(small_cohort)[:2]
    stats = compute_cohort_stats(cohort)
    recs = [preprocess_record(r, stats) for r in cohort]
    cfg = TrainConfig(**TINY_TRAIN)
    monkeypatch.delenv("JOBVS_NUM_WORKERS", raising=False)
    serial = list(_batch_stream(recs, cfg, 0, epoch=1))
    monkeypatch.setenv("JOBVS_NUM_WORKERS", "3")
    threaded = list(_batch_stream(recs, cfg, 0, epoch=1))
    assert len(serial) == len(threaded) == cfg.steps_per_epoch
    for sb, tb in zip(serial, threaded):
        for sa, ta in zip(sb[0], tb[0]):
            assert np.array_equal(sa, ta)
