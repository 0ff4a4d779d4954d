import math

import numpy as np
import pytest
import torch

from jobvs import DataError, LossWeights, ce_loss, dice_loss, joint_loss, task_loss
from jobvs.losses import DICE_SMOOTH
from jobvs.model import PredictionPair


def test_dice_closed_forms():
    target = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    assert float(dice_loss(target, target)) <= 1e-5
    assert float(dice_loss(1 - target, target)) >= 1 - 1e-4
    probs = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    gt = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    expected = 1 - (2 + DICE_SMOOTH) / (4 + DICE_SMOOTH)
    assert float(dice_loss(probs, gt)) == pytest.approx(expected, abs=1e-12)


def test_dice_bounds_and_permutation_invariance(rng):
    for _ in range(20):
        p = torch.tensor(rng.random(24))
        g = torch.tensor((rng.random(24) > 0.5).astype(np.float64))
        val = float(dice_loss(p, g))
        assert 0.0 <= val <= 1.0
        perm = rng.permutation(24)
        assert float(dice_loss(p[perm], g[perm])) == pytest.approx(val, abs=1e-12)


def test_dice_shape_mismatch():
    with pytest.raises(DataError):
        dice_loss(torch.zeros(3), torch.zeros(4))


def test_ce_uniform_logits():
    logits = torch.zeros(2, 2, 2, 2)
    target = torch.tensor((np.arange(8).reshape(2, 2, 2) % 2).astype(np.float32))
    assert float(ce_loss(logits, target)) == pytest.approx(math.log(2), abs=1e-7)


def test_ce_strong_margin():
    target = torch.tensor(np.ones((2, 2, 2), dtype=np.float32))
    logits = torch.stack([torch.zeros(2, 2, 2), torch.full((2, 2, 2), 25.0)])
    assert float(ce_loss(logits, target)) <= 1e-8


def test_ce_brute_force_oracle(rng):
    # mean over voxels of -log softmax probability of the target class
    for _ in range(20):
        logits = torch.tensor(rng.normal(size=(2, 3, 3, 3)))
        target = torch.tensor((rng.random((3, 3, 3)) > 0.5).astype(np.float64))
        acc = 0.0
        for idx in np.ndindex(3, 3, 3):
            l0, l1 = float(logits[0][idx]), float(logits[1][idx])
            m = max(l0, l1)
            logz = m + math.log(math.exp(l0 - m) + math.exp(l1 - m))
            picked = l1 if target[idx] > 0.5 else l0
            acc += logz - picked
        expected = acc / 27
        assert float(ce_loss(logits, target)) == pytest.approx(expected, rel=1e-6)


def test_task_loss_composition(rng):
    logits = torch.tensor(rng.normal(size=(2, 3, 3, 3)))
    target = torch.tensor((rng.random((3, 3, 3)) > 0.5).astype(np.float64))
    fg = torch.softmax(logits, dim=0)[1]
    assert float(task_loss(logits, target)) == float(dice_loss(fg, target) + ce_loss(logits, target))


def test_task_loss_perfect_and_uniform():
    target = torch.tensor(np.zeros((2, 2, 2), dtype=np.float64))
    logits = torch.stack([torch.full((2, 2, 2), 45.0, dtype=torch.float64), torch.zeros(2, 2, 2, dtype=torch.float64)])
    assert float(task_loss(logits, target)) <= 1e-5
    uniform = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
    expected = math.log(2) + (1 - DICE_SMOOTH / (4 + DICE_SMOOTH))
    assert float(task_loss(uniform, target)) == pytest.approx(expected, abs=1e-7)


def _random_pred(rng, dtype=torch.float64):
    return PredictionPair(
        vessel_logits=torch.tensor(rng.normal(size=(2, 3, 3, 3)), dtype=dtype),
        brain_logits=torch.tensor(rng.normal(size=(2, 3, 3, 3)), dtype=dtype),
    )


def _random_targets(rng, dtype=torch.float64):
    brain = torch.tensor((rng.random((3, 3, 3)) > 0.4).astype(np.float64), dtype=dtype)
    vessel = torch.tensor((rng.random((3, 3, 3)) > 0.7).astype(np.float64), dtype=dtype)
    return brain, vessel


def test_joint_loss_weighted_sum(rng):
    pred = _random_pred(rng)
    brain, vessel = _random_targets(rng)
    total, parts = joint_loss(pred, brain, vessel, LossWeights(1.0, 1.0))
    l_brain = float(task_loss(pred.brain_logits, brain))
    l_vessel = float(task_loss(pred.vessel_logits, vessel))
    assert float(total) == pytest.approx(l_brain + l_vessel, rel=1e-12)
    assert float(parts["brain"]) == pytest.approx(l_brain, rel=1e-12)

    only_vessel, _ = joint_loss(pred, brain, vessel, LossWeights(0.0, 2.5))
    assert float(only_vessel) == pytest.approx(2.5 * l_vessel, rel=1e-12)

    doubled, _ = joint_loss(pred, brain, vessel, LossWeights(2.0, 2.0))
    assert float(doubled) == pytest.approx(2 * float(total), rel=1e-12)


def test_joint_loss_requires_both_heads(rng):
    pred = PredictionPair(vessel_logits=torch.zeros(2, 2, 2, 2))
    with pytest.raises(DataError):
        joint_loss(pred, torch.zeros(2, 2, 2), torch.zeros(2, 2, 2), LossWeights())


def test_loss_weights_validation():
    with pytest.raises(DataError):
        LossWeights(-1.0, 1.0)
    with pytest.raises(DataError):
        LossWeights(0.0, 0.0)


def _fd_gradient(loss_of_logits, logits, eps=1e-3):
    grad = torch.zeros_like(logits)
    flat = logits.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        up = loss_of_logits()
        flat[i] = orig - eps
        down = loss_of_logits()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def test_joint_loss_gradient_matches_finite_differences(rng):
    for _ in range(10):
        pred = _random_pred(rng)
        brain, vessel = _random_targets(rng)
        for t in (pred.vessel_logits, pred.brain_logits):
            t.requires_grad_(True)
        total, _ = joint_loss(pred, brain, vessel, LossWeights())
        total.backward()
        for logits in (pred.vessel_logits, pred.brain_logits):
            analytic = logits.grad.detach().clone()
            with torch.no_grad():
                probe = logits.detach().clone()

            def loss_value():
                trial = PredictionPair(
                    vessel_logits=probe if logits is pred.vessel_logits else pred.vessel_logits.detach(),
                    brain_logits=probe if logits is pred.brain_logits else pred.brain_logits.detach(),
                )
                val, _ = joint_loss(trial, brain, vessel, LossWeights())
                return float(val)

            numeric = _fd_gradient(loss_value, probe)
            rel = float((analytic - numeric).norm() / max(float(analytic.norm()), float(numeric.norm()), 1e-12))
            assert rel <= 1e-4
