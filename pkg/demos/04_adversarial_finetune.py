"""Free adversarial fine-tuning as data augmentation, inspected replay by replay.

After base training converges, each mini-batch is replayed N=5 times: every
replay does one forward/backward pass, steps the weights, and ascends the input
perturbation by epsilon * sign(input gradient), then projects it back into the
L-inf ball of radius epsilon = 8/255. The perturbation buffer is recycled
across mini-batches, which is what makes the method "free": no extra backward
passes beyond the ones the weight updates already need.
"""

import numpy as np
import torch

from jobvs import ATConfig, LatticeConfig, PhantomConfig, free_at_epoch, generate_cohort
from jobvs.losses import LossWeights
from jobvs.model import build_model
from jobvs.training import TrainConfig, _loss_fn, compute_cohort_stats, preprocess_record, sample_patch

cohort = generate_cohort(PhantomConfig(size=48, seed=5), 2)
stats = compute_cohort_stats(cohort)
records = [preprocess_record(rec, stats) for rec in cohort]

cfg = TrainConfig(lattice=LatticeConfig(base_channels=8, n_levels=3, patch_size=(24, 24, 24)))
model = build_model(cfg.lattice, seed=0)
optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0 / 10, weight_decay=cfg.weight_decay)
at = ATConfig(enabled=True)  # epsilon 8/255, N=5

rng = np.random.default_rng(0)
batches = [sample_patch(records[i % 2], cfg.lattice.patch_size, 0.5, rng) for i in range(6)]

delta, at_stats = free_at_epoch(model, batches, at, optimizer, _loss_fn("joint", LossWeights()))

print(f"mini-batches B={len(batches)}, replays N={at.n_replays}")
print(f"forward passes  : {at_stats.n_forward}  (= B*N = {len(batches) * at.n_replays})")
print(f"backward passes : {at_stats.n_backward}")
print(f"epsilon         : {at.epsilon:.5f}")
print(f"max |delta| over all replays: {max(at_stats.max_abs_delta):.5f}")
print("\nreplay losses (each row = one mini-batch, N replays):")
for b in range(len(batches)):
    row = at_stats.replay_losses[b * at.n_replays : (b + 1) * at.n_replays]
    print("  " + "  ".join(f"{v:7.4f}" for v in row))
print("\ndelta buffer is carried to the next epoch; it saturates the L-inf ball:")
print("fraction of |delta| at the bound: %.2f" % float((delta.abs() >= at.epsilon * 0.999).float().mean()))
