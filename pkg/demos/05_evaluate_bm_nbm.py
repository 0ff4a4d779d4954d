"""The two evaluation pathways: NBM (raw whole-volume) vs BM (brain-masked).

Sliding-window inference tiles the volume with 50% overlap and blends per-tile
softmax maps with a Gaussian window. NBM scores the result as-is; BM zeroes the
vessel probabilities outside a brain mask first. A joint model uses its own
predicted brain mask for BM; the masking never changes anything inside the mask,
so BM == NBM wherever the mask is 1 (checked below, exactly).
"""

import numpy as np

from jobvs import (
    LatticeConfig,
    PhantomConfig,
    TrainConfig,
    evaluate_cohort,
    evaluate_modes,
    generate_cohort,
    make_folds,
    metrics_markdown_table,
    train,
)

cohort = generate_cohort(PhantomConfig(size=48, seed=3), 6)
folds = make_folds(cohort, k=2, seed=0)
cfg = TrainConfig(
    lattice=LatticeConfig(base_channels=8, n_levels=3, patch_size=(24, 24, 24)),
    max_epochs=16,
    steps_per_epoch=20,
    seed=0,
)
result = train(cfg, cohort, folds[0])

by_id = {rec.id: rec for rec in cohort}
test_recs = [by_id[sid] for sid in folds[0].test_ids]
predictions = {"BM": {}, "NBM": {}}
for rec in test_recs:
    modes = evaluate_modes(result.model, rec, result.stats)
    predictions["BM"][rec.id] = modes["BM"]
    predictions["NBM"][rec.id] = modes["NBM"]
    mask = modes["NBM"].brain_prob >= 0.5
    inside_equal = np.array_equal(modes["BM"].vessel_prob[mask], modes["NBM"].vessel_prob[mask])
    outside_zero = (modes["BM"].vessel_prob[~mask] == 0).all()
    print(f"{rec.id}: BM==NBM inside mask: {inside_equal} | BM zero outside: {outside_zero}")

reports = [evaluate_cohort(predictions[m], test_recs, m) for m in ("BM", "NBM")]
print("\n" + metrics_markdown_table(reports))
print("When the mask only removes true negatives (e.g. the ground-truth brain mask")
print("on these phantoms, where every vessel is brain-interior), BM can only raise")
print("precision. A *predicted* mask is a double-edged sword: it strips skull false")
print("positives but an overtight boundary clips real vessels, which is why the")
print("joint model's own brain quality matters. This is a ~2-minute demo run;")
print("the acceptance benchmark (40 epochs, 64-cubed cohort) reaches NBM vessel")
print("mAP > 0.9 and brain DSC > 0.98.")
