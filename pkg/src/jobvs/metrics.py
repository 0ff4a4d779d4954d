"""Evaluation metrics: voxel-level average precision, max F1, DSC, and
centerline Dice with 3D thinning skeletonization; fold-wise aggregation.

AP and max-F1 treat equal probabilities as one threshold group, so both are
deterministic and invariant under any strictly monotone rescaling of the
probability grid. max-F1 at its returned threshold coincides with the DSC of
the binarized prediction (same 2TP/(|P|+|G|) expression).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)


def _check_shapes(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dsc(pred, gt) -> float:
    """Dice similarity 2|P∩G|/(|P|+|G|); 1.0 when both masks are empty."""
    pred, gt = _check_shapes(pred, gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    inter = int(np.count_nonzero(p & g))
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2 * inter / denom


def _threshold_groups(prob, gt):
    """Cumulative TP and predicted-positive counts at each distinct threshold,
    descending; equal probabilities form one group."""
    p, g = _check_shapes(prob, gt)
    p = p.astype(np.float64).ravel()
    g = g.ravel().astype(bool)
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    gs = g[order]
    last = np.append(np.nonzero(np.diff(ps))[0], ps.size - 1)
    tp = np.cumsum(gs)[last]
    pp = last + 1
    return ps[last], tp, pp


def average_precision(prob, gt) -> float:
    """All-threshold PR integral: sum of precision * recall-increment over the
    descending distinct-threshold groups."""
    n_pos = int(np.count_nonzero(gt))
    if n_pos == 0:
        raise DataError("average precision is undefined for empty ground truth")
    _, tp, pp = _threshold_groups(prob, gt)
    ap = 0.0
    prev_recall = 0.0
    for tp_k, pp_k in zip(tp, pp):
        precision = int(tp_k) / int(pp_k)
        recall = int(tp_k) / n_pos
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return float(ap)


def max_f1(prob, gt) -> tuple[float, float]:
    """Maximum F1 over all distinct thresholds; returns (f1, threshold), taking
    the smallest threshold on ties. F1 = 2TP/(2TP+FP+FN) = DSC at that cut."""
    n_pos = int(np.count_nonzero(gt))
    if n_pos == 0:
        raise DataError("max F1 is undefined for empty ground truth")
    thresholds, tp, pp = _threshold_groups(prob, gt)
    best_f1 = -1.0
    best_thr = float(thresholds[0])
    for thr, tp_k, pp_k in zip(thresholds, tp, pp):
        f1 = 2 * int(tp_k) / (int(pp_k) + n_pos)
        if f1 >= best_f1:
            best_f1 = f1
            best_thr = float(thr)
    return float(best_f1), best_thr


# ---------------------------------------------------------------------------
# 3D skeletonization by iterative border thinning
# ---------------------------------------------------------------------------

# 27-cell neighborhood flattened in C order: k = (dx+1)*9 + (dy+1)*3 + (dz+1)
_CENTER = 13
_COORDS = [(k // 9 - 1, k % 9 // 3 - 1, k % 3 - 1) for k in range(27)]
_N26 = [k for k in range(27) if k != _CENTER]
_N18 = [k for k in _N26 if sum(map(abs, _COORDS[k])) <= 2]
_FACES = frozenset(k for k in _N26 if sum(map(abs, _COORDS[k])) == 1)


def _build_adjacency(cells, max_dist):
    adj = {k: [] for k in cells}
    for k in cells:
        for j in cells:
            if j == k:
                continue
            d = [abs(a - b) for a, b in zip(_COORDS[k], _COORDS[j])]
            if max(d) <= 1 and sum(d) <= max_dist:
                adj[k].append(j)
    return adj


_ADJ26 = _build_adjacency(_N26, 3)  # 26-adjacency among the 26 neighbors
_ADJ6_18 = _build_adjacency(_N18, 1)  # 6-adjacency within the 18-neighborhood


def _count_components(cells, adj, stop_at=None):
    cells = set(cells)
    count = 0
    while cells:
        count += 1
        if stop_at is not None and count > stop_at:
            return count
        stack = [cells.pop()]
        while stack:
            k = stack.pop()
            for j in adj[k]:
                if j in cells:
                    cells.remove(j)
                    stack.append(j)
    return count


def _is_simple(nb: np.ndarray) -> bool:
    """Deleting the center preserves topology: exactly one 26-component of
    foreground neighbors and one 6-component of background in the
    18-neighborhood touching a face."""
    fg = [k for k in _N26 if nb[k]]
    if not fg:
        return False
    if _count_components(fg, _ADJ26, stop_at=1) != 1:
        return False
    bg18 = [k for k in _N18 if not nb[k]]
    if not any(k in _FACES for k in bg18):
        return False
    touched = 0
    remaining = set(bg18)
    while remaining:
        seed = remaining.pop()
        comp_has_face = seed in _FACES
        stack = [seed]
        while stack:
            k = stack.pop()
            for j in _ADJ6_18[k]:
                if j in remaining:
                    remaining.remove(j)
                    comp_has_face = comp_has_face or j in _FACES
                    stack.append(j)
        if comp_has_face:
            touched += 1
            if touched > 1:
                return False
    return touched == 1


def _face_neighbor(pad: np.ndarray, axis: int, step: int) -> np.ndarray:
    out = np.zeros_like(pad)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step == 1:
        src[axis], dst[axis] = slice(1, None), slice(0, -1)
    else:
        src[axis], dst[axis] = slice(0, -1), slice(1, None)
    out[tuple(dst)] = pad[tuple(src)]
    return out


def skeletonize3d(mask) -> np.ndarray:
    """Thin a binary volume to a medial-axis approximation.

    Repeats six directional subiterations, sequentially deleting border voxels
    that are simple (26-connectivity foreground / 6-connectivity background) and
    not curve endpoints, until a fixpoint. Output is a subset of the input and
    keeps the 26-connected component count.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise DataError(f"skeletonize3d expects a 3D mask, got {m.ndim}D")
    if not m.any():
        return np.zeros_like(m, dtype=np.uint8)
    pad = np.pad(m, 1, constant_values=False)
    directions = [(axis, step) for axis in range(3) for step in (1, -1)]
    changed = True
    while changed:
        changed = False
        for axis, step in directions:
            border = pad & ~_face_neighbor(pad, axis, step)
            for x, y, z in np.argwhere(border):
                if not pad[x, y, z]:
                    continue
                nb = pad[x - 1 : x + 2, y - 1 : y + 2, z - 1 : z + 2].ravel()
                if int(nb.sum()) - 1 <= 1:  # isolated voxel or curve endpoint
                    continue
                if _is_simple(nb):
                    pad[x, y, z] = False
                    changed = True
    return pad[1:-1, 1:-1, 1:-1].astype(np.uint8)


def cl_dice(pred, gt) -> float:
    """Centerline Dice: harmonic mean of topology precision/sensitivity computed
    through skeletons. 1.0 when both masks are empty, 0.0 when exactly one is."""
    pred, gt = _check_shapes(pred, gt)
    pb = pred.astype(bool)
    gb = gt.astype(bool)
    if not pb.any() and not gb.any():
        return 1.0
    if pb.any() != gb.any():
        return 0.0
    skel_p = skeletonize3d(pb).astype(bool)
    skel_g = skeletonize3d(gb).astype(bool)
    tprec = int(np.count_nonzero(skel_p & gb)) / int(np.count_nonzero(skel_p))
    tsens = int(np.count_nonzero(skel_g & pb)) / int(np.count_nonzero(skel_g))
    if tprec + tsens == 0:
        return 0.0
    return 2 * tprec * tsens / (tprec + tsens)


# ---------------------------------------------------------------------------
# Cohort aggregation
# ---------------------------------------------------------------------------

METRIC_KEYS = ("vessel_map", "vessel_max_f1", "vessel_cldice", "brain_dsc")


@dataclass
class MetricsReport:
    """Per-subject metric values plus the fold-mean / cross-fold mean±std rollup."""

    mode: str
    per_subject: dict = field(default_factory=dict)
    fold_of_subject: dict = field(default_factory=dict)
    fold_means: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_subject": self.per_subject,
            "fold_of_subject": self.fold_of_subject,
            "fold_means": {str(k): v for k, v in self.fold_means.items()},
            "mean": self.mean,
            "std": self.std,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def subject_metrics(prediction, rec, threshold: float = 0.5) -> dict:
    """Metrics for one subject given a prediction with vessel_prob/brain_prob grids."""
    values: dict[str, float] = {}
    vessel_gt = rec.vessel.data
    if prediction.vessel_prob is not None:
        if np.count_nonzero(vessel_gt) == 0:
            log.warning("subject %s has an empty vessel ground truth; skipping vessel metrics", rec.id)
        else:
            vp = prediction.vessel_prob
            values["vessel_map"] = average_precision(vp, vessel_gt)
            f1, _ = max_f1(vp, vessel_gt)
            values["vessel_max_f1"] = f1
            values["vessel_cldice"] = cl_dice(vp >= threshold, vessel_gt)
    if prediction.brain_prob is not None:
        values["brain_dsc"] = dsc(prediction.brain_prob >= threshold, rec.brain.data)
    return values


def evaluate_cohort(predictions: dict, records, mode: str, fold_ids: dict | None = None) -> MetricsReport:
    """Aggregate per-subject metrics as per-fold means, then mean±std across folds
    (sample std; 0 for a single fold)."""
    records = list(records)
    if not records:
        raise DataError("cannot evaluate an empty cohort")
    fold_ids = fold_ids or {rec.id: 0 for rec in records}
    report = MetricsReport(mode=mode)
    for rec in records:
        if rec.id not in predictions:
            raise DataError(f"missing prediction for subject {rec.id}")
        report.per_subject[rec.id] = subject_metrics(predictions[rec.id], rec)
        report.fold_of_subject[rec.id] = int(fold_ids.get(rec.id, 0))

    folds = sorted(set(report.fold_of_subject.values()))
    for f in folds:
        sids = [sid for sid, ff in report.fold_of_subject.items() if ff == f]
        report.fold_means[f] = {
            key: float(np.mean([report.per_subject[s][key] for s in sids if key in report.per_subject[s]]))
            for key in METRIC_KEYS
            if any(key in report.per_subject[s] for s in sids)
        }
    for key in METRIC_KEYS:
        per_fold = [report.fold_means[f][key] for f in folds if key in report.fold_means[f]]
        if not per_fold:
            continue
        report.mean[key] = float(np.mean(per_fold))
        report.std[key] = float(np.std(per_fold, ddof=1)) if len(per_fold) > 1 else 0.0
    return report


_TABLE_ROWS = (
    ("vessel_map", "Vessel mAP"),
    ("vessel_max_f1", "Vessel max-F1"),
    ("vessel_cldice", "Vessel clDice"),
    ("brain_dsc", "Brain DSC"),
)


def metrics_markdown_table(reports: list[MetricsReport]) -> str:
    """Markdown table with one column per evaluation mode (e.g. BM / NBM) and one
    row per metric, values as percent mean ± std across folds."""
    modes = [r.mode for r in reports]
    lines = ["| Metric | " + " | ".join(modes) + " |", "|---|" + "---|" * len(modes)]
    for key, label in _TABLE_ROWS:
        cells = []
        for r in reports:
            if key in r.mean:
                cells.append(f"{100 * r.mean[key]:.2f} ± {100 * r.std[key]:.2f}")
            else:
                cells.append("n/a")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
