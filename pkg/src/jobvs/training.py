"""Training orchestration: foreground-biased patch sampling, augmentation,
polynomial LR decay with an LR-floor early stop, Adam with the stated
hyperparameters (lr0 5e-4, weight decay 1e-5, batch size 1), optional free
adversarial fine-tuning, two-fold cross-validation splits, and the
{single-task, joint} x {AT off, on} ablation grid."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .adversarial import ATConfig, free_at_epoch
from .errors import DataError, NumericalError
from .losses import LossWeights, joint_loss, task_loss
from .model import LatticeConfig, LatticeNet, build_model, forward, save_checkpoint
from .utils import num_workers
from .volume import CohortStats, SubjectRecord, compute_cohort_stats, normalize, resample_record

log = logging.getLogger(__name__)

_PHASE_TRAIN, _PHASE_VAL, _PHASE_AT = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    lr0: float = 5e-4
    weight_decay: float = 1e-5
    max_epochs: int = 1000
    steps_per_epoch: int = 50
    batch_size: int = 1
    lr_floor: float = 1e-6
    fold: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    at: ATConfig = field(default_factory=ATConfig)
    ft_epochs: int = 100
    fg_bias: float = 0.5
    val_fraction: float = 0.1
    val_patches: int = 4
    overlap: float = 0.5
    seed: int = 0
    num_threads: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not self.lr0 > self.lr_floor > 0:
            raise DataError("require lr0 > lr_floor > 0")
        if self.max_epochs < 1 or self.steps_per_epoch < 1:
            raise DataError("max_epochs and steps_per_epoch must be >= 1")
        if not 0.0 <= self.fg_bias <= 1.0:
            raise DataError("fg_bias must be a probability")

    @property
    def task_mode(self) -> str:
        return self.lattice.task_mode

    def to_dict(self) -> dict:
        d = {
            "lattice": self.lattice.to_dict(),
            "loss_weights": {"alpha": self.loss_weights.alpha, "beta": self.loss_weights.beta},
            "at": self.at.to_dict(),
        }
        for key in (
            "lr0", "weight_decay", "max_epochs", "steps_per_epoch", "batch_size", "lr_floor",
            "fold", "ft_epochs", "fg_bias", "val_fraction", "val_patches", "overlap", "seed",
            "num_threads",
        ):
            d[key] = getattr(self, key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lattice" in d:
            d["lattice"] = LatticeConfig.from_dict(d["lattice"])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "at" in d:
            d["at"] = ATConfig.from_dict(d["at"])
        return cls(**d)


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DataError(f"train/test overlap: {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {"fold_id": self.fold_id, "train_ids": list(self.train_ids), "test_ids": list(self.test_ids)}


def make_folds(cohort, k: int = 2, seed: int = 0) -> list[FoldSplit]:
    """Near-equal k-fold split by shuffled subject id; every subject tests once."""
    ids = sorted(rec if isinstance(rec, str) else rec.id for rec in cohort)
    if len(ids) < k:
        raise DataError(f"cohort of {len(ids)} subjects cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.array(perm, dtype=object), k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = tuple(sorted(str(s) for s in chunk))
        train = tuple(sorted(set(ids) - set(test)))
        folds.append(FoldSplit(fold_id=i, train_ids=train, test_ids=test))
    return folds


def sample_patch(rec: SubjectRecord, patch_size, fg_bias: float, rng: np.random.Generator):
    """Crop an (image, brain, vessel) patch triple; with probability fg_bias the
    center is a uniformly drawn vessel voxel, else uniform over the volume.
    Volumes smaller than the patch are edge-padded first."""
    patch = np.array((patch_size,) * 3 if isinstance(patch_size, int) else patch_size, dtype=int)
    img, brain, vessel = rec.image.data, rec.brain.data, rec.vessel.data
    pads = [(0, max(0, int(p) - s)) for p, s in zip(patch, img.shape)]
    if any(p[1] for p in pads):
        img = np.pad(img, pads, mode="edge")
        brain = np.pad(brain, pads, mode="edge")
        vessel = np.pad(vessel, pads, mode="edge")
    shape = np.array(img.shape)
    if rng.random() < fg_bias:
        coords = np.argwhere(vessel > 0)
        center = coords[rng.integers(len(coords))] if len(coords) else rng.integers(0, shape)
    else:
        center = rng.integers(0, shape)
    start = np.clip(center - patch // 2, 0, shape - patch)
    sl = tuple(slice(int(s), int(s +p)) for s, p in zip(start, patch))
    return img[sl].copy(), brain[sl].copy(), vessel[sl].copy()


def augment(patch_triple, rng: np.random.Generator, flip_p: float = 0.5, rot_p: float = 0.5,
            scale_p: float = 0.5, gamma_p: float = 0.5):
    """Random flips / axial 90-degree rotations on all three grids; multiplicative
    intensity scale U(0.9, 1.1) and gamma U(0.8, 1.2) on the image only."""
    img, brain, vessel = (np.asarray(a) for a in patch_triple)
    for axis in range(3):
        if rng.random() < flip_p:
            img, brain, vessel = (np.flip(a, axis=axis) for a in (img, brain, vessel))
    if rng.random() < rot_p and img.shape[0] == img.shape[1]:
        k = int(rng.integers(1, 4))
        img, brain, vessel = (np.rot90(a, k=k, axes=(0, 1)) for a in (img, brain, vessel))
    img = img.astype(np.float32, copy=True)
    if rng.random() < scale_p:
        img *= rng.uniform(0.9, 1.1)
    if rng.random() < gamma_p:
        gamma = rng.uniform(0.8, 1.2)
        lo, hi = float(img.min()), float(img.max())
        if hi - lo > 1e-8:
            img = ((img - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
    return np.ascontiguousarray(img), np.ascontiguousarray(brain), np.ascontiguousarray(vessel)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Polynomial decay lr0 * (1 - epoch/max_epochs)^0.9."""
    frac = min(max(epoch / cfg.max_epochs, 0.0), 1.0)
    return cfg.lr0 * (1.0 - frac) ** 0.9


def preprocess_record(rec: SubjectRecord, stats: CohortStats) -> SubjectRecord:
    """Resample to the cohort median spacing and normalize the image intensities."""
    rec = resample_record(rec, stats.median_spacing)
    return SubjectRecord(id=rec.id, image=normalize(rec.image, stats), brain=rec.brain, vessel=rec.vessel)


def compute_loss(pred, brain_t, vessel_t, task_mode: str, weights: LossWeights):
    """(total, brain_term, vessel_term); absent-task terms are None."""
    if task_mode == "joint":
        total, parts = joint_loss(pred, brain_t, vessel_t, weights)
        return total, parts["brain"], parts["vessel"]
    if task_mode == "vessel_only":
        l_vessel = task_loss(pred.vessel_logits, vessel_t)
        return l_vessel, None, l_vessel
    l_brain = task_loss(pred.brain_logits, brain_t)
    return l_brain, l_brain, None


def _loss_fn(task_mode: str, weights: LossWeights):
    def fn(pred, brain_t, vessel_t):
        total, _, _ = compute_loss(pred, brain_t, vessel_t, task_mode, weights)
        return total

    return fn


def _make_batch(records: list[SubjectRecord], cfg: TrainConfig, key: list[int], augmented: bool = True):
    rng = np.random.default_rng(key)
    batch = []
    for _ in range(cfg.batch_size):
        rec = records[int(rng.integers(len(records)))]
        triple = sample_patch(rec, cfg.lattice.patch_size, cfg.fg_bias, rng)
        if augmented:
            triple = augment(triple, rng)
        batch.append(triple)
    return batch


def _batch_stream(records, cfg: TrainConfig, phase: int, epoch: int, augmented: bool = True):
    keys = [[cfg.seed, phase, epoch, step] for step in range(cfg.steps_per_epoch)]
    workers = num_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(lambda k: _make_batch(records, cfg, k, augmented), keys)
    else:
        for k in keys:
            yield _make_batch(records, cfg, k, augmented)


def _batch_loss(model: LatticeNet, batch, cfg: TrainConfig):
    totals, brains, vessels = [], [], []
    for img, brain, vessel in batch:
        pred = forward(model, torch.as_tensor(img, dtype=torch.float32).unsqueeze(0))
        brain_t = torch.as_tensor(brain, dtype=torch.float32)
        vessel_t = torch.as_tensor(vessel, dtype=torch.float32)
        total, l_brain, l_vessel = compute_loss(pred, brain_t, vessel_t, cfg.task_mode, cfg.loss_weights)
        totals.append(total)
        brains.append(l_brain)
        vessels.append(l_vessel)

    def mean_or_none(xs):
        if any(x is None for x in xs):
            return None
        return float(torch.stack([x.detach() for x in xs]).mean())

    return torch.stack(totals).mean(), mean_or_none(brains), mean_or_none(vessels)


def _fixed_val_batches(val_records, cfg: TrainConfig):
    batches = []
    for i, rec in enumerate(val_records):
        for j in range(cfg.val_patches):
            rng = np.random.default_rng([cfg.seed, _PHASE_VAL, i, j])
            batches.append(sample_patch(rec, cfg.lattice.patch_size, cfg.fg_bias, rng))
    return batches


def _val_loss(model: LatticeNet, val_batches, cfg: TrainConfig) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for img, brain, vessel in val_batches:
            pred = forward(model, torch.as_tensor(img, dtype=torch.float32).unsqueeze(0))
            total, _, _ = compute_loss(
                pred,
                torch.as_tensor(brain, dtype=torch.float32),
                torch.as_tensor(vessel, dtype=torch.float32),
                cfg.task_mode,
                cfg.loss_weights,
            )
            losses.append(float(total))
    model.train()
    return float(np.mean(losses))


def _snapshot(model: LatticeNet) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@dataclass
class TrainResult:
    model: LatticeNet
    stats: CohortStats
    history: list
    split: FoldSplit
    checkpoint_path: Path | None = None
    at_stats: list = field(default_factory=list)


def _write_artifacts(outdir: Path, cfg: TrainConfig, model, stats, history, split, extra) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt = outdir / "checkpoint.npz"
    save_checkpoint(ckpt, model, stats=stats, extra=extra)
    with open(outdir / "train_log.ndjson", "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    (outdir / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    (outdir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return ckpt


def train(cfg: TrainConfig, cohort: list[SubjectRecord], split: FoldSplit, outdir=None) -> TrainResult:
    """Train on the fold's train side (with an internal validation hold-out for
    best-checkpoint selection), then optionally run free adversarial fine-tuning
    at lr0/10. Bit-reproducible for a fixed seed in single-threaded mode."""
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    by_id = {rec.id: rec for rec in cohort}
    missing = [sid for sid in split.train_ids if sid not in by_id]
    if missing:
        raise DataError(f"split references unknown subjects: {missing}")

    train_recs_raw = [by_id[sid] for sid in split.train_ids]
    stats = compute_cohort_stats(train_recs_raw)
    preprocessed = [preprocess_record(rec, stats) for rec in train_recs_raw]

    rng = np.random.default_rng([cfg.seed, 99])
    n_val = max(1, round(cfg.val_fraction * len(preprocessed))) if len(preprocessed) > 1 else 0
    order = rng.permutation(len(preprocessed))
    val_records = [preprocessed[i] for i in order[:n_val]]
    fit_records = [preprocessed[i] for i in order[n_val:]]
    if not fit_records:
        fit_records = preprocessed
    if not val_records:
        val_records = preprocessed
        log.warning("single-subject training fold: validating on the training subject")

    model = build_model(cfg.lattice, cfg.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    val_batches = _fixed_val_batches(val_records, cfg)

    history: list[dict] = []
    best_val = float("inf")
    best_state = _snapshot(model)
    extra = {
        "seed": cfg.seed,
        "fold_id": split.fold_id,
        "task_mode": cfg.task_mode,
        "train_ids": list(split.train_ids),
        "val_ids": [r.id for r in val_records],
        "at_enabled": cfg.at.enabled,
    }

    at_stats_all: list = []

    def finish(checkpoint_model) -> TrainResult:
        path = None
        if outdir is not None:
            path = _write_artifacts(Path(outdir), cfg, checkpoint_model, stats, history, split, extra)
        return TrainResult(model=checkpoint_model, stats=stats, history=history, split=split,
                           checkpoint_path=path, at_stats=at_stats_all)
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        if lr < cfg.lr_floor:
            log.info("early stop at epoch %d: lr %.3g < floor %.3g", epoch, lr, cfg.lr_floor)
            break
        for group in optimizer.param_groups:
            group["lr"] = lr
        totals, brains, vessels = [], [], []
        for batch in _batch_stream(fit_records, cfg, _PHASE_TRAIN, epoch):
            total, l_brain, l_vessel = _batch_loss(model, batch, cfg)
            if not torch.isfinite(total):
                model.load_state_dict(best_state)
                finish(model)
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            totals.append(float(total.detach()))
            brains.append(l_brain)
            vessels.append(l_vessel)
        val = _val_loss(model, val_batches, cfg)
        if val < best_val:
            best_val = val
            best_state = _snapshot(model)
        history.append(
            {
                "phase": "base",
                "epoch": epoch,
                "lr": lr,
                "loss_total": float(np.mean(totals)),
                "loss_brain": float(np.mean(brains)) if brains[0] is not None else None,
                "loss_vessel": float(np.mean(vessels)) if vessels[0] is not None else None,
                "val_loss": val,
            }
        )

    model.load_state_dict(best_state)

    if cfg.at.enabled:
        ft_optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0 / 10.0, weight_decay=cfg.weight_decay)
        loss_fn = _loss_fn(cfg.task_mode, cfg.loss_weights)
        delta = None
        best_val = _val_loss(model, val_batches, cfg)
        best_state = _snapshot(model)
        model.train()
        for ft_epoch in range(cfg.ft_epochs):
            samples = (
                triple
                for batch in _batch_stream(fit_records, cfg, _PHASE_AT, ft_epoch)
                for triple in batch
            )
            try:
                delta, at_stats = free_at_epoch(model, samples, cfg.at, ft_optimizer, loss_fn, delta)
            except NumericalError:
                model.load_state_dict(best_state)
                finish(model)
                raise
            at_stats_all.append(at_stats)
            val = _val_loss(model, val_batches, cfg)
            if val < best_val:
                best_val = val
                best_state = _snapshot(model)
            history.append(
                {
                    "phase": "at_ft",
                    "epoch": ft_epoch,
                    "lr": cfg.lr0 / 10.0,
                    "loss_total": float(np.mean(at_stats.replay_losses)),
                    "loss_brain": None,
                    "loss_vessel": None,
                    "val_loss": val,
                    "max_abs_delta": max(at_stats.max_abs_delta),
                }
            )
        model.load_state_dict(best_state)

    model.eval()
    return finish(model)


def run_ablation_grid(base_cfg: TrainConfig, cohort, split: FoldSplit, outdir=None) -> list[dict]:
    """Train and evaluate the 2x2 grid {single-task, joint} x {AT FT off, on} and
    report NBM brain DSC / vessel mAP rows. The joint-vs-single comparison is a
    soft directional check: logged, never failing."""
    from .inference import predict_record
    from .metrics import average_precision, dsc

    by_id = {rec.id: rec for rec in cohort}
    test_recs = [by_id[sid] for sid in split.test_ids]
    rows = []

    def nbm_scores(result: TrainResult) -> tuple[float | None, float | None]:
        maps, dscs = [], []
        for rec in test_recs:
            pv = predict_record(result.model, rec.image, result.stats,
                                patch_size=base_cfg.lattice.patch_size, overlap=base_cfg.overlap)
            if pv.vessel_prob is not None and np.count_nonzero(rec.vessel.data):
                maps.append(average_precision(pv.vessel_prob, rec.vessel.data))
            if pv.brain_prob is not None:
                dscs.append(dsc(pv.brain_prob >= 0.5, rec.brain.data))
        return (float(np.mean(maps)) if maps else None, float(np.mean(dscs)) if dscs else None)

    def subdir(name):
        return None if outdir is None else Path(outdir) / name

    for at_on in (False, True):
        at_cfg = replace(base_cfg.at, enabled=at_on)
        vessel_cfg = replace(base_cfg, lattice=replace(base_cfg.lattice, task_mode="vessel_only"), at=at_cfg)
        brain_cfg = replace(base_cfg, lattice=replace(base_cfg.lattice, task_mode="brain_only"), at=at_cfg)
        vessel_res = train(vessel_cfg, cohort, split, outdir=subdir(f"single_vessel_at{int(at_on)}"))
        brain_res = train(brain_cfg, cohort, split, outdir=subdir(f"single_brain_at{int(at_on)}"))
        v_map, _ = nbm_scores(vessel_res)
        _, b_dsc = nbm_scores(brain_res)
        rows.append({"model_type": "single_task", "at_ft": at_on, "brain_dsc": b_dsc, "vessel_map": v_map})

    for at_on in (False, True):
        at_cfg = replace(base_cfg.at, enabled=at_on)
        joint_cfg = replace(base_cfg, lattice=replace(base_cfg.lattice, task_mode="joint"), at=at_cfg)
        joint_res = train(joint_cfg, cohort, split, outdir=subdir(f"joint_at{int(at_on)}"))
        v_map, b_dsc = nbm_scores(joint_res)
        rows.append({"model_type": "joint", "at_ft": at_on, "brain_dsc": b_dsc, "vessel_map": v_map})

    for at_on in (False, True):
        single = next(r for r in rows if r["model_type"] == "single_task" and r["at_ft"] == at_on)
        joint = next(r for r in rows if r["model_type"] == "joint" and r["at_ft"] == at_on)
        if single["vessel_map"] is not None and joint["vessel_map"] is not None:
            if joint["vessel_map"] >= single["vessel_map"]:
                log.info("soft check (AT=%s): joint NBM mAP %.4f >= single-task %.4f",
                         at_on, joint["vessel_map"], single["vessel_map"])
            else:
                log.warning("soft check (AT=%s): joint NBM mAP %.4f < single-task %.4f (non-failing)",
                            at_on, joint["vessel_map"], single["vessel_map"])

    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        (Path(outdir) / "ablation.json").write_text(json.dumps(rows, indent=2))
        lines = ["| Model type | AT FT | Brain DSC | Vessel mAP |", "|---|---|---|---|"]
        for r in rows:
            b = "n/a" if r["brain_dsc"] is None else f"{100 * r['brain_dsc']:.2f}"
            v = "n/a" if r["vessel_map"] is None else f"{100 * r['vessel_map']:.2f}"
            lines.append(f"| {r['model_type']} | {'yes' if r['at_ft'] else 'no'} | {b} | {v} |")
        (Path(outdir) / "ablation.md").write_text("\n".join(lines) + "\n")
    return rows
