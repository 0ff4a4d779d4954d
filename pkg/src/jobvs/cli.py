"""Command-line entry point: phantom | stats | train | eval | infer | render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
JOBVS_NUM_WORKERS caps prefetch / per-subject workers (0 = serial, deterministic).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DataError, NumericalError
from .inference import binarize, evaluate_modes, predict_record, render_mip
from .losses import LossWeights
from .metrics import evaluate_cohort, metrics_markdown_table
from .model import load_checkpoint
from .phantom import PhantomConfig, generate_cohort, load_cohort, save_cohort
from .training import TrainConfig, make_folds, run_ablation_grid, train
from .volume import compute_cohort_stats, load_label, load_volume, save_volume, Volume

log = logging.getLogger("jobvs")


def cmd_phantom(args) -> int:
    cfg = PhantomConfig(
        size=args.size,
        spacing=args.spacing,
        n_vessel_roots=args.vessel_roots,
        branch_depth=args.branch_depth,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    records = generate_cohort(cfg, args.n)
    manifest = save_cohort(records, args.out, cfg)
    log.info("wrote %d subjects and %s", len(records), manifest)
    return 0


def cmd_stats(args) -> int:
    records = load_cohort(args.cohort)
    if args.ids:
        wanted = set(args.ids)
        records = [rec for rec in records if rec.id in wanted]
        if not records:
            raise DataError(f"no cohort subjects match ids {sorted(wanted)}")
    stats = compute_cohort_stats(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(stats.to_json())
    log.info("wrote %s", out)
    return 0


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"no such config file: {path}")
        cfg = TrainConfig.from_dict(json.loads(path.read_text()))
    lattice = cfg.lattice
    if args.task is not None:
        lattice = replace(lattice, task_mode=args.task)
    if args.lattice_length is not None:
        lattice = replace(lattice, lattice_length=args.lattice_length)
    at = cfg.at
    if args.at:
        at = replace(at, enabled=True)
    if args.at_eps is not None:
        at = replace(at, epsilon=args.at_eps)
    if args.at_replays is not None:
        at = replace(at, n_replays=args.at_replays)
    weights = cfg.loss_weights
    if args.alpha is not None:
        weights = replace(weights, alpha=args.alpha)
    if args.beta is not None:
        weights = replace(weights, beta=args.beta)
    overrides = {}
    for flag, field_name in (
        ("lr", "lr0"), ("weight_decay", "weight_decay"), ("batch_size", "batch_size"),
        ("epochs", "max_epochs"), ("steps", "steps_per_epoch"), ("seed", "seed"),
        ("threads", "num_threads"), ("fold", "fold"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    return replace(cfg, lattice=lattice, at=at, loss_weights=weights, **overrides)


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    cohort = load_cohort(args.cohort)
    folds = make_folds(cohort, k=args.folds, seed=args.fold_seed)
    if not 0 <= cfg.fold < len(folds):
        raise DataError(f"fold {cfg.fold} out of range for {len(folds)} folds")
    split = folds[cfg.fold]
    outdir = Path(args.outdir)
    if args.ablation:
        rows = run_ablation_grid(cfg, cohort, split, outdir=outdir / "ablation")
        log.info("ablation grid complete: %s", json.dumps(rows))
        return 0
    result = train(cfg, cohort, split, outdir=outdir / f"fold{split.fold_id}")
    log.info("training complete; checkpoint at %s", result.checkpoint_path)
    return 0


def cmd_eval(args) -> int:
    cohort = load_cohort(args.cohort)
    by_id = {rec.id: rec for rec in cohort}
    modes = args.mode or ["BM", "NBM"]
    predictions: dict[str, dict] = {m: {} for m in modes}
    fold_ids: dict[str, int] = {}
    test_records = []
    for run_dir in args.run:
        run_dir = Path(run_dir)
        model, stats, _ = load_checkpoint(run_dir / "checkpoint.npz")
        if stats is None:
            raise DataError(f"{run_dir}: checkpoint carries no cohort statistics")
        split = json.loads((run_dir / "split.json").read_text())
        for sid in split["test_ids"]:
            if sid not in by_id:
                raise DataError(f"{run_dir}: test subject {sid} not in cohort")
            rec = by_id[sid]
            both = evaluate_modes(model, rec, stats, overlap=args.overlap)
            for m in modes:
                predictions[m][sid] = both[m]
            fold_ids[sid] = int(split["fold_id"])
            test_records.append(rec)
    if not test_records:
        raise DataError("no test subjects found in the given run directories")
    reports = [evaluate_cohort(predictions[m], test_records, m, fold_ids) for m in modes]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "metrics.json").write_text(
        json.dumps({r.mode: r.to_dict() for r in reports}, indent=2)
    )
    (outdir / "table.md").write_text(metrics_markdown_table(reports))
    print(metrics_markdown_table(reports))
    return 0


def cmd_infer(args) -> int:
    model, stats, _ = load_checkpoint(args.checkpoint)
    if stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no cohort statistics")
    image = load_volume(args.image)
    pv = predict_record(model, image, stats, overlap=args.overlap)
    prefix = Path(args.out)
    if prefix.parent != Path("") and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for task, grid in (("vessel", pv.vessel_prob), ("brain", pv.brain_prob)):
        if grid is None:
            continue
        prob_path = prefix.parent / f"{prefix.name}_{task}_prob.nii.gz"
        mask_path = prefix.parent / f"{prefix.name}_{task}_mask.nii.gz"
        save_volume(Volume(data=grid, spacing=pv.spacing, origin=pv.origin), prob_path)
        save_volume(binarize(grid, args.threshold, pv.spacing, pv.origin), mask_path)
        written += [prob_path, mask_path]
    log.info("wrote %s", ", ".join(str(p) for p in written))
    return 0


def cmd_render(args) -> int:
    image = load_volume(args.image)
    mask = load_label(args.mask) if args.mask else None
    paths = render_mip(image, mask, args.out)
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jobvs",
        description="Joint brain & vessel 3D segmentation: phantoms, preprocessing, "
        "lattice-network training with optional free adversarial fine-tuning, "
        "BM/NBM evaluation, and rendering.",
        epilog="Environment: JOBVS_NUM_WORKERS caps prefetch workers (0 = serial, deterministic).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("phantom", help="generate a synthetic cohort", formatter_class=fmt)
    p.add_argument("--n", type=int, default=10, help="number of subjects")
    p.add_argument("--seed", type=int, default=0, help="cohort seed")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--size", type=int, default=64, help="grid edge length in voxels")
    p.add_argument("--spacing", type=float, default=0.5, help="isotropic voxel size in mm")
    p.add_argument("--vessel-roots", type=int, default=3, help="vessel tree roots per subject")
    p.add_argument("--branch-depth", type=int, default=3, help="vessel tree branching depth")
    p.add_argument("--noise-std", type=float, default=0.03, help="additive Gaussian noise std")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("stats", help="compute and store cohort statistics", formatter_class=fmt)
    p.add_argument("--cohort", required=True, help="cohort directory (with cohort.json)")
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--ids", nargs="*", default=None, help="restrict to these subject ids")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train on one fold (optionally the ablation grid)")
    p.add_argument("--config", default=None, help="TrainConfig JSON; flags below override its fields")
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--outdir", required=True, help="run output directory")
    p.add_argument("--fold", type=int, default=None, help="fold to train (default: 0)")
    p.add_argument("--folds", type=int, default=2, help="number of cross-validation folds (default: 2)")
    p.add_argument("--fold-seed", type=int, default=0, help="seed for the fold shuffle (default: 0)")
    p.add_argument("--task", choices=("joint", "vessel_only", "brain_only"), default=None,
                   help="task mode (default: joint)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (default: 5e-4)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None,
                   help="Adam weight decay (default: 1e-5)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="batch size (default: 1)")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs (default: 1000)")
    p.add_argument("--steps", type=int, default=None, help="steps per epoch (default: 50)")
    p.add_argument("--alpha", type=float, default=None, help="brain loss weight (default: 1)")
    p.add_argument("--beta", type=float, default=None, help="vessel loss weight (default: 1)")
    p.add_argument("--lattice-length", dest="lattice_length", type=int, default=None,
                   help="lattice length L (default: 2)")
    p.add_argument("--at", action="store_true", help="run free adversarial fine-tuning after base training")
    p.add_argument("--at-eps", dest="at_eps", type=float, default=None,
                   help="perturbation bound epsilon (default: 8/255)")
    p.add_argument("--at-replays", dest="at_replays", type=int, default=None,
                   help="replays N per mini-batch (default: 5)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: 0)")
    p.add_argument("--threads", type=int, default=None, help="torch thread count (1 = deterministic)")
    p.add_argument("--ablation", action="store_true",
                   help="run the {single-task, joint} x {AT off, on} grid instead of one run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained folds in BM/NBM modes", formatter_class=fmt)
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--run", action="append", required=True,
                   help="run directory with checkpoint.npz and split.json (repeatable)")
    p.add_argument("--mode", action="append", choices=("BM", "NBM"), default=None,
                   help="evaluation mode (repeatable; default both)")
    p.add_argument("--overlap", type=float, default=0.5, help="sliding-window overlap fraction")
    p.add_argument("--out", required=True, help="output directory for metrics.json and table.md")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a single volume", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--image", required=True, help="input volume (.nii/.nii.gz/.raw)")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--overlap", type=float, default=0.5, help="sliding-window overlap fraction")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="maximum-intensity-projection PNGs with mask overlay", formatter_class=fmt)
    p.add_argument("--image", required=True, help="input volume")
    p.add_argument("--mask", default=None, help="binary mask volume to overlay")
    p.add_argument("--out", required=True, help="output PNG prefix")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
