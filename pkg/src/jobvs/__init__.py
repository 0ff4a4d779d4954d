"""Joint brain and vessel 3D segmentation toolkit.

Library layout mirrors the pipeline: `volume` (containers, I/O, preprocessing),
`phantom` (synthetic cohorts), `model` (lattice network + dual head), `losses`
(Dice + cross-entropy objective), `adversarial` (free adversarial fine-tuning),
`training` (optimization + folds + ablation), `inference` (sliding window,
BM/NBM modes, rendering), `metrics` (mAP / max-F1 / clDice / DSC), `cli`.
"""

from .adversarial import ATConfig, FreeATStats, free_at_epoch, project_linf
from .errors import DataError, NumericalError
from .inference import (
    PredictionVolume,
    apply_brain_mask,
    binarize,
    evaluate_modes,
    predict_record,
    render_mip,
    sliding_window_predict,
)
from .losses import LossWeights, ce_loss, dice_loss, joint_loss, task_loss
from .metrics import (
    MetricsReport,
    average_precision,
    cl_dice,
    dsc,
    evaluate_cohort,
    max_f1,
    metrics_markdown_table,
    skeletonize3d,
    subject_metrics,
)
from .model import (
    LatticeConfig,
    LatticeNet,
    PredictionPair,
    build_model,
    count_parameters,
    forward,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
    softmax_probs,
)
from .phantom import PhantomConfig, generate_cohort, generate_phantom, load_cohort, save_cohort
from .training import (
    FoldSplit,
    TrainConfig,
    TrainResult,
    augment,
    lr_schedule,
    make_folds,
    preprocess_record,
    run_ablation_grid,
    sample_patch,
    train,
)
from .volume import (
    CohortStats,
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

__version__ = "0.1.0"
