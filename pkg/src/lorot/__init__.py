"""Localizable rotation (LoRot) auxiliary self-supervision for supervised
image classification, with the measurement tools around it: affinity-based
distribution-shift scoring, KL-to-uniform OOD detection with AUROC,
exponential class imbalance, and PGD adversarial training/evaluation.
"""

__version__ = "0.1.0"

from .adversarial import AdversarialConfig, pgd_attack
from .config import ExperimentConfig, RunManifest, output_lock
from .datasets import (
    ImbalanceSpec,
    LabeledDataset,
    OODEvalPair,
    build_imbalanced,
    load_dataset,
    make_blobs,
    make_cue_conflict,
    make_ood_pair,
    make_stripes,
    pair_ood,
)
from .evaluation import (
    ConfidenceReport,
    OODScoreReport,
    accuracy,
    affinity,
    auroc,
    classwise_confidence,
    eval_adversarial,
    kl_to_uniform,
    lambda_sweep,
    max_softmax,
    ood_evaluate,
    score_samples,
)
from .models import DualHeadModel, ReferenceCNN, build_model, load_checkpoint, pool_features, save_checkpoint
from .recipes import RECIPES, run_recipe
from .training import (
    TrainingConfig,
    TrainingHistory,
    adversarial_train_step,
    multitask_loss,
    run_training,
    train_step_da,
    train_step_mt,
    train_step_pt,
)
from .transforms import (
    LoRotLabel,
    PatchSpec,
    Rotation,
    TransformedSample,
    apply_global_rotation,
    apply_lorot,
    decode_label_e,
    encode_label_e,
    sample_cell_e,
    sample_label,
    sample_patch_i,
    transform_batch,
    transform_sample,
)
