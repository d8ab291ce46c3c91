"""Measurement: accuracy, affinity, OOD scoring and AUROC, per-class
confidence, adversarial robustness, and the lambda sweep.

Score convention: every sample score measures in-distribution-ness (higher =
more confident = more in-distribution), so AUROC above 0.5 always means the
in-distribution set is correctly ranked above the out-of-distribution set,
for both score kinds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .adversarial import AdversarialConfig, pgd_attack
from .datasets import LabeledDataset, OODEvalPair
from .models import DualHeadModel
from .seeding import content_key, derive_rng
from .transforms import (
    VARIANT_E,
    VARIANT_I,
    VARIANT_ROTATION,
    apply_global_rotation,
    apply_lorot,
    grid_cell,
    pretext_classes,
    sample_patch_i,
)

SCORE_KINDS = ("kl", "msp")

AFFINITY_TRANSFORMS = ("identity", VARIANT_ROTATION, VARIANT_I, VARIANT_E)

_ROW_TOLERANCE = 1e-5


def predict_probs(model: DualHeadModel, dataset: LabeledDataset, batch_size: int = 256) -> np.ndarray:
    """Primary-head softmax rows for every sample, eval mode, deterministic."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset.images[start : start + batch_size]
            x = torch.from_numpy(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2)))
            probs_u, _ = model(x)
            rows.append(probs_u.numpy())
    model.train(was_training)
    return np.concatenate(rows, axis=0)


def accuracy(
    model: DualHeadModel, dataset: LabeledDataset, batch_size: int = 256, top_k: int = 1
) -> float:
    """Top-k accuracy in percent over the full dataset."""
    probs = predict_probs(model, dataset, batch_size)
    if top_k == 1:
        hits = probs.argmax(axis=1) == dataset.labels
    else:
        top = np.argsort(-probs, axis=1)[:, :top_k]
        hits = (top == dataset.labels[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def _check_prob_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[1] < 1:
        raise ValueError(f"expected probability rows, got shape {rows.shape}")
    if rows.min() < -1e-12:
        raise ValueError(f"negative probability {rows.min()} in score input")
    sums = rows.sum(axis=1)
    if np.abs(sums - 1.0).max() > _ROW_TOLERANCE:
        raise ValueError(f"probability rows must sum to 1 within {_ROW_TOLERANCE}")
    return np.clip(rows, 0.0, None)


def kl_to_uniform(row: np.ndarray) -> float:
    """KL(p || uniform) = sum_c p_c * log(C * p_c), with 0*log(0) = 0.

    Zero exactly when the row is uniform; grows with confidence up to log C.
    """
    rows = _check_prob_rows(row)
    return float(_kl_rows(rows)[0])


def _kl_rows(rows: np.ndarray) -> np.ndarray:
    c = rows.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, rows * np.log(c * rows), 0.0)
    return terms.sum(axis=1)


def max_softmax(row: np.ndarray) -> float:
    """Maximum softmax probability of a row."""
    rows = _check_prob_rows(row)
    return float(rows[0].max())


def score_samples(prob_rows: np.ndarray, kind: str = "kl") -> np.ndarray:
    """Per-row in-distribution-ness scores for a (N, C) probability matrix."""
    rows = _check_prob_rows(prob_rows)
    if kind == "kl":
        return _kl_rows(rows)
    if kind == "msp":
        return rows.max(axis=1)
    raise ValueError(f"unknown score kind {kind!r}, expected one of {SCORE_KINDS}")


def auroc(in_scores: np.ndarray, out_scores: np.ndarray) -> float:
    """Probability that a random in-distribution score exceeds a random
    out-of-distribution score, ties counted half (Mann-Whitney rank form).
    """
    in_scores = np.asarray(in_scores, dtype=np.float64).ravel()
    out_scores = np.asarray(out_scores, dtype=np.float64).ravel()
    if len(in_scores) == 0 or len(out_scores) == 0:
        raise ValueError("auroc requires non-empty score vectors")
    n, m = len(in_scores), len(out_scores)
    ranks = _average_ranks(np.concatenate([in_scores, out_scores]))
    u = ranks[:n].sum() - n * (n + 1) / 2
    return u / (n * m)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of the tie group."""
    order = np.argsort(values, kind="mergesort")
    sorted_values = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


@dataclass
class OODScoreReport:
    """Per-sample scores on both sets plus the AUROC they imply. The stored
    vectors are the audit trail: ``recompute_auroc`` must reproduce ``auroc``.
    """

    score_kind: str
    in_scores: np.ndarray
    out_scores: np.ndarray
    auroc: float

    def recompute_auroc(self) -> float:
        return auroc(self.in_scores, self.out_scores)

    def to_dict(self) -> dict:
        return {
            "score_kind": self.score_kind,
            "auroc": self.auroc,
            "n_in": len(self.in_scores),
            "n_out": len(self.out_scores),
        }


def ood_evaluate(model: DualHeadModel, pair: OODEvalPair, score_kind: str = "kl") -> OODScoreReport:
    """Score every sample of both sets and compute AUROC."""
    in_scores = score_samples(predict_probs(model, pair.in_dist), score_kind)
    out_scores = score_samples(predict_probs(model, pair.out_dist), score_kind)
    return OODScoreReport(
        score_kind=score_kind,
        in_scores=in_scores,
        out_scores=out_scores,
        auroc=auroc(in_scores, out_scores),
    )


@dataclass
class ConfidenceReport:
    """Mean max-softmax confidence per in-distribution class and per
    out-of-distribution class (one ungrouped mean when out labels are absent).
    """

    in_class_means: np.ndarray
    out_class_means: np.ndarray | None
    out_mean: float
    in_confidences: np.ndarray = field(repr=False)
    out_confidences: np.ndarray = field(repr=False)
    in_labels: np.ndarray = field(repr=False)
    out_labels: np.ndarray | None = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "in_class_means": self.in_class_means.tolist(),
            "out_class_means": None if self.out_class_means is None else self.out_class_means.tolist(),
            "out_mean": self.out_mean,
        }


def classwise_confidence(model: DualHeadModel, pair: OODEvalPair) -> ConfidenceReport:
    in_conf = score_samples(predict_probs(model, pair.in_dist), "msp")
    out_conf = score_samples(predict_probs(model, pair.out_dist), "msp")
    in_labels = pair.in_dist.labels
    in_means = np.array(
        [in_conf[in_labels == c].mean() for c in range(pair.in_dist.num_classes)]
    )
    out_labels = pair.out_dist.labels
    if (out_labels < 0).any():
        out_class_means, grouped_labels = None, None
    else:
        out_class_means = np.array(
            [out_conf[out_labels == c].mean() for c in range(pair.out_dist.num_classes)]
        )
        grouped_labels = out_labels
    return ConfidenceReport(
        in_class_means=in_means,
        out_class_means=out_class_means,
        out_mean=float(out_conf.mean()),
        in_confidences=in_conf,
        out_confidences=out_conf,
        in_labels=in_labels,
        out_labels=grouped_labels,
    )


def build_affinity_validation(
    dataset: LabeledDataset,
    transform: str,
    seed: int = 0,
    include_identity: bool = True,
    grid_k: int = 2,
) -> LabeledDataset:
    """Transformed copy of a validation set: one draw per image, pretext labels
    uniform over the transform's full label space (identity rotations included
    unless ``include_identity`` is False). Per-sample streams are keyed by the
    image content, so the result is invariant to dataset ordering.
    """
    if transform not in AFFINITY_TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}, expected one of {AFFINITY_TRANSFORMS}")
    if transform == "identity":
        return LabeledDataset(
            name=f"{dataset.name}-identity",
            split=dataset.split,
            images=dataset.images.copy(),
            labels=dataset.labels.copy(),
            num_classes=dataset.num_classes,
        )
    images = np.empty_like(dataset.images)
    h, w, _ = dataset.image_shape
    for i in range(len(dataset)):
        img = dataset.images[i]
        rng = derive_rng(seed, content_key(img))
        if transform == VARIANT_E:
            n_labels = pretext_classes(VARIANT_E, grid_k)
            if include_identity:
                value = int(rng.integers(0, n_labels))
            else:
                cell = int(rng.integers(0, grid_k * grid_k))
                rotation = int(rng.integers(1, 4))
                value = 4 * cell + rotation
            patch = grid_cell(h, w, grid_k, value // 4)
            images[i] = apply_lorot(img, patch, value % 4)
        else:
            rotation = int(rng.integers(0, 4)) if include_identity else int(rng.integers(1, 4))
            if transform == VARIANT_I:
                patch = sample_patch_i(rng, h, w)
                images[i] = apply_lorot(img, patch, rotation)
            else:
                images[i] = apply_global_rotation(img, rotation)
    return LabeledDataset(
        name=f"{dataset.name}-{transform}",
        split=dataset.split,
        images=images,
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
    )


def affinity(
    model: DualHeadModel,
    val_dataset: LabeledDataset,
    transform: str,
    seed: int = 0,
    include_identity: bool = True,
    grid_k: int = 2,
    batch_size: int = 256,
) -> float:
    """Accuracy ratio 100 * A(m, transformed val) / A(m, clean val), in percent.

    The model is expected to have been trained on clean data only; the ratio
    then measures the distribution shift the transform induces. The identity
    transform yields exactly 100.
    """
    clean = accuracy(model, val_dataset, batch_size)
    if clean == 0.0:
        raise ValueError("affinity undefined: model has zero accuracy on the clean validation set")
    shifted = build_affinity_validation(val_dataset, transform, seed, include_identity, grid_k)
    return 100.0 * accuracy(model, shifted, batch_size) / clean


def eval_adversarial(
    model: DualHeadModel,
    dataset: LabeledDataset,
    adv_config: AdversarialConfig,
    steps: int | None = None,
    batch_size: int = 128,
    seed: int = 0,
) -> dict:
    """Clean and robust (PGD) accuracy in percent.

    Uses the evaluation step-size schedule for the configured step count.
    Every crafted example satisfies the epsilon-ball and range constraints.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    steps = adv_config.eval_steps if steps is None else steps
    alpha = adv_config.eval_alpha(steps) if adv_config.epsilon > 0 else 0.0
    was_training = model.training
    model.eval()
    correct_clean = 0
    correct_robust = 0
    for batch_idx, start in enumerate(range(0, len(dataset), batch_size)):
        chunk = dataset.images[start : start + batch_size]
        labels = torch.from_numpy(dataset.labels[start : start + batch_size])
        x = torch.from_numpy(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2)))
        gen = torch.Generator()
        gen.manual_seed(int(derive_rng(seed, 14, batch_idx).integers(2**63)))
        x_adv = pgd_attack(model, x, labels, adv_config, steps=steps, alpha=alpha, generator=gen)
        with torch.no_grad():
            probs_clean, _ = model(x)
            probs_adv, _ = model(x_adv)
        correct_clean += int((probs_clean.argmax(dim=1) == labels).sum())
        correct_robust += int((probs_adv.argmax(dim=1) == labels).sum())
    model.train(was_training)
    n = len(dataset)
    return {
        "clean_accuracy": 100.0 * correct_clean / n,
        "robust_accuracy": 100.0 * correct_robust / n,
        "steps": steps,
        "epsilon": adv_config.epsilon,
    }


def lambda_sweep(
    base_config,
    lambdas,
    train_dataset: LabeledDataset,
    eval_dataset: LabeledDataset,
    ood_pair: OODEvalPair | None = None,
    score_kind: str = "kl",
) -> list[dict]:
    """Train one model per lambda from a shared seed and report accuracy
    (plus AUROC when an OOD pair is given). Returns one row per lambda.
    """
    from .training import config_with, run_training

    if not lambdas:
        raise ValueError("lambda sweep needs at least one lambda value")
    rows = []
    for lam in lambdas:
        config = config_with(base_config, lam=float(lam))
        model, _ = run_training(config, train_dataset)
        row = {"lam": float(lam), "accuracy": accuracy(model, eval_dataset)}
        if ood_pair is not None:
            row["auroc"] = ood_evaluate(model, ood_pair, score_kind).auroc
        rows.append(row)
    return rows
