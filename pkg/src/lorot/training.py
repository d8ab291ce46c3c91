"""Multi-task training engine.

The objective is the batch-mean negative log-likelihood of the primary label
plus ``lam`` times that of the pretext label:

    loss = -(1/N) * sum_i( log P_u[y_i] + lam * log P_v[yhat_i] )

Integration strategies:

* ``baseline``  clean inputs, primary loss only
* ``da``        transformed inputs, primary loss only (pretext head idle)
* ``mt``        transformed inputs, both losses from one shared forward
* ``pt``        clean inputs for the primary loss plus a transformed copy of
                the batch for the pretext loss (two forwards per step)

With adversarial training enabled, a 10-step PGD adversary is crafted against
the primary label on the (already transformed, for da/mt) inputs, and the
optimizer step runs on the adversarial batch.

Everything is seed-deterministic in single-worker mode: batch order, transform
draws, and PGD random starts all come from streams derived from
(seed, stream tag, epoch, batch index).
"""

from __future__ import annotations

import json
import hashlib
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from .adversarial import AdversarialConfig, pgd_attack
from .datasets import LabeledDataset
from .models import DualHeadModel, build_model
from .seeding import derive_rng
from .transforms import (
    VARIANTS,
    VARIANT_E,
    VARIANT_ROTATION,
    apply_global_rotation,
    apply_lorot,
    pretext_classes,
    transform_batch,
)

STRATEGIES = ("baseline", "da", "mt", "pt")

# Probabilities are floored here before the log, so early-training saturation
# cannot produce non-finite losses.
PROB_FLOOR = 1e-12

# Stream tags for derive_rng; keep distinct so order/transform/attack draws
# never alias.
_STREAM_ORDER = 11
_STREAM_TRANSFORM = 12
_STREAM_ATTACK = 13


@dataclass(frozen=True)
class TrainingConfig:
    strategy: str = "mt"
    variant: str = "lorot-i"
    lam: float = 0.1
    batch_size: int = 128
    epochs: int = 10
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    seed: int = 0
    grid_k: int = 2
    pooling_mode: str = "gap"
    model_widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.grid_k < 1:
            raise ValueError(f"grid_k must be >= 1, got {self.grid_k}")
        if not self.model_widths:
            raise ValueError("model_widths must not be empty")

    def pretext_classes(self) -> int:
        return pretext_classes(self.variant, self.grid_k)


def _nll_rows(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample negative log-likelihood with the probability floor."""
    if probs.ndim != 2:
        raise ValueError(f"expected probability rows (N, C), got shape {tuple(probs.shape)}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(
            f"label out of range [0, {probs.shape[1]}): "
            f"min={int(labels.min())}, max={int(labels.max())}"
        )
    picked = probs[torch.arange(probs.shape[0]), labels]
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def multitask_loss(
    probs_u: torch.Tensor,
    probs_v: torch.Tensor | None,
    y: torch.Tensor,
    y_hat: torch.Tensor | None,
    lam: float,
) -> torch.Tensor:
    """Batch-mean primary NLL plus ``lam`` times the pretext NLL.

    ``probs_v``/``y_hat`` may be None only when ``lam`` is 0 (pure primary
    loss). Returns a scalar tensor, non-negative, zero only at perfect
    predictions on both tasks.
    """
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    loss = _nll_rows(probs_u, y).mean()
    if lam != 0:
        if probs_v is None or y_hat is None:
            raise ValueError("pretext probabilities and labels are required when lam != 0")
        loss = loss + lam * _nll_rows(probs_v, y_hat).mean()
    return loss


@dataclass
class StepResult:
    loss: float
    primary_loss: float
    pretext_loss: float
    correct: int
    count: int
    forwarded: int


def _step(
    model: DualHeadModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    y: torch.Tensor,
    y_hat: torch.Tensor | None,
    lam: float,
) -> StepResult:
    model.train()
    optimizer.zero_grad()
    probs_u, probs_v = model(images)
    primary = _nll_rows(probs_u, y).mean()
    if y_hat is not None:
        pretext = _nll_rows(probs_v, y_hat).mean()
    else:
        pretext = torch.zeros((), dtype=primary.dtype)
    loss = primary + lam * pretext
    loss.backward()
    optimizer.step()
    correct = int((probs_u.argmax(dim=1) == y).sum())
    return StepResult(
        loss=float(loss.detach()),
        primary_loss=float(primary.detach()),
        pretext_loss=float(pretext.detach()),
        correct=correct,
        count=len(y),
        forwarded=len(y),
    )


def train_step_mt(model, optimizer, images, y, y_hat, lam) -> StepResult:
    """One multi-task step: single shared forward, both heads in the loss."""
    return _step(model, optimizer, images, y, y_hat, lam)


def train_step_da(model, optimizer, images, y, y_hat=None) -> StepResult:
    """Data-augmentation step: transformed inputs, primary loss only.

    Identical to ``train_step_mt`` with lam = 0; the pretext head receives an
    exactly-zero gradient.
    """
    return _step(model, optimizer, images, y, y_hat, lam=0.0)


def train_step_pt(model, optimizer, clean_images, y, transformed_images, y_hat, lam) -> StepResult:
    """Parallel-task step: primary loss on the clean batch, pretext loss on the
    transformed batch; two extractor forwards per step.
    """
    model.train()
    optimizer.zero_grad()
    probs_u, _ = model(clean_images)
    _, probs_v = model(transformed_images)
    primary = _nll_rows(probs_u, y).mean()
    pretext = _nll_rows(probs_v, y_hat).mean()
    loss = primary + lam * pretext
    loss.backward()
    optimizer.step()
    correct = int((probs_u.argmax(dim=1) == y).sum())
    return StepResult(
        loss=float(loss.detach()),
        primary_loss=float(primary.detach()),
        pretext_loss=float(pretext.detach()),
        correct=correct,
        count=len(y),
        forwarded=len(y) + len(y_hat),
    )


def adversarial_train_step(
    model,
    optimizer,
    images,
    y,
    y_hat,
    lam,
    adv_config: AdversarialConfig | None,
    generator: torch.Generator | None = None,
) -> StepResult:
    """PGD adversarial training step.

    Crafts ``train_steps``-step adversaries against the primary label on the
    given (already pretext-transformed) inputs, then runs one multi-task step
    on the adversarial batch: both heads see the same adversarial input. With
    ``adv_config`` None this is exactly ``train_step_mt``.
    """
    if adv_config is None:
        return train_step_mt(model, optimizer, images, y, y_hat, lam)
    x_adv = pgd_attack(model, images, y, adv_config, generator=generator)
    result = _step(model, optimizer, x_adv, y, y_hat, lam)
    result.forwarded += adv_config.train_steps * len(y)  # attack forwards
    return result


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    primary_loss: float
    pretext_loss: float
    train_accuracy: float
    val_accuracy: float | None
    forwarded_samples: int  # cumulative extractor forwards, in samples
    lr: float
    wall_time_s: float


@dataclass
class TrainingHistory:
    seed: int
    strategy: str
    variant: str
    records: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "strategy": self.strategy,
            "variant": self.variant,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingHistory":
        return cls(
            seed=data["seed"],
            strategy=data["strategy"],
            variant=data["variant"],
            records=[EpochRecord(**r) for r in data["records"]],
        )

    def save(self, path: str | Path) -> None:
        """Line-delimited records: a header line, then one JSON object per epoch."""
        path = Path(path)
        with open(path, "w") as f:
            header = {"seed": self.seed, "strategy": self.strategy, "variant": self.variant}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for record in self.records:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainingHistory":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"empty history file: {path}")
        header = json.loads(lines[0])
        records = [EpochRecord(**json.loads(line)) for line in lines[1:]]
        return cls(records=records, **header)

    def checksum(self) -> str:
        """Digest of the deterministic content (wall time excluded)."""
        payload = self.to_dict()
        for record in payload["records"]:
            record.pop("wall_time_s")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _to_torch_images(images_np: np.ndarray) -> torch.Tensor:
    # (B, H, W, C) float32 -> (B, C, H, W)
    return torch.from_numpy(np.ascontiguousarray(images_np.transpose(0, 3, 1, 2)))


def _replay_transform(image: np.ndarray, sample) -> np.ndarray:
    """Apply a previously drawn pretext transform to a different image."""
    if sample.pretext_label.variant == VARIANT_ROTATION:
        return apply_global_rotation(image, sample.pretext_label.rotation)
    return apply_lorot(image, sample.patch, sample.pretext_label.rotation)


def _validate_geometry(config: TrainingConfig, dataset: LabeledDataset) -> None:
    h, w, _ = dataset.image_shape
    needs_transform = config.strategy in ("da", "mt", "pt")
    if not needs_transform:
        return
    if config.variant in (VARIANT_E, VARIANT_ROTATION) and h != w:
        raise ValueError(f"variant {config.variant!r} requires square images, got {h}x{w}")
    if config.variant == VARIANT_E and h % config.grid_k != 0:
        raise ValueError(f"image side {h} is not divisible by grid_k={config.grid_k}")


def run_training(
    config: TrainingConfig,
    train_dataset: LabeledDataset,
    val_dataset: LabeledDataset | None = None,
    adv_config: AdversarialConfig | None = None,
) -> tuple[DualHeadModel, TrainingHistory]:
    """Full training loop; returns the trained model and its history.

    Deterministic given (config, datasets): reruns produce bit-identical
    histories and parameters in single-worker CPU mode.
    """
    if len(train_dataset) == 0:
        raise ValueError("training dataset is empty")
    if adv_config is not None and config.strategy == "pt":
        raise ValueError("adversarial training is supported for baseline/da/mt strategies only")
    _validate_geometry(config, train_dataset)

    torch.manual_seed(config.seed)
    h, w, c = train_dataset.image_shape
    model = build_model(
        num_classes=train_dataset.num_classes,
        pretext_classes=config.pretext_classes(),
        image_size=h,
        in_channels=c,
        widths=config.model_widths,
        pooling_mode=config.pooling_mode,
    )

    if config.optimizer == "sgd":
        optimizer = torch.optim.SGD(
            model.parameters(),
            lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
    else:
        optimizer = torch.optim.Adam(
            model.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.lr_decay_epochs), gamma=config.lr_decay_factor
    )

    history = TrainingHistory(seed=config.seed, strategy=config.strategy, variant=config.variant)
    n = len(train_dataset)
    forwarded_total = 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = derive_rng(config.seed, _STREAM_ORDER, epoch).permutation(n)
        sums = {"loss": 0.0, "primary": 0.0, "pretext": 0.0}
        correct = 0
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch_images = train_dataset.images[idx]
            batch_labels = train_dataset.labels[idx]
            y = torch.from_numpy(batch_labels)

            if config.strategy == "baseline":
                x = _to_torch_images(batch_images)
                y_hat, lam = None, 0.0
            else:
                t_rng = derive_rng(config.seed, _STREAM_TRANSFORM, epoch, batch_idx)
                samples = transform_batch(
                    list(zip(batch_images, batch_labels)), config.variant, t_rng, config.grid_k
                )
                x = _to_torch_images(np.stack([s.image for s in samples]))
                y_hat = torch.tensor([s.pretext_label.value for s in samples], dtype=torch.int64)
                lam = config.lam if config.strategy in ("mt", "pt") else 0.0

            if adv_config is not None:
                gen = torch.Generator()
                gen.manual_seed(
                    int(derive_rng(config.seed, _STREAM_ATTACK, epoch, batch_idx).integers(2**63))
                )
                if config.strategy == "baseline" or adv_config.transform_first:
                    result = adversarial_train_step(
                        model, optimizer, x, y, y_hat, lam, adv_config, generator=gen
                    )
                else:
                    # perturb-first alternative: craft the adversary on the
                    # clean batch, then replay the drawn patch rotations on it
                    x_adv = pgd_attack(
                        model, _to_torch_images(batch_images), y, adv_config, generator=gen
                    )
                    adv_images = np.ascontiguousarray(x_adv.numpy().transpose(0, 2, 3, 1))
                    replayed = np.stack([
                        _replay_transform(img, s) for img, s in zip(adv_images, samples)
                    ])
                    result = _step(model, optimizer, _to_torch_images(replayed), y, y_hat, lam)
                    result.forwarded += adv_config.train_steps * len(y)
            elif config.strategy == "pt":
                x_clean = _to_torch_images(batch_images)
                result = train_step_pt(model, optimizer, x_clean, y, x, y_hat, lam)
            else:
                result = _step(model, optimizer, x, y, y_hat, lam)

            weight = result.count
            sums["loss"] += result.loss * weight
            sums["primary"] += result.primary_loss * weight
            sums["pretext"] += result.pretext_loss * weight
            correct += result.correct
            forwarded_total += result.forwarded

        val_accuracy = None
        if val_dataset is not None:
            from .evaluation import accuracy

            val_accuracy = accuracy(model, val_dataset)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                loss=sums["loss"] / n,
                primary_loss=sums["primary"] / n,
                pretext_loss=sums["pretext"] / n,
                train_accuracy=100.0 * correct / n,
                val_accuracy=val_accuracy,
                forwarded_samples=forwarded_total,
                lr=optimizer.param_groups[0]["lr"],
                wall_time_s=time.perf_counter() - t0,
            )
        )
        scheduler.step()

    model.eval()
    return model, history


def config_with(config: TrainingConfig, **overrides) -> TrainingConfig:
    """Derived config with fields replaced (validation re-runs)."""
    return replace(config, **overrides)
