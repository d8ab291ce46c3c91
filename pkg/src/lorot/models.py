"""Shared feature extractor and the two softmax classifier heads.

A ``DualHeadModel`` wraps any feature extractor that maps an image batch to a
(N, C_f, h_f, w_f) feature map and exposes ``out_channels``. The primary head
always consumes the globally average-pooled features; the pretext head pools
according to ``pooling_mode``:

* ``gap``            -> per-channel spatial mean, dim C_f (shared with the
                        primary head's pooled vector)
* ``reduced_dense``  -> 2x2 average pool then flatten, dim 4*C_f
* ``dense``          -> flatten, dim h_f*w_f*C_f

Both heads are single linear layers; ``forward`` returns softmax probability
rows for both tasks from one extractor pass.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

POOLING_MODES = ("gap", "reduced_dense", "dense")

CHECKPOINT_FORMAT = "lorot-checkpoint-v1"


def pool_features(feature_map: torch.Tensor, mode: str) -> torch.Tensor:
    """Pool a (N, C, h, w) feature map to a flat (N, d) vector."""
    if feature_map.ndim != 4:
        raise ValueError(f"expected a (N, C, h, w) feature map, got shape {tuple(feature_map.shape)}")
    if mode == "gap":
        return feature_map.mean(dim=(2, 3))
    if mode == "reduced_dense":
        if feature_map.shape[2] < 2 or feature_map.shape[3] < 2:
            raise ValueError(
                f"reduced_dense pooling needs spatial dims >= 2, got {tuple(feature_map.shape[2:])}"
            )
        return F.adaptive_avg_pool2d(feature_map, (2, 2)).flatten(1)
    if mode == "dense":
        return feature_map.flatten(1)
    raise ValueError(f"unknown pooling mode {mode!r}, expected one of {POOLING_MODES}")


def pooled_dim(channels: int, mode: str, feature_hw: tuple[int, int] | None = None) -> int:
    """Flat dimension produced by :func:`pool_features` for a given map shape."""
    if mode == "gap":
        return channels
    if mode == "reduced_dense":
        return 4 * channels
    if mode == "dense":
        if feature_hw is None:
            raise ValueError("dense pooling needs the fixed feature-map spatial dims")
        return channels * feature_hw[0] * feature_hw[1]
    raise ValueError(f"unknown pooling mode {mode!r}, expected one of {POOLING_MODES}")


class ReferenceCNN(nn.Module):
    """Small convolutional feature extractor for desk-scale experiments.

    Each block is conv3x3 (zero padding) + optional BatchNorm + activation +
    2x2 max pool, so an input of side S yields a feature map of side
    S / 2^len(widths). Zero padding matters: it lets globally pooled features
    still carry absolute-position information, which the explicit-localization
    pretext head relies on under GAP pooling.
    """

    def __init__(
        self,
        in_channels: int = 3,
        widths: tuple[int, ...] = (16, 32, 64),
        batch_norm: bool = True,
        activation: str = "relu",
    ):
        super().__init__()
        if not widths:
            raise ValueError("at least one block width is required")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.batch_norm = batch_norm
        self.activation = activation
        act = nn.ReLU if activation == "relu" else nn.Tanh
        layers: list[nn.Module] = []
        prev = in_channels
        for w in self.widths:
            layers.append(nn.Conv2d(prev, w, kernel_size=3, padding=1))
            if batch_norm:
                layers.append(nn.BatchNorm2d(w))
            layers.append(act())
            layers.append(nn.MaxPool2d(2))
            prev = w
        self.blocks = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)

    def feature_hw(self, image_size: int) -> tuple[int, int]:
        side = image_size // (2 ** len(self.widths))
        if side < 1:
            raise ValueError(f"input side {image_size} too small for {len(self.widths)} pooling stages")
        return (side, side)

    def arch_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "batch_norm": self.batch_norm,
            "activation": self.activation,
        }


class DualHeadModel(nn.Module):
    """Feature extractor + primary softmax head + pretext softmax head."""

    def __init__(
        self,
        extractor: nn.Module,
        num_classes: int,
        pretext_classes: int,
        pooling_mode: str = "gap",
        feature_hw: tuple[int, int] | None = None,
    ):
        super().__init__()
        if pooling_mode not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {pooling_mode!r}, expected one of {POOLING_MODES}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if pretext_classes < 2:
            raise ValueError(f"pretext_classes must be >= 2, got {pretext_classes}")
        channels = extractor.out_channels
        self.extractor = extractor
        self.pooling_mode = pooling_mode
        self.feature_hw = tuple(feature_hw) if feature_hw is not None else None
        self.num_classes = num_classes
        self.pretext_classes = pretext_classes
        self.primary_head = nn.Linear(channels, num_classes)
        self.pretext_head = nn.Linear(pooled_dim(channels, pooling_mode, self.feature_hw), pretext_classes)

    def logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One extractor pass serving both heads."""
        feature_map = self.extractor(x)
        pooled_primary = pool_features(feature_map, "gap")
        if self.pooling_mode == "gap":
            pooled_pretext = pooled_primary
        else:
            pooled_pretext = pool_features(feature_map, self.pooling_mode)
        return self.primary_head(pooled_primary), self.pretext_head(pooled_pretext)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Probability rows (P_u, P_v) over the primary and pretext label spaces."""
        logits_u, logits_v = self.logits(x)
        return F.softmax(logits_u, dim=1), F.softmax(logits_v, dim=1)


def build_model(
    num_classes: int,
    pretext_classes: int,
    image_size: int,
    in_channels: int = 3,
    widths: tuple[int, ...] = (16, 32, 64),
    pooling_mode: str = "gap",
    batch_norm: bool = True,
    activation: str = "relu",
) -> DualHeadModel:
    """ReferenceCNN-backed dual-head model; init depends only on the torch seed."""
    extractor = ReferenceCNN(
        in_channels=in_channels, widths=widths, batch_norm=batch_norm, activation=activation
    )
    return DualHeadModel(
        extractor,
        num_classes=num_classes,
        pretext_classes=pretext_classes,
        pooling_mode=pooling_mode,
        feature_hw=extractor.feature_hw(image_size),
    )


def save_checkpoint(path: str | Path, model: DualHeadModel, metadata: dict | None = None) -> None:
    """Serialize model weights plus the structural info needed to rebuild and
    validate it. ``metadata`` is free-form (config hash, seed, variant, ...).
    """
    if not isinstance(model.extractor, ReferenceCNN):
        raise ValueError("checkpointing supports ReferenceCNN extractors; wrap others externally")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.extractor.arch_config(),
        "num_classes": model.num_classes,
        "pretext_classes": model.pretext_classes,
        "pooling_mode": model.pooling_mode,
        "feature_hw": list(model.feature_hw) if model.feature_hw else None,
        "state_dict": model.state_dict(),
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, str(path))


def load_checkpoint(
    path: str | Path,
    expected_num_classes: int | None = None,
    expected_pretext_classes: int | None = None,
) -> tuple[DualHeadModel, dict]:
    """Rebuild a model from :func:`save_checkpoint` output.

    Head dimensions are validated against the expectations when given;
    a mismatch raises instead of silently loading incompatible weights.
    """
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if expected_num_classes is not None and payload["num_classes"] != expected_num_classes:
        raise ValueError(
            f"checkpoint primary head has {payload['num_classes']} classes, "
            f"config expects {expected_num_classes}"
        )
    if expected_pretext_classes is not None and payload["pretext_classes"] != expected_pretext_classes:
        raise ValueError(
            f"checkpoint pretext head has {payload['pretext_classes']} classes, "
            f"config expects {expected_pretext_classes}"
        )
    arch = payload["arch"]
    extractor = ReferenceCNN(
        in_channels=arch["in_channels"],
        widths=tuple(arch["widths"]),
        batch_norm=arch["batch_norm"],
        activation=arch["activation"],
    )
    model = DualHeadModel(
        extractor,
        num_classes=payload["num_classes"],
        pretext_classes=payload["pretext_classes"],
        pooling_mode=payload["pooling_mode"],
        feature_hw=tuple(payload["feature_hw"]) if payload["feature_hw"] else None,
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["metadata"]
