"""Localizable-rotation transforms.

Rotates a single square region of an image by a multiple of 90 degrees, as an
exact pixel permutation (no interpolation). Two patch-selection strategies:

* ``lorot-i`` (implicit localization): a random square patch, side drawn
  uniformly from 2 up to half the shorter image side, position uniform over
  all fully-contained placements. Pretext label = rotation index, 4 classes.
* ``lorot-e`` (explicit localization): one cell of a K x K uniform grid
  (K = 2 by default). Pretext label = packed (cell, rotation), 4*K^2 classes;
  the redundant rotation-0 label of every cell is kept, so a quarter of the
  label space leaves the image untouched.

A third variant, ``rotation``, rotates the whole image (the classic 4-way
rotation pretext) and exists as the comparison baseline.

All functions are pure and deterministic given their Generator; rotation
index r means 90*r degrees counter-clockwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

VARIANT_I = "lorot-i"
VARIANT_E = "lorot-e"
VARIANT_ROTATION = "rotation"
VARIANTS = (VARIANT_I, VARIANT_E, VARIANT_ROTATION)

NUM_ROTATIONS = 4


class Rotation(enum.IntEnum):
    """Quarter-turn rotation index; value r is 90*r degrees counter-clockwise."""

    DEG_0 = 0
    DEG_90 = 1
    DEG_180 = 2
    DEG_270 = 3

    @property
    def degrees(self) -> int:
        return 90 * self.value


@dataclass(frozen=True)
class PatchSpec:
    """A square image region: top-left corner (top_x = column, top_y = row) and side.

    ``cell_index`` is set (row-major, 0 = top-left) when the patch came from a
    grid layout.
    """

    top_x: int
    top_y: int
    side: int
    cell_index: int | None = None

    def validate(self, height: int, width: int) -> None:
        if self.side < 2:
            raise ValueError(f"patch side must be >= 2, got {self.side}")
        if self.top_x < 0 or self.top_y < 0:
            raise ValueError(f"patch corner must be non-negative, got ({self.top_x}, {self.top_y})")
        if self.top_x + self.side > width or self.top_y + self.side > height:
            raise ValueError(
                f"patch (corner=({self.top_x}, {self.top_y}), side={self.side}) "
                f"exceeds image bounds {height}x{width}"
            )

    def slices(self) -> tuple[slice, slice]:
        """(row, column) slices selecting the patch."""
        return (
            slice(self.top_y, self.top_y + self.side),
            slice(self.top_x, self.top_x + self.side),
        )


@dataclass(frozen=True)
class LoRotLabel:
    """Pretext label.

    ``lorot-i`` and ``rotation``: value is the rotation index in [0, 4).
    ``lorot-e``: value packs (cell q, rotation r) as 4*q + r with q row-major
    from the top-left, so the label space has 4*K^2 entries.
    """

    variant: str
    value: int
    grid_k: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant == VARIANT_E and self.grid_k < 1:
            raise ValueError(f"grid_k must be >= 1, got {self.grid_k}")
        if not 0 <= self.value < self.num_classes:
            raise ValueError(
                f"label value {self.value} out of range [0, {self.num_classes}) for {self.variant}"
            )

    @property
    def num_classes(self) -> int:
        if self.variant == VARIANT_E:
            return NUM_ROTATIONS * self.grid_k * self.grid_k
        return NUM_ROTATIONS

    @property
    def rotation(self) -> int:
        if self.variant == VARIANT_E:
            return self.value % NUM_ROTATIONS
        return self.value

    @property
    def cell(self) -> int | None:
        if self.variant == VARIANT_E:
            return self.value // NUM_ROTATIONS
        return None

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0


def encode_label_e(cell: int, rotation: int, grid_k: int = 2) -> int:
    """Pack (cell, rotation) into a single lorot-e label value."""
    if not 0 <= cell < grid_k * grid_k:
        raise ValueError(f"cell {cell} out of range [0, {grid_k * grid_k})")
    if not 0 <= rotation < NUM_ROTATIONS:
        raise ValueError(f"rotation {rotation} out of range [0, {NUM_ROTATIONS})")
    return NUM_ROTATIONS * cell + rotation


def decode_label_e(value: int, grid_k: int = 2) -> tuple[int, int]:
    """Inverse of :func:`encode_label_e`; returns (cell, rotation)."""
    if not 0 <= value < NUM_ROTATIONS * grid_k * grid_k:
        raise ValueError(f"label {value} out of range [0, {NUM_ROTATIONS * grid_k * grid_k})")
    return value // NUM_ROTATIONS, value % NUM_ROTATIONS


def pretext_classes(variant: str, grid_k: int = 2) -> int:
    """Label-space cardinality of a variant (4, or 4*K^2 for lorot-e)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == VARIANT_E:
        return NUM_ROTATIONS * grid_k * grid_k
    return NUM_ROTATIONS


def sample_patch_i(
    rng: np.random.Generator,
    height: int,
    width: int,
    min_side: int = 2,
    max_side: int | None = None,
) -> PatchSpec:
    """Draw a random square patch: side uniform on [min_side, max_side], then
    top_x uniform on [0, W-side], top_y uniform on [0, H-side] (all inclusive).

    Defaults to the standard range [2, min(W//2, H//2)]; the bounds are
    exposed for patch-size ablations (fixed sizes via min_side == max_side).
    """
    if min(height, width) < 4:
        raise ValueError(f"image must be at least 4x4 to sample a patch, got {height}x{width}")
    half = min(width // 2, height // 2)
    if max_side is None:
        max_side = half
    if not 2 <= min_side <= max_side <= half:
        raise ValueError(
            f"need 2 <= min_side <= max_side <= {half} (half the shorter side), "
            f"got [{min_side}, {max_side}]"
        )
    side = int(rng.integers(min_side, max_side + 1))
    top_x = int(rng.integers(0, width - side + 1))
    top_y = int(rng.integers(0, height - side + 1))
    return PatchSpec(top_x=top_x, top_y=top_y, side=side)


def grid_cell(height: int, width: int, grid_k: int, cell_index: int) -> PatchSpec:
    """Patch covering one cell of the K x K grid; requires a square image with
    side divisible by K so every cell is square.
    """
    if height != width:
        raise ValueError(f"grid cells require a square image, got {height}x{width}")
    if grid_k < 1:
        raise ValueError(f"grid_k must be >= 1, got {grid_k}")
    if height % grid_k != 0:
        raise ValueError(f"image side {height} is not divisible by grid_k={grid_k}")
    if not 0 <= cell_index < grid_k * grid_k:
        raise ValueError(f"cell_index {cell_index} out of range [0, {grid_k * grid_k})")
    side = height // grid_k
    row, col = divmod(cell_index, grid_k)
    return PatchSpec(top_x=col * side, top_y=row * side, side=side, cell_index=cell_index)


def sample_cell_e(rng: np.random.Generator, height: int, width: int, grid_k: int = 2) -> PatchSpec:
    """Choose one of the K^2 grid cells uniformly."""
    if height != width:
        raise ValueError(f"grid cells require a square image, got {height}x{width}")
    if height % grid_k != 0:
        raise ValueError(f"image side {height} is not divisible by grid_k={grid_k}")
    cell_index = int(rng.integers(0, grid_k * grid_k))
    return grid_cell(height, width, grid_k, cell_index)


def sample_label(rng: np.random.Generator, variant: str, grid_k: int = 2) -> LoRotLabel:
    """Uniform draw over the variant's full label space (identity labels included)."""
    n = pretext_classes(variant, grid_k)
    return LoRotLabel(variant=variant, value=int(rng.integers(0, n)), grid_k=grid_k)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValueError(f"expected an HxW or HxWxC array, got shape {image.shape}")
    return image


def _check_rotation(rotation: int) -> int:
    r = int(rotation)
    if not 0 <= r < NUM_ROTATIONS:
        raise ValueError(f"rotation index must be in [0, {NUM_ROTATIONS}), got {rotation}")
    return r


def apply_lorot(image: np.ndarray, patch: PatchSpec, rotation: int) -> np.ndarray:
    """Rotate the patch subarray by 90*rotation degrees CCW; everything outside
    the patch is copied bit-identically. Exact permutation, any dtype.
    """
    image = _check_image(image)
    r = _check_rotation(rotation)
    patch.validate(image.shape[0], image.shape[1])
    out = image.copy()
    sl = patch.slices()
    out[sl] = np.rot90(image[sl], k=r, axes=(0, 1))
    return out


def apply_global_rotation(image: np.ndarray, rotation: int) -> np.ndarray:
    """Rotate the whole image by 90*rotation degrees CCW. Quarter turns (r = 1, 3)
    require a square image so the output shape matches the input.
    """
    image = _check_image(image)
    r = _check_rotation(rotation)
    if r % 2 == 1 and image.shape[0] != image.shape[1]:
        raise ValueError(
            f"90/270 degree global rotation requires a square image, got "
            f"{image.shape[0]}x{image.shape[1]}"
        )
    return np.ascontiguousarray(np.rot90(image, k=r, axes=(0, 1)))


def full_image_patch(height: int, width: int) -> PatchSpec:
    """PatchSpec covering the whole (square) image; used by the rotation variant."""
    if height != width:
        raise ValueError(f"full-image patch requires a square image, got {height}x{width}")
    return PatchSpec(top_x=0, top_y=0, side=height)


@dataclass
class TransformedSample:
    """An image after localizable rotation, with its primary and pretext labels.

    Pixels outside ``patch`` are bit-identical to the source image.
    """

    image: np.ndarray
    primary_label: int
    pretext_label: LoRotLabel
    patch: PatchSpec


def transform_sample(
    image: np.ndarray,
    primary_label: int,
    variant: str,
    rng: np.random.Generator,
    grid_k: int = 2,
) -> TransformedSample:
    """Draw one pretext label (and patch, for lorot-i) and apply the rotation.

    Draw order is fixed (label first, then patch) so a seeded stream replays
    identically. The patch is drawn even for rotation-0 labels: the image is
    unchanged but the stream stays aligned.
    """
    image = _check_image(image)
    height, width = image.shape[0], image.shape[1]
    label = sample_label(rng, variant, grid_k)
    if variant == VARIANT_I:
        patch = sample_patch_i(rng, height, width)
    elif variant == VARIANT_E:
        patch = grid_cell(height, width, grid_k, label.cell)
    else:
        patch = full_image_patch(height, width)
    if variant == VARIANT_ROTATION:
        out = apply_global_rotation(image, label.rotation)
    else:
        out = apply_lorot(image, patch, label.rotation)
    return TransformedSample(image=out, primary_label=int(primary_label), pretext_label=label, patch=patch)


def transform_batch(
    samples: Sequence[tuple[np.ndarray, int]],
    variant: str,
    rng: np.random.Generator,
    grid_k: int = 2,
) -> list[TransformedSample]:
    """One independent (label, patch) draw per sample, order-preserving."""
    if len(samples) == 0:
        raise ValueError("transform_batch requires a non-empty batch")
    return [transform_sample(img, y, variant, rng, grid_k) for img, y in samples]
