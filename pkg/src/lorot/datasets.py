"""Dataset ingestion, synthetic generators, class imbalance, and OOD pairing.

Images are float32 arrays of shape (N, H, W, C) with values in [0, 1], labels
are int64 class indices. Datasets are immutable after construction; every
builder returns a new dataset.

Sources understood by :func:`load_dataset`:

* synthetic generators   {"synthetic": "stripes" | "blobs", ...params}
* a directory tree       <root>/<split>/<class_name>/<image files>
* a packed binary file   (see :data:`PACKED_MAGIC`; header + raw uint8 records)

The ``stripes`` generator makes a CIFAR-style 10-way task whose classes are
(orientation, period) pairs of a sinusoidal grating: rotating an image by 90
degrees turns each class into its opposite-orientation twin, so global
rotation genuinely shifts the label distribution while patch-local rotation
leaves most of the class evidence intact. With ``marker=True`` each image
additionally carries a small class-colored square, a deliberate shortcut
feature. The ``blobs`` generator makes smooth two-blob images with little
oriented energy, structurally different from stripes; with ``marker=True``
the same shortcut squares appear with random colors, which is what makes the
pairing a shortcut-sensitivity OOD benchmark.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng

SPLITS = ("train", "val", "test")

PACKED_MAGIC = b"LRPK"
PACKED_VERSION = 1

# 10 well-separated marker colors (hue wheel at full saturation/value).
MARKER_PALETTE = np.array(
    [colorsys.hsv_to_rgb(i / 10.0, 1.0, 1.0) for i in range(10)], dtype=np.float32
)
MARKER_BOX = (slice(2, 6), slice(2, 6))  # rows, cols of the 4x4 shortcut square

STRIPE_PERIODS = (4.0, 6.0, 8.0, 11.0, 16.0)


@dataclass
class LabeledDataset:
    name: str
    split: str
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64; -1 marks an unlabeled sample
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.labels) and (self.labels.max() >= self.num_classes or self.labels.min() < -1):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.num_classes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, indices: np.ndarray, name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            name=name or self.name,
            split=self.split,
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            num_classes=self.num_classes,
        )


def _stripe_class_params(label: int, num_classes: int, periods: tuple[float, ...]) -> tuple[int, float]:
    """Class -> (orientation, period). Even classes are horizontal bands
    (intensity varies along rows), odd classes the 90-degree twins.
    """
    if num_classes > 2 * len(periods):
        raise ValueError(f"stripes generator supports at most {2 * len(periods)} classes here")
    return label % 2, periods[label // 2]


def make_stripes(
    n: int,
    num_classes: int = 10,
    image_size: int = 32,
    marker: bool = False,
    amplitude: float = 0.25,
    noise: float = 0.05,
    periods: tuple[float, ...] | list[float] = STRIPE_PERIODS,
    seed: int = 0,
    split: str = "train",
    name: str | None = None,
) -> LabeledDataset:
    """Sinusoidal-grating classification set; labels assigned round-robin.

    Passing a different ``periods`` ladder yields structurally similar images
    from unseen classes, which is how the held-out OOD variant is built.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    periods = tuple(float(p) for p in periods)
    rng = derive_rng(seed, 101)
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    coords = np.arange(image_size, dtype=np.float32)
    for i, label in enumerate(labels):
        orientation, period = _stripe_class_params(int(label), num_classes, periods)
        phase = rng.uniform(0.0, period)
        wave = 0.5 + amplitude * np.sin(2.0 * math.pi * (coords + phase) / period)
        if orientation == 0:
            plane = np.repeat(wave[:, None], image_size, axis=1)
        else:
            plane = np.repeat(wave[None, :], image_size, axis=0)
        img = np.repeat(plane[:, :, None], 3, axis=2)
        img = img + rng.uniform(-0.05, 0.05)  # per-image brightness jitter
        img = img + rng.normal(0.0, noise, size=img.shape)
        if marker:
            img[MARKER_BOX[0], MARKER_BOX[1], :] = MARKER_PALETTE[int(label) % len(MARKER_PALETTE)]
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(
        name=name or f"stripes-n{n}-c{num_classes}-s{seed}" + ("-marker" if marker else ""),
        split=split,
        images=images,
        labels=labels,
        num_classes=num_classes,
    )


def make_blobs(
    n: int,
    num_classes: int = 2,
    image_size: int = 32,
    marker: bool = False,
    contrast: float = 0.45,
    noise: float = 0.02,
    seed: int = 0,
    split: str = "train",
    name: str | None = None,
) -> LabeledDataset:
    """Two-gaussian-blob images. The class places the main blob's horizontal
    center in one of ``num_classes`` bins; the second blob is a distractor.
    ``contrast`` bounds the per-channel blob amplitude.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    rng = derive_rng(seed, 202)
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
    bin_w = image_size / num_classes
    for i, label in enumerate(labels):
        img = np.full((image_size, image_size, 3), 0.5, dtype=np.float32)
        cx_main = (label + 0.5) * bin_w + rng.uniform(-0.2, 0.2) * bin_w
        cy_main = rng.uniform(0.25, 0.75) * image_size
        centers = [(cx_main, cy_main), (rng.uniform(0, image_size), rng.uniform(0, image_size))]
        for cx, cy in centers:
            sigma = rng.uniform(3.0, 7.0)
            bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
            amp = rng.uniform(-contrast, contrast, size=3).astype(np.float32)
            img = img + bump[:, :, None] * amp[None, None, :]
        img = img + rng.normal(0.0, noise, size=img.shape)
        if marker:
            img[MARKER_BOX[0], MARKER_BOX[1], :] = MARKER_PALETTE[int(rng.integers(len(MARKER_PALETTE)))]
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(
        name=name or f"blobs-n{n}-c{num_classes}-s{seed}" + ("-marker" if marker else ""),
        split=split,
        images=images,
        labels=labels,
        num_classes=num_classes,
    )


def make_cue_conflict(
    n: int,
    num_classes: int = 10,
    image_size: int = 32,
    amplitude: float = 0.25,
    noise: float = 0.05,
    periods: tuple[float, ...] | list[float] = STRIPE_PERIODS,
    seed: int = 0,
    split: str = "test",
    name: str | None = None,
) -> LabeledDataset:
    """Shortcut-conflict set: genuine stripe images of one class wearing the
    marker of a different class. Every local statistic is in-family, but the
    two class cues disagree, so a model that learned both cues should lose
    confidence here while a shortcut-reliant model stays sure. Labels record
    the marker class (used only for confidence grouping).
    """
    base = make_stripes(
        n,
        num_classes=num_classes,
        image_size=image_size,
        marker=False,
        amplitude=amplitude,
        noise=noise,
        periods=periods,
        seed=seed,
        split=split,
    )
    rng = derive_rng(seed, 404)
    images = base.images.copy()
    marker_labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        offset = int(rng.integers(1, num_classes))
        marker_class = (int(base.labels[i]) + offset) % num_classes
        images[i, MARKER_BOX[0], MARKER_BOX[1], :] = MARKER_PALETTE[marker_class % len(MARKER_PALETTE)]
        marker_labels[i] = marker_class
    return LabeledDataset(
        name=name or f"cue-conflict-n{n}-s{seed}",
        split=split,
        images=images,
        labels=marker_labels,
        num_classes=num_classes,
    )


_GENERATORS = {"stripes": make_stripes, "blobs": make_blobs, "cue-conflict": make_cue_conflict}


def save_packed(dataset: LabeledDataset, path: str | Path) -> None:
    """Write the packed binary form: magic, version, uint32 (count, H, W, C,
    num_classes), then per record a uint32 label (wrapping -1 to 0xFFFFFFFF)
    followed by H*W*C uint8 pixels. Pixels are quantized from [0, 1].
    """
    path = Path(path)
    n, h, w, c = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<BIIIII", PACKED_VERSION, n, h, w, c, dataset.num_classes))
        for i in range(n):
            f.write(struct.pack("<I", int(dataset.labels[i]) & 0xFFFFFFFF))
            f.write(pixels[i].tobytes())


def load_packed(path: str | Path, split: str = "train", name: str | None = None) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"packed dataset not found: {path}")
    raw = path.read_bytes()
    header = struct.calcsize("<BIIIII")
    if len(raw) < len(PACKED_MAGIC) + header or raw[: len(PACKED_MAGIC)] != PACKED_MAGIC:
        raise ValueError(f"corrupt packed dataset (bad magic): {path}")
    version, n, h, w, c, num_classes = struct.unpack_from("<BIIIII", raw, len(PACKED_MAGIC))
    if version != PACKED_VERSION:
        raise ValueError(f"unsupported packed version {version} in {path}")
    record = 4 + h * w * c
    expected = len(PACKED_MAGIC) + header + n * record
    if len(raw) != expected:
        raise ValueError(f"corrupt packed dataset (expected {expected} bytes, got {len(raw)}): {path}")
    offset = len(PACKED_MAGIC) + header
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, h, w, c), dtype=np.float32)
    for i in range(n):
        (raw_label,) = struct.unpack_from("<I", raw, offset)
        labels[i] = -1 if raw_label == 0xFFFFFFFF else raw_label
        start = offset + 4
        pix = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=start)
        images[i] = pix.reshape(h, w, c).astype(np.float32) / 255.0
        offset += record
    return LabeledDataset(
        name=name or path.stem, split=split, images=images, labels=labels, num_classes=num_classes
    )


def load_directory(root: str | Path, split: str = "train", name: str | None = None) -> LabeledDataset:
    """Load ``<root>/<split>/<class_name>/<image files>``; classes are the
    sorted directory names, files are read in sorted order.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {split_dir}")
    images, labels = [], []
    for class_index, class_dir in enumerate(class_dirs):
        for file in sorted(class_dir.iterdir()):
            if not file.is_file():
                continue
            try:
                with Image.open(file) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise ValueError(f"corrupt image file: {file}") from exc
            images.append(arr)
            labels.append(class_index)
    if not images:
        raise ValueError(f"no image files under {split_dir}")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent image shapes under {split_dir}: {sorted(shapes)}")
    return LabeledDataset(
        name=name or root.name,
        split=split,
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=len(class_dirs),
    )


def load_dataset(source: dict | str | Path) -> LabeledDataset:
    """Resolve a dataset descriptor (dict) or path (directory / packed file)."""
    if isinstance(source, (str, Path)):
        p = Path(source)
        if p.is_dir():
            return load_directory(p)
        return load_packed(p)
    if not isinstance(source, dict):
        raise TypeError(f"unsupported dataset source: {source!r}")
    source = dict(source)
    if "synthetic" in source:
        kind = source.pop("synthetic")
        if kind not in _GENERATORS:
            raise ValueError(f"unknown synthetic generator {kind!r}, expected one of {sorted(_GENERATORS)}")
        return _GENERATORS[kind](**source)
    if "directory" in source:
        root = source.pop("directory")
        return load_directory(root, **source)
    if "packed" in source:
        path = source.pop("packed")
        return load_packed(path, **source)
    raise ValueError(
        f"dataset descriptor needs one of 'synthetic', 'directory', 'packed'; got keys {sorted(source)}"
    )


@dataclass(frozen=True)
class ImbalanceSpec:
    """Per-class retention profile. The exponential profile keeps fraction
    mu^(i / (K-1)) of class i, so class 0 is untouched and the last class
    keeps fraction mu.
    """

    mu: float
    num_classes: int
    profile: str = "exp"

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"imbalance ratio mu must be in (0, 1], got {self.mu}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.profile not in ("exp", "linear"):
            raise ValueError(f"unknown imbalance profile {self.profile!r}")

    def weights(self) -> np.ndarray:
        k = self.num_classes
        if k == 1:
            return np.ones(1)
        i = np.arange(k, dtype=np.float64)
        if self.profile == "exp":
            return self.mu ** (i / (k - 1))
        return 1.0 - (1.0 - self.mu) * i / (k - 1)


def build_imbalanced(dataset: LabeledDataset, spec: ImbalanceSpec, seed: int = 0) -> LabeledDataset:
    """Subsample a class-balanced dataset to the spec's profile.

    Class i keeps floor(n * weight_i) samples (at least 1), drawn without
    replacement by a seeded stream. Test splits are never subsampled.
    """
    if dataset.split == "test":
        raise ValueError("refusing to subsample a test split; imbalance applies to training data")
    if spec.num_classes != dataset.num_classes:
        raise ValueError(
            f"spec is for {spec.num_classes} classes but dataset has {dataset.num_classes}"
        )
    counts = dataset.class_counts()
    if counts.min() != counts.max():
        raise ValueError(f"dataset must be class-balanced, got per-class counts {counts.tolist()}")
    n_per_class = int(counts[0])
    keep_counts = [max(1, math.floor(n_per_class * w)) for w in spec.weights()]
    rng = derive_rng(seed, 303)
    kept: list[np.ndarray] = []
    for class_index, keep in enumerate(keep_counts):
        idx = np.flatnonzero(dataset.labels == class_index)
        kept.append(rng.choice(idx, size=keep, replace=False))
    indices = np.sort(np.concatenate(kept))  # keep the source ordering
    return dataset.subset(indices, name=f"{dataset.name}-imb{spec.mu:g}")


@dataclass
class OODEvalPair:
    """In-distribution test set paired with an out-of-distribution set whose
    labels are used only for per-class confidence grouping.
    """

    in_dist: LabeledDataset
    out_dist: LabeledDataset

    def __post_init__(self):
        if self.in_dist.image_shape != self.out_dist.image_shape:
            raise ValueError(
                f"shape mismatch: in-dist {self.in_dist.image_shape} vs "
                f"out-dist {self.out_dist.image_shape}"
            )


def _center_crop(dataset: LabeledDataset, h: int, w: int) -> LabeledDataset:
    _, dh, dw, _ = dataset.images.shape
    top, left = (dh - h) // 2, (dw - w) // 2
    return LabeledDataset(
        name=dataset.name,
        split=dataset.split,
        images=dataset.images[:, top : top + h, left : left + w, :].copy(),
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
    )


def make_ood_pair(
    in_dist: LabeledDataset, out_dist: LabeledDataset, resize: str | None = None
) -> OODEvalPair:
    """Pair two datasets; shapes must match, or ``resize="center-crop"`` crops
    both to the common minimum height/width. Channel counts must always match.
    """
    in_shape, out_shape = in_dist.image_shape, out_dist.image_shape
    if in_shape != out_shape:
        if in_shape[2] != out_shape[2]:
            raise ValueError(f"channel mismatch: {in_shape[2]} vs {out_shape[2]}")
        if resize != "center-crop":
            raise ValueError(
                f"shape mismatch {in_shape} vs {out_shape} and no resize rule "
                f"(pass resize='center-crop')"
            )
        h = min(in_shape[0], out_shape[0])
        w = min(in_shape[1], out_shape[1])
        in_dist, out_dist = _center_crop(in_dist, h, w), _center_crop(out_dist, h, w)
    return OODEvalPair(in_dist=in_dist, out_dist=out_dist)


def load_registry(path: str | Path) -> dict:
    """Registry file: a JSON object mapping dataset names to descriptors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"registry file not found: {path}")
    registry = json.loads(path.read_text())
    if not isinstance(registry, dict):
        raise ValueError(f"registry must be a JSON object: {path}")
    return registry


def pair_ood(in_name: str, out_name: str, registry: dict, resize: str | None = None) -> OODEvalPair:
    """Build an OOD evaluation pair from two registered dataset names."""
    for key in (in_name, out_name):
        if key not in registry:
            raise KeyError(f"dataset {key!r} not in registry (known: {sorted(registry)})")
    return make_ood_pair(load_dataset(registry[in_name]), load_dataset(registry[out_name]), resize=resize)
