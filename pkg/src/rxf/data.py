"""Dataset ingestion and synthetic generators.

File formats: IDX image/label pairs (big-endian) and CIFAR-style binary
batches (3073-byte records: 1 label byte + 3072 RGB pixel bytes).
Synthetic families: Gaussian blobs with a guaranteed center separation,
and structured small images combining a smooth large-amplitude class
pattern with a small-amplitude pixel-code shortcut (the controllable
robust/fragile mix used by the desk-scale transfer protocols).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .rng import RngState


@dataclass
class Dataset:
    images: np.ndarray            # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray            # (N,) int64 in [0, num_classes)
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.images) == 0:
            raise DataError("empty dataset")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"label outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])


# -- IDX (big-endian MNIST-family layout) -----------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(buf: bytes, count: int, what: str, offset: int) -> bytes:
    if len(buf) - offset < count:
        raise DataError(f"truncated IDX file: {what} needs {count} bytes, have {len(buf) - offset}")
    return buf[offset : offset + count]


def load_idx(images_path: str, labels_path: str, split: str = "train",
             num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair; pixels scaled into [0, 1]."""
    raw = open(images_path, "rb").read()
    magic, n, rows, cols = struct.unpack(">IIII", _read_exact(raw, 16, "image header", 0))
    if magic != _IDX_IMAGES_MAGIC:
        raise DataError(f"bad IDX image magic 0x{magic:08x} in {images_path}")
    body = _read_exact(raw, n * rows * cols, f"{n} images of {rows}x{cols}", 16)
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / 255.0

    raw_l = open(labels_path, "rb").read()
    magic_l, n_l = struct.unpack(">II", _read_exact(raw_l, 8, "label header", 0))
    if magic_l != _IDX_LABELS_MAGIC:
        raise DataError(f"bad IDX label magic 0x{magic_l:08x} in {labels_path}")
    if n_l != n:
        raise DataError(f"image/label count mismatch: {n} images vs {n_l} labels")
    labels = np.frombuffer(_read_exact(raw_l, n_l, f"{n_l} labels", 8), dtype=np.uint8).astype(np.int64)
    classes = num_classes or int(labels.max()) + 1
    return Dataset(images, labels, classes, split, {"format": "idx", "path": images_path})


# -- CIFAR binary batches -----------------------------------------------------

_CIFAR_RECORD = 3073


def load_cifar_binary(paths, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Load CIFAR-style binary batches: per record 1 label + 3072 RGB bytes."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        raw = open(path, "rb").read()
        if len(raw) % _CIFAR_RECORD != 0:
            raise DataError(
                f"{path}: length {len(raw)} not divisible by record size {_CIFAR_RECORD}"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        label_chunks.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    images = np.concatenate(chunks)
    labels = np.concatenate(label_chunks)
    classes = num_classes or int(labels.max()) + 1
    return Dataset(images, labels, classes, split, {"format": "cifar", "paths": list(paths)})


# -- synthetic: separated Gaussian blobs --------------------------------------

def synth_blobs(classes: int, per_class: int, dims: int, separation: float,
                seed: int, noise: float | None = None, split: str = "train") -> Dataset:
    """Gaussian clusters at seeded centers with a guaranteed pairwise
    center distance, clipped to [0, 1]. Centers and noise scale are
    recorded in provenance for margin oracles."""
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    if dims < 1:
        raise DataError(f"dims must be >= 1, got {dims}")
    if separation <= 0:
        raise DataError(f"separation must be positive, got {separation}")
    noise = separation / 6.0 if noise is None else noise
    center_rng = RngState(seed, "blob-centers")
    for _ in range(1000):
        centers = center_rng.uniform(0.2, 0.8, (classes, dims), dtype=np.float64)
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1)) + np.eye(classes) * 1e9
        if classes == 1 or dist.min() >= separation:
            break
    else:
        raise DataError(f"could not place {classes} centers with separation {separation} in {dims} dims")
    sample_rng = RngState(seed, f"blob-samples/{split}")
    images = np.empty((classes * per_class, 1, 1, dims), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        pts = centers[c] + noise * sample_rng.normal((per_class, dims), dtype=np.float64)
        images[c * per_class : (c + 1) * per_class, 0, 0, :] = np.clip(pts, 0.0, 1.0)
        labels[c * per_class : (c + 1) * per_class] = c
    order = RngState(seed, f"blob-order/{split}").permutation(len(labels))
    return Dataset(images[order], labels[order], classes, split,
                   {"format": "blobs", "centers": centers, "noise": noise, "separation": separation})


# -- synthetic: structured pattern images -------------------------------------

def _bilinear_upsample(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape
    ys = np.linspace(0, sh - 1, h)
    xs = np.linspace(0, sw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx) + img[np.ix_(y1, x0)] * wy * (1 - wx)
            + img[np.ix_(y0, x1)] * (1 - wy) * wx + img[np.ix_(y1, x1)] * wy * wx)


def _class_pattern(class_id: int, size: int, world_seed: int) -> np.ndarray:
    """Smooth unit-L2 field for a class; fixed by (class_id, world_seed)."""
    rng = RngState(world_seed, f"pattern/{class_id}")
    coarse = rng.normal((4, 4), dtype=np.float64)
    smooth = _bilinear_upsample(coarse, size, size)
    smooth -= smooth.mean()
    return smooth / np.linalg.norm(smooth)


def _code_positions(size: int, count: int) -> list[tuple[int, int]]:
    """Isolated lattice pixels (period 3) used for the pixel-code shortcut."""
    pos = [(r, c) for r in range(1, size, 3) for c in range(1, size, 3)]
    if count > len(pos):
        raise DataError(f"{count} code pixels do not fit a {size}x{size} image")
    return pos[:count]


def _class_code(class_id: int, count: int, world_seed: int) -> np.ndarray:
    rng = RngState(world_seed, f"code/{class_id}")
    return np.where(rng.uniform(0, 1, (count,), dtype=np.float64) < 0.5, -1.0, 1.0)


def synth_patterns(class_ids, per_class: int, size: int = 12, noise: float = 0.06,
                   robust_amp: float = 0.9, fragile_amp: float = 0.02, code_pixels: int = 8,
                   code_noise: float = 0.005, seed: int = 0, world_seed: int = 7,
                   split: str = "train") -> Dataset:
    """Small grayscale images with two class signals of different nature.

    Each class combines a smooth large-amplitude pattern (survives small
    L-infinity perturbations) with a crisp low-amplitude code on isolated
    pixels (near-perfectly predictive but erasable within an 8/255
    budget). Distinct class_ids give distinct domains; labels are
    re-indexed to 0..len(class_ids)-1.
    """
    class_ids = list(class_ids)
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    n_cls = len(class_ids)
    positions = _code_positions(size, code_pixels)
    rows = np.array([p[0] for p in positions])
    cols = np.array([p[1] for p in positions])
    sample_rng = RngState(seed, f"pattern-samples/{split}")
    images = np.empty((n_cls * per_class, 1, size, size), dtype=np.float32)
    labels = np.empty(n_cls * per_class, dtype=np.int64)
    for li, cid in enumerate(class_ids):
        pattern = robust_amp * _class_pattern(cid, size, world_seed)
        code = fragile_amp * _class_code(cid, code_pixels, world_seed)
        draws = (0.5 + pattern)[None, :, :] + noise * sample_rng.normal((per_class, size, size), dtype=np.float64)
        # code pixels carry their own small noise so the shortcut stays crisp
        draws[:, rows, cols] = 0.5 + code[None, :] + code_noise * sample_rng.normal(
            (per_class, code_pixels), dtype=np.float64
        )
        lo = li * per_class
        images[lo : lo + per_class, 0] = np.clip(draws, 0.0, 1.0)
        labels[lo : lo + per_class] = li
    order = RngState(seed, f"pattern-order/{split}").permutation(len(labels))
    return Dataset(images[order], labels[order], n_cls, split, {
        "format": "patterns", "class_ids": class_ids, "robust_amp": robust_amp,
        "fragile_amp": fragile_amp, "noise": noise, "code_pixels": code_pixels,
        "world_seed": world_seed,
    })


# -- stratified subsetting -----------------------------------------------------

def stratified_subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded per-class subsample with exactly equal class counts.

    Per-class count is floor(fraction * N / num_classes); classes with
    fewer examples than that are an error.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    target = int(np.floor(fraction * len(ds) / ds.num_classes))
    if target < 1:
        raise DataError(f"fraction {fraction} leaves no examples per class")
    rng = RngState(seed, "subset")
    picks = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < target:
            raise DataError(f"class {c} has {len(idx)} examples, needs {target}")
        picks.append(idx[rng.permutation(len(idx))[:target]])
    order = np.concatenate(picks)
    order = order[rng.permutation(len(order))]
    prov = dict(ds.provenance)
    prov["subset_fraction"] = fraction
    return Dataset(ds.images[order], ds.labels[order], ds.num_classes, ds.split, prov)
