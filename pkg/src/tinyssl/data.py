"""Datasets: CIFAR binary files, a procedural shapes set, batch iteration."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray | None
    image_ids: np.ndarray  # (N,) uint64
    num_classes: int = 0

    def __post_init__(self):
        n = len(self.images)
        if len(self.image_ids) != n:
            raise DataFormatError("image_ids length does not match images")
        if len(np.unique(self.image_ids)) != n:
            raise DataFormatError("image_ids must be unique")
        if self.labels is not None:
            if len(self.labels) != n:
                raise DataFormatError("labels length does not match images")
            if n and (self.labels.min() < 0 or (self.num_classes and self.labels.max() >= self.num_classes)):
                raise DataFormatError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images.shape[-1]

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.images).tobytes()).hexdigest()


def load_cifar_binary(path, variant="cifar100") -> Dataset:
    if variant not in CIFAR_LABEL_BYTES:
        raise ValueError(f"variant must be cifar10 or cifar100, got {variant!r}")
    nlab = CIFAR_LABEL_BYTES[variant]
    rec = nlab + CIFAR_PIXELS
    size = os.path.getsize(path)
    if size % rec:
        raise DataFormatError(f"{path}: {size} bytes is not a multiple of the {rec}-byte "
                              f"{variant} record (remainder {size % rec})")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, nlab - 1].astype(np.int64)  # cifar100: [coarse, fine]
    images = raw[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, np.arange(len(raw), dtype=np.uint64),
                   num_classes=10 if variant == "cifar10" else 100)


def write_cifar_binary(path, ds: Dataset, variant="cifar100"):
    """Inverse of :func:`load_cifar_binary` for 32x32 datasets (pixels quantised to bytes)."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records hold 3x32x32 images, got {ds.images.shape[1:]}")
    labels = ds.labels if ds.labels is not None else np.zeros(len(ds), np.int64)
    pix = np.clip(np.rint(ds.images * 255), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    lab = np.zeros((len(ds), CIFAR_LABEL_BYTES[variant]), np.uint8)
    lab[:, -1] = labels
    np.concatenate([lab, pix], axis=1).tofile(path)


# --- procedural shapes ------------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond",
           "xcross", "halfdisk")


def _mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.1)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r * 1.1)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "xcross":
        return ((np.abs(dy - dx) <= r * 0.35) | (np.abs(dy + dx) <= r * 0.35)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return (dy ** 2 + dx ** 2 <= r ** 2) & (dy >= 0)  # halfdisk


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def synth_dataset_generate(num_classes=8, per_class=32, resolution=32, seed=0,
                           hue_jitter=0.08, object_scale=(0.3, 0.45)) -> Dataset:
    """Class-balanced coloured shapes on textured backgrounds.

    Class c draws shape ``c mod 10`` in a hue band centred at c/num_classes;
    position, size, hue, saturation and background are seeded noise.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng([seed, 0x5EED])
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(n)]
    R = resolution
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float32) + 0.5
    images = np.empty((n, 3, R, R), np.float32)
    for i, c in enumerate(labels):
        bg = np.array(_hsv(rng.random(), rng.uniform(0, 0.4), rng.uniform(0.15, 0.6)), np.float32)
        img = bg[:, None, None] + rng.normal(0, 0.05, (3, R, R)).astype(np.float32)
        # low-frequency background shading
        gy, gx = rng.normal(0, 0.15, 2)
        img += (gy * (yy / R - 0.5) + gx * (xx / R - 0.5))[None]
        r = rng.uniform(*object_scale) * R
        cy, cx = rng.uniform(r, R - r, 2)
        hue = (c / num_classes + rng.normal(0, hue_jitter)) % 1.0
        fg = np.array(_hsv(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)), np.float32)
        m = _mask(_SHAPES[c % len(_SHAPES)], yy, xx, cy, cx, r)
        img[:, m] = fg[:, None] + rng.normal(0, 0.04, (3, int(m.sum()))).astype(np.float32)
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels.astype(np.int64), np.arange(n, dtype=np.uint64), num_classes)


def batch_iterator(ds_or_n, batch, epoch_seed=0, shuffle=True):
    """Index batches covering every sample exactly once; last batch may be short."""
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else len(ds_or_n)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if batch > n:
        raise ValueError(f"batch {batch} larger than dataset size {n}")
    order = np.random.default_rng([epoch_seed, 0xBA7C]).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch] for i in range(0, n, batch)]
