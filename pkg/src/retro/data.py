"""Datasets, two-view augmentation, batching and label-fraction subsets."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from retro.autograd import DTYPE

CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise DataConfigError("dataset needs N >= 1 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class AugmentationConfig:
    crop_scale_min: float = 0.5
    crop_padding: int = 0
    flip_prob: float = 0.5
    brightness_jitter: float = 0.4
    contrast_jitter: float = 0.4
    saturation_jitter: float = 0.4
    color_shift: float = 0.05
    grayscale_prob: float = 0.0
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.flip_prob <= 1:
            raise DataConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0 <= self.grayscale_prob <= 1:
            raise DataConfigError(f"grayscale_prob must be in [0, 1], got {self.grayscale_prob}")
        for name in ("brightness_jitter", "contrast_jitter", "saturation_jitter"):
            if not 0 <= getattr(self, name) <= 1:
                raise DataConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if not 0 < self.crop_scale_min <= 1:
            raise DataConfigError(f"crop_scale_min must be in (0, 1], got {self.crop_scale_min}")
        if self.color_shift < 0:
            raise DataConfigError("color_shift must be non-negative")
        if self.noise_std < 0 or self.crop_padding < 0:
            raise DataConfigError("noise_std and crop_padding must be non-negative")


@dataclass
class ViewPair:
    v: np.ndarray
    v_prime: np.ndarray


# --- synthetic data ----------------------------------------------------------

def class_orientation(label: int, classes: int) -> float:
    """Grating orientation of class ``label``, evenly spaced over [0, pi/2].

    Staying within a quarter turn means a horizontal flip never maps one
    class onto another.
    """
    return label * (np.pi / 2) / max(classes - 1, 1)


def _render(label: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    orientation = class_orientation(label, classes) + rng.normal(0, 0.04)
    cycles = rng.uniform(3.0, 5.5)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(2 * np.pi * cycles * (np.cos(orientation) * xx + np.sin(orientation) * yy) + phase)
    # the texture fills a soft elliptical region of random placement and size
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    ry, rx = rng.uniform(0.25, 0.45, size=2)
    region = np.clip(2.0 - 2.0 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2), 0.0, 1.0)
    # near-grey palette: colour carries almost no per-image identity
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
    ink = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.4) + rng.uniform(-0.05, 0.05, size=3)
    ramp = rng.normal(0, 0.15, size=2)
    img = bg[:, None, None] + (ramp[0] * (yy - 0.5) + ramp[1] * (xx - 0.5))[None]
    img = img + ink[:, None, None] * (wave * region)[None]
    for _ in range(rng.integers(0, 3)):  # small distractor blobs
        by, bx = rng.uniform(0.05, 0.95, size=2)
        w = rng.uniform(0.03, 0.07)
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * w ** 2))
        img += (rng.uniform(-0.4, 0.4) + rng.uniform(-0.05, 0.05, size=3))[:, None, None] * blob
    return img


def generate_synthetic(classes: int, per_class: int, image_size: int, seed: int,
                       noise: float = 0.05) -> Dataset:
    """Oriented-texture images: the class fixes the grating orientation.

    Frequency, phase, a small orientation jitter, region placement, colours,
    background ramp and distractor blobs are drawn per sample, so every
    image in a class is distinct.
    """
    if classes < 2:
        raise DataConfigError(f"need at least 2 classes, got {classes}")
    if image_size < 8:
        raise DataConfigError(f"image_size must be >= 8, got {image_size}")
    if per_class < 1:
        raise DataConfigError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = np.empty((len(labels), 3, image_size, image_size), dtype=DTYPE)
    for i, c in enumerate(labels):
        img = _render(int(c), classes, image_size, rng)
        img += noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes)


def split_per_class(ds: Dataset, test_per_class: int, seed: int) -> tuple:
    """Stratified train/test split with ``test_per_class`` test items per class."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        if len(members) <= test_per_class:
            raise DataConfigError(f"class {c} has only {len(members)} samples")
        test_idx.append(rng.permutation(members)[:test_per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)


# --- CIFAR binary ------------------------------------------------------------

def load_cifar_binary(path) -> Dataset:
    """Read CIFAR-10 binary records: 1 label byte + 3072 pixel bytes (CHW)."""
    raw = Path(path).read_bytes()
    if not raw or len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} outside 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / DTYPE(255.0)
    return Dataset(images, labels, 10)


# --- augmentation ------------------------------------------------------------

def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def _interp_matrix(starts: np.ndarray, lengths: np.ndarray, size: int) -> np.ndarray:
    """[B, size, size] linear-interpolation weights sampling a window per row."""
    B = len(starts)
    pos = np.clip(starts[:, None] + (np.arange(size) + 0.5) * lengths[:, None] / size - 0.5,
                  0, size - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    mat = np.zeros((B, size, size))
    b, r = np.arange(B)[:, None], np.arange(size)[None, :]
    np.add.at(mat, (b, r, lo), 1 - frac)
    np.add.at(mat, (b, r, hi), frac)
    return mat.astype(DTYPE)


def resized_crop(images: np.ndarray, tops, lefts, heights, widths) -> np.ndarray:
    """Bilinearly resample one window per image back to the full H x W grid.

    ``images`` is [B, C, H, W]; window coordinates are per-image arrays in
    pixels. Bilinear sampling is separable, so it is two batched matmuls.
    """
    B, C, H, W = images.shape
    f64 = lambda a: np.asarray(a, dtype=np.float64).reshape(B)
    rows = _interp_matrix(f64(tops), f64(heights), H)[:, None]
    cols = _interp_matrix(f64(lefts), f64(widths), W)[:, None]
    return np.matmul(np.matmul(rows, images), cols.transpose(0, 1, 3, 2))


def _augment(batch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    B, C, H, W = batch.shape
    out = batch.copy()
    if cfg.crop_scale_min < 1:
        area = rng.uniform(cfg.crop_scale_min, 1.0, size=B)
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3), size=B))
        hs = np.minimum(np.sqrt(area / aspect) * H, H)
        ws = np.minimum(np.sqrt(area * aspect) * W, W)
        tops = rng.uniform(0, 1, size=B) * (H - hs)
        lefts = rng.uniform(0, 1, size=B) * (W - ws)
        out = resized_crop(out, tops, lefts, hs, ws)
    p = cfg.crop_padding
    if p:
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(B, 2))
        for i, (oy, ox) in enumerate(offs):
            out[i] = padded[i, :, oy:oy + H, ox:ox + W]
    if cfg.flip_prob > 0:
        flip = rng.random(B) < cfg.flip_prob
        out[flip] = hflip(out[flip])
    # Brightness b, contrast c (about the image mean mu) and saturation s (about
    # the per-pixel grey g) compose to one per-image affine map:
    #   out = s*c*b * x + (1-s)*c*b * g + (1-c)*b*mu + shift
    ones = np.ones((B, 1, 1, 1))
    b = rng.uniform(1 - cfg.brightness_jitter, 1 + cfg.brightness_jitter, size=(B, 1, 1, 1)) \
        if cfg.brightness_jitter > 0 else ones
    c = rng.uniform(1 - cfg.contrast_jitter, 1 + cfg.contrast_jitter, size=(B, 1, 1, 1)) \
        if cfg.contrast_jitter > 0 else ones
    sat = rng.uniform(1 - cfg.saturation_jitter, 1 + cfg.saturation_jitter, size=(B, 1, 1, 1)) \
        if cfg.saturation_jitter > 0 and C == 3 else ones
    shift = rng.uniform(-cfg.color_shift, cfg.color_shift, size=(B, C, 1, 1)) \
        if cfg.color_shift > 0 else np.zeros((B, C, 1, 1))
    mu = out.mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    offset = ((1 - c) * b * mu + shift).astype(DTYPE)
    grey_weight = ((1 - sat) * c * b).astype(DTYPE)
    mixed = grey_weight * out.mean(axis=1, keepdims=True) if C == 3 else 0.0
    out *= (sat * c * b).astype(DTYPE)
    out += mixed + offset
    if cfg.grayscale_prob > 0 and C == 3:
        gray = rng.random(B) < cfg.grayscale_prob
        out[gray] = out[gray].mean(axis=1, keepdims=True)
    if cfg.noise_std > 0:
        # zero-mean uniform noise with the requested std; a quarter of the cost of Gaussian draws
        noise = rng.random(out.shape, dtype=DTYPE)
        noise -= DTYPE(0.5)
        noise *= DTYPE(cfg.noise_std * math.sqrt(12.0))
        out += noise
    np.clip(out, 0.0, 1.0, out=out)
    return out


def two_views(batch: np.ndarray, cfg: AugmentationConfig, epoch: int = 0, step: int = 0) -> ViewPair:
    """Two independently augmented copies of ``batch``.

    Each view draws from its own stream keyed by (seed, epoch, step, view),
    so results do not depend on which worker produced them.
    """
    if len(batch) == 0:
        raise DataConfigError("cannot augment an empty batch")
    cfg.validate()
    batch = np.asarray(batch, dtype=DTYPE)
    views = [_augment(batch, cfg, np.random.default_rng([cfg.seed, epoch, step, k])) for k in (0, 1)]
    return ViewPair(*views)


# --- iteration and subsets ---------------------------------------------------

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int,
                  drop_last: bool = True) -> Iterator[np.ndarray]:
    """Index batches covering a fresh permutation of range(n)."""
    perm = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield perm[start:start + batch_size]


def label_fraction_subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Per-class sample of ceil(fraction * n_class) items.

    Each class is permuted once per seed and a prefix is taken, so subsets
    for a smaller fraction are contained in those for a larger one.
    """
    if not 0 < fraction <= 1:
        raise DataConfigError(f"fraction must be in (0, 1], got {fraction}")
    picks = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        take = math.ceil(fraction * len(members))
        if take == 0:
            raise DataConfigError(f"fraction {fraction} leaves class {c} empty")
        order = np.random.default_rng([seed, c]).permutation(members)
        picks.append(order[:take])
    return ds.subset(np.sort(np.concatenate(picks)))


def subset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.labels.tobytes())
    h.update(ds.images.tobytes())
    return h.hexdigest()[:16]
