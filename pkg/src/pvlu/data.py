"""Dataset ingestion, augmentation, and the Gaussian blur pipeline.

File formats: IDX (big-endian, MNIST-family) and the raw CIFAR binary
layout (1 label byte + 3072 pixel bytes per record).  Synthetic fixture
generators emit learnable stand-in datasets through those same formats so
the training workflows run offline.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import ConfigError, ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Dataset:
    """Images [N,C,H,W] in [0,1] (float32) paired with integer labels."""

    def __init__(self, images, labels, classes, split="train"):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.classes = int(classes)
        self.split = split
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError(
                f"label count {self.labels.shape} != image count {self.images.shape[0]}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values outside [0, 1]")
        self._mean = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def mean(self) -> float:
        """Whole-dataset pixel mean (the cutout fill value)."""
        if self._mean is None:
            self._mean = float(self.images.mean(dtype=np.float64))
        return self._mean

    def subset(self, n) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.classes, self.split)


# ---------------------------------------------------------------------------
# IDX files (big-endian).

def _read_struct(f, fmt, what):
    size = struct.calcsize(fmt)
    at = f.tell()
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated {what} at byte {at}: wanted {size} bytes")
    return struct.unpack(fmt, data)


def load_idx(images_path, labels_path, split="train", classes=None) -> Dataset:
    """Read an IDX image/label file pair; pixels scale by 1/255 into [0,1]."""
    with open(images_path, "rb") as f:
        (magic,) = _read_struct(f, ">I", "image magic")
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} at byte 0 (want 0x{IDX_IMAGES_MAGIC:08x})")
        n, h, w = _read_struct(f, ">III", "image dims")
        at = f.tell()
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise FormatError(f"truncated image data at byte {at + len(raw)}")
        if f.read(1):
            raise FormatError(f"trailing bytes after image data at byte {f.tell() - 1}")
    with open(labels_path, "rb") as f:
        (magic,) = _read_struct(f, ">I", "label magic")
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} at byte 0 (want 0x{IDX_LABELS_MAGIC:08x})")
        (nl,) = _read_struct(f, ">I", "label count")
        if nl != n:
            raise FormatError(f"label count {nl} != image count {n}")
        at = f.tell()
        lraw = f.read(nl)
        if len(lraw) != nl:
            raise FormatError(f"truncated label data at byte {at + len(lraw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / 255.0
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, classes, split)


def write_idx(images_u8, labels, images_path, labels_path):
    """Write uint8 images [N,H,W] and labels as an IDX file pair."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-style raw binary (1 label byte + 3*32*32 pixel bytes per record).

_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar(path, split="train", classes=10) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % _CIFAR_RECORD:
        raise FormatError(
            f"file size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record"
            f" (stray {len(raw) % _CIFAR_RECORD} bytes at byte {len(raw) - len(raw) % _CIFAR_RECORD})")
    n = len(raw) // _CIFAR_RECORD
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, classes, split)


def write_cifar(images_u8, labels, path):
    """Write uint8 images [N,3,32,32] and labels in the raw record layout."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels)
    n = images_u8.shape[0]
    rec = np.empty((n, _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels.astype(np.uint8)
    rec[:, 1:] = images_u8.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# Gaussian blur pipeline.

def gaussian_kernel(sigma) -> np.ndarray:
    """Square blur kernel, size 2*ceil(3*sigma)+1, renormalized to sum 1.

    Sampled from g(x,y) = (1/(2*pi*sigma^2))*exp(-(x^2+y^2)/sigma^2) at
    integer offsets from the center.
    """
    sigma = float(sigma)
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx * xx + yy * yy) / (sigma * sigma)) / (2 * np.pi * sigma * sigma)
    return k / k.sum()


def gaussian_filter(img, sigma) -> np.ndarray:
    """Per-channel blur of [C,H,W] (reflect-padded borders)."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ContractError(f"gaussian_filter wants [C,H,W], got shape {img.shape}")
    kern = gaussian_kernel(sigma)
    k = kern.shape[0]
    r = k // 2
    c, h, w = img.shape
    if r >= h or r >= w:
        raise ContractError(f"image {h}x{w} too small to reflect-pad by {r}")
    pad = np.pad(img.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
    out = np.zeros((c, h, w), dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            out += kern[dy, dx] * pad[:, dy:dy + h, dx:dx + w]
    return out.astype(img.dtype)


def filter_dataset(ds: Dataset, sigma) -> Dataset:
    """Blur every image; the noise model of the fine-tuning experiments."""
    n, c, h, w = ds.images.shape
    # one filtering pass with all images stacked along the channel axis
    blurred = gaussian_filter(ds.images.reshape(n * c, h, w), sigma)
    blurred = np.clip(blurred, 0.0, 1.0).astype(np.float32)
    return Dataset(blurred.reshape(n, c, h, w), ds.labels, ds.classes, ds.split)


# ---------------------------------------------------------------------------
# Augmentation.

class AugmentConfig:
    """Per-image train-time transforms; zeros/None mean 'off'."""

    def __init__(self, flip_p=0.0, max_shift=0, cutout_size=0, gaussian_sigma=None):
        self.flip_p = float(flip_p)
        self.max_shift = int(max_shift)
        self.cutout_size = int(cutout_size)
        self.gaussian_sigma = None if gaussian_sigma is None else float(gaussian_sigma)

    def validate(self, image_shape):
        c, h, w = image_shape
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"flip probability {self.flip_p} outside [0,1]")
        if self.max_shift < 0 or (self.max_shift and self.max_shift >= min(h, w)):
            raise ConfigError(f"max shift {self.max_shift} must be in [0, {min(h, w)})")
        if self.cutout_size < 0 or self.cutout_size > min(h, w):
            raise ConfigError(f"cutout size {self.cutout_size} must be in [0, {min(h, w)}]")
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ConfigError(f"gaussian sigma must be positive, got {self.gaussian_sigma}")

    @property
    def active(self):
        return (self.flip_p > 0 or self.max_shift > 0 or self.cutout_size > 0
                or self.gaussian_sigma is not None)


def cutout(img, size: int, rng: np.random.Generator, fill: float) -> np.ndarray:
    """Overwrite one size x size square (center uniform, clamped to stay
    inside the borders, so the erased area is always the full square)."""
    img = np.asarray(img)
    c, h, w = img.shape
    if not 0 < size <= min(h, w):
        raise ContractError(f"cutout size {size} must be in (0, {min(h, w)}]")
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0 = min(max(0, cy - size // 2), h - size)
    x0 = min(max(0, cx - size // 2), w - size)
    out = img.copy()
    out[:, y0:y0 + size, x0:x0 + size] = fill
    return out


def _shift(img, dy, dx):
    c, h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = (dy, 0) if dy >= 0 else (0, -dy)
    xs, xd = (dx, 0) if dx >= 0 else (0, -dx)
    out[:, ys:h - yd, xs:w - xd] = img[:, yd:h - ys, xd:w - xs]
    return out


def augment_batch(batch, cfg: AugmentConfig, rng: np.random.Generator, fill=0.0):
    """Apply flip -> shift -> cutout -> blur per image, independent draws.

    ``fill`` is the cutout fill value (pass the dataset mean).
    """
    batch = np.asarray(batch)
    cfg.validate(batch.shape[1:])
    if not cfg.active:
        return batch
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        img = batch[i]
        if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
            img = img[:, :, ::-1]
        if cfg.max_shift > 0:
            dy, dx = (int(v) for v in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
            img = _shift(img, dy, dx)
        if cfg.cutout_size > 0:
            img = cutout(img, cfg.cutout_size, rng, fill)
        if cfg.gaussian_sigma is not None:
            img = np.clip(gaussian_filter(img, cfg.gaussian_sigma), 0.0, 1.0)
        out[i] = img
    return out


# ---------------------------------------------------------------------------
# Synthetic fixtures.  Ten 5x7 digit glyphs rendered with jitter stand in for
# handwritten digits; smooth per-class color fields with noise and shifts
# stand in for natural-image classes.  Both are written through the real
# loaders' file formats.

_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
]


def _glyph_bitmaps():
    out = []
    for g in _GLYPHS:
        rows = g.split()
        out.append(np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64))
    return out


def synth_digits(n, seed, size=28, scale=3):
    """Digit-glyph images: uint8 [n, size, size] plus balanced labels."""
    rng = np.random.default_rng(seed)
    glyphs = _glyph_bitmaps()
    labels = rng.permutation(np.arange(n) % 10)
    gh, gw = 7 * scale, 5 * scale
    if gh > size or gw > size:
        raise ContractError(f"digit canvas {size} too small for scale {scale}")
    images = np.zeros((n, size, size), dtype=np.float64)
    for i, lab in enumerate(labels):
        big = np.kron(glyphs[lab], np.ones((scale, scale)))
        oy = int(rng.integers(0, size - gh + 1))
        ox = int(rng.integers(0, size - gw + 1))
        intensity = rng.uniform(0.7, 1.0)
        images[i, oy:oy + gh, ox:ox + gw] = big * intensity
    images = images * 255.0 + rng.normal(0.0, 12.0, size=images.shape)
    return np.clip(images, 0, 255).astype(np.uint8), labels.astype(np.int64)


def _class_prototypes(classes=10, channels=3, size=32):
    # fixed-seed smooth color fields, one per class
    protos = []
    for c in range(classes):
        rng = np.random.default_rng(7000 + c)
        coarse = rng.random((channels, size // 4, size // 4))
        up = np.kron(coarse, np.ones((4, 4)))
        smooth = gaussian_filter(up, 2.0)
        lo, hi = smooth.min(), smooth.max()
        protos.append(0.15 + 0.7 * (smooth - lo) / (hi - lo))
    return protos


def synth_objects(n, seed, size=32, noise=0.10, max_roll=4, contrast=1.0):
    """Texture-class images: uint8 [n, 3, size, size] plus balanced labels.

    ``noise``/``max_roll`` set per-image corruption strength; ``contrast``
    < 1 blends every prototype toward their common mean, making classes
    harder to separate.  Defaults match the original fixture exactly.
    """
    rng = np.random.default_rng(seed)
    protos = _class_prototypes(size=size)
    if contrast != 1.0:
        center = np.mean(protos, axis=0)
        protos = [center + contrast * (p - center) for p in protos]
    labels = rng.permutation(np.arange(n) % len(protos))
    images = np.empty((n, 3, size, size), dtype=np.float64)
    for i, lab in enumerate(labels):
        img = protos[lab]
        dy, dx = (int(v) for v in rng.integers(-max_roll, max_roll + 1, size=2))
        img = np.roll(img, (dy, dx), axis=(1, 2))
        gain = rng.uniform(0.75, 1.25)
        img = img * gain + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return (images * 255.0).astype(np.uint8), labels.astype(np.int64)


def synth_blobs(n, seed, size=6):
    """Linearly separable two-class set (dark vs bright images), uint8."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    base = np.where(labels == 0, 0.25, 0.75)[:, None, None]
    images = base + rng.normal(0.0, 0.05, size=(n, size, size))
    return (np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8), labels.astype(np.int64)
