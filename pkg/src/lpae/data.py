"""Datasets: CIFAR-10 binary batches, image folders, synthetic stand-ins; ZCA whitening; batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` in [0, 1] (before whitening) with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise FormatError(f"expected square images (N, C, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise FormatError(f"{len(self.labels)} labels for {len(self.images)} images")
            if self.labels.size and self.labels.min() < 0:
                raise FormatError("labels must be non-negative")

    def __len__(self):
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.images[index], labels, self.split, self.name)

    def with_images(self, images) -> "Dataset":
        return Dataset(images, self.labels, self.split, self.name)


# ---------------------------------------------------------------------------
# CIFAR-10

def read_cifar10_file(path) -> Dataset:
    """One binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes, row-major)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, name="cifar10")


def write_cifar10_file(path, dataset: Dataset):
    """Inverse of :func:`read_cifar10_file`; pixels are quantised to bytes."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR records hold 3x32x32 images, got {dataset.images.shape[1:]}")
    labels = np.zeros(len(dataset), np.int64) if dataset.labels is None else dataset.labels
    if labels.size and labels.max() > 255:
        raise FormatError("CIFAR labels must fit in one byte")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1)
    records.tofile(path)


def load_cifar10(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Read the binary batches of one split from ``directory``.

    Accepts either the directory holding ``data_batch_*.bin`` or its parent
    (the layout of the official ``cifar-10-batches-bin`` archive).
    """
    root = Path(directory)
    if not any(root.glob("*.bin")) and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    files = [root / n for n in names if (root / n).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches in {root}")
    parts, total = [], 0
    for f in files:
        part = read_cifar10_file(f)
        parts.append(part)
        total += len(part)
        if limit is not None and total >= limit:
            break
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, split, "cifar10")


# ---------------------------------------------------------------------------
# image files

def read_image(path) -> np.ndarray:
    """Load an 8-bit raster as a ``(3, H, W)`` float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, img: np.ndarray):
    """Save a ``(C, H, W)`` array in [0, 1] as an 8-bit image (values are clipped)."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_folder(root, size: int | None = None, split: str = "train") -> Dataset:
    """``root/<class>/<image>`` layout; class indices follow sorted directory names."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    images, labels = [], []
    for label, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                im = im.convert("RGB")
                if size is not None and im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(label)
    if not images:
        raise FileNotFoundError(f"no images under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images differ in size {sorted(shapes)}; pass size= to resize")
    return Dataset(np.stack(images), np.array(labels), split, root.name)


# ---------------------------------------------------------------------------
# ZCA whitening

@dataclass
class ZCAStats:
    """Mean and symmetric whitening matrix over flattened (optionally block-averaged) pixels."""

    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float
    factor: int = 1

    def to_arrays(self, prefix="zca/") -> dict:
        return {f"{prefix}mean": self.mean, f"{prefix}matrix": self.matrix,
                f"{prefix}epsilon": np.array([self.epsilon]),
                f"{prefix}factor": np.array([self.factor], dtype=np.int64)}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix="zca/") -> "ZCAStats | None":
        if f"{prefix}matrix" not in arrays:
            return None
        return cls(arrays[f"{prefix}mean"], arrays[f"{prefix}matrix"],
                   float(arrays[f"{prefix}epsilon"][0]), int(arrays[f"{prefix}factor"][0]))


def _block_mean(images, f):
    n, c, h, w = images.shape
    return images.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))


def _block_repeat(images, f):
    return images.repeat(f, axis=2).repeat(f, axis=3)


def _zca_factor(shape, max_dim):
    c, h, w = shape
    f = 1
    while c * (h // f) * (w // f) > max_dim:
        f *= 2
        if h % f or w % f:
            raise FormatError(f"{h}x{w} images cannot be block-averaged by {f}")
    return f


def zca_fit(images, epsilon: float = 1e-2, max_dim: int = 3072) -> ZCAStats:
    """Fit ``E (L + eps I)^(-1/2) E^T`` to the pixel covariance.

    Images whose flattened size exceeds ``max_dim`` are fitted on f x f block
    means (f a power of two); :func:`zca_apply` then whitens that coarse content
    and passes the within-block detail through unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("ZCA epsilon must be positive")
    f = _zca_factor(images.shape[1:], max_dim)
    coarse = _block_mean(images, f) if f > 1 else images
    x = coarse.reshape(len(images), -1)
    if len(x) < x.shape[1]:
        # rank-deficient covariance: unseen images get their null-space content amplified
        log.warning("ZCA fitted on %d images for %d dimensions; held-out data will be"
                    " whitened inconsistently", len(x), x.shape[1])
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    evals = np.clip(evals, 0.0, None)
    matrix = (evecs * (1.0 / np.sqrt(evals + epsilon))) @ evecs.T
    matrix = 0.5 * (matrix + matrix.T)
    return ZCAStats(mean, matrix, epsilon, f)


def zca_apply(stats: ZCAStats, images, dtype=np.float32) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    f = stats.factor
    if f == 1:
        x = images.reshape(n, -1)
        return ((x - stats.mean) @ stats.matrix).reshape(images.shape).astype(dtype)
    coarse = _block_mean(images, f)
    white = ((coarse.reshape(n, -1) - stats.mean) @ stats.matrix).reshape(coarse.shape)
    detail = images - _block_repeat(coarse, f)
    return (_block_repeat(white, f) + detail).astype(dtype)


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_KINDS = ("stripes-circles", "gaussian-blobs", "filtered-noise")


def _colors(rng, n):
    return rng.uniform(0.0, 1.0, size=(n, 3, 1, 1))


def _stripes(rng, size, grid):
    yy, xx = grid
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 10.0) * size / 32
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return 0.5 + 0.5 * np.tanh(3.0 * wave)


def _circles(rng, size, grid):
    yy, xx = grid
    mask = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(3.0, 9.0) * size / 32
        cy, cx = rng.uniform(0, size, size=2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        if rng.random() < 0.5:
            shape = 0.5 - 0.5 * np.tanh(2.0 * (d - r))
        else:
            width = max(1.0, r / 3)
            shape = 0.5 - 0.5 * np.tanh(2.0 * (np.abs(d - r) - width / 2))
        mask = np.maximum(mask, shape)
    return mask


def _blobs(rng, size, grid):
    yy, xx = grid
    img = np.zeros((3, size, size)) + _colors(rng, 1)[0] * 0.5
    for _ in range(rng.integers(1, 6)):
        sigma = rng.uniform(2.0, 8.0) * size / 32
        cy, cx = rng.uniform(0, size, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = img + (rng.uniform(-0.6, 0.6, size=(3, 1, 1))) * blob
    return img


def _filtered_noise(rng, size):
    noise = rng.normal(size=(3, size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0
    spec = np.fft.fft2(noise) / radius
    spec[:, 0, 0] = 0
    img = np.real(np.fft.ifft2(spec))
    img = img / (np.abs(img).max() + 1e-12)
    return 0.5 + 0.45 * img


def synthetic_dataset(kind: str, n: int, size: int = 32, seed: int = 0,
                      noise: float = 0.05) -> Dataset:
    """Deterministic toy images.

    ``stripes-circles`` is a balanced 2-class set (label 0 = oriented
    stripes, 1 = disks and rings) whose foreground and background colours are
    drawn independently, so both classes share the same expected image.
    ``gaussian-blobs`` and ``filtered-noise`` are unlabelled.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    grid = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size))
    labels = None
    if kind == "stripes-circles":
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        for i in range(n):
            mask = _stripes(rng, size, grid) if labels[i] == 0 else _circles(rng, size, grid)
            fg, bg = _colors(rng, 2)
            images[i] = bg + (fg - bg) * mask
    elif kind == "gaussian-blobs":
        for i in range(n):
            images[i] = _blobs(rng, size, grid)
    else:
        for i in range(n):
            images[i] = _filtered_noise(rng, size)
    if noise:
        images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, "train", f"synthetic-{kind}")


# ---------------------------------------------------------------------------
# batching

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` fixed by ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, start: int = 0):
    """Yield ``(images, labels)`` mini-batches; the final short batch is dropped.

    ``start`` skips that many batches, which is how training resumes mid-epoch.
    """
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    order = epoch_order(n, seed, epoch)
    for b in range(start, n // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        labels = None if dataset.labels is None else dataset.labels[idx]
        yield dataset.images[idx], labels


def num_batches(n: int, batch_size: int) -> int:
    return n // batch_size
