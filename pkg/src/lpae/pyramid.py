"""Gaussian and Laplacian pyramids built from a 5-tap generating kernel.

All functions act on the last two axes of an array, so a single image
``(C, H, W)`` and a batch ``(N, C, H, W)`` are handled alike; every leading
axis is an independent channel.  Borders use reflect padding (mirror without
repeating the edge sample) and every level is ``ceil(previous / 2)`` in size,
so a 96 pixel image gives levels of 96, 48, 24, 12, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

__all__ = [
    "Kernel5",
    "DEFAULT_KERNEL",
    "reduce",
    "expand",
    "gaussian_pyramid",
    "build_laplacian",
    "collapse",
    "level_sizes",
    "pyramids",
    "max_levels",
]


@dataclass(frozen=True)
class Kernel5:
    """Separable generating kernel ``w(-2..2)``.

    The weights must be symmetric, sum to one, and split evenly between the
    even taps ``w(-2), w(0), w(2)`` and the odd taps ``w(-1), w(1)``.  The last
    condition is what lets EXPAND reproduce a constant image exactly.
    """

    weights: tuple = (0.05, 0.25, 0.4, 0.25, 0.05)
    array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (5,):
            raise ValueError(f"kernel needs 5 weights, got {w.shape}")
        if not np.allclose(w, w[::-1], atol=1e-12):
            raise ValueError("kernel weights must be symmetric")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"kernel weights must sum to 1, got {w.sum()}")
        if abs(w[0] + w[2] + w[4] - 0.5) > 1e-9:
            raise ValueError("even and odd taps must each sum to 0.5")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "array", w)

    @classmethod
    def from_a(cls, a: float = 0.4) -> "Kernel5":
        """The classic one-parameter family ``[1/4 - a/2, 1/4, a, 1/4, 1/4 - a/2]``."""
        return cls((0.25 - a / 2, 0.25, a, 0.25, 0.25 - a / 2))


DEFAULT_KERNEL = Kernel5()


def _half(n: int) -> int:
    return (n + 1) // 2


def level_sizes(height: int, width: int, n_levels: int) -> list:
    """``(h, w)`` of each pyramid level, finest first."""
    sizes = [(height, width)]
    for _ in range(n_levels - 1):
        h, w = sizes[-1]
        sizes.append((_half(h), _half(w)))
    return sizes


def _reduce_axis(x: np.ndarray, axis: int, w: np.ndarray) -> np.ndarray:
    n = x.shape[axis]
    out_n = _half(n)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (2, 2)
    xp = np.pad(x, pad, mode="reflect")
    out = None
    for tap in range(5):
        # output i samples padded index 2i + tap  (== original 2i + tap - 2)
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(tap, tap + 2 * out_n - 1, 2)
        term = w[tap] * xp[tuple(sl)]
        out = term if out is None else out + term
    return out


def _expand_axis(x: np.ndarray, axis: int, target: int, w: np.ndarray) -> np.ndarray:
    xp_pad = [(0, 0)] * x.ndim
    xp_pad[axis] = (1, 1)
    xp = np.pad(x, xp_pad, mode="reflect")
    shape = list(x.shape)
    shape[axis] = target
    out = np.zeros(shape, dtype=np.result_type(x.dtype, np.float32))
    for m in range(-2, 3):
        # only output rows i with (i - m) even see coarse sample (i - m) / 2
        start = m % 2
        count = len(range(start, target, 2))
        if count == 0:
            continue
        j0 = (start - m) // 2 + 1
        src = [slice(None)] * x.ndim
        src[axis] = slice(j0, j0 + count)
        dst = [slice(None)] * x.ndim
        dst[axis] = slice(start, target, 2)
        out[tuple(dst)] += 2.0 * w[m + 2] * xp[tuple(src)]
    return out


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim < 2:
        raise ShapeError(f"image needs at least 2 axes, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    return img


def reduce(img: np.ndarray, kernel: Kernel5 = DEFAULT_KERNEL) -> np.ndarray:
    """Low-pass filter and subsample by two along the last two axes."""
    img = _check_image(img)
    h, w = img.shape[-2:]
    # mirroring two samples past the border needs three samples per axis
    if h < 3 or w < 3:
        raise DegenerateInputError(f"cannot reduce a {h}x{w} image (minimum 3x3)")
    wk = kernel.array.astype(img.dtype)
    out = _reduce_axis(img, img.ndim - 2, wk)
    return _reduce_axis(out, img.ndim - 1, wk)


def expand(img: np.ndarray, target_h: int, target_w: int,
           kernel: Kernel5 = DEFAULT_KERNEL) -> np.ndarray:
    """Interpolate up to ``target_h x target_w``; ``ceil(target / 2)`` must equal the input size."""
    img = _check_image(img)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise DegenerateInputError(f"cannot expand a {h}x{w} image (minimum 2x2)")
    if _half(target_h) != h or _half(target_w) != w:
        raise ShapeError(
            f"cannot expand {h}x{w} to {target_h}x{target_w}: "
            f"target halves to {_half(target_h)}x{_half(target_w)}")
    wk = kernel.array.astype(img.dtype)
    out = _expand_axis(img, img.ndim - 2, target_h, wk)
    return _expand_axis(out, img.ndim - 1, target_w, wk).astype(img.dtype, copy=False)


def _check_levels(shape, n_levels: int):
    if n_levels < 2:
        raise DegenerateInputError(f"a pyramid needs at least 2 levels, got {n_levels}")
    h, w = shape[-2:]
    top = level_sizes(h, w, n_levels)[-1]
    if min(top) < 4:
        raise DegenerateInputError(
            f"{n_levels} levels of a {h}x{w} image leave a {top[0]}x{top[1]} top level "
            f"(minimum 4x4)")


def gaussian_pyramid(img: np.ndarray, n_levels: int,
                     kernel: Kernel5 = DEFAULT_KERNEL) -> list:
    """Levels ``g_0 .. g_{n_levels-1}``, finest first."""
    img = _check_image(img)
    _check_levels(img.shape, n_levels)
    levels = [img]
    for _ in range(n_levels - 1):
        levels.append(reduce(levels[-1], kernel))
    return levels


def build_laplacian(img: np.ndarray, n_levels: int, kernel: Kernel5 = DEFAULT_KERNEL,
                    gaussian: list | None = None) -> list:
    """Band-pass levels ``g_k - expand(g_{k+1})`` plus the residual ``g_n``.

    Pass an already computed Gaussian pyramid as ``gaussian`` to skip rebuilding it.
    """
    if gaussian is None:
        gaussian = gaussian_pyramid(img, n_levels, kernel)
    bands = []
    for fine, coarse in zip(gaussian[:-1], gaussian[1:]):
        bands.append(fine - expand(coarse, fine.shape[-2], fine.shape[-1], kernel))
    bands.append(gaussian[-1])
    return bands


def collapse(levels: list, kernel: Kernel5 = DEFAULT_KERNEL) -> np.ndarray:
    """Invert :func:`build_laplacian` by adding expanded coarse levels back in."""
    if not levels:
        raise ShapeError("empty pyramid")
    img = np.asarray(levels[-1])
    for band in reversed(levels[:-1]):
        band = np.asarray(band)
        if band.shape[:-2] != img.shape[:-2]:
            raise ShapeError(f"level shapes {band.shape} and {img.shape} disagree")
        h, w = band.shape[-2:]
        if (_half(h), _half(w)) != img.shape[-2:]:
            raise ShapeError(
                f"level of size {h}x{w} cannot sit below a {img.shape[-2]}x{img.shape[-1]} level")
        img = band + expand(img, h, w, kernel)
    return img


def pyramids(img: np.ndarray, n_levels: int, kernel: Kernel5 = DEFAULT_KERNEL):
    """``(laplacian, gaussian)`` level lists in one pass."""
    gauss = gaussian_pyramid(img, n_levels, kernel)
    return build_laplacian(img, n_levels, kernel, gaussian=gauss), gauss


def max_levels(height: int, width: int) -> int:
    """Deepest pyramid whose top level is still at least 4x4."""
    n = 1
    while min(level_sizes(height, width, n + 1)[-1]) >= 4:
        n += 1
    return n

