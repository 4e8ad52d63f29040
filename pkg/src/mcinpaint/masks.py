"""Rectangular hole masks and confidence weight propagation.

Masks are (h, w) arrays with 0 for known pixels and 1 for unknown ones.
The loss weight mask diffuses confidence from known pixels into the hole
by repeated Gaussian filtering:

    prev = 0
    repeat:  weight = blur(1 - mask + prev) * mask

so unknown pixels near the hole boundary end up weighted more strongly
than pixels deep inside the hole.

Conventions fixed here and relied on by all oracles: the blur uses zero
padding outside the image; kernels are normalized to sum 1; kernel values
are sampled at cell centers (offset i + 0.5 - size/2, symmetric for odd
and even sizes) and the convolution anchor is cell (size//2, size//2).
Even sizes therefore carry an inherent half-cell anchor offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    """Binary hole mask plus the hole bounding box (top, left, height, width)."""

    values: np.ndarray
    bbox: tuple

    @property
    def dims(self):
        return self.values.shape

    def known_fraction(self) -> float:
        return float(1.0 - self.values.mean())


@dataclass(frozen=True)
class WeightMask:
    """Confidence weights in [0, 1); zero at every known pixel."""

    values: np.ndarray
    iterations_used: int

    @property
    def dims(self):
        return self.values.shape


@dataclass(frozen=True)
class GaussKernel:
    size: int
    sigma: float
    values: np.ndarray   # (size, size), sums to 1
    axis_values: np.ndarray  # 1-D factor; values = outer(axis, axis)


def gaussian_kernel(size: int, sigma: float) -> GaussKernel:
    """Discretized isotropic Gaussian, normalized to sum 1."""
    if size < 1:
        raise MaskError(f"kernel size must be >= 1, got {size}")
    if sigma <= 0:
        raise MaskError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(size, dtype=np.float64) + 0.5 - size / 2.0
    axis = np.exp(-0.5 * (offsets / sigma) ** 2)
    axis /= axis.sum()
    values = np.outer(axis, axis)
    values /= values.sum()
    return GaussKernel(size=size, sigma=float(sigma), values=values, axis_values=axis)


def kernel_for_image(image_size: int) -> GaussKernel:
    """Default confidence kernel scaled to the image: size/4 wide, sigma 0.625*size.

    At 256x256 this is the stock 64-tap, sigma-40 filter; smaller images get
    a proportionally scaled kernel with the same profile shape.
    """
    size = max(image_size // 4, 1)
    return gaussian_kernel(size, size * 0.625)


def sample_mask(rng, image_h: int, image_w: int, max_hole_h: int, max_hole_w: int) -> Mask:
    """One axis-aligned rectangular hole; dims uniform in [1, max], position
    uniform over valid placements.  ``rng`` is an int seed or a Generator."""
    if max_hole_h > image_h or max_hole_w > image_w:
        raise MaskError(f"max hole {(max_hole_h, max_hole_w)} exceeds image "
                        f"{(image_h, image_w)}")
    if max_hole_h < 1 or max_hole_w < 1:
        raise MaskError("max hole dims must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(int(rng))
    hole_h = int(rng.integers(1, max_hole_h + 1))
    hole_w = int(rng.integers(1, max_hole_w + 1))
    top = int(rng.integers(0, image_h - hole_h + 1))
    left = int(rng.integers(0, image_w - hole_w + 1))
    values = np.zeros((image_h, image_w), dtype=np.float64)
    values[top:top + hole_h, left:left + hole_w] = 1.0
    return Mask(values=values, bbox=(top, left, hole_h, hole_w))


def _correlate1d(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Zero-padded 1-D correlation anchored at tap index len//2."""
    k = taps.size
    before = k // 2
    after = k - 1 - before
    pads = [(0, 0), (0, 0)]
    pads[axis] = (before, after)
    padded = np.pad(arr, pads)
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=axis)
    return np.einsum("ijk,k->ij", win, taps, optimize=False)


def blur(img: np.ndarray, kernel: GaussKernel) -> np.ndarray:
    """Separable zero-padded Gaussian filtering of a 2-D array."""
    out = _correlate1d(img.astype(np.float64), kernel.axis_values, axis=1)
    return _correlate1d(out, kernel.axis_values, axis=0)


def propagate_confidence(mask: Mask, kernel: GaussKernel, iterations: int) -> WeightMask:
    if iterations < 1:
        raise MaskError(f"iterations must be >= 1, got {iterations}")
    if abs(kernel.values.sum() - 1.0) > 1e-9:
        raise MaskError("kernel must be normalized to sum 1")
    m = mask.values.astype(np.float64)
    known = 1.0 - m
    weight = np.zeros_like(m)
    for _ in range(iterations):
        weight = blur(known + weight, kernel) * m
    return WeightMask(values=weight, iterations_used=iterations)


# ---------------------------------------------------------------- file format


def load_mask(path) -> Mask:
    """Read a grayscale mask image: values >= 128 are unknown."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    values = (arr >= 128).astype(np.float64)
    ys, xs = np.nonzero(values)
    if ys.size:
        bbox = (int(ys.min()), int(xs.min()),
                int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1))
    else:
        bbox = (0, 0, 0, 0)
    return Mask(values=values, bbox=bbox)


def save_mask(path, mask: Mask):
    arr = (mask.values >= 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")
