"""Dense histogram-of-oriented-gradients descriptor.

Pipeline: [-1, 0, 1] gradients (one-sided at the border), per-cell orientation
histograms with magnitude-weighted linear voting between the two nearest bins
(bin ``b`` is centred on orientation ``b * bin_width``, wrapping cyclically),
then overlapping blocks normalized with L2-Hys. No spatial interpolation
between cells and no Gaussian block window.

Descriptor layout is ``(blocks_y, blocks_x, block_cells, n_bins)`` flattened
row-major, with ``block_cells`` enumerating the cells of a block row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np


class ImageTooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class HOGParams:
    cell_size: int = 8
    block_size: tuple[int, int] = (2, 2)  # cells (rows, cols)
    block_stride: int = 1  # cells
    n_bins: int = 9
    signed: bool = False
    clip: float = 0.2
    epsilon: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "block_size", tuple(int(b) for b in self.block_size))
        if self.cell_size < 2:
            raise ValueError("cell_size must be >= 2")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.block_stride < 1 or min(self.block_size) < 1:
            raise ValueError("block size and stride must be positive")
        if not self.clip > 0 or not self.epsilon > 0:
            raise ValueError("clip and epsilon must be positive")

    def grid(self, height: int, width: int) -> tuple[int, int, int, int]:
        """(cells_y, cells_x, blocks_y, blocks_x) for an image of this size."""
        cy, cx = height // self.cell_size, width // self.cell_size
        by, bx = self.block_size
        if height < 3 or width < 3 or cy < by or cx < bx:
            raise ImageTooSmall(f"{height}x{width} image is too small for these HOG parameters")
        return cy, cx, (cy - by) // self.block_stride + 1, (cx - bx) // self.block_stride + 1

    def length(self, height: int, width: int) -> int:
        _, _, nby, nbx = self.grid(height, width)
        by, bx = self.block_size
        return nby * nbx * by * bx * self.n_bins


def compute_gradients(image, signed: bool = False):
    """Per-pixel gradient magnitude and orientation (radians).

    Orientation is in [0, pi) when unsigned, [0, 2 pi) when signed.
    """
    I = np.asarray(image, dtype=float)
    if I.ndim != 2 or min(I.shape) < 3:
        raise ImageTooSmall("gradients need an image of at least 3x3")
    gx = np.empty_like(I)
    gy = np.empty_like(I)
    gx[:, 1:-1] = I[:, 2:] - I[:, :-2]
    gx[:, 0] = I[:, 1] - I[:, 0]
    gx[:, -1] = I[:, -1] - I[:, -2]
    gy[1:-1, :] = I[2:, :] - I[:-2, :]
    gy[0, :] = I[1, :] - I[0, :]
    gy[-1, :] = I[-1, :] - I[-2, :]
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.arctan2(gy, gx)
    period = 2 * math.pi if signed else math.pi
    ang = np.where(ang < 0, ang + period, ang)
    ang = np.where(ang >= period, ang - period, ang)
    ang[mag == 0] = 0.0
    return mag, ang


@nb.njit(cache=True)
def _fold(a, period):
    if a < 0.0:
        a += period
    if a >= period:
        a -= period
    return a


@nb.njit(cache=True)
def hog_into(image, cell, block_h, block_w, stride, n_bins, signed, clip, eps, hist, out):
    """Kernel behind :func:`compute_hog`; ``hist`` is (cells_y, cells_x, n_bins) scratch."""
    H, W = image.shape
    cy, cx = hist.shape[0], hist.shape[1]
    period = 2.0 * math.pi if signed else math.pi
    width = period / n_bins
    hist[:] = 0.0
    for i in range(cy * cell):
        ci = i // cell
        for j in range(cx * cell):
            if j == 0:
                gx = image[i, 1] - image[i, 0]
            elif j == W - 1:
                gx = image[i, j] - image[i, j - 1]
            else:
                gx = image[i, j + 1] - image[i, j - 1]
            if i == 0:
                gy = image[1, j] - image[0, j]
            elif i == H - 1:
                gy = image[i, j] - image[i - 1, j]
            else:
                gy = image[i + 1, j] - image[i - 1, j]
            if gx == 0.0 and gy == 0.0:
                continue
            mag = math.sqrt(gx * gx + gy * gy)
            t = _fold(math.atan2(gy, gx), period) / width
            lo = int(math.floor(t))
            frac = t - lo
            if lo >= n_bins:
                lo = n_bins - 1
            hi = lo + 1
            if hi == n_bins:
                hi = 0
            cj = j // cell
            hist[ci, cj, lo] += mag * (1.0 - frac)
            hist[ci, cj, hi] += mag * frac

    nby = (cy - block_h) // stride + 1
    nbx = (cx - block_w) // stride + 1
    blen = block_h * block_w * n_bins
    eps2 = eps * eps
    k = 0
    for by in range(nby):
        for bx in range(nbx):
            ss = 0.0
            q = k
            for dy in range(block_h):
                for dx in range(block_w):
                    for b in range(n_bins):
                        v = hist[by * stride + dy, bx * stride + dx, b]
                        out[q] = v
                        ss += v * v
                        q += 1
            if ss == 0.0:
                k += blen
                continue
            norm = math.sqrt(ss + eps2)
            ss = 0.0
            for q in range(k, k + blen):
                v = out[q] / norm
                if v > clip:
                    v = clip
                out[q] = v
                ss += v * v
            norm = math.sqrt(ss + eps2)
            for q in range(k, k + blen):
                out[q] = out[q] / norm
            k += blen
    return out


@nb.njit(cache=True)
def l1_distance(a, b):
    s = 0.0
    for k in range(a.shape[0]):
        s += abs(a[k] - b[k])
    return s


def compute_hog(image, params: HOGParams = HOGParams()) -> np.ndarray:
    I = np.ascontiguousarray(image, dtype=float)
    if I.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    cy, cx, _, _ = params.grid(*I.shape)
    hist = np.empty((cy, cx, params.n_bins))
    out = np.empty(params.length(*I.shape))
    by, bx = params.block_size
    return hog_into(I, params.cell_size, by, bx, params.block_stride, params.n_bins,
                    params.signed, params.clip, params.epsilon, hist, out)


def descriptor_distance(a, b) -> float:
    """L1 norm of ``a - b``."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(l1_distance(a.ravel(), b.ravel()))
