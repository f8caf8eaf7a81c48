"""ROI-level spatial operations: fixed-grid pooling and context raw masks.

Bins follow the classic floor/ceil quantization: bin a of an extent of h
cells starting at y0 covers [y0 + floor(a*h/n), y0 + ceil((a+1)*h/n)),
clamped to be nonempty. Edges are computed in integer arithmetic so the
same (roi, n) always yields the same bins, bit for bit; bins may overlap
when the ROI is smaller than the grid.
"""

from dataclasses import dataclass

import numpy as np

from .ops import ShapeError, _require


@dataclass(frozen=True)
class Roi:
    """Rectangular region [x0, x1) x [y0, y1) in feature-map cells."""

    x0: int
    y0: int
    x1: int
    y1: int
    image_index: int = 0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"empty roi {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0


@dataclass(frozen=True)
class ImageExtent:
    """Full feature-map size in cells."""

    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"extent must be positive, got {self.width}x{self.height}")


def _clip_roi(roi, h, w):
    x0, y0 = max(roi.x0, 0), max(roi.y0, 0)
    x1, y1 = min(roi.x1, w), min(roi.y1, h)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"roi {roi} is empty after clipping to {w}x{h}")
    return x0, y0, x1, y1


def _bin_edges(start, length, n):
    # integer-exact [lo, hi) per bin; hi clamped so every bin is nonempty
    edges = []
    for a in range(n):
        lo = start + (a * length) // n
        hi = start + ((a + 1) * length + n - 1) // n
        edges.append((lo, max(lo + 1, hi)))
    return edges


def _bin_matrices(start, length, n, size):
    # (n, size) 0/1 indicator of bin membership plus per-bin lengths; bins
    # are separable so pooling and its backward reduce to small matmuls
    ind = np.zeros((n, size), dtype=np.float64)
    lens = np.empty(n, dtype=np.float64)
    for a, (lo, hi) in enumerate(_bin_edges(start, length, n)):
        ind[a, lo:hi] = 1.0
        lens[a] = hi - lo
    return ind, lens


def roi_avg_pool(fmap, roi, n):
    """Average-pool an ROI of (c, h, w) into a (c, n, n) grid."""
    fmap = np.asarray(fmap, dtype=np.float64)
    _require(fmap.ndim == 3, f"fmap must be (c, h, w), got {fmap.shape}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x0, y0, x1, y1 = _clip_roi(roi, fmap.shape[1], fmap.shape[2])
    iy, ylen = _bin_matrices(y0, y1 - y0, n, fmap.shape[1])
    ix, xlen = _bin_matrices(x0, x1 - x0, n, fmap.shape[2])
    sums = (iy @ fmap) @ ix.T  # (n,h)@(c,h,w)@(w,n) -> (c,n,n)
    return sums / np.outer(ylen, xlen)


def roi_avg_pool_backward(fmap_shape, roi, n, grad_out):
    """Spread each bin's gradient equally over the cells it averaged."""
    c, h, w = fmap_shape
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _require(grad_out.shape == (c, n, n),
             f"grad_out shape {grad_out.shape} != ({c}, {n}, {n})")
    x0, y0, x1, y1 = _clip_roi(roi, h, w)
    iy, ylen = _bin_matrices(y0, y1 - y0, n, h)
    ix, xlen = _bin_matrices(x0, x1 - x0, n, w)
    weighted = grad_out / np.outer(ylen, xlen)
    return (iy.T @ weighted) @ ix  # (h,n)@(c,n,n)@(n,w) -> (c,h,w)


def roi_max_pool(fmap, roi, n):
    """Max-pool an ROI of (c, h, w) into a (c, n, n) grid (same bins as avg)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    _require(fmap.ndim == 3, f"fmap must be (c, h, w), got {fmap.shape}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x0, y0, x1, y1 = _clip_roi(roi, fmap.shape[1], fmap.shape[2])
    ybins = _bin_edges(y0, y1 - y0, n)
    xbins = _bin_edges(x0, x1 - x0, n)
    out = np.empty((fmap.shape[0], n, n), dtype=np.float64)
    for a, (ylo, yhi) in enumerate(ybins):
        for b, (xlo, xhi) in enumerate(xbins):
            out[:, a, b] = fmap[:, ylo:yhi, xlo:xhi].max(axis=(1, 2))
    return out


def roi_max_pool_backward(fmap, roi, n, grad_out):
    """Route each bin's gradient to its first (row-major) maximum cell."""
    fmap = np.asarray(fmap, dtype=np.float64)
    c, h, w = fmap.shape
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _require(grad_out.shape == (c, n, n),
             f"grad_out shape {grad_out.shape} != ({c}, {n}, {n})")
    x0, y0, x1, y1 = _clip_roi(roi, h, w)
    ybins = _bin_edges(y0, y1 - y0, n)
    xbins = _bin_edges(x0, x1 - x0, n)
    grad = np.zeros((c, h, w), dtype=np.float64)
    for a, (ylo, yhi) in enumerate(ybins):
        for b, (xlo, xhi) in enumerate(xbins):
            window = fmap[:, ylo:yhi, xlo:xhi].reshape(c, -1)
            am = np.argmax(window, axis=1)
            wy, wx = np.unravel_index(am, (yhi - ylo, xhi - xlo))
            grad[np.arange(c), ylo + wy, xlo + wx] += grad_out[:, a, b]
    return grad


def image_pool(fmap, n, mode="avg"):
    """Pool the whole map into an (c, n, n) grid (ROI = full extent)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    _require(fmap.ndim == 3, f"fmap must be (c, h, w), got {fmap.shape}")
    full = Roi(0, 0, fmap.shape[2], fmap.shape[1])
    if mode == "avg":
        return roi_avg_pool(fmap, full, n)
    if mode == "max":
        return roi_max_pool(fmap, full, n)
    raise ValueError(f"unknown pooling mode {mode!r}")


def image_pool_backward(fmap_shape, n, grad_out):
    # avg mode only; the max mode is oracle-side and never trained through
    full = Roi(0, 0, fmap_shape[2], fmap_shape[1])
    return roi_avg_pool_backward(fmap_shape, full, n, grad_out)


def context_raw_mask(roi, extent, n, i_in, i_out):
    """Downsample the in/out-of-ROI context map of a full image to n x n.

    The extent is split into an n x n grid of equal real-valued bins; each
    entry is f*i_in + (1-f)*i_out where f is the exact fraction of the
    bin's area covered by the ROI rectangle. Depends only on the ROI
    coordinates and the extent, never on image content.
    """
    if i_in == i_out:
        raise ValueError("i_in and i_out must differ")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x0 = max(roi.x0, 0)
    y0 = max(roi.y0, 0)
    x1 = min(roi.x1, extent.width)
    y1 = min(roi.y1, extent.height)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"roi {roi} lies outside extent "
                         f"{extent.width}x{extent.height}")
    # bin edges (k*size)/n in exact integer-then-divide form
    ex = (np.arange(n + 1) * extent.width) / n
    ey = (np.arange(n + 1) * extent.height) / n
    ow = np.maximum(0.0, np.minimum(x1, ex[1:]) - np.maximum(x0, ex[:-1]))
    oh = np.maximum(0.0, np.minimum(y1, ey[1:]) - np.maximum(y0, ey[:-1]))
    cover = np.outer(oh, ow) / np.outer(ey[1:] - ey[:-1], ex[1:] - ex[:-1])
    cover = np.clip(cover, 0.0, 1.0)
    return cover * i_in + (1.0 - cover) * i_out
