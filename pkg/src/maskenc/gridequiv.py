"""Grid ROI pooling expressed as masking + global max pooling.

Standard n x n grid max pooling of an ROI can be reproduced exactly by a
finer initial n' x n' max pooling (n' a multiple of n) followed by n*n
disjoint binary block masks and one global max pool per mask, read out
in raster-scan order. The construction is bit-exact when the ROI's side
lengths are multiples of n', because then the initial bins nest exactly
inside the grid cells and max-of-maxes equals the max over the union.

Two masking semantics are provided: "support" takes the max over the
mask's nonzero positions only (exact for any feature sign) and
"multiply" literally multiplies by the binary mask before the global
max (equal to "support" only when features are nonnegative, since a
masked-out zero can otherwise outrank a negative in-mask value).
"""

from dataclasses import dataclass

import numpy as np

from .roi import Roi, roi_max_pool


@dataclass(frozen=True)
class GridMaskSpec:
    """Output grid n and initial pooling size n_prime (a multiple of n)."""

    n: int
    n_prime: int

    def __post_init__(self):
        if self.n < 1 or self.n_prime < 1:
            raise ValueError("n and n_prime must be >= 1")
        if self.n_prime % self.n != 0:
            raise ValueError(
                f"n_prime ({self.n_prime}) must be a multiple of n ({self.n})")


def grid_masks(spec):
    """The n*n binary block masks, raster-scan order, shape (n*n, n', n').

    Mask (a, b) is one exactly on the (n'/n) x (n'/n) block of grid cell
    (a, b); the masks are disjoint and tile the n' x n' grid.
    """
    block = spec.n_prime // spec.n
    masks = np.zeros((spec.n * spec.n, spec.n_prime, spec.n_prime))
    for a in range(spec.n):
        for b in range(spec.n):
            masks[a * spec.n + b,
                  a * block:(a + 1) * block,
                  b * block:(b + 1) * block] = 1.0
    return masks


def masked_grid_pool(fmap, roi, spec, semantics="support"):
    """Grid pooling via initial max pool + block masks + global maxes.

    Requires the ROI side lengths to be multiples of n_prime (the oracle
    is only exact under alignment). Returns (c, n, n) in raster order.
    """
    if roi.width % spec.n_prime != 0 or roi.height % spec.n_prime != 0:
        raise ValueError(
            f"roi sides {roi.width}x{roi.height} must be multiples of "
            f"n_prime ({spec.n_prime})")
    if semantics not in ("support", "multiply"):
        raise ValueError(f"unknown semantics {semantics!r}")
    initial = roi_max_pool(fmap, roi, spec.n_prime)
    c = initial.shape[0]
    masks = grid_masks(spec)
    out = np.empty((c, spec.n * spec.n), dtype=np.float64)
    flat = initial.reshape(c, -1)
    for i, mask in enumerate(masks):
        if semantics == "support":
            out[:, i] = flat[:, mask.reshape(-1) > 0].max(axis=1)
        else:
            out[:, i] = (flat * mask.reshape(-1)).max(axis=1)
    return out.reshape(c, spec.n, spec.n)


def random_aligned_case(spec, rng, channels=2):
    """Draw a random (fmap, roi) with ROI sides aligned to spec.n_prime."""
    h_roi = spec.n_prime * int(rng.integers(1, 4))
    w_roi = spec.n_prime * int(rng.integers(1, 4))
    h = h_roi + int(rng.integers(0, 6))
    w = w_roi + int(rng.integers(0, 6))
    y0 = int(rng.integers(0, h - h_roi + 1))
    x0 = int(rng.integers(0, w - w_roi + 1))
    fmap = rng.standard_normal((channels, h, w))
    return fmap, Roi(x0, y0, x0 + w_roi, y0 + h_roi)


def run_equivalence_trials(spec, trials, rng, channels=2):
    """Count how many random aligned cases match direct grid max pooling
    bit for bit."""
    exact = 0
    for _ in range(trials):
        fmap, roi = random_aligned_case(spec, rng, channels)
        via_masks = masked_grid_pool(fmap, roi, spec)
        direct = roi_max_pool(fmap, roi, spec.n)
        exact += bool(np.array_equal(via_masks, direct))
    return exact
