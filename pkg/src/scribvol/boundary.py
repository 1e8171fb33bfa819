"""Static boundary volumes from per-slice 2D edge detection.

Each axial (x, y) slice is processed independently with a classical
detector: Gaussian smoothing, gradient magnitude, non-maximum suppression
along the quantized gradient direction, and hysteresis thresholding.  The
stacked binary volume depends only on the input intensities, never on any
prediction, so it can be precomputed once.  Externally computed edge
volumes (e.g. from a learned detector) can be ingested instead via
:func:`binarize_edges`.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import LabelVolume, ScalarVolume

DEFAULT_SIGMA = 1.4
DEFAULT_LOW_Q = 0.7
DEFAULT_HIGH_Q = 0.9


def _gradient_magnitude(slice2d: np.ndarray, sigma: float):
    smoothed = ndimage.gaussian_filter(slice2d.astype(np.float64), sigma,
                                       mode="nearest")
    gx, gy = np.gradient(smoothed)
    return np.hypot(gx, gy), gx, gy


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Suppress non-maxima along the gradient direction (ties survive).

    The direction is quantized to 4 sectors.  A symmetric two-pixel step
    therefore keeps both pixels abutting the discontinuity; out-of-bounds
    neighbors count as zero magnitude.
    """
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    # sector 0: gradient ~ +x -> compare x neighbors; 1: diagonal (+x, +y);
    # 2: gradient ~ +y -> compare y neighbors; 3: diagonal (+x, -y)
    steps = {0: (1, 0), 1: (1, 1), 2: (0, 1), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dx, dy) in steps.items():
        n1 = padded[1 + dx: 1 + dx + mag.shape[0], 1 + dy: 1 + dy + mag.shape[1]]
        n2 = padded[1 - dx: 1 - dx + mag.shape[0], 1 - dy: 1 - dy + mag.shape[1]]
        keep |= (sector == s) & (mag >= n1) & (mag >= n2)
    return keep & (mag > 0)


def edge_slice(slice2d: np.ndarray, low: float, high: float,
               sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Binary edge map of one 2D slice via smoothed-gradient NMS + hysteresis.

    ``low``/``high`` are absolute gradient-magnitude thresholds,
    ``high >= low >= 0``.  Pixels at or above ``high`` seed edges; pixels at
    or above ``low`` survive when 8-connected to a seed.  A degenerate slice
    (single row or column) yields an empty map with a warning.
    """
    slice2d = np.asarray(slice2d)
    if slice2d.ndim != 2:
        raise ValidationError(f"expected a 2D slice, got shape {slice2d.shape}")
    if not (0 <= low <= high):
        raise ValidationError(f"need high >= low >= 0, got low={low}, high={high}")
    if min(slice2d.shape) < 2:
        warnings.warn("degenerate slice (single row/column): empty edge map",
                      stacklevel=2)
        return np.zeros(slice2d.shape, dtype=bool)

    mag, gx, gy = _gradient_magnitude(slice2d, sigma)
    thin = _nms(mag, gx, gy)
    weak = thin & (mag >= low)
    strong = thin & (mag >= high)
    comp, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(slice2d.shape, dtype=bool)
    anchored = np.zeros(n + 1, dtype=bool)
    anchored[np.unique(comp[strong])] = True
    anchored[0] = False
    return anchored[comp]


def _slice_thresholds(mag: np.ndarray, low_q: float, high_q: float):
    nz = mag[mag > 0]
    if nz.size == 0:
        return np.inf, np.inf
    return float(np.quantile(nz, low_q)), float(np.quantile(nz, high_q))


def static_boundary(volume: ScalarVolume, low: float | None = None,
                    high: float | None = None, low_q: float = DEFAULT_LOW_Q,
                    high_q: float = DEFAULT_HIGH_Q,
                    sigma: float = DEFAULT_SIGMA) -> LabelVolume:
    """Stack per-slice edge maps into a binary boundary volume.

    With explicit ``low``/``high`` the same absolute thresholds apply to all
    slices.  Otherwise thresholds default to the ``low_q``/``high_q``
    quantiles of each slice's nonzero gradient magnitudes, which makes the
    result invariant to affine intensity rescaling.  Slices never influence
    each other.
    """
    absolute = low is not None or high is not None
    if absolute and (low is None or high is None):
        raise ValidationError("give both low and high, or neither")
    out = np.zeros(volume.dims, dtype=np.uint8)
    for z in range(volume.dims[2]):
        sl = volume.data[:, :, z]
        if absolute:
            lo, hi = low, high
        else:
            mag, _, _ = _gradient_magnitude(sl, sigma)
            lo, hi = _slice_thresholds(mag, low_q, high_q)
            if not np.isfinite(lo):
                continue
        out[:, :, z] = edge_slice(sl, lo, hi, sigma=sigma)
    return LabelVolume(out, volume.spacing, num_labels=2)


def binarize_edges(edges: ScalarVolume, threshold: float = 0.5) -> LabelVolume:
    """Ingest a precomputed real-valued edge volume as a binary boundary."""
    return LabelVolume((edges.data >= threshold).astype(np.uint8), edges.spacing,
                       num_labels=2)
