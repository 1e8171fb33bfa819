"""Small shared nd-grid helpers."""

from __future__ import annotations

import numpy as np
from skimage.morphology import skeletonize as _sk_skeletonize


def gradient_magnitude_sq(data: np.ndarray, spacing) -> np.ndarray:
    """Squared spacing-aware gradient magnitude; singleton axes count as flat."""
    if all(n > 1 for n in data.shape):
        grads = np.gradient(data, *spacing)
        return sum(g * g for g in grads)
    out = np.zeros_like(data, dtype=np.float64)
    for axis, sp in enumerate(spacing):
        if data.shape[axis] > 1:
            g = np.gradient(data, sp, axis=axis)
            out += g * g
    return out


def thin_mask_2d(mask: np.ndarray) -> np.ndarray:
    """Topology-preserving thinning of a binary 2D mask to 1-pixel width."""
    return _sk_skeletonize(np.asarray(mask, dtype=bool))


def ellipsoid_structure(radius_mm: float, spacing) -> np.ndarray:
    """Boolean ellipsoid covering ``radius_mm`` in physical space."""
    half = [int(np.ceil(radius_mm / s)) for s in spacing]
    grids = np.meshgrid(*[np.arange(-h, h + 1) * s for h, s in zip(half, spacing)],
                        indexing="ij")
    return sum(g * g for g in grids) <= radius_mm**2 + 1e-9
