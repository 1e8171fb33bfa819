"""Loss kernels over caller-supplied probability volumes, with gradients.

Pure numerical functions: boundary cross-entropy, partial cross-entropy
restricted to supervised voxels, the region-based active-boundary energy,
and the weighted total objective.  Every kernel returns its scalar value
together with the analytic gradient with respect to the input
probabilities, verified against central finite differences in the test
suite.  Cross-entropy losses are means over voxels; the active-boundary
terms are sums, matching their integral form.  Reductions use numpy's
pairwise summation, so results are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRegionError, DimsMismatchError, ValidationError
from .propagate import PseudoLabels
from .volume import LabelVolume, ProbabilityVolume, ScalarVolume

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Weights of the loss stack.

    ``lambda1``/``lambda2`` balance the inside/outside volume terms of the
    active-boundary energy (defaults 1 and 0.1); ``beta1..beta3`` weight the
    boundary, active-boundary, and shape-prior terms of the total objective
    (default 0.3 each).  ``literal_outside_term`` switches the outside
    volume integrand from the (1-u) convention to the published u-weighted
    form, which vanishes as u -> 0 and therefore cannot regularize; it is
    off by default.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    beta1: float = 0.3
    beta2: float = 0.3
    beta3: float = 0.3
    num_classes: int = 2
    literal_outside_term: bool = False

    def __post_init__(self):
        weights = (self.lambda1, self.lambda2, self.beta1, self.beta2, self.beta3)
        if not all(np.isfinite(w) and w >= 0 for w in weights):
            raise ValidationError(f"loss weights must be finite and >= 0: {weights}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")


@dataclass(frozen=True, eq=False)
class LossValue:
    """Scalar loss plus (optionally) d loss / d input-probabilities."""

    value: float
    gradient: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


def _check_dims(a_dims, b_dims, what):
    if tuple(a_dims) != tuple(b_dims):
        raise DimsMismatchError(f"{what}: {tuple(a_dims)} vs {tuple(b_dims)}")


def bce_boundary(pred: ProbabilityVolume, y_b: LabelVolume) -> LossValue:
    """Mean binary cross entropy of a 1-channel boundary prediction.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; the
    gradient is the analytic derivative, zero at clamped coordinates.
    """
    if pred.num_classes != 1:
        raise ValidationError("boundary prediction must have exactly 1 channel")
    _check_dims(pred.dims, y_b.dims, "prediction vs boundary")
    y = y_b.data
    if y.max(initial=0) > 1:
        raise ValidationError("boundary labels must be binary")
    y = y.astype(np.float64)
    raw = pred.data[..., 0].astype(np.float64)
    p = np.clip(raw, EPS, 1.0 - EPS)
    n = p.size
    value = float(np.sum(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))) / n)
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / n
    grad[(raw < EPS) | (raw > 1.0 - EPS)] = 0.0
    return LossValue(value, grad[..., None])


def partial_ce(pred: ProbabilityVolume, labels: PseudoLabels) -> LossValue:
    """Cross entropy over supervised voxels only, normalized by their count.

    Unsupervised voxels contribute nothing and their gradient is exactly
    zero.  With no supervision at all the loss is 0.
    """
    if not pred.simplex:
        raise ValidationError("partial cross entropy expects a simplex-flagged input")
    _check_dims(pred.dims, labels.pseudo.dims, "prediction vs pseudo labels")
    sup = labels.confidence.data.astype(bool)
    grad = np.zeros_like(pred.data, dtype=np.float64)
    m = int(sup.sum())
    if m == 0:
        return LossValue(0.0, grad)
    classes = labels.pseudo.data[sup].astype(np.int64)
    if classes.max() >= pred.num_classes:
        raise ValidationError(
            f"pseudo class {int(classes.max())} outside the "
            f"{pred.num_classes}-channel prediction")
    xs, ys, zs = np.nonzero(sup)
    raw = pred.data[xs, ys, zs, classes].astype(np.float64)
    p = np.clip(raw, EPS, 1.0 - EPS)
    value = float(-np.sum(np.log(p)) / m)
    g = np.where((raw < EPS) | (raw > 1.0 - EPS), 0.0, -1.0 / (p * m))
    grad[xs, ys, zs, classes] = g
    return LossValue(value, grad)


def _forward_gradients(u: np.ndarray, spacing) -> list[np.ndarray]:
    grads = []
    for axis, sp in enumerate(spacing):
        g = np.zeros_like(u)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        g[tuple(sl_lo)] = (u[tuple(sl_hi)] - u[tuple(sl_lo)]) / sp
        grads.append(g)
    return grads


def active_boundary(u: ProbabilityVolume, v: ScalarVolume, cfg: LossConfig,
                    c1: float | None = None, c2: float | None = None) -> LossValue:
    """Region-based energy: surface total variation plus volume fit terms.

    ``Surface`` sums the spacing-aware forward-difference gradient magnitude
    of the 1-channel soft mask ``u``.  The region means ``c1`` (inside) and
    ``c2`` (outside) are recomputed from the current ``u`` and treated as
    constants in the gradient; pass them explicitly to freeze specific
    values.  The outside volume term weights by (1-u) unless
    ``cfg.literal_outside_term`` is set.
    """
    if u.num_classes != 1:
        raise ValidationError("active boundary expects a 1-channel soft mask")
    _check_dims(u.dims, v.dims, "mask vs intensity volume")
    uu = u.data[..., 0].astype(np.float64)
    vv = v.data.astype(np.float64)
    spacing = v.spacing

    mass_in = float(uu.sum())
    mass_out = float((1.0 - uu).sum())
    if mass_in == 0.0:
        raise DegenerateRegionError("inside region is empty (sum u = 0)")
    if mass_out == 0.0:
        raise DegenerateRegionError("outside region is empty (sum (1-u) = 0)")
    if c1 is None:
        c1 = float((uu * vv).sum() / mass_in)
    if c2 is None:
        c2 = float(((1.0 - uu) * vv).sum() / mass_out)

    grads = _forward_gradients(uu, spacing)
    mag = np.sqrt(sum(g * g for g in grads))
    surface = float(mag.sum())

    grad = np.zeros_like(uu)
    safe = np.where(mag > 0, mag, 1.0)
    for axis, (g, sp) in enumerate(zip(grads, spacing)):
        w = np.where(mag > 0, g / safe, 0.0) / sp
        grad -= w
        shifted = np.zeros_like(w)
        sl_to = [slice(None)] * 3
        sl_from = [slice(None)] * 3
        sl_to[axis] = slice(1, None)
        sl_from[axis] = slice(0, -1)
        shifted[tuple(sl_to)] = w[tuple(sl_from)]
        grad += shifted

    fit_in = (c1 - vv) ** 2
    fit_out = (c2 - vv) ** 2
    vol_in = float((fit_in * uu).sum())
    if cfg.literal_outside_term:
        vol_out = float((fit_out * uu).sum())
        grad += cfg.lambda1 * fit_in + cfg.lambda2 * fit_out
    else:
        vol_out = float((fit_out * (1.0 - uu)).sum())
        grad += cfg.lambda1 * fit_in - cfg.lambda2 * fit_out

    value = surface + cfg.lambda1 * vol_in + cfg.lambda2 * vol_out
    return LossValue(value, grad[..., None])


def active_boundary_terms(u: ProbabilityVolume, v: ScalarVolume,
                          cfg: LossConfig) -> dict:
    """The three energy components, for reporting."""
    uu = u.data[..., 0].astype(np.float64)
    vv = v.data.astype(np.float64)
    mass_in = float(uu.sum())
    mass_out = float((1.0 - uu).sum())
    if mass_in == 0.0 or mass_out == 0.0:
        raise DegenerateRegionError("empty inside or outside region")
    c1 = float((uu * vv).sum() / mass_in)
    c2 = float(((1.0 - uu) * vv).sum() / mass_out)
    mag = np.sqrt(sum(g * g for g in _forward_gradients(uu, v.spacing)))
    outside_w = uu if cfg.literal_outside_term else (1.0 - uu)
    return {
        "surface": float(mag.sum()),
        "volume_in": float(((c1 - vv) ** 2 * uu).sum()),
        "volume_out": float(((c2 - vv) ** 2 * outside_w).sum()),
        "c1": c1,
        "c2": c2,
    }


def total_loss(seg_init: LossValue, seg_final: LossValue, bry: LossValue,
               ab: LossValue, sp: LossValue, cfg: LossConfig) -> LossValue:
    """Weighted sum of the five loss components.

    value = seg_init + seg_final + beta1*bry + beta2*ab + beta3*sp.
    """
    parts = {"seg_init": seg_init, "seg_final": seg_final, "bry": bry,
             "ab": ab, "sp": sp}
    vals = {}
    for name, part in parts.items():
        v = part.value if isinstance(part, LossValue) else float(part)
        if not np.isfinite(v):
            raise ValidationError(f"loss component {name!r} is not finite: {v}")
        vals[name] = v
    value = (vals["seg_init"] + vals["seg_final"] + cfg.beta1 * vals["bry"]
             + cfg.beta2 * vals["ab"] + cfg.beta3 * vals["sp"])
    return LossValue(value)
