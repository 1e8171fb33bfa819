"""Shape descriptors and priors extracted from unpaired segmentation masks.

Two descriptor families summarize a segmentation: shape moments (per-class
volume ratio and mean absolute spread around the class centroid, in mm) and
skeleton contexts (log-polar histograms of 2D skeleton sample points, 4
radial shells x 12 angular sectors).  A prototype bank compresses a corpus
of unpaired masks into K-medoids representatives per class plus a moments
table; predictions are then scored by a moment-matching loss (with analytic
gradient) and a slice-wise skeleton matching cost (scalar only, since
skeletonization is discrete).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from ._ndutil import thin_mask_2d
from .errors import ValidationError
from .losses import LossValue
from .volume import LabelVolume, ProbabilityVolume

N_SHELLS = 4
N_SECTORS = 12
DEFAULT_SAMPLES = 32
SPREAD_GATE = 0.1  # admissibility budget on summed per-class spread differences


# ---------------------------------------------------------------------------
# Shape moments
# ---------------------------------------------------------------------------

def class_ratio(pred: ProbabilityVolume) -> np.ndarray:
    """Per-class soft volume fraction: mean prediction over the whole grid."""
    if not pred.simplex:
        raise ValidationError("class_ratio expects a simplex-flagged input")
    return pred.data.astype(np.float64).mean(axis=(0, 1, 2))


def _coordinate_grids(dims, spacing):
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def centroid_spread(pred: ProbabilityVolume, literal: bool = False) -> dict:
    """Per-axis mean absolute deviation from the class centroid, in mm.

    Default: probability-weighted deviations normalized by class mass.
    ``literal`` instead averages unweighted deviations over the whole grid
    (coupling the value to volume size).  Classes with zero mass are
    omitted rather than reported as zero.
    """
    if not pred.simplex:
        raise ValidationError("centroid_spread expects a simplex-flagged input")
    data = pred.data.astype(np.float64)
    grids = _coordinate_grids(pred.dims, pred.spacing)
    n_total = data[..., 0].size
    out = {}
    for k in range(pred.num_classes):
        w = data[..., k]
        mass = float(w.sum())
        if mass <= 0.0:
            continue
        d = np.empty(3)
        for a, grid in enumerate(grids):
            center = float((w * grid).sum() / mass)
            dev = np.abs(grid - center)
            d[a] = float(dev.sum() / n_total) if literal else float((w * dev).sum() / mass)
        out[k] = d
    return out


@dataclass(frozen=True, eq=False)
class ShapeMoments:
    """Moments of one corpus shape over foreground classes 1..K-1."""

    num_classes: int
    ratio: np.ndarray   # (K-1,)
    spread: np.ndarray  # (K-1, 3) mm

    def __post_init__(self):
        r = np.asarray(self.ratio, dtype=np.float64)
        s = np.asarray(self.spread, dtype=np.float64)
        if r.shape != (self.num_classes - 1,) or s.shape != (self.num_classes - 1, 3):
            raise ValidationError("moments arrays do not match num_classes")
        if r.sum() > 1.0 + 1e-6 or (r < 0).any():
            raise ValidationError("foreground ratios must be >= 0 and sum to <= 1")
        if not (np.isfinite(r).all() and np.isfinite(s).all()):
            raise ValidationError("moments must be finite")
        object.__setattr__(self, "ratio", r)
        object.__setattr__(self, "spread", s)

    @property
    def spread_scalar(self) -> np.ndarray:
        """Per-class spread reduced to its per-axis mean."""
        return self.spread.mean(axis=1)


def moments_from_labels(mask: LabelVolume, num_classes: int | None = None,
                        literal_spread: bool = False) -> ShapeMoments:
    """Shape moments of a hard mask (one-hot weights)."""
    k = int(num_classes if num_classes is not None else mask.num_labels)
    onehot = np.stack([(mask.data == c).astype(np.float64) for c in range(k)], axis=3)
    pv = ProbabilityVolume(onehot, mask.spacing, simplex=True)
    ratios = class_ratio(pv)[1:]
    spreads_map = centroid_spread(pv, literal=literal_spread)
    spread = np.zeros((k - 1, 3))
    for c in range(1, k):
        if c in spreads_map:
            spread[c - 1] = spreads_map[c]
    return ShapeMoments(k, ratios, spread)


def _soft_moments(pred_data: np.ndarray, dims, spacing, literal: bool = False):
    """Foreground ratios and scalar spreads with the pieces the chain rule needs."""
    k = pred_data.shape[3]
    grids = _coordinate_grids(dims, spacing)
    n_total = pred_data[..., 0].size
    ratios = pred_data.mean(axis=(0, 1, 2))[1:]
    spread_scalar = np.zeros(k - 1)
    chain = []
    for c in range(1, k):
        w = pred_data[..., c]
        mass = float(w.sum())
        if mass <= 0.0:
            chain.append(None)
            continue
        parts = []
        for grid in grids:
            center = float((w * grid).sum() / mass)
            dev = np.abs(grid - center)
            if literal:
                d_axis = float(dev.sum() / n_total)
                t_axis = float(np.sign(grid - center).sum())
            else:
                d_axis = float((w * dev).sum() / mass)
                t_axis = float((w * np.sign(grid - center)).sum())
            parts.append((grid, center, dev, d_axis, t_axis))
        spread_scalar[c - 1] = np.mean([p[3] for p in parts])
        chain.append((mass, parts))
    return ratios, spread_scalar, chain


def shape_moment_loss(pred: ProbabilityVolume, bank: "PrototypeBank",
                      lam: float = 1.0, literal_spread: bool = False) -> LossValue:
    """Moment-matching loss against the bank's admissible corpus shapes.

    Corpus shapes whose summed per-class spread difference to the prediction
    stays within 0.1 form the reference set (falling back to the single
    nearest shape); the loss is the KL divergence between the renormalized
    foreground ratio distributions plus ``lam`` times the quadratic band
    penalty F(m1, m2) = (m1 - 0.9 m2)^2 + (1.1 m2 - m1)^2 on the scalar
    spreads.  The discrete reference selection is frozen in the gradient.
    ``literal_spread`` evaluates the prediction's spread in the
    grid-averaged mode; pair it with a bank built the same way.
    """
    if not pred.simplex:
        raise ValidationError("shape_moment_loss expects a simplex-flagged input")
    if not bank.moments:
        raise ValidationError("prototype bank has no moments table")
    if pred.num_classes != bank.num_classes:
        raise ValidationError(
            f"prediction has {pred.num_classes} classes, bank {bank.num_classes}")

    data = pred.data.astype(np.float64)
    dims = pred.dims
    n_total = data[..., 0].size
    ratios, spread_hat, chain = _soft_moments(data, dims, pred.spacing,
                                              literal=literal_spread)

    table_spread = np.stack([m.spread_scalar for m in bank.moments])
    table_ratio = np.stack([m.ratio for m in bank.moments])
    diffs = np.abs(table_spread - spread_hat[None, :]).sum(axis=1)
    admissible = diffs <= SPREAD_GATE
    if not admissible.any():
        admissible = np.zeros(len(bank.moments), dtype=bool)
        admissible[int(np.argmin(diffs))] = True
    ref_ratio = table_ratio[admissible].mean(axis=0)
    ref_spread = table_spread[admissible].mean(axis=0)

    # KL between renormalized foreground ratio distributions
    s_hat = float(ratios.sum())
    if s_hat <= 0.0:
        raise ValidationError("prediction has no foreground mass")
    q = np.maximum(ref_ratio / max(ref_ratio.sum(), 1e-300), 1e-12)
    p = ratios / s_hat
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(np.maximum(p, 1e-300) / q), 0.0)
    kl = float((p * logs).sum())

    band = spread_hat - 0.9 * ref_spread
    band2 = 1.1 * ref_spread - spread_hat
    penalty = float((band**2 + band2**2).sum())
    value = kl + lam * penalty

    grad = np.zeros_like(data)
    # ratio chain: dKL/dR_c reaches every voxel of channel c as 1/n_total
    dkl_dr = np.where(ratios > 0, (logs - kl) / s_hat, 0.0)
    for c in range(1, pred.num_classes):
        grad[..., c] += dkl_dr[c - 1] / n_total
    # spread chain, with the centroid's own dependence included
    df_dm = 2.0 * band - 2.0 * band2
    for c in range(1, pred.num_classes):
        if chain[c - 1] is None:
            continue
        mass, parts = chain[c - 1]
        acc = np.zeros(dims)
        for grid, center, dev, d_axis, t_axis in parts:
            if literal_spread:
                acc += -(grid - center) * (t_axis / mass) / n_total
            else:
                acc += (dev - d_axis - (grid - center) * (t_axis / mass)) / mass
        grad[..., c] += lam * df_dm[c - 1] * acc / 3.0
    return LossValue(value, grad)


# ---------------------------------------------------------------------------
# Skeletons
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Skeleton:
    """Ordered 1-pixel-wide skeleton of one slice, points in mm."""

    slice_index: int
    points_mm: np.ndarray  # (n, 2)
    source_class: int

    def __len__(self):
        return self.points_mm.shape[0]


def _order_pixels(pixels: np.ndarray) -> np.ndarray:
    """Walk skeleton pixels depth-first from an endpoint, deterministically."""
    n = len(pixels)
    index = {tuple(p): i for i, p in enumerate(map(tuple, pixels))}
    neighbors = [[] for _ in range(n)]
    for i, (x, y) in enumerate(pixels):
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if (dx, dy) == (0, 0):
                    continue
                j = index.get((x + dx, y + dy))
                if j is not None:
                    neighbors[i].append(j)
    for lst in neighbors:
        lst.sort()
    order = []
    seen = np.zeros(n, dtype=bool)
    by_pos = sorted(range(n), key=lambda i: tuple(pixels[i]))
    endpoints = [i for i in by_pos if len(neighbors[i]) <= 1]
    starts = endpoints + by_pos
    for s in starts:
        if seen[s]:
            continue
        stack = [s]
        while stack:
            i = stack.pop()
            if seen[i]:
                continue
            seen[i] = True
            order.append(i)
            for j in sorted(neighbors[i], reverse=True):
                if not seen[j]:
                    stack.append(j)
    return np.array(order, dtype=np.int64)


def skeletonize(mask_slice: np.ndarray, spacing_2d=(1.0, 1.0),
                slice_index: int = 0, source_class: int = 1) -> Skeleton:
    """Thin a binary 2D mask to an ordered 1-pixel skeleton.

    Topology-preserving thinning, then a 3x3 closing to bridge 1-pixel
    discontinuities, then a final thinning to restore unit width.
    """
    mask = np.asarray(mask_slice, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError(f"expected a 2D mask, got shape {mask.shape}")
    if not mask.any():
        raise ValidationError("cannot skeletonize an empty mask")
    thin = thin_mask_2d(mask)
    bridged = ndimage.binary_closing(thin, structure=np.ones((3, 3)))
    final = thin_mask_2d(bridged | thin)
    pixels = np.stack(np.nonzero(final), axis=1)
    order = _order_pixels(pixels)
    pts = pixels[order].astype(np.float64) * np.asarray(spacing_2d, dtype=np.float64)
    return Skeleton(slice_index, pts, source_class)


# ---------------------------------------------------------------------------
# Skeleton context
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SkeletonContext:
    """Log-polar histograms (4 shells x 12 sectors) at each sample point."""

    histograms: np.ndarray  # (S, 4, 12) int
    points_mm: np.ndarray   # (S, 2)
    r_max: float

    def __post_init__(self):
        h = np.asarray(self.histograms, dtype=np.int64)
        p = np.asarray(self.points_mm, dtype=np.float64)
        if h.ndim != 3 or h.shape[1:] != (N_SHELLS, N_SECTORS):
            raise ValidationError(f"histograms must be (S, 4, 12), got {h.shape}")
        if p.shape != (h.shape[0], 2):
            raise ValidationError("points do not match histograms")
        sums = h.sum(axis=(1, 2))
        if h.shape[0] >= 1 and not np.all(sums == h.shape[0] - 1):
            raise ValidationError("each histogram must count the other S-1 points")
        object.__setattr__(self, "histograms", h)
        object.__setattr__(self, "points_mm", p)

    @property
    def num_points(self) -> int:
        return self.histograms.shape[0]


def _subsample(points: np.ndarray, samples: int) -> np.ndarray:
    n = len(points)
    if n <= samples:
        return points
    idx = np.unique(np.round(np.linspace(0, n - 1, samples)).astype(np.int64))
    return points[idx]


def skeleton_context(skel: Skeleton, samples: int = DEFAULT_SAMPLES) -> SkeletonContext:
    """Log-polar descriptor of a skeleton.

    Points are subsampled uniformly along the skeleton order.  Radial shell
    edges are log-spaced over [r_max/16, r_max] with r_max twice the mean
    pairwise distance; nearer points land in the innermost shell and
    farther ones in the outermost.  Sector 0 starts at angle -pi measured
    against the first coordinate axis.
    """
    if samples < 2:
        raise ValidationError("need at least 2 sample points")
    pts = _subsample(np.asarray(skel.points_mm, dtype=np.float64), samples)
    s = len(pts)
    if s < 2:
        raise ValidationError("skeleton has fewer than 2 points")

    delta = pts[None, :, :] - pts[:, None, :]
    dist = np.hypot(delta[..., 0], delta[..., 1])
    off_diag = ~np.eye(s, dtype=bool)
    r_max = 2.0 * float(dist[off_diag].mean())
    if r_max <= 0.0:
        raise ValidationError("all sample points coincide")
    edges = np.geomspace(r_max / 16.0, r_max, N_SHELLS + 1)

    shell = np.clip(np.searchsorted(edges[1:], dist, side="right"), 0, N_SHELLS - 1)
    angle = np.arctan2(delta[..., 1], delta[..., 0])
    sector = np.floor((angle + np.pi) / (2.0 * np.pi / N_SECTORS)).astype(np.int64)
    sector %= N_SECTORS

    hist = np.zeros((s, N_SHELLS, N_SECTORS), dtype=np.int64)
    for i in range(s):
        for j in range(s):
            if i != j:
                hist[i, shell[i, j], sector[i, j]] += 1
    return SkeletonContext(hist, pts, r_max)


def match_cost(a: SkeletonContext, b: SkeletonContext) -> float:
    """Total chi-square matching cost under optimal point correspondence.

    Per point pair: half the sum over bins of (h1-h2)^2/(h1+h2), empty bins
    contributing 0.  Points pair up by minimum-cost bipartite assignment;
    with unequal counts each unmatched point pays its cheapest counterpart.
    """
    ha = a.histograms.astype(np.float64).reshape(a.num_points, -1)
    hb = b.histograms.astype(np.float64).reshape(b.num_points, -1)
    num = (ha[:, None, :] - hb[None, :, :]) ** 2
    den = ha[:, None, :] + hb[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(den > 0, num / den, 0.0)
    cost = 0.5 * frac.sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    unmatched_rows = np.setdiff1d(np.arange(cost.shape[0]), rows)
    unmatched_cols = np.setdiff1d(np.arange(cost.shape[1]), cols)
    if unmatched_rows.size:
        total += float(cost[unmatched_rows].min(axis=1).sum())
    if unmatched_cols.size:
        total += float(cost[:, unmatched_cols].min(axis=0).sum())
    return total


# ---------------------------------------------------------------------------
# K-medoids prototypes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KMedoidsResult:
    medoid_indices: np.ndarray
    assignments: np.ndarray
    objective_history: list[float]


def kmedoids_indices(distance: np.ndarray, k_p: int, seed: int,
                     max_iters: int = 50) -> KMedoidsResult:
    """Alternating k-medoids on a precomputed symmetric distance matrix.

    Assignment sends each item to its nearest medoid (ties to the medoid
    with the lowest corpus index); the update picks, per cluster, the member
    with the minimum summed distance to its cluster mates (ties to the
    lowest index).  Stops when assignments stabilize or after
    ``max_iters``; the objective never increases.
    """
    n = distance.shape[0]
    if k_p < 1 or k_p > n:
        raise ValidationError(f"k_p must be in 1..{n}, got {k_p}")
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k_p, replace=False))
    assignments = None
    history: list[float] = []
    for _ in range(max_iters):
        new_assign = medoids[np.argmin(distance[:, medoids], axis=1)]
        history.append(float(distance[np.arange(n), new_assign].sum()))
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        new_medoids = []
        for m in medoids:
            members = np.nonzero(assignments == m)[0]
            if members.size == 0:
                new_medoids.append(m)
                continue
            within = distance[np.ix_(members, members)].sum(axis=1)
            new_medoids.append(int(members[np.argmin(within)]))
        medoids = np.sort(np.array(new_medoids, dtype=np.int64))
    final_assign = medoids[np.argmin(distance[:, medoids], axis=1)]
    history.append(float(distance[np.arange(n), final_assign].sum()))
    return KMedoidsResult(medoids, final_assign, history)


def pairwise_costs(descriptors: list[SkeletonContext]) -> np.ndarray:
    n = len(descriptors)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = match_cost(descriptors[i], descriptors[j])
    return d


def kmedoids(descriptors: list[SkeletonContext], k_p: int, seed: int,
             max_iters: int = 50) -> tuple[list[SkeletonContext], KMedoidsResult]:
    """Pick ``k_p`` medoid descriptors under the matching-cost metric."""
    result = kmedoids_indices(pairwise_costs(descriptors), k_p, seed, max_iters)
    return [descriptors[i] for i in result.medoid_indices], result


# ---------------------------------------------------------------------------
# Prototype bank
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """Per-class medoid skeleton contexts plus the corpus moments table."""

    num_classes: int
    medoids: dict[int, list[SkeletonContext]]
    moments: list[ShapeMoments]
    k_p: int

    def classes(self) -> list[int]:
        return sorted(self.medoids)


def build_prototype_bank(masks: list[LabelVolume], k_p: int = 4, seed: int = 0,
                         samples: int = DEFAULT_SAMPLES,
                         literal_spread: bool = False) -> PrototypeBank:
    """Summarize unpaired masks: slice-wise skeleton medoids + moments.

    For each foreground class, every slice with at least two skeleton
    points contributes one descriptor; K-medoids (capped at the population
    size) compresses them to prototypes.
    """
    if not masks:
        raise ValidationError("need at least one corpus mask")
    num_classes = max(m.num_labels for m in masks)
    moments = [moments_from_labels(m, num_classes, literal_spread=literal_spread)
               for m in masks]
    medoids: dict[int, list[SkeletonContext]] = {}
    for c in range(1, num_classes):
        descriptors = []
        for m in masks:
            in_plane = m.spacing[:2]
            for z in range(m.dims[2]):
                sl = m.data[:, :, z] == c
                if not sl.any():
                    continue
                skel = skeletonize(sl, in_plane, slice_index=z, source_class=c)
                if len(skel) < 2:
                    continue
                descriptors.append(skeleton_context(skel, samples))
        if descriptors:
            chosen, _ = kmedoids(descriptors, min(k_p, len(descriptors)), seed)
            medoids[c] = chosen
    return PrototypeBank(num_classes, medoids, moments, k_p)


@dataclass(frozen=True, eq=False)
class ShapePriorScore:
    """Scalar shape-prior score and its components (no gradient)."""

    moment_term: float
    skeleton_term: float
    total: float
    per_class: dict[int, dict]


def skeleton_prior_loss(pred_mask: LabelVolume, bank: PrototypeBank,
                        lam: float = 1.0,
                        samples: int = DEFAULT_SAMPLES) -> ShapePriorScore:
    """Score a hard mask against the bank: moment loss + skeleton matching.

    Per predicted class and foreground slice, the skeleton context's cost
    to its nearest prototype is averaged over slices; class contributions
    add up.  Classes absent from the prediction contribute 0 and are
    reported absent.  The result is a scalar score: skeletonization is
    discrete, so no gradient flows through it.
    """
    present = sorted(int(c) for c in np.unique(pred_mask.data) if c != 0)
    missing = [c for c in present if c not in bank.medoids]
    if missing:
        raise ValidationError(f"bank has no prototypes for classes {missing}")

    per_class: dict[int, dict] = {}
    skeleton_term = 0.0
    for c in range(1, bank.num_classes):
        if c not in present:
            per_class[c] = {"present": False, "skeleton_cost": 0.0, "slices": 0}
            continue
        costs = []
        for z in range(pred_mask.dims[2]):
            sl = pred_mask.data[:, :, z] == c
            if not sl.any():
                continue
            skel = skeletonize(sl, pred_mask.spacing[:2], z, c)
            if len(skel) < 2:
                continue
            ctx = skeleton_context(skel, samples)
            costs.append(min(match_cost(ctx, proto) for proto in bank.medoids[c]))
        mean_cost = float(np.mean(costs)) if costs else 0.0
        skeleton_term += mean_cost
        per_class[c] = {"present": True, "skeleton_cost": mean_cost,
                        "slices": len(costs)}

    onehot = np.stack([(pred_mask.data == c).astype(np.float64)
                       for c in range(bank.num_classes)], axis=3)
    pv = ProbabilityVolume(onehot, pred_mask.spacing, simplex=True)
    moment_term = float(shape_moment_loss(pv, bank, lam=lam).value)
    return ShapePriorScore(moment_term, skeleton_term, moment_term + skeleton_term,
                           per_class)


# ---------------------------------------------------------------------------
# Bank serialization
# ---------------------------------------------------------------------------

def save_bank(bank: PrototypeBank, path) -> None:
    doc = {
        "schema_version": 1,
        "num_classes": bank.num_classes,
        "k_p": bank.k_p,
        "medoids": {
            str(c): [
                {
                    "histograms": m.histograms.reshape(m.num_points, -1).tolist(),
                    "points_mm": m.points_mm.tolist(),
                    "r_max": m.r_max,
                }
                for m in protos
            ]
            for c, protos in sorted(bank.medoids.items())
        },
        "moments": [
            {"ratio": m.ratio.tolist(), "spread": m.spread.tolist()}
            for m in bank.moments
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_bank(path) -> PrototypeBank:
    doc = json.loads(Path(path).read_text())
    k = int(doc["num_classes"])
    medoids = {}
    for c, protos in doc["medoids"].items():
        medoids[int(c)] = [
            SkeletonContext(
                np.array(p["histograms"], dtype=np.int64).reshape(-1, N_SHELLS,
                                                                  N_SECTORS),
                np.array(p["points_mm"], dtype=np.float64),
                float(p["r_max"]),
            )
            for p in protos
        ]
    moments = [ShapeMoments(k, np.array(m["ratio"]), np.array(m["spread"]))
               for m in doc["moments"]]
    return PrototypeBank(k, medoids, moments, int(doc["k_p"]))
