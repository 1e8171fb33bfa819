"""Scribble propagation: dense pseudo masks and cross-slice expansion.

Scribbles amplify through supervoxels: a supervoxel crossed by scribbles of
exactly one class paints all its voxels with that class and marks them
supervised; ambiguous or untouched supervoxels stay unsupervised.  For
volumes annotated only on some slices, two expansion operators regenerate
scribbles on the remaining slices (spacing-aware watershed flooding, or a
random-walker Dirichlet solve on the voxel graph), and an SSIM-based ranker
chooses which slices are worth annotating first.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import cg as _cg

from ._ndutil import ellipsoid_structure, gradient_magnitude_sq, thin_mask_2d
from .errors import DimsMismatchError, SingularSystemError, ValidationError
from .supervoxels import SupervoxelMap
from .volume import LabelVolume, ProbabilityVolume, ScalarVolume, ScribbleSet

_CONN6 = ndimage.generate_binary_structure(3, 1)


def _check_paired(dims_a, spacing_a, dims_b, spacing_b, what: str):
    if tuple(dims_a) != tuple(dims_b) or tuple(spacing_a) != tuple(spacing_b):
        raise DimsMismatchError(
            f"{what}: {tuple(dims_a)}/{tuple(spacing_a)} vs "
            f"{tuple(dims_b)}/{tuple(spacing_b)}"
        )


# ---------------------------------------------------------------------------
# Pseudo labels from supervoxels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PseudoLabels:
    """Dense pseudo mask plus the binary confidence (supervision) mask.

    ``pseudo`` holds class labels 0..N-1; unsupervised voxels carry the
    reserved value ``unknown_label == N`` (confidence 0 there).
    """

    pseudo: LabelVolume
    confidence: LabelVolume
    unknown_label: int

    def __post_init__(self):
        sup = self.confidence.data.astype(bool)
        if (self.pseudo.data[sup] == self.unknown_label).any():
            raise ValidationError("supervised voxel has no definite class")


def pseudo_labels(sv: SupervoxelMap, scribbles: ScribbleSet) -> PseudoLabels:
    """Paint supervoxels crossed by scribbles of exactly one class.

    A supervoxel intersecting scribbles of two or more classes (or none) is
    left unsupervised: its confidence is 0 and its pseudo label is the
    reserved unknown value.
    """
    _check_paired(sv.dims, sv.labels.spacing, scribbles.dims, scribbles.spacing,
                  "supervoxels vs scribbles")
    n_sv = sv.num_supervoxels
    num_classes = scribbles.num_classes
    unknown = num_classes

    class_of = np.full(n_sv, -1, dtype=np.int64)
    ambiguous = np.zeros(n_sv, dtype=bool)
    if len(scribbles):
        e = scribbles.entries
        sids = sv.labels.data[e[:, 0], e[:, 1], e[:, 2]].astype(np.int64)
        for sid, lab in np.unique(np.stack([sids, e[:, 3]], axis=1), axis=0):
            if class_of[sid] < 0:
                class_of[sid] = lab
            elif class_of[sid] != lab:
                ambiguous[sid] = True

    decided = (class_of >= 0) & ~ambiguous
    fill = np.where(decided, class_of, unknown)
    pseudo = fill[sv.labels.data]
    conf = decided[sv.labels.data].astype(np.uint8)
    return PseudoLabels(
        LabelVolume(pseudo.astype(np.uint32), scribbles.spacing,
                    num_labels=unknown + 1),
        LabelVolume(conf, scribbles.spacing, num_labels=2),
        unknown,
    )


# ---------------------------------------------------------------------------
# SSIM slice ranking
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma**2))
    return g / g.sum()


def ssim_slices(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """Mean structural similarity of two 2D slices.

    11x11 Gaussian window (sigma 1.5) with the standard stabilizing
    constants C1=(0.01 L)^2, C2=(0.03 L)^2.
    """
    win = _gaussian_window()
    def smooth(img):
        out = ndimage.correlate1d(img, win, axis=0, mode="reflect")
        return ndimage.correlate1d(out, win, axis=1, mode="reflect")

    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = smooth(a), smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def rank_slices(volume: ScalarVolume, annotated, budget: int) -> list[int]:
    """Greedily pick the next slices to annotate by structural similarity.

    Starting from ``annotated``, each round scores every unannotated axial
    slice by its best SSIM against the current annotated group, then moves
    the highest-scoring slice (ties to the lowest index) into the group.
    Returns the ``budget`` picked indices in pick order.
    """
    nz = volume.dims[2]
    group = sorted(set(int(z) for z in annotated))
    if not group:
        raise ValidationError("annotated slice set must be nonempty")
    if any(z < 0 or z >= nz for z in group):
        raise ValidationError(f"annotated slice out of range 0..{nz - 1}")
    remaining = [z for z in range(nz) if z not in set(group)]
    if budget > len(remaining):
        raise ValidationError(
            f"budget {budget} exceeds {len(remaining)} unannotated slices")

    data_range = max(float(volume.data.max() - volume.data.min()), 1e-12)
    slices = [volume.data[:, :, z] for z in range(nz)]
    cache: dict[tuple[int, int], float] = {}

    def pair(c, a):
        if (c, a) not in cache:
            cache[(c, a)] = ssim_slices(slices[c], slices[a], data_range)
        return cache[(c, a)]

    picked: list[int] = []
    best_score = {c: max(pair(c, a) for a in group) for c in remaining}
    while len(picked) < budget:
        chosen = max(remaining, key=lambda c: (best_score[c], -c))
        picked.append(chosen)
        remaining.remove(chosen)
        for c in remaining:
            best_score[c] = max(best_score[c], pair(c, chosen))
    return picked


# ---------------------------------------------------------------------------
# Watershed expansion
# ---------------------------------------------------------------------------

def expand_watershed(volume: ScalarVolume, scribbles: ScribbleSet,
                     erosion_radius: int = 1) -> ScribbleSet:
    """Flood scribbles over the gradient landscape, emit thinner scribbles.

    Marker-based flooding (6-connected) on the spacing-aware gradient
    magnitude: voxels leave a priority queue ordered by landscape height,
    then accumulated physical distance from the seeding marker, so flat
    regions fill from the physically nearest marker.  The dense result is
    eroded per label with an ellipsoid of radius
    ``erosion_radius * min(spacing)`` millimetres (0 keeps whole regions)
    and converted back to scribbles on previously unannotated slices; input
    scribbles pass through verbatim.
    """
    _check_paired(volume.dims, volume.spacing, scribbles.dims, scribbles.spacing,
                  "volume vs scribbles")
    if len(scribbles) == 0:
        raise ValidationError("watershed expansion needs nonempty scribbles")
    if len(scribbles.labels_present()) < 2:
        raise ValidationError("watershed expansion needs at least two labels")

    annotated = set(int(z) for z in scribbles.annotated_slices())
    targets = [z for z in range(volume.dims[2]) if z not in annotated]
    if not targets:
        return scribbles

    landscape = np.sqrt(gradient_magnitude_sq(volume.data.astype(np.float64),
                                              volume.spacing))
    flooded = _flood(landscape, scribbles, volume.spacing)

    if erosion_radius > 0:
        r_mm = erosion_radius * min(volume.spacing)
        se = ellipsoid_structure(r_mm, volume.spacing)
        eroded = np.full(volume.dims, -1, dtype=np.int64)
        for lab in scribbles.labels_present():
            keep = ndimage.binary_erosion(flooded == lab, structure=se,
                                          border_value=1)
            eroded[keep] = lab
        flooded = eroded

    new_entries = []
    for z in targets:
        xs, ys = np.nonzero(flooded[:, :, z] >= 0)
        labs = flooded[xs, ys, z]
        new_entries.append(np.stack([xs, ys, np.full_like(xs, z), labs], axis=1))
    entries = np.concatenate([scribbles.entries] + new_entries, axis=0)
    return ScribbleSet(entries, scribbles.dims, scribbles.spacing)


def _flood(landscape: np.ndarray, scribbles: ScribbleSet, spacing) -> np.ndarray:
    dims = landscape.shape
    out = np.full(dims, -1, dtype=np.int64)
    e = scribbles.entries
    order = np.argsort(e[:, 0] + dims[0] * (e[:, 1] + dims[1] * e[:, 2].astype(np.int64)),
                       kind="stable")
    heap = []
    counter = 0
    for i in order:
        x, y, z, lab = (int(v) for v in e[i])
        out[x, y, z] = lab
    neighbors = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for i in order:
        x, y, z, lab = (int(v) for v in e[i])
        for dx, dy, dz in neighbors:
            nx, ny, nz = x + dx, y + dy, z + dz
            if 0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2] \
                    and out[nx, ny, nz] < 0:
                step = spacing[0 if dx else (1 if dy else 2)]
                heapq.heappush(heap, (landscape[nx, ny, nz], step, counter,
                                      (nx, ny, nz), lab))
                counter += 1
    while heap:
        _, dist, _, (x, y, z), lab = heapq.heappop(heap)
        if out[x, y, z] >= 0:
            continue
        out[x, y, z] = lab
        for dx, dy, dz in neighbors:
            nx, ny, nz = x + dx, y + dy, z + dz
            if 0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2] \
                    and out[nx, ny, nz] < 0:
                step = spacing[0 if dx else (1 if dy else 2)]
                heapq.heappush(heap, (landscape[nx, ny, nz], dist + step, counter,
                                      (nx, ny, nz), lab))
                counter += 1
    return out


# ---------------------------------------------------------------------------
# Random-walker expansion
# ---------------------------------------------------------------------------

def random_walker_probabilities(volume: ScalarVolume, scribbles: ScribbleSet,
                                beta: float, tol: float = 1e-8,
                                threads: int = 1) -> tuple[ProbabilityVolume, np.ndarray]:
    """Per-voxel label probabilities from the combinatorial Dirichlet problem.

    The 6-connected voxel graph carries edge weights
    ``exp(-beta * (dI)^2) / edge_length_mm``; scribble voxels are boundary
    conditions.  One conjugate-gradient solve per label (relative residual
    1e-8, zero start, Jacobi preconditioner) gives each unlabeled voxel the
    probability that a random walker first reaches a seed of that label.

    Returns the probability volume (class planes follow the sorted distinct
    scribble labels) and the label array itself.
    """
    _check_paired(volume.dims, volume.spacing, scribbles.dims, scribbles.spacing,
                  "volume vs scribbles")
    labels_present = scribbles.labels_present()
    if len(labels_present) < 2:
        raise ValidationError("random walker needs at least two labels")
    if not beta > 0:
        raise ValidationError(f"beta must be > 0, got {beta}")

    dims = volume.dims
    n = volume.num_voxels
    data = volume.data.astype(np.float64)
    flat_index = np.arange(n).reshape(dims)

    rows, cols, weights = [], [], []
    for axis, sp in enumerate(volume.spacing):
        if dims[axis] < 2:
            continue
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        diff = data[tuple(sl_a)] - data[tuple(sl_b)]
        w = np.exp(-beta * diff * diff) / sp
        rows.append(flat_index[tuple(sl_a)].ravel())
        cols.append(flat_index[tuple(sl_b)].ravel())
        weights.append(w.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)

    w_full = sparse.coo_matrix(
        (np.concatenate([weights, weights]),
         (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n)).tocsr()

    seed_map = scribbles.dense_labels(fill=-1).ravel()
    seeded = seed_map >= 0
    free = ~seeded
    _check_solvable(w_full, seeded, dims)

    degree = np.asarray(w_full.sum(axis=1)).ravel()
    lap = sparse.diags(degree) - w_full
    lap_uu = lap[free][:, free].tocsr()
    lap_us = lap[free][:, seeded].tocsr()
    seed_labels = seed_map[seeded]

    diag = lap_uu.diagonal()
    precond = sparse.diags(np.where(diag > 0, 1.0 / np.maximum(diag, 1e-300), 1.0))

    def solve(lab):
        rhs = -lap_us @ (seed_labels == lab).astype(np.float64)
        x, info = _cg_compat(lap_uu, rhs, tol, precond)
        if info != 0:
            raise SingularSystemError(
                f"conjugate gradient failed for label {int(lab)} (info={info})")
        return x

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solutions = list(pool.map(solve, labels_present))
    else:
        solutions = [solve(lab) for lab in labels_present]

    probs = np.zeros((n, len(labels_present)), dtype=np.float64)
    for j, lab in enumerate(labels_present):
        probs[seeded, j] = (seed_labels == lab).astype(np.float64)
        probs[free, j] = solutions[j]
    probs = np.clip(probs, 0.0, 1.0)
    pv = ProbabilityVolume(probs.reshape(dims + (len(labels_present),)),
                           volume.spacing, simplex=False)
    return pv, labels_present


def _cg_compat(a, rhs, tol, precond):
    try:
        return _cg(a, rhs, rtol=tol, atol=0.0, M=precond, maxiter=20000)
    except TypeError:  # scipy < 1.12 spells it 'tol'
        return _cg(a, rhs, tol=tol, atol=0.0, M=precond, maxiter=20000)


def _check_solvable(w_full, seeded, dims):
    """Reject voxel-graph components that cannot reach any seed."""
    if not seeded.any():
        raise ValidationError("random walker needs seeds")
    n_comp, comp = csgraph.connected_components(w_full, directed=False)
    has_seed = np.zeros(n_comp, dtype=bool)
    has_seed[np.unique(comp[seeded])] = True
    bad = ~has_seed[comp]
    if bad.any():
        where = np.unravel_index(int(np.argmax(bad)), dims)
        raise SingularSystemError(
            f"unlabeled component with no reachable seed at voxel {where} "
            "(edge weights underflowed to zero?)")


def expand_random_walker(volume: ScalarVolume, scribbles: ScribbleSet,
                         beta: float, threshold: float = 0.9,
                         threads: int = 1) -> ScribbleSet:
    """Random-walker expansion of scribbles to unannotated slices.

    Voxels whose winning-label probability reaches ``threshold`` (in
    (0.5, 1]) are kept, thinned per slice to 1-voxel width, and emitted as
    new scribbles on slices that carried none; input scribbles pass through
    verbatim.
    """
    if not 0.5 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0.5, 1], got {threshold}")
    annotated = set(int(z) for z in scribbles.annotated_slices())
    targets = [z for z in range(volume.dims[2]) if z not in annotated]
    pv, labels_present = random_walker_probabilities(volume, scribbles, beta,
                                                     threads=threads)
    if not targets:
        return scribbles

    probs = pv.data.astype(np.float64)
    win = np.argmax(probs, axis=3)
    win_p = np.take_along_axis(probs, win[..., None], axis=3)[..., 0]
    seeded = scribbles.dense_labels(fill=-1) >= 0
    confident = (win_p >= threshold) & ~seeded

    new_entries = []
    for z in targets:
        for j, lab in enumerate(labels_present):
            mask = confident[:, :, z] & (win[:, :, z] == j)
            if not mask.any():
                continue
            xs, ys = np.nonzero(thin_mask_2d(mask))
            new_entries.append(
                np.stack([xs, ys, np.full_like(xs, z), np.full_like(xs, lab)],
                         axis=1))
    if not new_entries:
        return scribbles
    entries = np.concatenate([scribbles.entries] + new_entries, axis=0)
    return ScribbleSet(entries, scribbles.dims, scribbles.spacing)
