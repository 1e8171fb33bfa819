"""Spacing-aware 3D SLIC supervoxels.

Localized k-means over joint intensity / physical-coordinate space.  All
spatial math runs in millimetres so anisotropic grids cluster correctly:
seeds tile the physical extent, and the spatial distance term is Euclidean
mm distance normalized by the seed stride, keeping the compactness weight
unit-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._ndutil import gradient_magnitude_sq
from .errors import ValidationError
from .volume import LabelVolume, ScalarVolume

_CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class SupervoxelMap:
    """A full partition of a volume into S supervoxels with ids 0..S-1.

    After the connectivity-enforcement pass each id forms a single
    26-connected component; per-id records hold the physical centroid,
    mean intensity, and voxel count.
    """

    labels: LabelVolume
    centroids_mm: np.ndarray
    mean_intensity: np.ndarray
    counts: np.ndarray

    @property
    def num_supervoxels(self) -> int:
        return self.labels.num_labels

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.dims


def seed_grid(dims, spacing, k: int) -> tuple[np.ndarray, float]:
    """Initial seed voxels on a regular grid in physical space.

    The target stride is ``(physical_volume_mm3 / k) ** (1/3)``.  Each axis
    gets ``max(1, round(extent_mm / stride))`` seeds at the centers of the
    resulting equal tiles, so doubling an axis' spacing (same physical
    extent) halves the seed stride measured in voxels along that axis.

    Returns (seeds, stride_mm) where seeds is an (S, 3) int array of voxel
    indices ordered x-fastest.
    """
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    extent = np.array(dims, dtype=np.float64) * np.array(spacing)
    stride = float((extent.prod() / k) ** (1.0 / 3.0))
    n_per_axis = [max(1, int(round(e / stride))) for e in extent]
    axes = []
    for n_seeds, e, sp, n_vox in zip(n_per_axis, extent, spacing, dims):
        pos_mm = (np.arange(n_seeds) + 0.5) * (e / n_seeds)
        axes.append(np.clip((pos_mm / sp).astype(np.int64), 0, n_vox - 1))
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    seeds = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return seeds, stride


def _perturb_seeds(seeds: np.ndarray, data: np.ndarray, spacing) -> np.ndarray:
    """Move each seed to the lowest-gradient voxel in its 3x3x3 neighborhood."""
    grad = gradient_magnitude_sq(data, spacing)
    dims = data.shape
    out = seeds.copy()
    for i, (x, y, z) in enumerate(seeds):
        sl = tuple(slice(max(0, c - 1), min(n, c + 2)) for c, n in zip((x, y, z), dims))
        window = grad[sl]
        dx, dy, dz = np.unravel_index(np.argmin(window), window.shape)
        out[i] = (sl[0].start + dx, sl[1].start + dy, sl[2].start + dz)
    return out


_OFFSETS26 = [(dx, dy, dz)
              for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
              if (dx, dy, dz) != (0, 0, 0)]


def _fragments(assignment: np.ndarray) -> list[tuple[int, tuple]]:
    """Non-largest 26-connected fragments of each id, as (id, coords)."""
    frags = []
    for sid, bbox in enumerate(ndimage.find_objects(assignment + 1)):
        if bbox is None:
            continue
        comp, n = ndimage.label(assignment[bbox] == sid, structure=_CONN26)
        if n <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        for c in range(1, n + 1):
            if c == keep:
                continue
            local = np.nonzero(comp == c)
            frags.append((sid, tuple(local[a] + bbox[a].start for a in range(3))))
    return frags


def _enforce_connectivity(assignment: np.ndarray) -> np.ndarray:
    """Merge orphan fragments so every id is one 26-connected component.

    For each id the largest fragment keeps it; every other fragment is
    absorbed by its largest 26-adjacent neighbor (ties to the lowest id).
    Repeats until clean, since a merge can itself split the receiving id.
    """
    assignment = assignment.copy()
    dims = assignment.shape
    for _pass in range(64):
        frags = _fragments(assignment)
        if not frags:
            return assignment
        counts = np.bincount(assignment.ravel())
        for sid, coords in frags:
            neigh = []
            for ox, oy, oz in _OFFSETS26:
                xx, yy, zz = coords[0] + ox, coords[1] + oy, coords[2] + oz
                ok = ((xx >= 0) & (xx < dims[0]) & (yy >= 0) & (yy < dims[1])
                      & (zz >= 0) & (zz < dims[2]))
                neigh.append(assignment[xx[ok], yy[ok], zz[ok]])
            ids = np.unique(np.concatenate(neigh))
            ids = ids[ids != sid]
            if ids.size == 0:
                continue  # id covers the whole grid; nothing to merge into
            target = int(ids[np.argmax(counts[ids])])  # ids ascending: tie -> lowest
            size = len(coords[0])
            counts[target] += size
            counts[sid] -= size
            assignment[coords] = target
    raise RuntimeError("connectivity enforcement did not converge")


def slic3d(volume: ScalarVolume, k: int, compactness: float = 0.1,
           max_iters: int = 10) -> SupervoxelMap:
    """Cluster a volume into ~k compact, intensity-homogeneous supervoxels.

    The per-voxel distance to a cluster is
    ``|intensity - cluster_mean| + compactness * d_mm / stride`` where
    ``d_mm`` is the Euclidean distance to the cluster centroid in
    millimetres and ``stride`` the seed-grid stride.  Iterations stop after
    ``max_iters`` rounds or when fewer than 0.1% of voxels change cluster.
    A final pass merges orphan fragments so each id is 26-connected, then
    ids are relabeled densely to 0..S-1.

    Deterministic: no randomness is involved; ties go to the lowest id.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > volume.num_voxels:
        raise ValidationError(f"k={k} exceeds voxel count {volume.num_voxels}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")

    data = volume.data.astype(np.float64)
    dims = volume.dims
    spacing = np.array(volume.spacing)
    seeds, stride = seed_grid(dims, volume.spacing, k)
    seeds = _perturb_seeds(seeds, data, volume.spacing)

    coords = [(np.arange(n) + 0.5) * sp for n, sp in zip(dims, spacing)]
    centroids = np.stack([coords[a][seeds[:, a]] for a in range(3)], axis=1)
    means = data[seeds[:, 0], seeds[:, 1], seeds[:, 2]].copy()
    n_clusters = len(seeds)

    assignment = np.full(dims, -1, dtype=np.int64)
    total = volume.num_voxels
    reach = 2.0 * stride
    xs, ys, zs = np.meshgrid(coords[0], coords[1], coords[2], indexing="ij")

    for _it in range(max_iters):
        best = np.full(dims, np.inf)
        new_assignment = np.full(dims, -1, dtype=np.int64)
        for cid in range(n_clusters):
            c = centroids[cid]
            lo = [max(0, int(np.floor((c[a] - reach) / spacing[a]))) for a in range(3)]
            hi = [min(dims[a], int(np.ceil((c[a] + reach) / spacing[a])) + 1)
                  for a in range(3)]
            if any(l >= h for l, h in zip(lo, hi)):
                continue
            sl = tuple(slice(l, h) for l, h in zip(lo, hi))
            dx = coords[0][sl[0]] - c[0]
            dy = coords[1][sl[1]] - c[1]
            dz = coords[2][sl[2]] - c[2]
            d_sp = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2
                           + dz[None, None, :] ** 2)
            dist = np.abs(data[sl] - means[cid]) + compactness * d_sp / stride
            better = dist < best[sl]
            best[sl][better] = dist[better]
            new_assignment[sl][better] = cid

        missing = new_assignment < 0
        if missing.any():
            # Voxels outside every search window: nearest centroid spatially.
            mx, my, mz = np.nonzero(missing)
            pts = np.stack([coords[0][mx], coords[1][my], coords[2][mz]], axis=1)
            d = np.linalg.norm(pts[:, None, :] - centroids[None, :, :], axis=2)
            new_assignment[mx, my, mz] = np.argmin(d, axis=1)

        changed = int((new_assignment != assignment).sum())
        assignment = new_assignment

        flat = assignment.ravel()
        cnt = np.bincount(flat, minlength=n_clusters).astype(np.float64)
        occupied = cnt > 0
        sums_i = np.bincount(flat, weights=data.ravel(), minlength=n_clusters)
        means[occupied] = sums_i[occupied] / cnt[occupied]
        for a, grid in enumerate((xs, ys, zs)):
            s = np.bincount(flat, weights=grid.ravel(), minlength=n_clusters)
            centroids[occupied, a] = s[occupied] / cnt[occupied]

        if changed / total < 1e-3:
            break

    assignment = _enforce_connectivity(assignment)

    # Dense relabel in ascending original-id order.
    present = np.unique(assignment)
    remap = np.zeros(present.max() + 1, dtype=np.int64)
    remap[present] = np.arange(len(present))
    assignment = remap[assignment]
    n_final = len(present)

    flat = assignment.ravel()
    counts = np.bincount(flat, minlength=n_final)
    mean_intensity = np.bincount(flat, weights=data.ravel(), minlength=n_final) / counts
    centroids_mm = np.stack(
        [np.bincount(flat, weights=g.ravel(), minlength=n_final) / counts
         for g in (xs, ys, zs)], axis=1)

    labels = LabelVolume(assignment.astype(np.uint32), volume.spacing,
                         num_labels=n_final)
    return SupervoxelMap(labels, centroids_mm, mean_intensity, counts)
