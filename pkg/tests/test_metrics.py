import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scribvol.metrics import dice, evaluate_classes, hd95, precision
from scribvol.volume import LabelVolume

SPACING = (1.0, 1.0, 2.0)


def lab(arr, spacing=SPACING):
    return LabelVolume(np.asarray(arr, dtype=np.uint32), spacing)


def brute_dice(p, g, cls):
    p = p == cls
    g = g == cls
    inter = np.logical_and(p, g).sum()
    if p.sum() + g.sum() == 0:
        return 100.0
    return 200.0 * inter / (p.sum() + g.sum())


def brute_hd95(p_arr, g_arr, cls, spacing):
    """Independent oracle: all-pairs distances between boundary voxels."""
    def boundary(mask):
        pts = []
        for x, y, z in zip(*np.nonzero(mask)):
            for d, n in zip((x, y, z), mask.shape):
                if d == 0 or d == n - 1:
                    pts.append((x, y, z))
                    break
            else:
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    if not mask[x + dx, y + dy, z + dz]:
                        pts.append((x, y, z))
                        break
        return np.array(pts, dtype=float)

    bp = boundary(p_arr == cls)
    bg = boundary(g_arr == cls)
    sp = np.asarray(spacing)
    dmat = np.linalg.norm((bp[:, None, :] - bg[None, :, :]) * sp, axis=2)

    def rank95(vals):
        vals = np.sort(vals)
        return vals[max(int(np.ceil(0.95 * len(vals))) - 1, 0)]

    return max(rank95(dmat.min(axis=1)), rank95(dmat.min(axis=0)))


def test_dice_identical_and_disjoint():
    a = np.zeros((6, 6, 3), dtype=np.uint32)
    a[1:4, 1:4, 1] = 1
    assert dice(lab(a), lab(a), 1).value == 100.0
    b = np.zeros_like(a)
    b[4:6, 4:6, 2] = 1
    assert dice(lab(a), lab(b), 1).value == 0.0


def test_dice_half_overlap():
    p = np.zeros((8, 8, 2), dtype=np.uint32)
    g = np.zeros_like(p)
    p[0:2, 0:4, 0] = 1  # 8 voxels
    g[0:2, 2:6, 0] = 1  # 8 voxels, 4 shared
    assert dice(lab(p), lab(g), 1).value == 50.0


def test_dice_both_empty_flagged():
    z = np.zeros((4, 4, 2), dtype=np.uint32)
    out = dice(lab(z), lab(z), 1)
    assert out.value == 100.0 and out.note == "empty"


def test_precision_cases():
    p = np.zeros((6, 6, 2), dtype=np.uint32)
    g = np.zeros_like(p)
    g[:4, :4, :] = 1
    p[:2, :2, :] = 1  # subset
    assert precision(lab(p), lab(g), 1).value == 100.0
    p2 = np.zeros_like(p)
    p2[5, 5, 1] = 1
    assert precision(lab(p2), lab(g), 1).value == 0.0
    out = precision(lab(np.zeros_like(p)), lab(g), 1)
    assert not out.defined
    # |P| = 10, |P∩G| = 7
    p3 = np.zeros_like(p)
    p3[0:5, 0, 0] = 1
    p3[0:5, 1, 0] = 1
    g3 = np.zeros_like(p)
    g3[0:4, 0, 0] = 1
    g3[0:3, 1, 0] = 1
    assert precision(lab(p3), lab(g3), 1).value == 70.0


def test_hd95_identical_zero():
    a = np.zeros((6, 6, 4), dtype=np.uint32)
    a[2:4, 2:4, 1:3] = 1
    assert hd95(lab(a), lab(a), 1).value == 0.0


def test_hd95_single_voxel_z_shift():
    p = np.zeros((5, 5, 5), dtype=np.uint32)
    g = np.zeros_like(p)
    p[2, 2, 2] = 1
    g[2, 2, 3] = 1
    out = hd95(lab(p), lab(g), 1)
    assert out.value == pytest.approx(2.0, abs=1e-12)  # z spacing is 2 mm


def test_hd95_empty_undefined():
    a = np.zeros((4, 4, 2), dtype=np.uint32)
    b = np.zeros_like(a)
    b[1, 1, 1] = 1
    assert not hd95(lab(a), lab(b), 1).defined


def test_hd95_outlier_bounded_by_rank():
    # 30 boundary voxels per side; moving one (<4%) far away cannot move the
    # nearest-rank 95th percentile beyond the 2nd-largest distance
    p = np.zeros((40, 6, 6), dtype=np.uint32)
    g = np.zeros_like(p)
    p[0:30, 2, 2] = 1
    g[0:30, 2, 3] = 1
    base = hd95(lab(p, (1, 1, 1)), lab(g, (1, 1, 1)), 1).value
    p2 = p.copy()
    p2[29, 2, 2] = 0
    p2[39, 5, 5] = 1  # outlier voxel
    moved = hd95(lab(p2, (1, 1, 1)), lab(g, (1, 1, 1)), 1).value
    d_pg = brute_hd95(p2, g, 1, (1, 1, 1))
    assert moved == pytest.approx(d_pg, abs=1e-9)
    assert moved >= base


def test_hd95_matches_brute_force_random():
    rng = np.random.default_rng(12)
    for _ in range(10):
        dims = tuple(int(d) for d in rng.integers(5, 11, 3))
        p = np.zeros(dims, dtype=np.uint32)
        g = np.zeros(dims, dtype=np.uint32)
        # random blobs
        for arr in (p, g):
            cx = rng.integers(1, dims[0] - 1)
            cy = rng.integers(1, dims[1] - 1)
            cz = rng.integers(1, dims[2] - 1)
            x, y, z = np.meshgrid(*map(np.arange, dims), indexing="ij")
            arr[(x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
                <= rng.integers(2, 9)] = 1
        if not (p.any() and g.any()):
            continue
        spacing = (1.0, 1.5, 2.0)
        got = hd95(lab(p, spacing), lab(g, spacing), 1).value
        want = brute_hd95(p, g, 1, spacing)
        assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
def test_dice_precision_relabel_invariance(seed, perm_seed):
    rng = np.random.default_rng(seed)
    p = rng.integers(0, 4, (6, 6, 3))
    g = rng.integers(0, 4, (6, 6, 3))
    perm = np.random.default_rng(perm_seed).permutation(4)
    for cls in range(4):
        d1 = dice(lab(p), lab(g), cls).value
        d2 = dice(lab(perm[p]), lab(perm[g]), int(perm[cls])).value
        assert d1 == d2
        p1 = precision(lab(p), lab(g), cls)
        p2 = precision(lab(perm[p]), lab(perm[g]), int(perm[cls]))
        assert p1.value == p2.value and p1.defined == p2.defined


def test_evaluate_classes_report():
    p = np.zeros((6, 6, 2), dtype=np.uint32)
    g = np.zeros_like(p)
    p[1:3, 1:3, :] = 1
    g[1:3, 1:3, :] = 1
    g[4:6, 4:6, :] = 2
    rep = evaluate_classes(lab(p), lab(g), [1, 2])
    assert rep["per_class"]["1"]["dice_pct"] == 100.0
    assert rep["per_class"]["2"]["dice_pct"] == 0.0
    assert rep["per_class"]["2"]["precision_pct"] is None
