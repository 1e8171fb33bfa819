import itertools

import numpy as np
import pytest

from conftest import assert_gradient_close
from scribvol.errors import ValidationError
from scribvol.shape_prior import (
    PrototypeBank,
    ShapeMoments,
    Skeleton,
    SkeletonContext,
    build_prototype_bank,
    centroid_spread,
    class_ratio,
    kmedoids_indices,
    load_bank,
    match_cost,
    moments_from_labels,
    pairwise_costs,
    save_bank,
    shape_moment_loss,
    skeleton_context,
    skeleton_prior_loss,
    skeletonize,
)
from scribvol.volume import LabelVolume, ProbabilityVolume

SPACING = (1.0, 1.0, 2.0)


def simplex_pv(arr):
    return ProbabilityVolume(arr, SPACING, simplex=True)


def rand_simplex(rng, dims, k, lo=0.05):
    raw = rng.uniform(lo, 1.0, dims + (k,))
    return raw / raw.sum(axis=3, keepdims=True)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

def test_class_ratio_onehot_half():
    arr = np.zeros((4, 4, 2, 2))
    arr[:2, :, :, 1] = 1.0
    arr[..., 0] = 1.0 - arr[..., 1]
    r = class_ratio(simplex_pv(arr))
    assert r[1] == 0.5 and r[0] == 0.5


def test_class_ratio_uniform():
    arr = np.full((3, 3, 3, 4), 0.25)
    assert np.allclose(class_ratio(simplex_pv(arr)), 0.25, atol=1e-15)


def test_class_ratio_brute_force():
    rng = np.random.default_rng(0)
    arr = rand_simplex(rng, (8, 8, 8), 3)
    r = class_ratio(simplex_pv(arr))
    for k in range(3):
        total = 0.0
        for x in range(8):
            for y in range(8):
                for z in range(8):
                    total += arr[x, y, z, k]
        assert abs(r[k] - total / 512) <= 1e-12


def test_spread_single_voxel_zero():
    arr = np.zeros((5, 5, 3, 2))
    arr[..., 0] = 1.0
    arr[2, 3, 1] = [0.0, 1.0]
    d = centroid_spread(simplex_pv(arr))
    assert np.allclose(d[1], 0.0, atol=1e-12)


def test_spread_two_voxel_oracle():
    # equal masses 2 mm apart along x -> D_x exactly 1 mm
    arr = np.zeros((5, 1, 1, 2))
    arr[..., 0] = 1.0
    arr[0, 0, 0] = [0.0, 1.0]
    arr[2, 0, 0] = [0.0, 1.0]
    d = centroid_spread(ProbabilityVolume(arr, (1.0, 1.0, 1.0), simplex=True))
    assert d[1] == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)


def test_spread_mirror_invariance():
    rng = np.random.default_rng(1)
    arr = rand_simplex(rng, (6, 4, 3), 2)
    d1 = centroid_spread(simplex_pv(arr))
    d2 = centroid_spread(simplex_pv(arr[::-1].copy()))
    assert np.allclose(d1[1], d2[1], atol=1e-10)


def test_spread_absent_class_omitted():
    arr = np.zeros((4, 4, 2, 3))
    arr[..., 0] = 1.0
    d = centroid_spread(simplex_pv(arr))
    assert 1 not in d and 2 not in d and 0 in d


def test_spread_literal_mode_couples_to_grid():
    arr = np.zeros((6, 1, 1, 2))
    arr[..., 0] = 1.0
    arr[1, 0, 0] = [0.0, 1.0]
    arr[3, 0, 0] = [0.0, 1.0]
    pv = ProbabilityVolume(arr, (1.0, 1.0, 1.0), simplex=True)
    weighted = centroid_spread(pv)[1]
    literal = centroid_spread(pv, literal=True)[1]
    assert weighted[0] == pytest.approx(1.0, abs=1e-12)
    # literal averages |x - 2| over all 6 voxels: (2+1+0+1+2+3)/6
    assert literal[0] == pytest.approx(9.0 / 6.0, abs=1e-12)


# ---------------------------------------------------------------------------
# shape_moment_loss
# ---------------------------------------------------------------------------

def disk_mask(dims, center, r, cls=1):
    x, y, z = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    lab = np.zeros(dims, dtype=np.uint32)
    lab[(x - center[0]) ** 2 + (y - center[1]) ** 2 <= r * r] = cls
    return LabelVolume(lab, SPACING)


def test_moment_loss_identical_shape():
    mask = disk_mask((12, 12, 2), (6, 6), 3)
    bank = PrototypeBank(2, {}, [moments_from_labels(mask)], k_p=1)
    onehot = np.stack([(mask.data == c).astype(float) for c in range(2)], axis=3)
    pv = ProbabilityVolume(onehot, SPACING, simplex=True)
    d_hat = moments_from_labels(mask).spread_scalar
    out = shape_moment_loss(pv, bank, lam=1.0)
    # KL vanishes; the band penalty F(m, m) = 0.02 m^2 never does
    assert out.value == pytest.approx(float(0.02 * (d_hat**2).sum()), rel=1e-9)
    zero_lam = shape_moment_loss(pv, bank, lam=0.0)
    assert zero_lam.value == pytest.approx(0.0, abs=1e-12)


def test_moment_loss_gradient_fd():
    rng = np.random.default_rng(2)
    dims = (5, 5, 3)
    k = 3
    p = rand_simplex(rng, dims, k)
    moments = [
        ShapeMoments(k, np.array([0.2, 0.3]), np.full((2, 3), 1.0)),
        ShapeMoments(k, np.array([0.4, 0.1]), np.full((2, 3), 2.5)),
        ShapeMoments(k, np.array([0.1, 0.1]), np.full((2, 3), 4.0)),
    ]
    bank = PrototypeBank(k, {}, moments, k_p=1)
    out = shape_moment_loss(simplex_pv(p), bank, lam=0.7)
    assert not out.gradient[..., 0].any()  # background channel is inert

    def value(x):
        return shape_moment_loss(simplex_pv(x), bank, lam=0.7).value

    # on-simplex probe: compensate every foreground perturbation on the
    # inert background channel
    step = 1e-4
    fd = np.zeros(p.shape[:3] + (k - 1,))
    for idx in np.ndindex(p.shape[:3] + (k - 1,)):
        vox, c = idx[:3], idx[3] + 1
        hi, lo = p.copy(), p.copy()
        hi[vox + (c,)] += step
        hi[vox + (0,)] -= step
        lo[vox + (c,)] -= step
        lo[vox + (0,)] += step
        fd[idx] = (value(hi) - value(lo)) / (2 * step)
    assert_gradient_close(out.gradient[..., 1:], fd, rtol=1e-4, atol=1e-7)


def test_moment_loss_rejects_empty_bank():
    rng = np.random.default_rng(3)
    pv = simplex_pv(rand_simplex(rng, (4, 4, 2), 2))
    with pytest.raises(ValidationError):
        shape_moment_loss(pv, PrototypeBank(2, {}, [], k_p=1), lam=1.0)


# ---------------------------------------------------------------------------
# skeletonize
# ---------------------------------------------------------------------------

def test_skeletonize_single_pixel():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 5] = True
    skel = skeletonize(mask)
    assert len(skel) == 1
    assert tuple(skel.points_mm[0]) == (4.0, 5.0)


def test_skeletonize_bar_middle_row():
    mask = np.zeros((7, 15), dtype=bool)
    mask[2:5, 2:13] = True  # 3 x 11 bar
    skel = skeletonize(mask)
    pts = skel.points_mm
    middle = pts[pts[:, 0] == 3.0]
    assert abs(len(middle) - 9) <= 2
    # thinning may keep a diagonal endpoint or two off the center row
    assert np.all(np.abs(pts[:, 0] - 3.0) <= 1.0)
    assert len(pts) - len(middle) <= 2


def test_skeletonize_disk_stays_central():
    mask = np.zeros((15, 15), dtype=bool)
    x, y = np.meshgrid(np.arange(15), np.arange(15), indexing="ij")
    mask[(x - 7) ** 2 + (y - 7) ** 2 <= 25] = True
    skel = skeletonize(mask)
    assert np.all(np.hypot(*(skel.points_mm - 7.0).T) <= 2.0)


def test_skeletonize_empty_error():
    with pytest.raises(ValidationError):
        skeletonize(np.zeros((5, 5), dtype=bool))


def test_skeletonize_bridges_gaps():
    mask = np.zeros((3, 9), dtype=bool)
    mask[1, :4] = True
    mask[1, 5:] = True  # 1-pixel gap at column 4
    skel = skeletonize(mask)
    cols = sorted(p[1] for p in skel.points_mm)
    assert 4.0 in cols  # the gap is bridged


# ---------------------------------------------------------------------------
# skeleton_context
# ---------------------------------------------------------------------------

def ctx_from_points(pts):
    return skeleton_context(Skeleton(0, np.asarray(pts, dtype=float), 1), samples=32)


def test_context_two_points():
    ctx = ctx_from_points([[0.0, 0.0], [3.0, 1.0]])
    assert ctx.num_points == 2
    assert np.all(ctx.histograms.sum(axis=(1, 2)) == 1)


def test_context_histogram_totals():
    rng = np.random.default_rng(4)
    pts = rng.integers(0, 30, (40, 2)).astype(float)
    pts = np.unique(pts, axis=0)
    ctx = ctx_from_points(pts)
    assert np.all(ctx.histograms.sum(axis=(1, 2)) == ctx.num_points - 1)


def test_context_translation_invariance_exact():
    pts = np.array([[0, 0], [3, 1], [5, 4], [2, 7], [9, 2]], dtype=float)
    a = ctx_from_points(pts)
    b = ctx_from_points(pts + np.array([11.0, -6.0]))
    assert np.array_equal(a.histograms, b.histograms)


def test_context_rotation_permutes_sectors():
    pts = np.array([[0.0, 0.0], [1.37, 0.21], [2.9, 1.73], [0.6, 2.31],
                    [3.4, 3.05]])
    rotated = np.stack([-pts[:, 1], pts[:, 0]], axis=1)
    a = ctx_from_points(pts)
    b = ctx_from_points(rotated)
    assert np.array_equal(np.roll(a.histograms, 3, axis=2), b.histograms)


# ---------------------------------------------------------------------------
# match_cost
# ---------------------------------------------------------------------------

def hand_context(rows):
    """Build a context with given per-point 48-bin histograms."""
    h = np.array(rows, dtype=np.int64).reshape(len(rows), 4, 12)
    pts = np.zeros((len(rows), 2))
    pts[:, 0] = np.arange(len(rows))
    return SkeletonContext(h, pts, 1.0)


def hist_row(total, seed):
    rng = np.random.default_rng(seed)
    row = np.zeros(48, dtype=np.int64)
    for _ in range(total):
        row[rng.integers(0, 48)] += 1
    return row


def chi2(h1, h2):
    num = (h1 - h2).astype(float) ** 2
    den = (h1 + h2).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 0.5 * float(np.where(den > 0, num / den, 0.0).sum())


def test_match_cost_zero_on_identity_and_symmetric():
    ctx = ctx_from_points([[0, 0], [2, 1], [4, 5], [1, 3]])
    assert match_cost(ctx, ctx) == 0.0
    other = ctx_from_points([[0, 0], [1, 4], [5, 2], [3, 3]])
    assert match_cost(ctx, other) == pytest.approx(match_cost(other, ctx), abs=1e-12)
    assert match_cost(ctx, other) >= 0.0


def test_match_cost_equals_exhaustive_assignment():
    a = hand_context([hist_row(2, s) for s in (1, 2, 3)])
    b = hand_context([hist_row(2, s) for s in (4, 5, 6)])
    cost = np.array([[chi2(a.histograms[i].ravel(), b.histograms[j].ravel())
                      for j in range(3)] for i in range(3)])
    best = min(sum(cost[i, perm[i]] for i in range(3))
               for perm in itertools.permutations(range(3)))
    assert match_cost(a, b) == pytest.approx(best, abs=1e-12)


def test_match_cost_unequal_sizes():
    a = hand_context([hist_row(3, s) for s in (7, 8, 9, 10)])
    b = hand_context([hist_row(1, s) for s in (11, 12)])
    cost = np.array([[chi2(a.histograms[i].ravel(), b.histograms[j].ravel())
                      for j in range(2)] for i in range(4)])
    best = np.inf
    for rows in itertools.permutations(range(4), 2):
        matched = cost[rows[0], 0] + cost[rows[1], 1]
        rest = [i for i in range(4) if i not in rows]
        best = min(best, matched + sum(cost[i].min() for i in rest))
    assert match_cost(a, b) == pytest.approx(best, abs=1e-12)
    assert match_cost(a, b) == pytest.approx(match_cost(b, a), abs=1e-12)


# ---------------------------------------------------------------------------
# k-medoids
# ---------------------------------------------------------------------------

def test_kmedoids_population_size():
    rng = np.random.default_rng(5)
    pts = rng.random((5, 2)) * 10
    d = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    res = kmedoids_indices(d, k_p=5, seed=0)
    assert np.array_equal(np.sort(res.medoid_indices), np.arange(5))
    assert res.objective_history[-1] == 0.0


def test_kmedoids_two_clusters_match_exhaustive():
    rng = np.random.default_rng(6)
    cluster_a = rng.normal(0.0, 0.05, (4, 2))
    cluster_b = rng.normal(10.0, 0.05, (4, 2))
    pts = np.concatenate([cluster_a, cluster_b])
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    res = kmedoids_indices(d, k_p=2, seed=3)
    # exhaustive oracle over all medoid pairs
    best = min(d[:, list(pair)].min(axis=1).sum()
               for pair in itertools.combinations(range(8), 2))
    assert res.objective_history[-1] == pytest.approx(best, rel=1e-12)
    sides = {i < 4 for i in res.medoid_indices}
    assert sides == {True, False}  # one medoid per cluster


def test_kmedoids_objective_monotone():
    rng = np.random.default_rng(7)
    pts = rng.random((12, 3))
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    res = kmedoids_indices(d, k_p=3, seed=11)
    hist = res.objective_history
    assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))


def test_kmedoids_deterministic_and_bounds():
    rng = np.random.default_rng(8)
    d = rng.random((6, 6))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    a = kmedoids_indices(d, 2, seed=5)
    b = kmedoids_indices(d, 2, seed=5)
    assert np.array_equal(a.medoid_indices, b.medoid_indices)
    with pytest.raises(ValidationError):
        kmedoids_indices(d, 7, seed=0)


# ---------------------------------------------------------------------------
# bank + skeleton_prior_loss
# ---------------------------------------------------------------------------

def ring_mask(dims, center, r_out, r_in=0, cls=1, nz_all=True):
    x, y = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), indexing="ij")
    d2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    sl = (d2 <= r_out**2) & (d2 >= r_in**2)
    lab = np.zeros(dims, dtype=np.uint32)
    for z in range(dims[2]):
        lab[:, :, z][sl] = cls
    return LabelVolume(lab, SPACING)


def test_prior_loss_zero_for_corpus_shape():
    # an annulus thins to a circle, giving a rich skeleton on every slice
    mask = ring_mask((20, 20, 2), (10, 10), 7, r_in=4)
    bank = build_prototype_bank([mask], k_p=2, seed=0)
    score = skeleton_prior_loss(mask, bank)
    assert score.skeleton_term == pytest.approx(0.0, abs=1e-12)
    assert score.per_class[1]["present"]
    assert score.total == pytest.approx(score.moment_term, abs=1e-12)


def test_prior_loss_absent_class_reports_zero():
    corpus = ring_mask((20, 20, 2), (10, 10), 7, r_in=4, cls=1)
    two_class = corpus.data.copy()
    two_class[0, 0, 0] = 2  # corpus knows a class 2
    bank = build_prototype_bank(
        [LabelVolume(two_class, SPACING)], k_p=2, seed=0)
    pred = ring_mask((20, 20, 2), (10, 10), 7, r_in=4, cls=1)
    score = skeleton_prior_loss(pred, bank)
    assert not score.per_class[2]["present"]
    assert score.per_class[2]["skeleton_cost"] == 0.0


def test_prior_loss_branch_deletion_costs_more():
    # an elongated ellipse thins to a long segment
    base = np.zeros((24, 24), dtype=bool)
    x, y = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
    base[((x - 12) / 9.0) ** 2 + ((y - 10) / 4.0) ** 2 <= 1.0] = True
    with_branch = base.copy()
    with_branch[10:13, 14:22] = True  # protruding branch
    corpus = np.zeros((24, 24, 2), dtype=np.uint32)
    corpus[:, :, 0][with_branch] = 1
    corpus[:, :, 1][with_branch] = 1
    bank = build_prototype_bank([LabelVolume(corpus, SPACING)], k_p=1, seed=0)

    same = skeleton_prior_loss(LabelVolume(corpus, SPACING), bank)
    pruned = corpus.copy()
    pruned[:, :, 0][~base] = 0
    pruned[:, :, 1][~base] = 0
    deleted = skeleton_prior_loss(LabelVolume(pruned, SPACING), bank)
    assert same.skeleton_term == pytest.approx(0.0, abs=1e-12)
    assert deleted.skeleton_term > same.skeleton_term


def test_prior_loss_missing_prototypes():
    mask = ring_mask((16, 16, 2), (8, 8), 6, r_in=3, cls=1)
    bank = build_prototype_bank([mask], k_p=1, seed=0)
    pred = LabelVolume(np.where(mask.data == 0, 0, 2).astype(np.uint32), SPACING)
    with pytest.raises(ValidationError, match="no prototypes"):
        skeleton_prior_loss(pred, bank)


def test_bank_roundtrip(tmp_path):
    mask = ring_mask((16, 16, 3), (8, 8), 6, r_in=3)
    bank = build_prototype_bank([mask], k_p=2, seed=1)
    save_bank(bank, tmp_path / "bank.json")
    back = load_bank(tmp_path / "bank.json")
    assert back.num_classes == bank.num_classes
    assert back.classes() == bank.classes()
    for c in bank.classes():
        assert len(back.medoids[c]) == len(bank.medoids[c])
        for m1, m2 in zip(back.medoids[c], bank.medoids[c]):
            assert np.array_equal(m1.histograms, m2.histograms)
            assert np.allclose(m1.points_mm, m2.points_mm)
    assert len(back.moments) == 1
    assert np.allclose(back.moments[0].ratio, bank.moments[0].ratio)
    # scoring through the reloaded bank is identical
    s1 = skeleton_prior_loss(mask, bank)
    s2 = skeleton_prior_loss(mask, back)
    assert s1.total == pytest.approx(s2.total, abs=1e-12)
