import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.optimize import least_squares

from cotrack.geom import (
    DegenerateConfiguration,
    OrientedBox,
    RansacCause,
    ResidualStats,
    SimilarityTransform,
    apply,
    estimate_similarity,
    mahalanobis_motion,
    ransac_similarity,
    residual,
    residual_variance,
    residuals,
    transform_box,
    transform_distance,
)

finite = st.floats(-100, 100, allow_nan=False)
transforms = st.builds(
    SimilarityTransform, st.floats(0.2, 5.0), st.floats(-math.pi, math.pi), finite, finite
)


def params_close(A, B, tol):
    dang = math.atan2(math.sin(A.angle - B.angle), math.cos(A.angle - B.angle))
    return abs(A.scale - B.scale) <= tol and abs(dang) <= tol and abs(A.tx - B.tx) <= tol and abs(A.ty - B.ty) <= tol


def test_apply_examples():
    assert apply(SimilarityTransform(), (5, 7)) == (5, 7)
    assert apply(SimilarityTransform(2.0, 0.0, 1.0, 0.0), (3, 4)) == (7, 8)
    q = apply(SimilarityTransform(1.0, math.pi / 2), (1, 0))
    assert q.x == pytest.approx(0.0, abs=1e-15) and q.y == pytest.approx(1.0)


def test_transform_rejects_bad_scale():
    with pytest.raises(ValueError):
        SimilarityTransform(0.0)
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, float("nan"))


def test_transform_box_examples():
    b = OrientedBox(10, 20, 30, 40, 0.2)
    assert transform_box(SimilarityTransform(), b) == b
    moved = transform_box(SimilarityTransform(tx=10, ty=-5), b)
    assert (moved.cx, moved.cy, moved.width, moved.height, moved.angle) == (20, 15, 30, 40, 0.2)


@settings(max_examples=100, deadline=None)
@given(transforms, finite, finite, st.floats(1, 50), st.floats(1, 50), st.floats(-3, 3))
def test_box_corners_follow_transform(T, cx, cy, w, h, ang):
    b = OrientedBox(cx, cy, w, h, ang)
    assert np.allclose(transform_box(T, b).corners(), T.apply(b.corners()), atol=1e-9, rtol=0)


@settings(max_examples=100, deadline=None)
@given(transforms, transforms, finite, finite)
def test_group_laws(A, B, x, y):
    p = np.array([x, y])
    assert np.allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-9, rtol=1e-12)
    assert np.allclose(A.inverse().apply(A.apply(p)), p, atol=1e-9, rtol=1e-12)


def test_estimate_examples():
    pts = np.random.default_rng(0).random((10, 2)) * 50
    assert params_close(estimate_similarity(pts, pts), SimilarityTransform(), 1e-12)
    T = estimate_similarity([(0, 0), (1, 0)], [(1, 0), (1, 1)])
    assert params_close(T, SimilarityTransform(1.0, math.pi / 2, 1.0, 0.0), 1e-12)
    with pytest.raises(DegenerateConfiguration):
        estimate_similarity([(1, 1), (1, 1)], [(0, 0), (2, 2)])
    with pytest.raises(DegenerateConfiguration):
        estimate_similarity([(1, 1)], [(0, 0)])


@settings(max_examples=100, deadline=None)
@given(transforms, st.integers(2, 50), st.integers(0, 10_000))
def test_estimate_exact_on_clean_pairs(T, n, seed):
    src = np.random.default_rng(seed).uniform(-100, 100, (n, 2))
    assume(np.sum((src - src.mean(0)) ** 2) > 1.0)
    assert params_close(estimate_similarity(src, T.apply(src)), T, 1e-9)


@settings(max_examples=50, deadline=None)
@given(transforms, transforms, st.integers(0, 10_000))
def test_estimate_equivariance(T, G, seed):
    src = np.random.default_rng(seed).uniform(-50, 50, (12, 2))
    dst = T.apply(src) + np.random.default_rng(seed + 1).normal(0, 0.3, src.shape)
    base = estimate_similarity(src, dst)
    pre = estimate_similarity(G.inverse().apply(src), dst)
    assert params_close(pre, base.compose(G), 1e-9 * max(1.0, abs(base.tx), abs(base.ty)))


def test_estimate_matches_numerical_minimiser():
    rng = np.random.default_rng(11)
    T = SimilarityTransform(1.3, 0.4, 12.0, -7.0)
    src = rng.uniform(0, 200, (50, 2))
    dst = T.apply(src) + rng.normal(0, 0.5, src.shape)

    def resid(v):
        return (SimilarityTransform(v[0], v[1], v[2], v[3]).apply(src) - dst).ravel()

    ref = least_squares(resid, [1.0, 0.0, 0.0, 0.0], xtol=1e-14, ftol=1e-14, gtol=1e-14).x
    est = estimate_similarity(src, dst)
    assert params_close(est, SimilarityTransform(*ref), 1e-3)


def test_residual_and_variance():
    I = SimilarityTransform()
    assert residual(((2, 3), (2, 3)), I) == 0
    assert residual(((0, 0), (3, 4)), I) == 5
    stats = residual_variance([(0, 0), (0, 0)], [(3, 0), (0, 4)], I)
    assert (stats.variance, stats.count) == (12.5, 2)
    with pytest.raises(ValueError):
        residual_variance(np.zeros((0, 2)), np.zeros((0, 2)), I)


def test_residuals_against_loop():
    rng = np.random.default_rng(4)
    T = SimilarityTransform(0.9, -0.3, 4.0, 1.0)
    src, dst = rng.random((30, 2)) * 9, rng.random((30, 2)) * 9
    r = residuals(src, dst, T)
    c, s = math.cos(T.angle), math.sin(T.angle)
    for i in range(30):
        x = T.scale * (c * src[i, 0] - s * src[i, 1]) + T.tx
        y = T.scale * (s * src[i, 0] + c * src[i, 1]) + T.ty
        assert r[i] == pytest.approx(math.hypot(x - dst[i, 0], y - dst[i, 1]), abs=1e-12)
    v = residual_variance(src, dst, T).variance
    assert v == pytest.approx(sum(x * x for x in r) / 30, abs=1e-12)


def planted(seed, n_in=60, n_out=40, noise=0.3):
    rng = np.random.default_rng(seed)
    T = SimilarityTransform(1.05, 0.1, 2.0, 3.0)
    src_in = rng.uniform(0, 200, (n_in, 2))
    dst_in = T.apply(src_in) + rng.normal(0, noise, (n_in, 2))
    src_out = rng.uniform(0, 200, (n_out, 2))
    dst_out = rng.uniform(0, 220, (n_out, 2))
    return T, np.vstack([src_in, src_out]), np.vstack([dst_in, dst_out])


def test_ransac_planted_transform():
    T, src, dst = planted(0)
    fit = ransac_similarity(src, dst, inlier_threshold=1.5, rng_seed=1)
    assert fit.ok
    assert fit.support[:60].all()
    assert residuals(src[:60], dst[:60], fit.transform).max() < 1.5


def test_ransac_failures():
    f = ransac_similarity([(0, 0)], [(1, 1)])
    assert not f.ok and f.cause is RansacCause.TOO_FEW_PAIRS
    rng = np.random.default_rng(0)
    f = ransac_similarity(rng.random((30, 2)) * 100, rng.random((30, 2)) * 100, min_support=20)
    assert not f.ok and f.cause is RansacCause.LOW_SUPPORT


def test_ransac_all_consistent():
    T = SimilarityTransform(0.8, 1.0, -3.0, 9.0)
    src = np.random.default_rng(2).uniform(0, 100, (40, 2))
    fit = ransac_similarity(src, T.apply(src))
    assert fit.support.all() and params_close(fit.transform, T, 1e-9)


def test_ransac_deterministic_with_seed():
    _, src, dst = planted(5)
    a = ransac_similarity(src, dst, rng_seed=42)
    b = ransac_similarity(src, dst, rng_seed=42)
    assert a.transform == b.transform and np.array_equal(a.support, b.support)


def test_ransac_half_outliers_small_inlier_set():
    ok = 0
    for seed in range(100):
        T, src, dst = planted(seed, n_in=20, n_out=20)
        fit = ransac_similarity(src, dst, inlier_threshold=1.5, rng_seed=seed)
        ok += bool(fit.ok and fit.support[:20].all())
    assert ok >= 99


def test_transform_distance():
    pts = np.random.default_rng(0).random((9, 2)) * 30
    A = SimilarityTransform(1.1, 0.2, 3, 4)
    assert transform_distance(A, A, pts) == 0
    assert transform_distance(SimilarityTransform(), SimilarityTransform(tx=10), pts) == pytest.approx(10)
    with pytest.raises(ValueError):
        transform_distance(A, A, np.zeros((0, 2)))


def test_transform_distance_rotation_vs_loop():
    g = np.array([(x, y) for y in range(5) for x in range(5)], dtype=float) * 10
    A, B = SimilarityTransform(angle=0.05), SimilarityTransform(angle=-0.02, tx=1.0)
    ref = 0.0
    for x, y in g:
        ax, ay = math.cos(0.05) * x - math.sin(0.05) * y, math.sin(0.05) * x + math.cos(0.05) * y
        bx, by = math.cos(-0.02) * x - math.sin(-0.02) * y + 1.0, math.sin(-0.02) * x + math.cos(-0.02) * y
        ref += math.hypot(ax - bx, ay - by)
    assert transform_distance(A, B, g) == pytest.approx(ref / 25, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(transforms, transforms, st.integers(0, 1000))
def test_transform_distance_symmetric(A, B, seed):
    pts = np.random.default_rng(seed).random((7, 2)) * 40
    assert transform_distance(A, B, pts) == pytest.approx(transform_distance(B, A, pts), rel=1e-12, abs=1e-9)


def test_mahalanobis_examples():
    one = ResidualStats(1.0, 10)
    assert mahalanobis_motion(0.0, one, one).lam == 0.0
    md = mahalanobis_motion(10.0, one, one)
    assert md.pooled_variance == pytest.approx(20 / 18)
    assert abs(md.lam - 10 / math.sqrt(20 / 18)) < 1e-12 and not md.clamped
    with pytest.raises(ValueError):
        mahalanobis_motion(1.0, ResidualStats(1.0, 1), ResidualStats(1.0, 1))
    flat = mahalanobis_motion(2.0, ResidualStats(0.0, 5), ResidualStats(0.0, 5))
    assert flat.clamped and flat.lam == pytest.approx(2.0 / 0.5)
