"""Similarity transforms, oriented boxes and robust motion estimation.

A similarity maps ``p -> s * R(theta) @ p + t``. Point sets are (N, 2) arrays
of ``(x, y)`` rows throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np

from .imgcore import Point2


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float = 1.0
    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (math.isfinite(self.angle) and math.isfinite(self.tx) and math.isfinite(self.ty)):
            raise ValueError("transform parameters must be finite")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_linear(cls, a: float, b: float, tx: float, ty: float) -> "SimilarityTransform":
        """Build from the matrix form ``[[a, -b, tx], [b, a, ty]]``."""
        return cls(math.hypot(a, b), math.atan2(b, a), tx, ty)

    @classmethod
    def about(cls, center, scale: float = 1.0, angle: float = 0.0, shift=(0.0, 0.0)) -> "SimilarityTransform":
        """Scale/rotate about ``center`` and then translate by ``shift``."""
        c = np.asarray(center, dtype=float)
        a = scale * math.cos(angle)
        b = scale * math.sin(angle)
        tx = c[0] - (a * c[0] - b * c[1]) + shift[0]
        ty = c[1] - (b * c[0] + a * c[1]) + shift[1]
        return cls(scale, angle, tx, ty)

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix."""
        a = self.scale * math.cos(self.angle)
        b = self.scale * math.sin(self.angle)
        return np.array([[a, -b, self.tx], [b, a, self.ty]])

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        m = self.matrix
        return p @ m[:, :2].T + m[:, 2]

    def __call__(self, pts) -> np.ndarray:
        return self.apply(pts)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self o other``: apply ``other`` first."""
        t = self.apply(np.array([other.tx, other.ty]))
        return SimilarityTransform(self.scale * other.scale, _wrap(self.angle + other.angle), float(t[0]), float(t[1]))

    def inverse(self) -> "SimilarityTransform":
        inv_s = 1.0 / self.scale
        c, s = math.cos(-self.angle), math.sin(-self.angle)
        tx = -inv_s * (c * self.tx - s * self.ty)
        ty = -inv_s * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_s, -self.angle, tx, ty)


def _wrap(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


def apply(T: SimilarityTransform, p) -> Point2:
    q = T.apply(np.array([p[0], p[1]], dtype=float))
    return Point2(float(q[0]), float(q[1]))


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    width: float
    height: float
    angle: float = 0.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box sides must be positive, got {self.width}x{self.height}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "OrientedBox":
        """Axis-aligned box from its top-left corner and size."""
        return cls(x + w / 2.0, y + h / 2.0, w, h, 0.0)

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def to_local(self) -> SimilarityTransform:
        """Map from box-local coordinates (origin at center, unrotated) to the image."""
        return SimilarityTransform(1.0, self.angle, self.cx, self.cy)

    def corners(self) -> np.ndarray:
        """Four vertices (4, 2), counter-clockwise in x-right/y-up terms, starting top-left."""
        hw, hh = self.width / 2.0, self.height / 2.0
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        return self.to_local().apply(local)

    def aabb(self) -> tuple[float, float, float, float]:
        """Axis-aligned hull as ``(x, y, w, h)``."""
        c = self.corners()
        lo = c.min(axis=0)
        hi = c.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1])

    def shifted(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(self.cx + dx, self.cy + dy, self.width, self.height, self.angle)


def transform_box(T: SimilarityTransform, b: OrientedBox) -> OrientedBox:
    c = T.apply(np.array([b.cx, b.cy]))
    return OrientedBox(float(c[0]), float(c[1]), b.width * T.scale, b.height * T.scale, _wrap(b.angle + T.angle))


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity taking ``src`` onto ``dst``.

    Closed form: align centroids, then the scaled rotation comes from the
    cross-covariance of the centred coordinates.
    """
    p = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(p) != len(q):
        raise ValueError("src and dst must have the same length")
    if len(p) < 2:
        raise DegenerateConfiguration("need at least two point pairs")
    mp = p.mean(axis=0)
    mq = q.mean(axis=0)
    pc = p - mp
    qc = q - mq
    spread = float(np.sum(pc * pc))
    if spread < 1e-9:
        raise DegenerateConfiguration(f"source points coincide (spread {spread:.3g})")
    a = float(np.sum(pc[:, 0] * qc[:, 0] + pc[:, 1] * qc[:, 1])) / spread
    b = float(np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0])) / spread
    if a == 0.0 and b == 0.0:
        raise DegenerateConfiguration("destination points coincide")
    tx = mq[0] - (a * mp[0] - b * mp[1])
    ty = mq[1] - (b * mp[0] + a * mp[1])
    return SimilarityTransform.from_linear(a, b, float(tx), float(ty))


def residuals(src, dst, T: SimilarityTransform) -> np.ndarray:
    d = T.apply(np.asarray(src, dtype=np.float64).reshape(-1, 2)) - np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    return np.hypot(d[:, 0], d[:, 1])


def residual(pair, T: SimilarityTransform) -> float:
    """``|T(p) - q|`` for one ``(p, q)`` pair."""
    p, q = pair
    return float(residuals([p], [q], T)[0])


@dataclass(frozen=True)
class ResidualStats:
    variance: float
    count: int

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)


def residual_variance(src, dst, T: SimilarityTransform) -> ResidualStats:
    """Mean squared residual (divisor n) and the pair count."""
    r = residuals(src, dst, T)
    if len(r) == 0:
        raise ValueError("residual_variance needs at least one pair")
    return ResidualStats(float(np.mean(r * r)), len(r))


class RansacCause(Enum):
    TOO_FEW_PAIRS = "too-few-pairs"
    LOW_SUPPORT = "low-support"


@dataclass(frozen=True)
class RansacFit:
    transform: SimilarityTransform
    support: np.ndarray  # bool mask over the input pairs

    ok = True

    @property
    def support_count(self) -> int:
        return int(self.support.sum())


@dataclass(frozen=True)
class RansacFailure:
    cause: RansacCause
    best_support: int = 0

    ok = False


@numba.njit(cache=True)
def _two_point(p, q, i, j):
    """Similarity ``q = a p + t`` (complex form) through pairs ``i`` and ``j``."""
    dpx = p[i, 0] - p[j, 0]
    dpy = p[i, 1] - p[j, 1]
    dqx = q[i, 0] - q[j, 0]
    dqy = q[i, 1] - q[j, 1]
    den = dpx * dpx + dpy * dpy
    if den <= 1e-18:
        return 0.0, 0.0, 0.0, 0.0
    a = (dqx * dpx + dqy * dpy) / den
    b = (dqy * dpx - dqx * dpy) / den
    tx = q[i, 0] - (a * p[i, 0] - b * p[i, 1])
    ty = q[i, 1] - (b * p[i, 0] + a * p[i, 1])
    return a, b, tx, ty


@numba.njit(cache=True)
def _consensus_counts(p, q, i, j, thr):
    """Support of every two-point hypothesis; degenerate samples score zero."""
    m = i.shape[0]
    n = p.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    thr2 = thr * thr
    for k in range(m):
        a, b, tx, ty = _two_point(p, q, i[k], j[k])
        if a == 0.0 and b == 0.0:
            continue
        c = 0
        for t in range(n):
            rx = a * p[t, 0] - b * p[t, 1] + tx - q[t, 0]
            ry = b * p[t, 0] + a * p[t, 1] + ty - q[t, 1]
            if rx * rx + ry * ry < thr2:
                c += 1
        counts[k] = c
    return counts


def default_min_support(n: int) -> int:
    return max(5, math.ceil(0.15 * n))


def ransac_similarity(
    src,
    dst,
    inlier_threshold: float = 2.0,
    max_iters: int = 200,
    min_support: int | None = None,
    rng_seed=0,
) -> RansacFit | RansacFailure:
    """RANSAC over two-point minimal samples, refit on the best consensus.

    Consensus means residual strictly below ``inlier_threshold``. Returns a
    :class:`RansacFailure` instead of raising when there are fewer than two
    pairs or the best support is under ``min_support``.
    """
    p = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(p)
    if min_support is None:
        min_support = default_min_support(n)
    if n < 2:
        return RansacFailure(RansacCause.TOO_FEW_PAIRS, 0)
    rng = np.random.default_rng(rng_seed)
    i = rng.integers(0, n, size=max_iters)
    j = (i + rng.integers(1, n, size=max_iters)) % n
    counts = _consensus_counts(p, q, i, j, float(inlier_threshold))
    best = int(np.argmax(counts))
    if counts[best] < max(min_support, 2):
        return RansacFailure(RansacCause.LOW_SUPPORT, int(counts[best]))

    a, b, tx, ty = _two_point(p, q, i[best], j[best])
    support = np.hypot(a * p[:, 0] - b * p[:, 1] + tx - q[:, 0], b * p[:, 0] + a * p[:, 1] + ty - q[:, 1]) < inlier_threshold
    T = estimate_similarity(p[support], q[support])
    refit_support = residuals(p, q, T) < inlier_threshold
    if refit_support.sum() >= support.sum():
        support = refit_support
        T = estimate_similarity(p[support], q[support])
        support = residuals(p, q, T) < inlier_threshold
    if support.sum() < min_support:
        return RansacFailure(RansacCause.LOW_SUPPORT, int(support.sum()))
    support.setflags(write=False)
    return RansacFit(T, support)


def transform_distance(T_in: SimilarityTransform, T_out: SimilarityTransform, points) -> float:
    """Mean displacement between where two transforms send ``points``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("transform_distance needs at least one point")
    d = T_in.apply(pts) - T_out.apply(pts)
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


@dataclass(frozen=True)
class MotionDifference:
    lam: float
    pooled_variance: float
    clamped: bool


def mahalanobis_motion(
    d_star: float, stats_in: ResidualStats, stats_out: ResidualStats, var_floor: float = 0.25
) -> MotionDifference:
    """Transform distance over the pooled residual deviation of both populations.

    The pooled variance uses divisor ``n_in + n_out - 2``; values at or below
    ``var_floor`` are clamped to it and flagged.
    """
    dof = stats_in.count + stats_out.count - 2
    if dof <= 0:
        raise ValueError(f"need n_in + n_out > 2, got {stats_in.count + stats_out.count}")
    pooled = (stats_in.count * stats_in.variance + stats_out.count * stats_out.variance) / dof
    clamped = pooled <= var_floor
    if clamped:
        pooled = var_floor
    return MotionDifference(d_star / math.sqrt(pooled), pooled, clamped)
