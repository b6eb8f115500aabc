"""Iterative pyramidal Lucas-Kanade point tracking with forward-backward checking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum

import numba
import numpy as np

from .imgcore import GrayImage, ImagePyramid, Point2, build_pyramid

INTENSITY_RANGE = 255.0

# reassociation lets the window reductions vectorise; NaN/Inf semantics are kept
_FAST = {"reassoc", "contract"}


class LostCause(IntEnum):
    NONE = 0
    DEGENERATE = 1
    OUT_OF_BOUNDS = 2
    DIVERGED = 3


class MatchStatus(Enum):
    MATCHED = "matched"
    UNMATCHED = "unmatched"


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 2
    window_half: int = 7
    max_iterations: int = 20
    convergence_eps: float = 0.01
    min_eigen_threshold: float = 1e-4
    fb_threshold: float = 1.5

    def __post_init__(self):
        if self.window_half < 1:
            raise ValueError("window_half must be >= 1")
        if self.fb_threshold <= 0:
            raise ValueError("fb_threshold must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")

    @property
    def window_size(self) -> int:
        return 2 * self.window_half + 1


@dataclass(frozen=True)
class Lost:
    cause: LostCause


@dataclass(frozen=True)
class FlowMatch:
    src: Point2
    dst: Point2
    fb_error: float
    status: MatchStatus
    cause: LostCause = LostCause.NONE

    @property
    def matched(self) -> bool:
        return self.status is MatchStatus.MATCHED


def window_half_for(box_width: float, box_height: float, lo: int = 2, hi: int = 15) -> int:
    """Half window from a patch one third of the smaller target side, clamped to [lo, hi]."""
    half = int(math.floor(min(box_width, box_height) / 3.0 / 2.0 + 0.5))
    return int(min(max(half, lo), hi))


def pyramid_for(img: GrayImage, params: FlowParams) -> ImagePyramid:
    return build_pyramid(img, params.pyramid_levels, min_size=params.window_size)


# ---------------------------------------------------------------------------
# compiled kernel
# ---------------------------------------------------------------------------


@numba.njit(cache=True, fastmath=_FAST)
def _sample_window(a, x, y, out):
    """Fill ``out`` (s x s) with bilinear samples at (x + c, y + r); replicate border."""
    h, w = a.shape
    s = out.shape[0]
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    fx = x - x0
    fy = y - y0
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    if x0 >= 0 and y0 >= 0 and x0 + s < w and y0 + s < h:
        for r in range(s):
            ra = a[y0 + r]
            rb = a[y0 + r + 1]
            orow = out[r]
            for c in range(s):
                xc = x0 + c
                orow[c] = w00 * ra[xc] + w01 * ra[xc + 1] + w10 * rb[xc] + w11 * rb[xc + 1]
    else:
        for r in range(s):
            ya = min(max(y0 + r, 0), h - 1)
            yb = min(max(y0 + r + 1, 0), h - 1)
            for c in range(s):
                xa = min(max(x0 + c, 0), w - 1)
                xb = min(max(x0 + c + 1, 0), w - 1)
                out[r, c] = w00 * a[ya, xa] + w01 * a[ya, xb] + w10 * a[yb, xa] + w11 * a[yb, xb]


@numba.njit(cache=True, fastmath=_FAST)
def _mismatch(J, x, y, ext, tgx, tgy, win):
    """Image mismatch vector sum((T - J) * grad T) for the window at (x, y)."""
    h, w = J.shape
    s = tgx.shape[0]
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    b1 = 0.0
    b2 = 0.0
    if x0 >= 0 and y0 >= 0 and x0 + s < w and y0 + s < h:
        fx = x - x0
        fy = y - y0
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        for r in range(s):
            ra = J[y0 + r]
            rb = J[y0 + r + 1]
            tr = ext[r + 1]
            gxr = tgx[r]
            gyr = tgy[r]
            for c in range(s):
                xc = x0 + c
                diff = tr[c + 1] - (w00 * ra[xc] + w01 * ra[xc + 1] + w10 * rb[xc] + w11 * rb[xc + 1])
                b1 += diff * gxr[c]
                b2 += diff * gyr[c]
        return b1, b2
    _sample_window(J, x, y, win)
    for r in range(s):
        for c in range(s):
            diff = ext[r + 1, c + 1] - win[r, c]
            b1 += diff * tgx[r, c]
            b2 += diff * tgy[r, c]
    return b1, b2


@numba.njit(cache=True, fastmath=_FAST)
def _track_kernel(prev_lv, next_lv, src, guess, half, max_iter, eps, min_eig):
    n = src.shape[0]
    nlev = len(prev_lv)
    side = 2 * half + 1
    norm = side * side * INTENSITY_RANGE * INTENSITY_RANGE
    ext = np.empty((side + 2, side + 2))
    tgx = np.empty((side, side))
    tgy = np.empty((side, side))
    win = np.empty((side, side))
    dst = np.empty((n, 2))
    code = np.zeros(n, dtype=np.int8)
    for i in range(n):
        sx = src[i, 0]
        sy = src[i, 1]
        top_scale = 1.0 / (1 << (nlev - 1))
        gx_ = guess[i, 0] * top_scale
        gy_ = guess[i, 1] * top_scale
        status = 0
        nux = 0.0
        nuy = 0.0
        for lev in range(nlev - 1, -1, -1):
            I = prev_lv[lev]
            J = next_lv[lev]
            ph, pw = I.shape
            nh, nw = J.shape
            sc = 1.0 / (1 << lev)
            ux = sx * sc
            uy = sy * sc
            if not (ux >= 0.0 and ux <= pw - 1 and uy >= 0.0 and uy <= ph - 1):
                status = 2
                break
            # template plus a one-pixel ring; central differences of the
            # samples give the window gradients
            _sample_window(I, ux - half - 1, uy - half - 1, ext)
            a11 = 0.0
            a12 = 0.0
            a22 = 0.0
            for r in range(side):
                for c in range(side):
                    gxv = 0.5 * (ext[r + 1, c + 2] - ext[r + 1, c])
                    gyv = 0.5 * (ext[r + 2, c + 1] - ext[r, c + 1])
                    tgx[r, c] = gxv
                    tgy[r, c] = gyv
                    a11 += gxv * gxv
                    a12 += gxv * gyv
                    a22 += gyv * gyv
            det = a11 * a22 - a12 * a12
            tr = a11 + a22
            disc = math.sqrt(max((a11 - a22) * (a11 - a22) + 4.0 * a12 * a12, 0.0))
            lam_min = 0.5 * (tr - disc) / norm
            if not (lam_min >= min_eig and det > 0.0):
                status = 1
                break
            inv11 = a22 / det
            inv12 = -a12 / det
            inv22 = a11 / det
            nux = 0.0
            nuy = 0.0
            converged = False
            for _ in range(max_iter):
                vx = ux + gx_ + nux
                vy = uy + gy_ + nuy
                if not (vx >= 0.0 and vx <= nw - 1 and vy >= 0.0 and vy <= nh - 1):
                    status = 2
                    break
                b1, b2 = _mismatch(J, vx - half, vy - half, ext, tgx, tgy, win)
                etax = inv11 * b1 + inv12 * b2
                etay = inv12 * b1 + inv22 * b2
                if not (math.isfinite(etax) and math.isfinite(etay)):
                    status = 3
                    break
                nux += etax
                nuy += etay
                if etax * etax + etay * etay < eps * eps:
                    converged = True
                    break
            # a full-resolution solve that never settles is treated as diverged
            if status == 0 and lev == 0 and not converged:
                status = 3
            if status != 0:
                break
            vx = ux + gx_ + nux
            vy = uy + gy_ + nuy
            if not (vx >= 0.0 and vx <= nw - 1 and vy >= 0.0 and vy <= nh - 1):
                status = 2
                break
            if lev > 0:
                gx_ = 2.0 * (gx_ + nux)
                gy_ = 2.0 * (gy_ + nuy)
        code[i] = status
        if status == 0:
            dst[i, 0] = sx + gx_ + nux
            dst[i, 1] = sy + gy_ + nuy
        else:
            dst[i, 0] = np.nan
            dst[i, 1] = np.nan
    return dst, code


def track_points(
    prev: ImagePyramid,
    next: ImagePyramid,
    points: np.ndarray,
    params: FlowParams,
    guess: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Track an (N, 2) array of points from ``prev`` to ``next``.

    ``guess`` holds initial destination estimates (defaults to the sources).
    Returns ``(dst, code)``; lost points have NaN destinations and a nonzero
    LostCause code. Exhausting ``max_iterations`` on the finest level without
    meeting ``convergence_eps`` counts as DIVERGED.
    """
    if len(prev) != len(next):
        raise ValueError("pyramids must have the same depth")
    src = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if guess is None:
        disp = np.zeros_like(src)
    else:
        disp = np.ascontiguousarray(np.asarray(guess, dtype=np.float64).reshape(-1, 2) - src)
    nlev = min(len(prev), params.pyramid_levels)
    return _track_kernel(
        prev.arrays[:nlev],
        next.arrays[:nlev],
        src,
        disp,
        int(params.window_half),
        int(params.max_iterations),
        float(params.convergence_eps),
        float(params.min_eigen_threshold),
    )


def track_point(prev: ImagePyramid, next: ImagePyramid, p, params: FlowParams) -> Point2 | Lost:
    """Track one point; returns its new location or a :class:`Lost` with the cause."""
    dst, code = track_points(prev, next, np.array([[p[0], p[1]]]), params)
    if code[0]:
        return Lost(LostCause(int(code[0])))
    return Point2(float(dst[0, 0]), float(dst[0, 1]))


def track_fb_arrays(
    prev: ImagePyramid,
    next: ImagePyramid,
    points: np.ndarray,
    params: FlowParams,
    guess: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward-backward tracking over arrays.

    The backward pass starts from each forward result; with a ``guess`` the
    backward initial estimate undoes the same offset.
    Returns ``(dst, fb_error, matched, code)``.
    """
    src = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    fwd, code_f = track_points(prev, next, src, params, guess)
    ok = code_f == 0
    fb = np.full(len(src), np.inf)
    code = code_f.copy()
    if np.any(ok):
        start = fwd[ok]
        back_guess = None
        if guess is not None:
            back_guess = start - (np.asarray(guess, dtype=np.float64).reshape(-1, 2)[ok] - src[ok])
        bwd, code_b = track_points(next, prev, start, params, back_guess)
        err = np.hypot(bwd[:, 0] - src[ok, 0], bwd[:, 1] - src[ok, 1])
        err[code_b != 0] = np.inf
        fb[ok] = err
        code[ok] = code_b
    matched = (code == 0) & (fb <= params.fb_threshold)
    return fwd, fb, matched, code


def track_with_fb(prev: ImagePyramid, next: ImagePyramid, points, params: FlowParams) -> list[FlowMatch]:
    """Track points forward and back; flows failing LK or the FB threshold are unmatched."""
    src = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dst, fb, matched, code = track_fb_arrays(prev, next, src, params)
    out = []
    for i in range(len(src)):
        out.append(
            FlowMatch(
                src=Point2(float(src[i, 0]), float(src[i, 1])),
                dst=Point2(float(dst[i, 0]), float(dst[i, 1])),
                fb_error=float(fb[i]),
                status=MatchStatus.MATCHED if matched[i] else MatchStatus.UNMATCHED,
                cause=LostCause(int(code[i])),
            )
        )
    return out
