"""Concurrent inlier/outlier grid tracker.

Each frame a uniform m x m grid is laid over the previous box and tracked with
forward-backward LK. Flows are split by the carried point states, a similarity
is fitted to each population, and the inlier motion moves the box. The
outlier motion, together with an appearance reference snapshot, is used to
bring disoccluded points back to the inlier set and to pull the box back
onto the reference when it drifts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum, IntEnum

import numpy as np
from scipy import ndimage

from . import geom
from .geom import OrientedBox, RansacFit, ResidualStats, SimilarityTransform
from .imgcore import GrayImage, ImagePyramid, sample_bilinear_many
from .lkflow import FlowParams, pyramid_for, track_fb_arrays, window_half_for


class Variant(Enum):
    BASIC = "basic"
    COT_M = "cot-m"
    COT_MR = "cot-mr"

    @property
    def concurrent(self) -> bool:
        return self is not Variant.BASIC

    @property
    def uses_reference(self) -> bool:
        return self is Variant.COT_MR


class PointState(IntEnum):
    OUTLIER = 0
    INLIER = 1


class Status(Enum):
    OK = "ok"
    FAILED = "failed"


class InitError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    m_range: tuple[int, int] = (10, 20)
    grid_size: int | None = None
    pyramid_levels: int = 2
    window_half: int | None = None
    lk_max_iterations: int = 20
    lk_convergence_eps: float = 0.01
    lk_min_eigen_threshold: float = 1e-4
    fb_threshold: float = 1.5
    k_in: float = 3.0
    k_out: float = 3.0
    lambda_theta: float = 3.0
    d_theta: float = 1.5
    alpha: float = 0.3
    restore_k_in: float = 3.0
    reference_outlier_gate: float = 0.2
    reference_change_gate: float = 0.10
    ransac_threshold: float = 2.0
    ransac_iters: int = 200
    ransac_min_support: int = 5
    ransac_support_fraction: float = 0.15
    min_matched: int = 5
    sigma_floor: float = 0.5
    variance_floor: float = 0.25
    drift_min_support: int = 8
    drift_support_fraction: float = 0.25
    variant: Variant = Variant.COT_MR
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("fb_threshold", "k_in", "k_out", "lambda_theta", "d_theta", "restore_k_in",
                     "ransac_threshold", "sigma_floor", "variance_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "reference_outlier_gate"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        lo, hi = self.m_range
        if not 2 <= lo <= hi:
            raise ValueError(f"bad m_range {self.m_range}")

    def flow_params(self, window_half: int) -> FlowParams:
        return FlowParams(
            pyramid_levels=self.pyramid_levels,
            window_half=window_half,
            max_iterations=self.lk_max_iterations,
            convergence_eps=self.lk_convergence_eps,
            min_eigen_threshold=self.lk_min_eigen_threshold,
            fb_threshold=self.fb_threshold,
        )

    def with_variant(self, variant) -> "TrackerConfig":
        return replace(self, variant=Variant(variant))


CONFIG_FIELDS = {f.name for f in fields(TrackerConfig)}


# ---------------------------------------------------------------------------
# grid states
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridStates:
    """m x m inlier flags in box-local row-major order (row along height)."""

    inlier: np.ndarray

    def __post_init__(self):
        arr = np.array(self.inlier, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("grid states must be square")
        arr.setflags(write=False)
        object.__setattr__(self, "inlier", arr)

    @classmethod
    def all_inlier(cls, m: int) -> "GridStates":
        return cls(np.ones((m, m), dtype=bool))

    @property
    def m(self) -> int:
        return self.inlier.shape[0]

    @property
    def size(self) -> int:
        return self.inlier.size

    @property
    def flat(self) -> np.ndarray:
        return self.inlier.reshape(-1)

    @property
    def outlier_ratio(self) -> float:
        return 1.0 - float(self.inlier.mean())

    def __getitem__(self, idx) -> PointState:
        return PointState(int(self.inlier[idx]))

    def __eq__(self, other):
        if not isinstance(other, GridStates):
            return NotImplemented
        return bool(np.array_equal(self.inlier, other.inlier))

    __hash__ = None  # type: ignore[assignment]


def grid_size_for(box: OrientedBox, m_range=(10, 20)) -> int:
    """Interpolate m linearly from 10 at a 40 px min side to 20 at 200 px."""
    lo, hi = m_range
    side = min(box.width, box.height)
    m = lo + (side - 40.0) / 160.0 * (hi - lo)
    return int(min(max(math.floor(m + 0.5), lo), hi))


def grid_points(box: OrientedBox, m: int) -> np.ndarray:
    """Cell-centre grid of ``m * m`` points inside ``box``, row-major, shape (m*m, 2)."""
    u = ((np.arange(m) + 0.5) / m - 0.5) * box.width
    v = ((np.arange(m) + 0.5) / m - 0.5) * box.height
    uu, vv = np.meshgrid(u, v)
    local = np.column_stack([uu.ravel(), vv.ravel()])
    return box.to_local().apply(local)


# ---------------------------------------------------------------------------
# state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    roi: GrayImage
    origin: tuple[int, int]  # top-left of the ROI in frame coordinates
    roi_box: OrientedBox  # box at capture, frame coordinates
    states: GridStates
    mean_intensity: float
    scale: float
    pyramid: ImagePyramid

    @property
    def local_box(self) -> OrientedBox:
        return self.roi_box.shifted(-self.origin[0], -self.origin[1])

    def grid(self) -> np.ndarray:
        return grid_points(self.local_box, self.states.m)


@dataclass(frozen=True, eq=False)
class TrackerState:
    box: OrientedBox
    states: GridStates
    config: TrackerConfig
    window_half: int
    reference: ReferenceModel | None = None
    frame_index: int = 0
    frame: GrayImage | None = field(default=None, repr=False)
    pyramid: ImagePyramid | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.states.m

    @property
    def flow_params(self) -> FlowParams:
        return self.config.flow_params(self.window_half)


@dataclass(frozen=True)
class MotionRestoration:
    count: int
    lam: float
    d_star: float
    clamped: bool = False


@dataclass(frozen=True)
class ReferenceRestoration:
    count: int
    matched: int


@dataclass(frozen=True)
class DriftCompensated:
    shift: float
    support: int


@dataclass(frozen=True)
class ReferenceUpdated:
    mean_change: float
    scale_change: float


@dataclass(frozen=True)
class OutlierModelAbsent:
    outliers_matched: int


Event = MotionRestoration | ReferenceRestoration | DriftCompensated | ReferenceUpdated | OutlierModelAbsent


@dataclass(frozen=True, eq=False)
class StepOutcome:
    box: OrientedBox
    states: GridStates
    status: Status
    events: tuple = ()
    state: TrackerState | None = field(default=None, repr=False)
    transform: SimilarityTransform | None = None
    matched: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _target_mean(frame: GrayImage, box: OrientedBox, m: int) -> float:
    pts = grid_points(box, 2 * m)
    return float(np.mean(sample_bilinear_many(frame.data, pts[:, 0], pts[:, 1])))


def capture_reference(frame: GrayImage, box: OrientedBox, states: GridStates, params: FlowParams) -> ReferenceModel:
    """Snapshot the target region (with a margin for LK windows) and the grid states."""
    margin = params.window_half * (1 << (params.pyramid_levels - 1)) + 4
    x, y, w, h = box.aabb()
    x0 = max(int(math.floor(x)) - margin, 0)
    y0 = max(int(math.floor(y)) - margin, 0)
    x1 = min(int(math.ceil(x + w)) + margin + 1, frame.width)
    y1 = min(int(math.ceil(y + h)) + margin + 1, frame.height)
    roi = GrayImage(frame.data[y0:y1, x0:x1])
    pyr = pyramid_for(roi, params)
    return ReferenceModel(
        roi=roi,
        origin=(x0, y0),
        roi_box=box,
        states=states,
        mean_intensity=_target_mean(frame, box, states.m),
        scale=box.diagonal,
        pyramid=pyr,
    )


def init(frame: GrayImage, box: OrientedBox, cfg: TrackerConfig | None = None) -> TrackerState:
    """Lay the initial all-inlier grid over ``box`` and capture the reference model."""
    cfg = cfg or TrackerConfig()
    corners = box.corners()
    if (corners[:, 0].min() < 0 or corners[:, 1].min() < 0
            or corners[:, 0].max() > frame.width - 1 or corners[:, 1].max() > frame.height - 1):
        raise InitError(f"box {box} is not inside the {frame.width}x{frame.height} frame")
    m = cfg.grid_size or grid_size_for(box, cfg.m_range)
    if min(box.width, box.height) / m < 2.0:
        raise InitError(f"box {box.width:.1f}x{box.height:.1f} too small for a {m}x{m} grid with 2 px spacing")
    half = cfg.window_half or window_half_for(box.width, box.height)
    params = cfg.flow_params(half)
    try:
        pyr = pyramid_for(frame, params)
    except ValueError as exc:
        raise InitError(str(exc)) from exc
    states = GridStates.all_inlier(m)
    ref = capture_reference(frame, box, states, params) if cfg.variant.uses_reference else None
    return TrackerState(box=box, states=states, config=cfg, window_half=half, reference=ref,
                        frame_index=0, frame=frame, pyramid=pyr)


# ---------------------------------------------------------------------------
# state update pieces
# ---------------------------------------------------------------------------


def _median3(mask: np.ndarray) -> np.ndarray:
    return ndimage.median_filter(mask.astype(np.uint8), size=3, mode="nearest").astype(bool)


def _dilate3(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))


def smooth_inliers(mask: np.ndarray) -> np.ndarray:
    """3x3 median then 3x3 dilation on the grid."""
    return _dilate3(_median3(mask))


def smooth_outliers(mask: np.ndarray) -> np.ndarray:
    """3x3 median only."""
    return _median3(mask)


def update_states(p_in_star: np.ndarray, p_out_star: np.ndarray, outlier_model_present: bool) -> GridStates:
    """New grid states from the residual-filtered inlier/outlier point masks (m x m bool).

    With an outlier model the smoothed outlier mask wins over the smoothed
    inlier mask; everything else becomes an outlier.
    """
    inl = smooth_inliers(np.asarray(p_in_star, dtype=bool))
    if not outlier_model_present:
        return GridStates(inl)
    out = smooth_outliers(np.asarray(p_out_star, dtype=bool))
    return GridStates(inl & ~out)


def filter_by_residual(src, dst, T: SimilarityTransform, k: float, sigma: float, sigma_floor: float = 0.5) -> np.ndarray:
    """Mask of flows whose residual is below ``k * max(sigma, sigma_floor)``."""
    r = geom.residuals(src, dst, T)
    return r < k * max(sigma, sigma_floor)


def restore_from_motion(
    T_in: SimilarityTransform,
    T_out: SimilarityTransform | None,
    src: np.ndarray,
    dst: np.ndarray,
    matched: np.ndarray,
    in_mask: np.ndarray,
    out_mask: np.ndarray,
    states: GridStates,
    cfg: TrackerConfig,
    cons_in: np.ndarray | None = None,
    cons_out: np.ndarray | None = None,
) -> tuple[GridStates, Event | None]:
    """Flip matched points back to inlier when the two motions clearly differ.

    ``src``/``dst`` cover the whole grid (row-major); ``matched``, ``in_mask``
    and ``out_mask`` are flat masks of matched points and of the matched
    inlier/outlier populations, which supply the counts. Residual spreads come
    from ``cons_in``/``cons_out`` (the fits' consensus sets), defaulting to the
    populations themselves.
    """
    if T_out is None:
        return states, OutlierModelAbsent(int(out_mask.sum()))
    n_in = int(in_mask.sum())
    n_out = int(out_mask.sum())
    N = states.size
    if n_in + n_out <= 2:
        return states, None
    cons_in = in_mask if cons_in is None else cons_in
    cons_out = out_mask if cons_out is None else cons_out
    if not (cons_in.any() and cons_out.any()):
        return states, None
    var_in = geom.residual_variance(src[cons_in], dst[cons_in], T_in).variance
    var_out = geom.residual_variance(src[cons_out], dst[cons_out], T_out).variance
    stats_in = geom.ResidualStats(var_in, n_in)
    stats_out = geom.ResidualStats(var_out, n_out)
    d_star = geom.transform_distance(T_in, T_out, src)
    md = geom.mahalanobis_motion(d_star, stats_in, stats_out, cfg.variance_floor)
    condition = md.lam > cfg.lambda_theta and d_star > cfg.d_theta and n_out / N > cfg.alpha
    if not condition:
        return states, None
    sig_in = max(stats_in.sigma, cfg.sigma_floor)
    sig_out = max(stats_out.sigma, cfg.sigma_floor)
    lam_in = geom.residuals(src, dst, T_in) / sig_in
    lam_out = geom.residuals(src, dst, T_out) / sig_out
    flat = states.flat
    flip = matched & ~flat & (lam_in < lam_out) & (lam_in < cfg.restore_k_in)
    new = flat | flip
    return GridStates(new.reshape(states.m, states.m)), MotionRestoration(int(flip.sum()), md.lam, d_star, md.clamped)


@dataclass(frozen=True)
class ReferenceMatches:
    src: np.ndarray  # reference-ROI coordinates
    dst: np.ndarray  # current-frame coordinates
    indices: np.ndarray  # flat grid indices
    n_reference_inliers: int


def restore_from_reference(
    state: TrackerState, box: OrientedBox, states: GridStates, next_pyr: ImagePyramid
) -> tuple[GridStates, ReferenceRestoration, ReferenceMatches]:
    """Match reference-inlier grid points into the current frame and mark matches inlier."""
    ref = state.reference
    assert ref is not None
    if ref.states.m != states.m:
        raise ValueError("reference grid does not match the tracker grid")
    idx = np.flatnonzero(ref.states.flat)
    ref_pts = ref.grid()[idx]
    guess = grid_points(box, states.m)[idx]
    dst, _, matched, _ = track_fb_arrays(ref.pyramid, next_pyr, ref_pts, state.flow_params, guess=guess)
    hit = idx[matched]
    flat = states.flat.copy()
    restored = int((~flat[hit]).sum())
    flat[hit] = True
    matches = ReferenceMatches(ref_pts[matched], dst[matched], hit, len(idx))
    return GridStates(flat.reshape(states.m, states.m)), ReferenceRestoration(restored, len(hit)), matches


def compensate_drift(
    state: TrackerState, box: OrientedBox, matches: ReferenceMatches, seed
) -> tuple[OrientedBox, DriftCompensated | None]:
    """Re-anchor ``box`` on the reference box when the reference matches support a similarity."""
    cfg = state.config
    need = max(cfg.drift_min_support, math.ceil(cfg.drift_support_fraction * matches.n_reference_inliers))
    if len(matches.src) < need:
        return box, None
    fit = geom.ransac_similarity(matches.src, matches.dst, cfg.ransac_threshold, cfg.ransac_iters, need, seed)
    if not fit.ok:
        return box, None
    assert state.reference is not None
    new_box = geom.transform_box(fit.transform, state.reference.local_box)
    shift = math.hypot(new_box.cx - box.cx, new_box.cy - box.cy)
    return new_box, DriftCompensated(shift, fit.support_count)


def maybe_update_reference(
    state: TrackerState, box: OrientedBox, states: GridStates, frame: GrayImage
) -> tuple[ReferenceModel | None, ReferenceUpdated | None]:
    """Replace the reference when intensity or scale moved by more than the gate and outliers are few."""
    ref = state.reference
    cfg = state.config
    if ref is None:
        return ref, None
    mean_now = _target_mean(frame, box, states.m)
    mean_change = abs(mean_now - ref.mean_intensity) / max(ref.mean_intensity, 1e-9)
    scale_change = abs(box.diagonal - ref.scale) / ref.scale
    changed = mean_change > cfg.reference_change_gate or scale_change > cfg.reference_change_gate
    if not (changed and states.outlier_ratio < cfg.reference_outlier_gate):
        return ref, None
    corners = box.corners()
    if (corners.min(axis=0) < 0).any() or corners[:, 0].max() > frame.width - 1 or corners[:, 1].max() > frame.height - 1:
        return ref, None
    new_ref = capture_reference(frame, box, states, state.flow_params)
    return new_ref, ReferenceUpdated(mean_change, scale_change)


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------


def _seed(cfg: TrackerConfig, frame_index: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.rng_seed & 0xFFFFFFFF, frame_index, tag])


def _population_fit(src, dst, mask, population: int, cfg: TrackerConfig, seed) -> RansacFit | None:
    n = int(mask.sum())
    if n < cfg.min_matched:
        return None
    need = max(cfg.ransac_min_support, math.ceil(cfg.ransac_support_fraction * population))
    fit = geom.ransac_similarity(src[mask], dst[mask], cfg.ransac_threshold, cfg.ransac_iters, need, seed)
    return fit if fit.ok else None


def _consensus(mask: np.ndarray, fit: RansacFit) -> np.ndarray:
    """Flat grid mask of the points in ``mask`` that support ``fit``."""
    out = np.zeros_like(mask)
    out[np.flatnonzero(mask)[fit.support]] = True
    return out


def _pyramid_of(state: TrackerState, frame: GrayImage) -> ImagePyramid:
    if state.frame is frame and state.pyramid is not None:
        return state.pyramid
    return pyramid_for(frame, state.flow_params)


def step(state: TrackerState, prev: GrayImage, next: GrayImage) -> StepOutcome:
    """Advance the tracker from ``prev`` to ``next``.

    On failure to fit the inlier motion the previous box and states are
    returned unchanged and nothing else runs.
    """
    if prev.shape != next.shape:
        raise ValueError("frames must have the same dimensions")
    cfg = state.config
    params = state.flow_params
    prev_pyr = _pyramid_of(state, prev)
    next_pyr = pyramid_for(next, params)
    m = state.m
    t = state.frame_index

    src = grid_points(state.box, m)
    dst, _, matched, _ = track_fb_arrays(prev_pyr, next_pyr, src, params)
    flat = state.states.flat
    in_mask = matched & flat
    out_mask = matched & ~flat

    def failed() -> StepOutcome:
        new_state = replace(state, frame_index=t + 1, frame=next, pyramid=next_pyr)
        return StepOutcome(state.box, state.states, Status.FAILED, (), new_state, None, int(matched.sum()))

    fit_in = _population_fit(src, dst, in_mask, int(flat.sum()), cfg, _seed(cfg, t, 0))
    if fit_in is None:
        return failed()
    T_in = fit_in.transform
    box = geom.transform_box(T_in, state.box)

    if not cfg.variant.concurrent:
        new_state = replace(state, box=box, frame_index=t + 1, frame=next, pyramid=next_pyr)
        return StepOutcome(box, state.states, Status.OK, (), new_state, T_in, int(matched.sum()))

    events: list = []
    fit_out = _population_fit(src, dst, out_mask, int((~flat).sum()), cfg, _seed(cfg, t, 1))
    T_out = fit_out.transform if fit_out is not None else None

    # spreads are measured on each fit's consensus so gross mismatches do not widen the gates
    cons_in = _consensus(in_mask, fit_in)
    stats_in = geom.residual_variance(src[cons_in], dst[cons_in], T_in)
    p_in_star = np.zeros(m * m, dtype=bool)
    p_in_star[in_mask] = filter_by_residual(src[in_mask], dst[in_mask], T_in, cfg.k_in, stats_in.sigma, cfg.sigma_floor)
    p_out_star = np.zeros(m * m, dtype=bool)
    cons_out = np.zeros(m * m, dtype=bool)
    if fit_out is not None:
        cons_out = _consensus(out_mask, fit_out)
        stats_out = geom.residual_variance(src[cons_out], dst[cons_out], fit_out.transform)
        p_out_star[out_mask] = filter_by_residual(
            src[out_mask], dst[out_mask], fit_out.transform, cfg.k_out, stats_out.sigma, cfg.sigma_floor
        )
    states = update_states(p_in_star.reshape(m, m), p_out_star.reshape(m, m), T_out is not None)

    states, ev = restore_from_motion(T_in, T_out, src, dst, matched, in_mask, out_mask, states, cfg, cons_in, cons_out)
    if ev is not None:
        events.append(ev)

    reference = state.reference
    if cfg.variant.uses_reference and reference is not None:
        states, ev_ref, matches = restore_from_reference(state, box, states, next_pyr)
        events.append(ev_ref)
        box, ev_drift = compensate_drift(state, box, matches, _seed(cfg, t, 2))
        if ev_drift is not None:
            events.append(ev_drift)
        reference, ev_upd = maybe_update_reference(state, box, states, next)
        if ev_upd is not None:
            events.append(ev_upd)

    new_state = replace(state, box=box, states=states, reference=reference,
                        frame_index=t + 1, frame=next, pyramid=next_pyr)
    return StepOutcome(box, states, Status.OK, tuple(events), new_state, T_in, int(matched.sum()))


class CoTracker:
    """Stateful convenience wrapper: ``init`` once, then feed frames in order."""

    def __init__(self, frame: GrayImage, box: OrientedBox, cfg: TrackerConfig | None = None):
        self.state = init(frame, box, cfg)

    @property
    def box(self) -> OrientedBox:
        return self.state.box

    @property
    def states(self) -> GridStates:
        return self.state.states

    def update(self, frame: GrayImage) -> StepOutcome:
        assert self.state.frame is not None
        out = step(self.state, self.state.frame, frame)
        self.state = out.state
        return out
