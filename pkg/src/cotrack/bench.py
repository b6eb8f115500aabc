"""Overlap accuracy, success rate, timing and report output for tracker runs."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cotracker
from .cotracker import StepOutcome, TrackerConfig, Variant
from .geom import OrientedBox
from .imgcore import GrayImage, load_sequence

SUCCESS_OVERLAP = 0.5


class GroundTruthError(ValueError):
    pass


class LengthMismatch(GroundTruthError):
    pass


# ---------------------------------------------------------------------------
# overlap
# ---------------------------------------------------------------------------


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if _signed_area(poly) >= 0 else poly[::-1]


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of convex ``subject`` inside convex ``clip`` (both CCW)."""
    out = [tuple(p) for p in subject]
    k = len(clip)
    for i in range(k):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % k]
        ex, ey = bx - ax, by - ay
        src, out = out, []
        for j in range(len(src)):
            px, py = src[j]
            qx, qy = src[(j + 1) % len(src)]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
            if (sp >= 0) != (sq >= 0):
                r = sp / (sp - sq)
                out.append((px + r * (qx - px), py + r * (qy - py)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    poly = clip_convex(_ccw(a.corners()), _ccw(b.corners()))
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def overlap(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes by exact polygon clipping."""
    if not (a.area > 0 and b.area > 0):
        raise ValueError("overlap of a degenerate box")
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    """Per-frame boxes; ``None`` marks a frame without ground truth."""

    boxes: list[OrientedBox | None]

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def frame_count(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_boxes(cls, boxes: Sequence[OrientedBox | None]) -> "GroundTruth":
        return cls(list(boxes))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{path}: no such ground-truth file")
        return cls.parse(path.read_text(), path)

    @classmethod
    def parse(cls, text: str, path="<gt>") -> "GroundTruth":
        boxes: list[OrientedBox | None] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.replace("\t", ",").split(",")]
            if len(parts) != 4:
                raise GroundTruthError(f"{path}:{lineno}: expected x,y,w,h, got {line!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise GroundTruthError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
            if any(math.isnan(v) for v in vals):
                boxes.append(None)
                continue
            x, y, w, h = vals
            if not (w > 0 and h > 0):
                raise GroundTruthError(f"{path}:{lineno}: box size must be positive")
            boxes.append(OrientedBox.from_xywh(x, y, w, h))
        if not boxes:
            raise GroundTruthError(f"{path}: empty ground truth")
        return cls(boxes)

    def format(self) -> str:
        out = []
        for b in self.boxes:
            if b is None:
                out.append("NaN,NaN,NaN,NaN")
            else:
                out.append(",".join(f"{v:.4f}" for v in b.aabb()))
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.format())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def frame_overlaps(boxes: Sequence[OrientedBox | None], gt: GroundTruth) -> list[float | None]:
    if len(boxes) != len(gt):
        raise LengthMismatch(f"{len(boxes)} tracked frames but {len(gt)} ground-truth rows")
    return [None if g is None or b is None else overlap(b, g) for b, g in zip(boxes, gt.boxes)]


def success_rate_from_overlaps(overlaps: Sequence[float | None]) -> float:
    """Fraction of frames with ground truth whose overlap strictly exceeds one half."""
    vals = [o for o in overlaps if o is not None]
    if not vals:
        raise ValueError("no frames with ground truth to evaluate")
    return sum(o > SUCCESS_OVERLAP for o in vals) / len(vals)


def success_rate(boxes: Sequence[OrientedBox | None], gt: GroundTruth) -> float:
    return success_rate_from_overlaps(frame_overlaps(boxes, gt))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame: int
    box: OrientedBox
    status: str
    overlap: float | None
    ms: float
    inliers: int


@dataclass
class TrackReport:
    variant: Variant
    rows: list[FrameRecord]
    events: list[tuple[int, object]] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def overlaps(self) -> list[float | None]:
        return [r.overlap for r in self.rows]

    @property
    def mean_accuracy(self) -> float:
        vals = [o for o in self.overlaps if o is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def success_rate(self) -> float:
        return success_rate_from_overlaps(self.overlaps)

    @property
    def step_ms(self) -> list[float]:
        return [r.ms for r in self.rows[1:]]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.step_ms) if self.step_ms else 0.0

    @property
    def median_ms(self) -> float:
        return statistics.median(self.step_ms) if self.step_ms else 0.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms if self.mean_ms > 0 else float("inf")

    @property
    def failures(self) -> int:
        return sum(r.status == "failed" for r in self.rows)

    def events_of(self, kind) -> list[tuple[int, object]]:
        return [(f, e) for f, e in self.events if isinstance(e, kind)]

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["frame", "x", "y", "w", "h", "angle", "status", "overlap", "inliers"]
        w.writerow(head + (["ms"] if timing else []))
        for r in self.rows:
            x, y, bw, bh = _xywh(r.box)
            row = [r.frame, f"{x:.4f}", f"{y:.4f}", f"{bw:.4f}", f"{bh:.4f}", f"{r.box.angle:.6f}", r.status,
                   "" if r.overlap is None else f"{r.overlap:.6f}", r.inliers]
            if timing:
                row.append(f"{r.ms:.3f}")
            w.writerow(row)
        return buf.getvalue()

    def write_csv(self, path, timing: bool = True) -> None:
        Path(path).write_text(self.to_csv(timing))

    def summary(self) -> dict[str, object]:
        return {
            "variant": self.variant.value,
            "frames": len(self.rows),
            "mean_accuracy": round(self.mean_accuracy, 6),
            "success_rate": round(self.success_rate, 6) if any(o is not None for o in self.overlaps) else "nan",
            "failures": self.failures,
            "mean_ms": round(self.mean_ms, 3),
            "median_ms": round(self.median_ms, 3),
            "fps": round(self.fps, 1),
            "motion_restorations": len(self.events_of(cotracker.MotionRestoration)),
            "drift_compensations": len(self.events_of(cotracker.DriftCompensated)),
            "reference_updates": len(self.events_of(cotracker.ReferenceUpdated)),
        }

    def summary_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.summary().items())


def _xywh(box: OrientedBox) -> tuple[float, float, float, float]:
    """Unrotated ``x, y, w, h`` of the box (top-left of the unrotated rectangle)."""
    return box.cx - box.width / 2.0, box.cy - box.height / 2.0, box.width, box.height


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def warmup() -> None:
    """Trigger the compiled kernels once so timings exclude JIT loading."""
    from .synth import value_noise

    img = GrayImage(value_noise((64, 64), 0))
    box = OrientedBox.from_xywh(16, 16, 32, 32)
    cfg = TrackerConfig(variant=Variant.COT_MR, grid_size=10)
    tr = cotracker.CoTracker(img, box, cfg)
    tr.update(img)


def track_frames(
    frames: Sequence[GrayImage],
    init_box: OrientedBox,
    cfg: TrackerConfig,
    gt: GroundTruth | None = None,
    on_step=None,
) -> TrackReport:
    """Track through preloaded ``frames`` and collect per-frame records.

    Timing covers ``step`` only (pyramids included, disk I/O excluded).
    """
    if len(frames) < 1:
        raise ValueError("sequence has no frames")
    if gt is not None and len(gt) != len(frames):
        raise LengthMismatch(f"{len(frames)} frames but {len(gt)} ground-truth rows")
    state = cotracker.init(frames[0], init_box, cfg)
    boxes = [state.box]
    rows = [FrameRecord(0, state.box, "ok", None, 0.0, int(state.states.flat.sum()))]
    events: list[tuple[int, object]] = []
    states = [state.states.inlier.copy()]
    for t in range(1, len(frames)):
        t0 = time.perf_counter()
        out: StepOutcome = cotracker.step(state, frames[t - 1], frames[t])
        ms = (time.perf_counter() - t0) * 1000.0
        state = out.state
        boxes.append(out.box)
        rows.append(FrameRecord(t, out.box, out.status.value, None, ms, int(out.states.flat.sum())))
        events.extend((t, e) for e in out.events)
        states.append(out.states.inlier.copy())
        if on_step is not None:
            on_step(t, out)
    if gt is not None:
        for r, o in zip(rows, frame_overlaps(boxes, gt)):
            r.overlap = o
    return TrackReport(cfg.variant, rows, events, states)


def run_benchmark(sequence, gt, cfg: TrackerConfig | None = None, variant=None) -> TrackReport:
    """Evaluate one variant on a frame directory (or frame list) against ground truth.

    ``gt`` is a :class:`GroundTruth` or a path to a ground-truth file; its
    first row gives the initial box.
    """
    cfg = cfg or TrackerConfig()
    if variant is not None:
        cfg = cfg.with_variant(variant)
    if not isinstance(gt, GroundTruth):
        gt = GroundTruth.load(gt)
    frames = load_sequence(sequence) if isinstance(sequence, (str, Path)) else list(sequence)
    if len(frames) < 2:
        raise ValueError(f"sequence needs at least 2 frames, got {len(frames)}")
    if gt.boxes[0] is None:
        raise GroundTruthError("ground truth has no box for frame 0")
    warmup()
    return track_frames(frames, gt.boxes[0], cfg, gt)


# ---------------------------------------------------------------------------
# annotation
# ---------------------------------------------------------------------------

INLIER_LEVEL = 255
OUTLIER_LEVEL = 0
BOX_LEVEL = 255


def _draw_line(img: np.ndarray, p, q, level: int) -> None:
    n = int(max(abs(q[0] - p[0]), abs(q[1] - p[1]))) + 1
    xs = np.rint(np.linspace(p[0], q[0], n + 1)).astype(int)
    ys = np.rint(np.linspace(p[1], q[1], n + 1)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = level


def annotate(frame: GrayImage, box: OrientedBox, states: np.ndarray) -> GrayImage:
    """Overlay box edges and grid marks: white squares for inliers, black for outliers."""
    img = np.clip(np.rint(frame.data), 0, 255).astype(np.float64)
    c = box.corners()
    for i in range(4):
        _draw_line(img, c[i], c[(i + 1) % 4], BOX_LEVEL)
    m = states.shape[0]
    pts = cotracker.grid_points(box, m)
    for (x, y), inl in zip(pts, states.reshape(-1)):
        xi, yi = int(round(x)), int(round(y))
        y0, y1 = max(yi - 1, 0), min(yi + 2, img.shape[0])
        x0, x1 = max(xi - 1, 0), min(xi + 2, img.shape[1])
        if y0 < y1 and x0 < x1:
            img[y0:y1, x0:x1] = INLIER_LEVEL if inl else OUTLIER_LEVEL
    return GrayImage(img)
