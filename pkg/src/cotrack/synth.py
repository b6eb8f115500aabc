"""Deterministic synthetic sequences with exact ground truth.

A textured target moves under a per-frame similarity script over a static
textured background; textured occluders with their own scripts are
composited on top while active. Every random draw derives from the seeds in
the :class:`Scenario`, so a scenario always renders to the same bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cotracker import grid_points, grid_size_for
from .geom import OrientedBox, SimilarityTransform, transform_box
from .imgcore import GrayImage, save_sequence

TEXTURE_LO = 30.0
TEXTURE_HI = 200.0
# background texture keeps a quarter of the target's contrast around its mid level
BACKGROUND_CONTRAST = 0.25
FLAT_LEVEL = 128.0


class ScenarioError(ValueError):
    pass


class ScenarioParseError(ScenarioError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass
class Occluder:
    seed: int
    polygon: np.ndarray  # (K, 2) vertices at the frame-0 pose
    script: list[SimilarityTransform]  # frame t-1 -> t increments, len = frames - 1
    active: tuple[int, int]  # [start, stop) frame interval

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)
        if len(self.polygon) < 3:
            raise ScenarioError("occluder polygon needs at least 3 vertices")


@dataclass
class Scenario:
    name: str
    width: int
    height: int
    frames: int
    target_box: OrientedBox
    target_script: list[SimilarityTransform]
    target_seed: int | None = 1
    background_seed: int | None = 2
    occluders: list[Occluder] = field(default_factory=list)
    noise_sigma: float = 2.0
    rng_seed: int = 0
    grid_m: int | None = None
    gain: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.frames < 1:
            raise ScenarioError("scenario needs at least one frame")
        if len(self.target_script) != self.frames - 1:
            raise ScenarioError(
                f"target script has {len(self.target_script)} rows, expected {self.frames - 1}"
            )
        for k, occ in enumerate(self.occluders):
            if len(occ.script) != self.frames - 1:
                raise ScenarioError(f"occluder {k} script has {len(occ.script)} rows, expected {self.frames - 1}")

    @property
    def nominal_m(self) -> int:
        return self.grid_m or grid_size_for(self.target_box)


@dataclass
class SynthTruth:
    boxes: list[OrientedBox]
    masks: list[np.ndarray]  # (m, m) bool per frame, True where an occluder covers the cell centre

    @property
    def m(self) -> int:
        return self.masks[0].shape[0]

    def coverage(self) -> np.ndarray:
        return np.array([mk.mean() for mk in self.masks])


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------


def value_noise(shape: tuple[int, int], seed: int) -> np.ndarray:
    """Band-limited texture: cubic-interpolated random lattices at three scales, lightly blurred."""
    h, w = shape
    rng = np.random.default_rng(seed)
    out = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for spacing, amp in ((14.0, 1.0), (6.0, 0.6), (3.0, 0.35)):
        lattice = rng.random((int(h / spacing) + 4, int(w / spacing) + 4))
        out += amp * ndimage.map_coordinates(lattice, [yy / spacing + 1, xx / spacing + 1], order=3, mode="nearest")
    out = ndimage.gaussian_filter(out, 0.7)
    lo, hi = out.min(), out.max()
    return TEXTURE_LO + (out - lo) / max(hi - lo, 1e-12) * (TEXTURE_HI - TEXTURE_LO)


def points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test for an (N, 2) array."""
    px, py = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    k = len(poly)
    for i in range(k):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % k]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def cumulative_poses(script: list[SimilarityTransform]) -> list[SimilarityTransform]:
    poses = [SimilarityTransform.identity()]
    for inc in script:
        poses.append(inc.compose(poses[-1]))
    return poses


def _in_box(local: np.ndarray, box: OrientedBox) -> np.ndarray:
    q = box.to_local().inverse().apply(local)
    return (np.abs(q[:, 0]) <= box.width / 2.0) & (np.abs(q[:, 1]) <= box.height / 2.0)


class _Layer:
    """A textured region that moves rigidly; texture lives in frame-0 coordinates."""

    def __init__(self, bounds: tuple[float, float, float, float], seed: int | None, pad: int = 6):
        x0, y0, x1, y1 = bounds
        self.ox = math.floor(x0) - pad
        self.oy = math.floor(y0) - pad
        w = int(math.ceil(x1)) + pad - self.ox + 1
        h = int(math.ceil(y1)) + pad - self.oy + 1
        self.tex = value_noise((h, w), seed) if seed is not None else None

    def sample(self, local: np.ndarray) -> np.ndarray:
        if self.tex is None:
            return np.full(len(local), FLAT_LEVEL)
        return ndimage.map_coordinates(
            self.tex, [local[:, 1] - self.oy, local[:, 0] - self.ox], order=1, mode="nearest"
        )


def _check_seed(seed):
    return None if seed is None else int(seed)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def ground_truth_boxes(sc: Scenario) -> list[OrientedBox]:
    return [transform_box(P, sc.target_box) for P in cumulative_poses(sc.target_script)]


def generate(sc: Scenario) -> tuple[list[GrayImage], SynthTruth]:
    """Render every frame of ``sc`` and its per-frame truth."""
    sc.validate()
    h, w = sc.height, sc.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.column_stack([xx.ravel(), yy.ravel()])

    bg_seed = _check_seed(sc.background_seed)
    if bg_seed is not None:
        mid = 0.5 * (TEXTURE_LO + TEXTURE_HI)
        background = mid + (value_noise((h, w), bg_seed) - mid) * BACKGROUND_CONTRAST
    else:
        background = np.full((h, w), FLAT_LEVEL)

    c = sc.target_box.corners()
    target_layer = _Layer((c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()), _check_seed(sc.target_seed))
    target_poses = cumulative_poses(sc.target_script)
    occ_layers = []
    for occ in sc.occluders:
        p = occ.polygon
        occ_layers.append(
            (_Layer((p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()), _check_seed(occ.seed)),
             cumulative_poses(occ.script))
        )

    m = sc.nominal_m

    frames: list[GrayImage] = []
    boxes: list[OrientedBox] = []
    masks: list[np.ndarray] = []
    for t in range(sc.frames):
        img = background.ravel().copy()
        P = target_poses[t]
        local = P.inverse().apply(pix)
        inside = _in_box(local, sc.target_box)
        img[inside] = target_layer.sample(local[inside])
        box_t = transform_box(P, sc.target_box)
        cells = grid_points(box_t, m)
        covered = np.zeros(len(cells), dtype=bool)
        for occ, (layer, poses) in zip(sc.occluders, occ_layers):
            if not occ.active[0] <= t < occ.active[1]:
                continue
            Q = poses[t]
            oloc = Q.inverse().apply(pix)
            hit = points_in_polygon(oloc, occ.polygon)
            img[hit] = layer.sample(oloc[hit])
            covered |= points_in_polygon(Q.inverse().apply(cells), occ.polygon)
        g0, g1 = sc.gain
        gain = g0 + (g1 - g0) * (t / max(sc.frames - 1, 1))
        img = img * gain
        if sc.noise_sigma > 0:
            rng = np.random.default_rng([int(sc.rng_seed) & 0xFFFFFFFF, t])
            img = img + rng.normal(0.0, sc.noise_sigma, size=img.shape)
        pix8 = np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(h, w)
        frames.append(GrayImage(pix8.astype(np.float64)))
        boxes.append(box_t)
        masks.append(covered.reshape(m, m))
    return frames, SynthTruth(boxes, masks)


# ---------------------------------------------------------------------------
# scripts and the standard suite
# ---------------------------------------------------------------------------


def about_center_script(box: OrientedBox, frames: int, shift=(0.0, 0.0), scale: float = 1.0,
                        angle: float = 0.0) -> list[SimilarityTransform]:
    """Per-frame increments that scale/rotate about the moving target centre and then translate."""
    script = []
    center = np.array([box.cx, box.cy])
    for _ in range(frames - 1):
        inc = SimilarityTransform.about(center, scale, angle, shift)
        script.append(inc)
        center = inc.apply(center)
    return script


def translation_script(frames: int, velocity_at) -> list[SimilarityTransform]:
    """Increments from a ``velocity_at(t) -> (dx, dy)`` callable, t = 1..frames-1."""
    return [SimilarityTransform(1.0, 0.0, *map(float, velocity_at(t))) for t in range(1, frames)]


def _still(frames: int) -> list[SimilarityTransform]:
    return [SimilarityTransform.identity() for _ in range(frames - 1)]


def _rect(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def scenario_s1() -> Scenario:
    n = 100
    box = OrientedBox.from_xywh(60.0, 60.0, 80.0, 70.0)
    return Scenario("S1", 320, 240, n, box, translation_script(n, lambda t: (1.0, 0.5)),
                    target_seed=101, background_seed=201, rng_seed=1)


def scenario_s2() -> Scenario:
    n = 100
    box = OrientedBox.from_xywh(85.0, 85.0, 70.0, 70.0)
    script = about_center_script(box, n, shift=(0.5, 0.2), scale=1.003, angle=0.004)
    return Scenario("S2", 320, 240, n, box, script, target_seed=102, background_seed=202, rng_seed=2)


S3_ACTIVE = (20, 136)
S3_PLATEAU = (36, 120)
S3_BAND_SPEED = 4.0
S3_SIDE = 168.0
S3_COVER_ROWS = 8


def scenario_s3(frames: int = 150, cover_rows: int = S3_COVER_ROWS) -> Scenario:
    """Lower rows of the target covered by a wide band sliding against the target.

    ``cover_rows`` grid rows (of the nominal grid) sit under the band while it
    is fully raised.
    """
    n = frames
    side = S3_SIDE
    box = OrientedBox.from_xywh(30.0, 76.0, side, side)
    m = grid_size_for(box)
    # band top settles half a cell above the first covered row centre
    top = box.cy - side / 2.0 + (m - cover_rows) * side / m
    bottom = box.cy + side / 2.0 + 4.0
    rise = 16
    lift = (bottom - top) / rise
    start, stop = S3_ACTIVE

    def band_velocity(t):
        if start < t <= start + rise:
            return (-S3_BAND_SPEED, -lift)
        if stop - rise <= t < stop:
            return (-S3_BAND_SPEED, lift)
        return (-S3_BAND_SPEED, 0.0)

    band = Occluder(
        seed=303,
        polygon=_rect(-1600.0, bottom, 2000.0, bottom + 400.0),
        script=translation_script(n, band_velocity),
        active=S3_ACTIVE,
    )
    return Scenario("S3", 480, 320, n, box, translation_script(n, lambda t: (1.2, 0.0)),
                    target_seed=103, background_seed=203, occluders=[band], rng_seed=3)


S4_ACTIVE = (40, 50)


def scenario_s4() -> Scenario:
    """Static square hides the whole target for ten frames."""
    n = 100
    box = OrientedBox.from_xywh(110.0, 80.0, 80.0, 80.0)
    start, stop = S4_ACTIVE
    cover = Occluder(304, _rect(95.0, 65.0, 215.0, 175.0), _still(n), S4_ACTIVE)
    return Scenario("S4", 320, 240, n, box, translation_script(n, lambda t: (0.3, 0.0)),
                    target_seed=104, background_seed=204, occluders=[cover], rng_seed=4)


def scenario_s5() -> Scenario:
    n = 100
    box = OrientedBox.from_xywh(70.0, 70.0, 80.0, 80.0)
    return Scenario("S5", 320, 240, n, box, translation_script(n, lambda t: (0.8, 0.3)),
                    target_seed=105, background_seed=205, rng_seed=5, gain=(1.0, 1.2))


def scenario_s6() -> Scenario:
    """Target slides behind a static post narrower than itself."""
    n = 60
    box = OrientedBox.from_xywh(20.0, 100.0, 120.0, 120.0)
    post = Occluder(306, _rect(180.0, -20.0, 216.0, 340.0), _still(n), (0, n))
    return Scenario("S6", 480, 320, n, box, translation_script(n, lambda t: (5.0, 0.0)),
                    target_seed=106, background_seed=206, occluders=[post], rng_seed=6)


def standard_suite() -> list[Scenario]:
    return [scenario_s1(), scenario_s2(), scenario_s3(), scenario_s4(), scenario_s5(), scenario_s6()]


def noise_scenario(frames: int = 20) -> Scenario:
    """Flat scene with weak independent noise: no structure to track."""
    box = OrientedBox.from_xywh(110.0, 80.0, 80.0, 80.0)
    return Scenario("noise", 320, 240, frames, box, _still(frames), target_seed=None,
                    background_seed=None, noise_sigma=2.0, rng_seed=99)


def runtime_scenario(frames: int = 40) -> Scenario:
    """640x480 scene with a target sized for a 15 x 15 grid."""
    box = OrientedBox.from_xywh(200.0, 150.0, 120.0, 120.0)
    return Scenario("runtime", 640, 480, frames, box, translation_script(frames, lambda t: (1.5, 0.8)),
                    target_seed=107, background_seed=207, rng_seed=7)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _script_rows(script) -> list[str]:
    return [f"{t} {_fmt(T.scale)} {_fmt(T.angle)} {_fmt(T.tx)} {_fmt(T.ty)}" for t, T in enumerate(script, start=1)]


def format_scenario(sc: Scenario) -> str:
    b = sc.target_box
    lines = [
        "# cotrack scenario",
        f"name = {sc.name}",
        f"size = {sc.width},{sc.height}",
        f"frames = {sc.frames}",
        f"noise_sigma = {_fmt(sc.noise_sigma)}",
        f"rng_seed = {sc.rng_seed}",
        f"background_seed = {'none' if sc.background_seed is None else sc.background_seed}",
        f"target_seed = {'none' if sc.target_seed is None else sc.target_seed}",
        f"target_box = {_fmt(b.cx)},{_fmt(b.cy)},{_fmt(b.width)},{_fmt(b.height)},{_fmt(b.angle)}",
        f"gain = {_fmt(sc.gain[0])},{_fmt(sc.gain[1])}",
    ]
    if sc.grid_m is not None:
        lines.append(f"grid_m = {sc.grid_m}")
    lines.append("[target_script]")
    lines += _script_rows(sc.target_script)
    for occ in sc.occluders:
        lines.append("[occluder]")
        lines.append(f"seed = {occ.seed}")
        lines.append("polygon = " + ";".join(f"{_fmt(x)},{_fmt(y)}" for x, y in occ.polygon))
        lines.append(f"active = {occ.active[0]},{occ.active[1]}")
        lines.append("[occluder_script]")
        lines += _script_rows(occ.script)
    return "\n".join(lines) + "\n"


def write_scenario(path, sc: Scenario) -> None:
    Path(path).write_text(format_scenario(sc))


def _seed_value(v: str):
    return None if v.strip().lower() == "none" else int(v)


def parse_scenario(text: str, path="<scenario>") -> Scenario:
    """Parse the key/value scenario format; errors carry the offending line number."""
    header: dict[str, tuple[int, str]] = {}
    target_rows: list[tuple[int, str]] = []
    occ_specs: list[dict] = []
    section = "header"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section == "occluder":
                occ_specs.append({"keys": {}, "rows": [], "line": lineno})
            elif section == "occluder_script":
                if not occ_specs:
                    raise ScenarioParseError(path, lineno, "[occluder_script] before any [occluder]")
            elif section != "target_script":
                raise ScenarioParseError(path, lineno, f"unknown section [{section}]")
            continue
        if section in ("header", "occluder"):
            if "=" not in line:
                raise ScenarioParseError(path, lineno, f"expected key = value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            (header if section == "header" else occ_specs[-1]["keys"])[k] = (lineno, v)
        elif section == "target_script":
            target_rows.append((lineno, line))
        else:
            occ_specs[-1]["rows"].append((lineno, line))

    def need(table, key, where_line=0):
        if key not in table:
            raise ScenarioParseError(path, where_line, f"missing key {key!r}")
        return table[key]

    def floats(lineno, v, n=None):
        try:
            vals = [float(x) for x in v.split(",")]
        except ValueError:
            raise ScenarioParseError(path, lineno, f"bad number list {v!r}") from None
        if n is not None and len(vals) != n:
            raise ScenarioParseError(path, lineno, f"expected {n} values, got {len(vals)}")
        return vals

    try:
        frames_line, frames_v = need(header, "frames")
        frames = int(frames_v)
        size_line, size_v = need(header, "size")
        width, height = (int(x) for x in floats(size_line, size_v, 2))
        box_line, box_v = need(header, "target_box")
        bv = floats(box_line, box_v)
        if len(bv) == 4:
            box = OrientedBox(*bv, 0.0)
        elif len(bv) == 5:
            box = OrientedBox(*bv)
        else:
            raise ScenarioParseError(path, box_line, "target_box needs cx,cy,w,h[,angle]")
        seed_of = lambda key, default: _seed_value(header[key][1]) if key in header else default  # noqa: E731
        gain = tuple(floats(*header["gain"], 2)) if "gain" in header else (1.0, 1.0)
        target_script = _parse_script(path, target_rows, frames, frames_line, "target_script")
        occluders = []
        for spec in occ_specs:
            keys = spec["keys"]
            pl, pv = need(keys, "polygon", spec["line"])
            try:
                poly = [[float(a) for a in pt.split(",")] for pt in pv.split(";")]
            except ValueError:
                raise ScenarioParseError(path, pl, f"bad polygon {pv!r}") from None
            al, av = need(keys, "active", spec["line"])
            a0, a1 = (int(x) for x in floats(al, av, 2))
            sl, sv = need(keys, "seed", spec["line"])
            script = _parse_script(path, spec["rows"], frames, spec["line"], "occluder_script")
            occluders.append(Occluder(_seed_value(sv), np.array(poly), script, (a0, a1)))
        sc = Scenario(
            name=header.get("name", (0, "scenario"))[1],
            width=width,
            height=height,
            frames=frames,
            target_box=box,
            target_script=target_script,
            target_seed=seed_of("target_seed", 1),
            background_seed=seed_of("background_seed", 2),
            occluders=occluders,
            noise_sigma=float(header["noise_sigma"][1]) if "noise_sigma" in header else 2.0,
            rng_seed=int(header["rng_seed"][1]) if "rng_seed" in header else 0,
            grid_m=int(header["grid_m"][1]) if "grid_m" in header else None,
            gain=gain,
        )
    except ScenarioParseError:
        raise
    except (ValueError, ScenarioError) as exc:
        raise ScenarioParseError(path, 0, str(exc)) from exc
    return sc


def _parse_script(path, rows, frames: int, anchor_line: int, what: str) -> list[SimilarityTransform]:
    script = []
    for lineno, line in rows:
        parts = line.split()
        if len(parts) != 5:
            raise ScenarioParseError(path, lineno, f"{what} row needs 'frame s theta tx ty'")
        try:
            idx = int(parts[0])
            s, th, tx, ty = (float(x) for x in parts[1:])
        except ValueError:
            raise ScenarioParseError(path, lineno, f"bad {what} row {line!r}") from None
        if idx != len(script) + 1:
            raise ScenarioParseError(path, lineno, f"{what} row numbered {idx}, expected {len(script) + 1}")
        if idx > frames - 1:
            raise ScenarioParseError(path, lineno, f"{what} has more rows than frames - 1 = {frames - 1}")
        try:
            script.append(SimilarityTransform(s, th, tx, ty))
        except ValueError as exc:
            raise ScenarioParseError(path, lineno, str(exc)) from None
    if len(script) != frames - 1:
        last = rows[-1][0] if rows else anchor_line
        raise ScenarioParseError(path, last, f"{what} has {len(script)} rows, expected {frames - 1}")
    return script


def read_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path)


# ---------------------------------------------------------------------------
# materialising
# ---------------------------------------------------------------------------


def write_truth(path, truth: SynthTruth) -> None:
    """Axis-aligned ground truth in the ``x,y,w,h`` per-line format."""
    from .bench import GroundTruth

    GroundTruth.from_boxes(truth.boxes).save(path)


def materialize(sc: Scenario, out_dir) -> Path:
    """Write frames, ``groundtruth.txt`` and ``scenario.txt`` under ``out_dir/<name>``."""
    frames, truth = generate(sc)
    seq_dir = Path(out_dir) / sc.name
    save_sequence(seq_dir, frames)
    write_truth(seq_dir / "groundtruth.txt", truth)
    write_scenario(seq_dir / "scenario.txt", sc)
    return seq_dir
