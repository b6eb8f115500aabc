"""Grayscale rasters, bilinear sampling, gradients, pyramids and PGM frame I/O.

Pixel centers sit at integer coordinates with the origin at the top-left pixel,
x to the right and y downward. Arrays are indexed ``data[y, x]``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numba
import numpy as np

FRAME_SUFFIXES = (".pgm", ".png")


class FrameFormatError(ValueError):
    """A frame file could not be decoded."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)
        self.reason = reason


class SamplingOutOfBounds(ValueError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel float image; ``data`` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage intensities must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> "GrayImage":
        # internal results that are already finite float64; skips the copy
        obj = object.__new__(cls)
        arr.setflags(write=False)
        object.__setattr__(obj, "data", arr)
        return obj

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ImagePyramid:
    """Coarse-to-fine stack; ``levels[0]`` is full resolution."""

    levels: tuple[GrayImage, ...]

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(lv.data for lv in self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> GrayImage:
        return self.levels[k]


# ---------------------------------------------------------------------------
# Sampling and filtering
# ---------------------------------------------------------------------------


def sample_bilinear(img: GrayImage, p) -> float:
    """Bilinear intensity at sub-pixel point ``p = (x, y)``.

    Raises SamplingOutOfBounds when ``p`` lies outside ``[0, w-1] x [0, h-1]``.
    """
    x, y = float(p[0]), float(p[1])
    h, w = img.data.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise SamplingOutOfBounds(f"point ({x}, {y}) outside {w}x{h} image")
    x0 = min(int(np.floor(x)), max(w - 2, 0))
    y0 = min(int(np.floor(y)), max(h - 2, 0))
    fx, fy = x - x0, y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    d = img.data
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return float(top * (1.0 - fy) + bot * fy)


def sample_bilinear_many(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised bilinear lookup with coordinates clamped to the image (replicate border)."""
    h, w = data.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _gradient_arrays(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(a, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def gradient(img: GrayImage) -> tuple[GrayImage, GrayImage]:
    """Central-difference derivatives (dI/dx, dI/dy) with replicated borders."""
    if img.width < 3 or img.height < 3:
        raise ValueError(f"image too small for gradient: {img.width}x{img.height}")
    gx, gy = _gradient_arrays(img.data)
    return GrayImage(gx), GrayImage(gy)


@numba.njit(cache=True)
def _downsample_kernel(a):
    h, w = a.shape
    oh, ow = h // 2, w // 2
    # horizontal pass at even columns only, then vertical pass at even rows
    tmp = np.empty((h, ow))
    for y in range(h):
        for j in range(ow):
            x = 2 * j
            s = 6.0 * a[y, x]
            s += 4.0 * (a[y, max(x - 1, 0)] + a[y, min(x + 1, w - 1)])
            s += a[y, max(x - 2, 0)] + a[y, min(x + 2, w - 1)]
            tmp[y, j] = s * 0.0625
    out = np.empty((oh, ow))
    for i in range(oh):
        y = 2 * i
        ym2 = max(y - 2, 0)
        ym1 = max(y - 1, 0)
        yp1 = min(y + 1, h - 1)
        yp2 = min(y + 2, h - 1)
        for j in range(ow):
            out[i, j] = 0.0625 * (
                tmp[ym2, j] + tmp[yp2, j] + 4.0 * (tmp[ym1, j] + tmp[yp1, j]) + 6.0 * tmp[y, j]
            )
    return out


def downsample(a: np.ndarray) -> np.ndarray:
    """Binomial blur then keep every second pixel (even rows and columns)."""
    return _downsample_kernel(np.ascontiguousarray(a, dtype=np.float64))


def build_pyramid(img: GrayImage, levels: int, min_size: int = 3) -> ImagePyramid:
    """Build ``levels`` pyramid levels by binomial blur and 2x decimation.

    Level k pixel (x, y) sits at level-0 coordinate (2^k x, 2^k y).
    ``min_size`` is the smallest side the coarsest level may have; callers
    pass their LK window width.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape
    if min(h >> (levels - 1), w >> (levels - 1)) < max(min_size, 3):
        raise ValueError(
            f"{levels} pyramid levels too deep for a {w}x{h} image (coarsest side must be >= {max(min_size, 3)})"
        )
    out = [img]
    arr = img.data
    for _ in range(1, levels):
        arr = downsample(arr)
        out.append(GrayImage._trusted(arr))
    return ImagePyramid(tuple(out))


# ---------------------------------------------------------------------------
# Frame I/O
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(path: Path, raw: bytes) -> GrayImage:
    if raw[:2] != b"P5":
        raise FrameFormatError(path, "not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise FrameFormatError(path, "malformed header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FrameFormatError(path, f"malformed header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FrameFormatError(path, f"bad dimensions {width}x{height}")
    if maxval < 1 or maxval > 255:
        raise FrameFormatError(path, f"unsupported bit depth (maxval {maxval})")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FrameFormatError(path, "malformed header")
    pos += 1
    body = raw[pos : pos + width * height]
    if len(body) < width * height:
        raise FrameFormatError(path, f"truncated body: {len(body)} of {width * height} bytes")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return GrayImage(data.astype(np.float64))


def load_frame(path) -> GrayImage:
    """Read a binary PGM (P5) or an 8-bit PNG as a GrayImage.

    Colour PNGs are reduced to gray by averaging their channels.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such frame")
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        return _parse_pgm(path, raw)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    raise FrameFormatError(path, "unsupported raster format")


def _load_png(path: Path) -> GrayImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "F"):
            raise FrameFormatError(path, f"unsupported bit depth (mode {im.mode})")
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
            arr = rgb.mean(axis=2)
    return GrayImage(arr)


def to_uint8(img: GrayImage) -> np.ndarray:
    return np.clip(np.rint(img.data), 0, 255).astype(np.uint8)


def save_frame(path, img: GrayImage) -> None:
    """Write ``img`` as P5 PGM (or PNG by suffix), rounding to 8 bits."""
    path = Path(path)
    pix = to_uint8(img)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(pix, mode="L").save(path)
        return
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    path.write_bytes(header + pix.tobytes())


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_sequence(directory) -> list[GrayImage]:
    """Load every frame in ``directory`` in lexicographic filename order."""
    return [load_frame(p) for p in list_frames(directory)]


def save_sequence(directory, frames: Sequence[GrayImage], digits: int = 5) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames, start=1):
        p = directory / f"{i:0{digits}d}.pgm"
        save_frame(p, frame)
        paths.append(p)
    return paths
