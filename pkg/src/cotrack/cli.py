"""Command-line entry point: ``cotrack track | eval | synth``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import bench, synth
from .cotracker import CONFIG_FIELDS, InitError, TrackerConfig, Variant
from .geom import OrientedBox
from .imgcore import FrameFormatError, load_sequence, save_frame

VARIANTS = [v.value for v in Variant]


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, object]:
    base = TrackerConfig()
    return {f.name: getattr(base, f.name) for f in fields(TrackerConfig)}


def _convert(name: str, raw: str, default):
    if name == "variant":
        return Variant(raw)
    if name == "m_range":
        lo, hi = (int(v) for v in raw.split(","))
        return (lo, hi)
    if raw.lower() == "none":
        if name in ("grid_size", "window_half"):
            return None
        raise ValueError("none is not allowed here")
    if name in ("grid_size", "window_half") or isinstance(default, int):
        return int(raw)
    return float(raw)


def parse_config(text: str, path="<config>", base: TrackerConfig | None = None) -> TrackerConfig:
    """Apply flat ``key = value`` lines to ``base``; ``#`` starts a comment."""
    defaults = _defaults()
    changes: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            changes[key] = _convert(key, value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return replace(base or TrackerConfig(), **changes)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def format_config(cfg: TrackerConfig) -> str:
    out = []
    for f in fields(TrackerConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, Variant):
            v = v.value
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(out) + "\n"


def _parse_box(text: str) -> OrientedBox:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h, got {text!r}") from None
    if not (w > 0 and h > 0):
        raise argparse.ArgumentTypeError("box width and height must be positive")
    return OrientedBox.from_xywh(x, y, w, h)


def _config_from(args) -> TrackerConfig:
    cfg = TrackerConfig()
    if args.config:
        p = Path(args.config)
        cfg = parse_config(p.read_text(), p)
    if args.variant is not None:
        cfg = cfg.with_variant(args.variant)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    return cfg


def track_csv(report: bench.TrackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "x", "y", "w", "h", "angle", "status"])
    for r in report.rows:
        x, y, bw, bh = bench._xywh(r.box)
        w.writerow([r.frame, f"{x:.4f}", f"{y:.4f}", f"{bw:.4f}", f"{bh:.4f}", f"{r.box.angle:.6f}", r.status])
    return buf.getvalue()


def cmd_track(args, parser) -> int:
    gt = bench.GroundTruth.load(args.gt) if args.gt else None
    if args.init is not None:
        box = args.init
    elif gt is not None and gt.boxes[0] is not None:
        box = gt.boxes[0]
    else:
        parser.error("track needs --init x,y,w,h or a --gt file with a box on frame 0")
    cfg = _config_from(args)
    frames = load_sequence(args.sequence)
    if not frames:
        raise FrameFormatError(f"{args.sequence}: no frames found")
    bench.warmup()
    report = bench.track_frames(frames, box, cfg, gt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(track_csv(report))
    if args.annotate:
        adir = Path(args.annotate)
        adir.mkdir(parents=True, exist_ok=True)
        for r, st, frame in zip(report.rows, report.states, frames):
            save_frame(adir / f"{r.frame + 1:05d}.pgm", bench.annotate(frame, r.box, st))
    print(f"tracked {len(frames)} frames, {report.failures} failed, wrote {out}")
    return 0


def cmd_eval(args, parser) -> int:
    gt = bench.GroundTruth.load(args.gt)
    cfg = _config_from(args)
    report = bench.run_benchmark(args.sequence, gt, cfg)
    print(f"mean_accuracy={report.mean_accuracy:.4f}")
    print(f"success_rate={report.success_rate:.4f}")
    print(f"median_ms={report.median_ms:.2f}")
    print(f"fps={report.fps:.1f}")
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out, timing=not args.no_timing)
    return 0


def cmd_synth(args, parser) -> int:
    if args.scenario:
        scenarios = [synth.read_scenario(p) for p in args.scenario]
    else:
        scenarios = synth.standard_suite()
    for sc in scenarios:
        print(synth.materialize(sc, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotrack", description="Concurrent inlier/outlier point-grid tracker.")
    sub = p.add_subparsers(dest="command", required=True)

    def tracker_opts(sp):
        sp.add_argument("--variant", choices=VARIANTS,
                        help="feature set (default: the config file's variant, else cot-mr)")
        sp.add_argument("--config", help="flat key = value file of tracker settings")
        sp.add_argument("--seed", type=int, help="RANSAC seed (overrides rng_seed)")

    t = sub.add_parser("track", help="track a frame directory and write per-frame boxes")
    t.add_argument("sequence", help="directory of PGM/PNG frames")
    t.add_argument("--init", type=_parse_box, help="initial box x,y,w,h")
    t.add_argument("--gt", help="ground-truth file; frame 0 gives the initial box")
    t.add_argument("--out", required=True, help="output CSV")
    t.add_argument("--annotate", help="directory for annotated PGM frames")
    tracker_opts(t)
    t.set_defaults(func=cmd_track, subparser=t)

    e = sub.add_parser("eval", help="track against ground truth and report metrics")
    e.add_argument("sequence")
    e.add_argument("--gt", required=True)
    e.add_argument("--report", help="per-frame report CSV")
    e.add_argument("--no-timing", action="store_true", help="omit the ms column from the report")
    tracker_opts(e)
    e.set_defaults(func=cmd_eval, subparser=e)

    s = sub.add_parser("synth", help="render synthetic sequences with ground truth")
    s.add_argument("out", help="output directory")
    s.add_argument("--scenario", action="append", help="scenario file (repeatable); default is the standard suite")
    s.set_defaults(func=cmd_synth, subparser=s)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.subparser)
    except (bench.GroundTruthError, ConfigError, synth.ScenarioError, FrameFormatError, InitError,
            FileNotFoundError, ValueError) as exc:
        print(f"cotrack {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
