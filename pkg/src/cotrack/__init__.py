"""Concurrent inlier/outlier grid tracker with restoration and drift compensation."""
from .bench import GroundTruth, TrackReport, overlap, run_benchmark, success_rate
from .cotracker import CoTracker, GridStates, PointState, Status, StepOutcome, TrackerConfig, TrackerState, Variant, init, step
from .geom import OrientedBox, SimilarityTransform, estimate_similarity, ransac_similarity
from .imgcore import GrayImage, build_pyramid, load_frame, load_sequence
from .lkflow import FlowParams, track_with_fb

__all__ = [
    "CoTracker", "FlowParams", "GrayImage", "GridStates", "GroundTruth", "OrientedBox", "PointState",
    "SimilarityTransform", "Status", "StepOutcome", "TrackReport", "TrackerConfig", "TrackerState", "Variant",
    "build_pyramid", "estimate_similarity", "init", "load_frame", "load_sequence", "overlap", "ransac_similarity",
    "run_benchmark", "step", "success_rate", "track_with_fb",
]
