"""Onset/apex frames plus landmarks -> 28x28x3 composite flow map."""

from __future__ import annotations

import numpy as np

from .apex import (
    DEFAULT_BINS,
    FrameSequence,
    InsufficientSequenceError,
    Rect,
    histogram_correlation,
    landmark_rois,
    spot_apex,
)
from .composite import (
    CompositeFlowMap,
    FlowFormatError,
    LandmarkError,
    LandmarkSet,
    build_composite,
    load_landmarks,
    read_flow_file,
    write_flow_file,
)
from .farneback import FlowField, FlowParams, compute_flow
from .strain import compute_strain

__all__ = [
    "DEFAULT_BINS",
    "CompositeFlowMap",
    "FlowField",
    "FlowFormatError",
    "FlowParams",
    "FrameSequence",
    "InsufficientSequenceError",
    "LandmarkError",
    "LandmarkSet",
    "Rect",
    "build_composite",
    "compute_flow",
    "compute_strain",
    "extract_composite",
    "histogram_correlation",
    "landmark_rois",
    "load_landmarks",
    "read_flow_file",
    "spot_apex",
    "write_flow_file",
]


def extract_composite(
    onset: np.ndarray,
    apex: np.ndarray,
    landmarks: LandmarkSet,
    params: FlowParams | None = None,
    out_size: int = 28,
) -> tuple[CompositeFlowMap, FlowField, np.ndarray]:
    flow = compute_flow(onset, apex, params)
    strain = compute_strain(flow)
    return build_composite(flow, strain, landmarks, out_size), flow, strain
