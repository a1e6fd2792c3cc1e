"""Apex frame spotting by ROI histogram correlation against the onset frame."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_BINS = 16


class InsufficientSequenceError(ValueError):
    """The onset..offset span holds no candidate frame."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned region: columns ``x0:x1``, rows ``y0:y1`` (half-open)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0 : self.y1, self.x0 : self.x1]

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(f"ROI {self} does not lie inside a {height}x{width} frame")


@dataclass
class FrameSequence:
    frames: list[np.ndarray]
    onset_index: int
    offset_index: int
    apex_index: int | None = None

    def __post_init__(self):
        n = len(self.frames)
        if not 0 <= self.onset_index <= self.offset_index < n:
            raise ValueError(
                f"need 0 <= onset ({self.onset_index}) <= offset "
                f"({self.offset_index}) < {n} frames"
            )
        if self.apex_index is not None and not (
            self.onset_index <= self.apex_index <= self.offset_index
        ):
            raise ValueError(f"apex {self.apex_index} outside onset..offset")
        shapes = {np.shape(f) for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames differ in resolution: {sorted(shapes)}")


def roi_histogram(image: np.ndarray, roi: Rect, bins: int = DEFAULT_BINS) -> np.ndarray:
    hist, _ = np.histogram(roi.crop(image), bins=bins, range=(0.0, 256.0))
    return hist.astype(np.float64)


def histogram_correlation(h1: np.ndarray, h2: np.ndarray) -> float:
    """Normalised correlation ``sum(h1*h2) / sqrt(sum(h1^2) * sum(h2^2))``."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    denom = np.sqrt(np.dot(h1, h1) * np.dot(h2, h2))
    if denom == 0.0:
        # two empty histograms are trivially alike
        return 1.0
    return float(np.dot(h1, h2) / denom)


def spot_scores(
    seq: FrameSequence, rois: Sequence[Rect], bins: int = DEFAULT_BINS
) -> dict[int, float]:
    """Summed ROI correlation with the onset frame for every candidate index."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if seq.offset_index - seq.onset_index < 1:
        raise InsufficientSequenceError(
            f"onset {seq.onset_index} and offset {seq.offset_index} leave no candidate frame"
        )
    if not rois:
        raise ValueError("at least one ROI is required")
    onset = seq.frames[seq.onset_index]
    for roi in rois:
        roi.validate(*np.shape(onset))
    ref = [roi_histogram(onset, r, bins) for r in rois]
    scores = {}
    for i in range(seq.onset_index + 1, seq.offset_index + 1):
        frame = seq.frames[i]
        scores[i] = sum(
            histogram_correlation(h1, roi_histogram(frame, r, bins))
            for h1, r in zip(ref, rois)
        )
    return scores


def spot_apex(
    seq: FrameSequence, rois: Sequence[Rect], bins: int = DEFAULT_BINS
) -> int:
    """Index of the frame least correlated with the onset; earliest wins ties."""
    scores = spot_scores(seq, rois, bins)
    best = min(scores.values())
    return min(i for i, s in scores.items() if s == best)


def landmark_rois(
    points: Sequence[tuple[float, float]], half_size: int, height: int, width: int
) -> list[Rect]:
    """Square ROIs centred on landmark points, clipped to the frame."""
    rois = []
    for x, y in points:
        cx, cy = int(round(x)), int(round(y))
        rois.append(
            Rect(
                max(cx - half_size, 0),
                max(cy - half_size, 0),
                min(cx + half_size + 1, width),
                min(cy + half_size + 1, height),
            )
        )
    return rois
