"""Four-region composite flow map and its on-disk format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import ShapeError
from .farneback import FlowField
from .imaging import resize_bilinear

REGIONS = ("left_eye", "right_eye", "left_lip", "right_lip")

# layout code -> region placed at (top-left, top-right, bottom-left, bottom-right)
LAYOUTS = {0: REGIONS}

MAGIC = b"HTFM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


class LandmarkError(ValueError):
    pass


class FlowFormatError(ValueError):
    """Malformed flow-map file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LandmarkSet:
    left_eye: tuple[float, float]
    right_eye: tuple[float, float]
    left_lip: tuple[float, float]
    right_lip: tuple[float, float]

    def points(self) -> dict[str, tuple[float, float]]:
        return {name: getattr(self, name) for name in REGIONS}

    def validate(self, height: int, width: int) -> None:
        for name, (x, y) in self.points().items():
            if not (0 <= x < width and 0 <= y < height):
                raise LandmarkError(
                    f"landmark {name}=({x}, {y}) outside {width}x{height} frame"
                )

    def scaled(self, sx: float, sy: float) -> LandmarkSet:
        return LandmarkSet(**{k: (x * sx, y * sy) for k, (x, y) in self.points().items()})

    @classmethod
    def from_dict(cls, obj: dict) -> LandmarkSet:
        try:
            return cls(**{name: tuple(float(c) for c in obj[name]) for name in REGIONS})
        except (KeyError, TypeError, ValueError) as exc:
            raise LandmarkError(f"bad landmark record: {exc}") from exc

    def to_dict(self) -> dict:
        return {k: [float(x), float(y)] for k, (x, y) in self.points().items()}


def load_landmarks(path: str | Path) -> LandmarkSet:
    with open(path) as fh:
        return LandmarkSet.from_dict(json.load(fh))


def save_landmarks(path: str | Path, landmarks: LandmarkSet) -> None:
    with open(path, "w") as fh:
        json.dump(landmarks.to_dict(), fh)


@dataclass
class CompositeFlowMap:
    """``out x out x 3`` array of [u, v, strain] built from four region crops."""

    data: np.ndarray
    layout: int = 0
    # crop origin (row, col) in the resized map for each region; not persisted
    origins: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"composite must be H x W x 3, got {self.data.shape}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout code {self.layout}")

    def quadrant(self, region: str) -> np.ndarray:
        h, w = self.data.shape[:2]
        slot = LAYOUTS[self.layout].index(region)
        r, c = divmod(slot, 2)
        return self.data[r * h // 2 : (r + 1) * h // 2, c * w // 2 : (c + 1) * w // 2]

    @property
    def placement(self) -> dict[str, str]:
        slots = ("top-left", "top-right", "bottom-left", "bottom-right")
        return dict(zip(LAYOUTS[self.layout], slots))


def _crop_start(center: float, crop: int, size: int) -> int:
    start = int(np.floor(center - (crop - 1) / 2.0 + 0.5))
    return min(max(start, 0), size - crop)


def build_composite(
    flow: FlowField,
    strain: np.ndarray,
    landmarks: LandmarkSet,
    out_size: int = 28,
) -> CompositeFlowMap:
    """Resize [u, v, strain] to ``out_size`` and tile four landmark crops.

    Landmarks are pixel coordinates of the flow field. Flow channels are
    rescaled to displacement at the output resolution.
    """
    h, w = flow.shape
    if strain.shape != (h, w):
        raise ShapeError(f"strain {strain.shape} does not match flow {flow.shape}")
    if out_size % 2:
        raise ValueError("out_size must be even")
    landmarks.validate(h, w)
    stacked = np.stack([flow.u * (out_size / w), flow.v * (out_size / h), strain], axis=-1)
    vm = resize_bilinear(stacked, out_size, out_size)
    crop = out_size // 2
    out = np.empty((out_size, out_size, 3))
    origins = {}
    for slot, region in enumerate(LAYOUTS[0]):
        x, y = getattr(landmarks, region)
        cx = (x + 0.5) * out_size / w - 0.5
        cy = (y + 0.5) * out_size / h - 0.5
        r0 = _crop_start(cy, crop, out_size)
        c0 = _crop_start(cx, crop, out_size)
        origins[region] = (r0, c0)
        qr, qc = divmod(slot, 2)
        out[qr * crop : (qr + 1) * crop, qc * crop : (qc + 1) * crop] = vm[
            r0 : r0 + crop, c0 : c0 + crop
        ]
    return CompositeFlowMap(out, layout=0, origins=origins)


def flow_file_bytes(fmap: CompositeFlowMap) -> bytes:
    h, w, c = fmap.data.shape
    header = _HEADER.pack(MAGIC, VERSION, h, w, c, fmap.layout)
    return header + np.ascontiguousarray(fmap.data, dtype="<f8").tobytes()


def write_flow_file(fmap: CompositeFlowMap, path: str | Path) -> None:
    Path(path).write_bytes(flow_file_bytes(fmap))


def parse_flow_bytes(raw: bytes) -> CompositeFlowMap:
    if len(raw) < _HEADER.size:
        raise FlowFormatError(
            f"header needs {_HEADER.size} bytes, file has {len(raw)}", len(raw)
        )
    magic, version, h, w, c, layout = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FlowFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FlowFormatError(f"unsupported version {version}", 4)
    if c != 3:
        raise FlowFormatError(f"expected 3 channels, got {c}", 16)
    if h == 0 or w == 0:
        raise FlowFormatError(f"empty dimensions {h}x{w}", 8)
    if layout not in LAYOUTS:
        raise FlowFormatError(f"unknown layout code {layout}", 20)
    expected = h * w * c * 8
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        where = _HEADER.size + min(len(payload), expected)
        kind = "truncated" if len(payload) < expected else "trailing bytes in"
        raise FlowFormatError(
            f"{kind} payload: {len(payload)} of {expected} bytes for {h}x{w}x{c}", where
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(h, w, c).astype(np.float64)
    return CompositeFlowMap(data, layout=layout)


def read_flow_file(path: str | Path) -> CompositeFlowMap:
    return parse_flow_bytes(Path(path).read_bytes())
