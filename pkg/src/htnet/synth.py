"""Synthetic micro-expression corpus with class-specific regional motion.

Each subject gets a smooth random face texture and jittered landmarks.
Every sample warps that texture with a displacement field built from
Gaussian bumps at the eye and lip-corner landmarks; the bump directions
depend on the class, and the amplitude ramps up to the apex frame and back
down to the offset frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .features.composite import REGIONS, LandmarkSet, build_composite
from .features.farneback import FlowField
from .features.imaging import save_gray
from .features.strain import compute_strain
from .manifest import NEGATIVE, POSITIVE, SURPRISE, Sample, SampleManifest, write_manifest

FRAME_SIZE = 64
BASE_LANDMARKS = {
    "left_eye": (20.0, 22.0),
    "right_eye": (44.0, 22.0),
    "left_lip": (23.0, 46.0),
    "right_lip": (41.0, 46.0),
}
BUMP_SIGMA = 5.0

# peak (dx, dy) per region; x points right, y points down.
# Lip-corner dx is given for the left corner and mirrored for the right.
SIGNATURES = {
    NEGATIVE: {"eye": (0.6, 1.4), "lip": (0.3, 1.2)},
    POSITIVE: {"eye": (0.0, -0.3), "lip": (-1.4, -1.4)},
    SURPRISE: {"eye": (0.0, -1.8), "lip": (0.0, 0.9)},
}
RAW_LABELS = {
    NEGATIVE: ("disgust", "repression", "sadness", "anger", "fear", "contempt"),
    POSITIVE: ("happiness",),
    SURPRISE: ("surprise",),
}


@dataclass(frozen=True)
class SynthOptions:
    subjects: int = 12
    per_class: int = 3
    size: int = FRAME_SIZE
    seed: int = 0
    # every n-th subject leaves the apex column empty so it gets spotted
    spot_every: int = 3
    noise: float = 0.6


def _region_vectors(label: int, scale: float, rng: np.random.Generator) -> dict:
    sig = SIGNATURES[label]
    out = {}
    for region in REGIONS:
        kind = "eye" if region.endswith("eye") else "lip"
        dx, dy = sig[kind]
        # eyes move toward the face midline, lip corners mirror across it
        if region.startswith("right"):
            dx = -dx
        jitter = rng.normal(scale=0.1, size=2)
        out[region] = (scale * dx + jitter[0], scale * dy + jitter[1])
    return out


def displacement_field(
    landmarks: LandmarkSet, vectors: dict, size: int, sigma: float = BUMP_SIGMA
) -> FlowField:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = np.zeros((size, size))
    v = np.zeros((size, size))
    for region, (x0, y0) in landmarks.points().items():
        bump = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * sigma * sigma))
        dx, dy = vectors[region]
        u += dx * bump
        v += dy * bump
    return FlowField(u, v)


def face_texture(landmarks: LandmarkSet, size: int, rng: np.random.Generator) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.5, mode="wrap")
    tex = 128.0 + 30.0 * tex / tex.std()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for region, (x0, y0) in landmarks.points().items():
        depth = 45.0 if region.endswith("eye") else 30.0
        tex -= depth * np.exp(-((xx - x0) ** 2 / 18.0 + (yy - y0) ** 2 / 6.0))
    return tex


def _warp(image: np.ndarray, flow: FlowField) -> np.ndarray:
    # content moves by d: I_t(x) = I_0(x - d(x))
    size = image.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    coords = np.stack([yy - flow.v, xx - flow.u])
    return ndimage.map_coordinates(image, coords, order=3, mode="nearest")


def subject_landmarks(rng: np.random.Generator, size: int) -> LandmarkSet:
    scale = size / FRAME_SIZE
    pts = {
        k: (x * scale + rng.uniform(-2, 2), y * scale + rng.uniform(-2, 2))
        for k, (x, y) in BASE_LANDMARKS.items()
    }
    return LandmarkSet(**pts)


def make_synth(out_dir: str | Path, opts: SynthOptions = SynthOptions()) -> Path:
    """Write frames, landmark files and ``manifest.csv``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(opts.seed)
    entries: list[Sample] = []
    for s in range(opts.subjects):
        subject = f"s{s:02d}"
        landmarks = subject_landmarks(rng, opts.size)
        texture = face_texture(landmarks, opts.size, rng)
        lm_rel = f"{subject}/landmarks.json"
        (out_dir / subject).mkdir(exist_ok=True)
        (out_dir / lm_rel).write_text(json.dumps(landmarks.to_dict()))
        blank_apex = opts.spot_every > 0 and s % opts.spot_every == 0
        for label in (NEGATIVE, POSITIVE, SURPRISE):
            for k in range(opts.per_class):
                sample_id = f"{subject}_c{label}_{k}"
                n_frames = int(rng.integers(7, 11))
                apex = int(rng.integers(2, n_frames - 2))
                vectors = _region_vectors(label, rng.uniform(0.8, 1.25), rng)
                peak = displacement_field(landmarks, vectors, opts.size)
                frames_rel = f"{subject}/{sample_id}"
                frame_dir = out_dir / frames_rel
                frame_dir.mkdir(exist_ok=True)
                for t in range(n_frames):
                    ramp = t / apex if t <= apex else (n_frames - 1 - t) / (n_frames - 1 - apex)
                    frame = _warp(texture, FlowField(peak.u * ramp, peak.v * ramp))
                    frame = frame + rng.normal(scale=opts.noise, size=frame.shape)
                    save_gray(frame_dir / f"{t:03d}.png", np.clip(np.rint(frame), 0, 255))
                raw = RAW_LABELS[label][k % len(RAW_LABELS[label])]
                entries.append(
                    Sample(
                        sample_id=sample_id,
                        subject_id=subject,
                        dataset="SYNTH",
                        frames_dir=frames_rel,
                        onset=0,
                        apex=None if blank_apex else apex,
                        offset=n_frames - 1,
                        raw_label=raw,
                        label=label,
                        landmarks_path=lm_rel,
                    )
                )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(SampleManifest(entries, out_dir), manifest_path)
    return manifest_path


def separable_composites(
    n: int, seed: int = 0, size: int = FRAME_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` composite maps built straight from the class displacement fields.

    Skips frame rendering and flow estimation; classes cycle 0, 1, 2.
    """
    rng = np.random.default_rng(seed)
    maps = []
    labels = np.arange(n) % 3
    for label in labels:
        landmarks = subject_landmarks(rng, size)
        flow = displacement_field(
            landmarks, _region_vectors(int(label), rng.uniform(0.8, 1.25), rng), size
        )
        maps.append(build_composite(flow, compute_strain(flow), landmarks).data)
    return np.stack(maps), labels
