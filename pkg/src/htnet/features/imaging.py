"""Image I/O and resampling helpers shared by the feature pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FRAME_SUFFIXES = (".png", ".pgm")


def load_gray(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM as a ``uint8`` array (H x W)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


def save_gray(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def list_frames(frames_dir: str | Path) -> list[Path]:
    """Frame files of a directory in lexicographic filename order."""
    frames_dir = Path(frames_dir)
    return sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES
    )


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``H x W`` or ``H x W x C`` array (float64 out)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy
