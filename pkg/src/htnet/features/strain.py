"""Optical strain magnitude from first-order flow derivatives."""

from __future__ import annotations

import numpy as np

from .farneback import FlowField


def compute_strain(flow: FlowField) -> np.ndarray:
    """Per-pixel strain ``sqrt(ux^2 + vy^2 + (uy^2 + vx^2) / 2)``.

    Derivatives are central differences inside the field and one-sided at
    the borders.
    """
    if min(flow.shape) < 2:
        raise ValueError(f"strain needs a field of at least 2x2, got {flow.shape}")
    du_dy, du_dx = np.gradient(flow.u)
    dv_dy, dv_dx = np.gradient(flow.v)
    return np.sqrt(du_dx**2 + dv_dy**2 + 0.5 * (du_dy**2 + dv_dx**2))
