"""Dense optical flow by polynomial expansion (Farneback, 2003).

Each frame is locally approximated by a quadratic ``x^T A x + b^T x + c``
fitted with Gaussian-weighted least squares. For a displaced signal the
linear coefficients shift by ``-2 A d``, which gives a per-pixel equation
for ``d``; the equations are pooled over a Gaussian window and refined over
a coarse-to-fine pyramid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..tensor import ShapeError
from .imaging import resize_bilinear


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    pyr_scale: float = 0.5
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if not 0.0 < self.pyr_scale < 1.0:
            raise ValueError("pyr_scale must lie in (0, 1)")
        if self.winsize < 3 or self.poly_n < 1 or self.poly_sigma <= 0:
            raise ValueError("winsize >= 3, poly_n >= 1 and poly_sigma > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowField:
    """Per-pixel displacement; ``u`` along columns (x), ``v`` along rows (y)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


# ridge added to the pooled 2x2 determinant; keeps textureless areas at zero flow
_DET_EPS = 1e-3


def _poly_basis_filters(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return x, g


def _gram_inverse(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # basis order: 1, x, y, x^2, y^2, xy
    yy, xx = np.meshgrid(x, x, indexing="ij")
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy])
    B = basis.reshape(6, -1)
    G = (B * w.ravel()) @ B.T
    return np.linalg.inv(G)


def poly_expansion(image: np.ndarray, poly_n: int, poly_sigma: float):
    """Quadratic coefficients ``(A, b)`` per pixel: A is HxWx2x2, b is HxWx2."""
    img = np.asarray(image, dtype=np.float64)
    x, g = _poly_basis_filters(poly_n, poly_sigma)
    ginv = _gram_inverse(x, g)
    kernels = {0: g, 1: g * x, 2: g * x * x}

    def corr(ky: int, kx: int) -> np.ndarray:
        rows = ndimage.correlate1d(img, kernels[ky], axis=0, mode="nearest")
        return ndimage.correlate1d(rows, kernels[kx], axis=1, mode="nearest")

    # projections onto g*basis; (ky, kx) are powers of y and x
    proj = np.stack(
        [corr(0, 0), corr(0, 1), corr(1, 0), corr(0, 2), corr(2, 0), corr(1, 1)],
        axis=-1,
    )
    r = proj @ ginv.T
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * r[..., 5]
    b = r[..., 1:3].copy()
    return A, b


def _gaussian_window_sigma(winsize: int) -> float:
    return 0.3 * ((winsize - 1) * 0.5 - 1) + 0.8


def _sample(field: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    flat = field.reshape(field.shape[:2] + (-1,))
    out = np.empty_like(flat)
    coords = np.stack([rows, cols])
    for k in range(flat.shape[-1]):
        out[..., k] = ndimage.map_coordinates(
            flat[..., k], coords, order=1, mode="nearest"
        )
    return out.reshape(field.shape)


def _refine(A1, b1, A2, b2, flow: np.ndarray, params: FlowParams) -> np.ndarray:
    h, w = flow.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = _gaussian_window_sigma(params.winsize)
    radius = params.winsize // 2
    for _ in range(params.iterations):
        # flow[..., 0] is u (x / columns), flow[..., 1] is v (y / rows)
        rows = rr + flow[..., 1]
        cols = cc + flow[..., 0]
        A2w = _sample(A2, rows, cols)
        b2w = _sample(b2, rows, cols)
        A = 0.5 * (A1 + A2w)
        d = np.stack([flow[..., 0], flow[..., 1]], axis=-1)
        db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, d)
        G = np.einsum("...ki,...kj->...ij", A, A)
        hv = np.einsum("...ki,...k->...i", A, db)
        terms = [G[..., 0, 0], G[..., 0, 1], G[..., 1, 1], hv[..., 0], hv[..., 1]]
        g11, g12, g22, h1, h2 = (
            ndimage.gaussian_filter(t, sigma, mode="nearest", truncate=radius / sigma)
            for t in terms
        )
        det = g11 * g22 - g12 * g12 + _DET_EPS
        flow = np.stack(
            [(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det], axis=-1
        )
    return flow


def _pyramid_shapes(h: int, w: int, params: FlowParams) -> list[tuple[int, int]]:
    shapes = [(h, w)]
    min_side = 2 * params.poly_n + 1
    for k in range(1, params.levels):
        scale = params.pyr_scale**k
        nh, nw = int(round(h * scale)), int(round(w * scale))
        if min(nh, nw) < min_side:
            break
        shapes.append((nh, nw))
    return shapes


def _level_image(image: np.ndarray, shape: tuple[int, int], scale: float) -> np.ndarray:
    if shape == image.shape:
        return image
    sigma = (1.0 / scale - 1.0) * 0.5
    smoothed = ndimage.gaussian_filter(image, sigma, mode="nearest")
    return resize_bilinear(smoothed, *shape)


def compute_flow(
    onset: np.ndarray, apex: np.ndarray, params: FlowParams | None = None
) -> FlowField:
    """Dense flow from ``onset`` to ``apex`` so that apex(x + d) ~ onset(x)."""
    params = params or FlowParams()
    f0 = np.asarray(onset, dtype=np.float64)
    f1 = np.asarray(apex, dtype=np.float64)
    if f0.shape != f1.shape or f0.ndim != 2:
        raise ShapeError(
            f"compute_flow: frame shapes differ or are not 2-D: {f0.shape} vs {f1.shape}"
        )
    shapes = _pyramid_shapes(*f0.shape, params)
    flow = None
    for level in reversed(range(len(shapes))):
        shape = shapes[level]
        scale = params.pyr_scale**level
        i0 = _level_image(f0, shape, scale)
        i1 = _level_image(f1, shape, scale)
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            prev_h, prev_w = flow.shape[:2]
            up = resize_bilinear(flow, *shape)
            up[..., 0] *= shape[1] / prev_w
            up[..., 1] *= shape[0] / prev_h
            flow = up
        A1, b1 = poly_expansion(i0, params.poly_n, params.poly_sigma)
        A2, b2 = poly_expansion(i1, params.poly_n, params.poly_sigma)
        flow = _refine(A1, b1, A2, b2, flow, params)
    return FlowField(u=flow[..., 0], v=flow[..., 1])
