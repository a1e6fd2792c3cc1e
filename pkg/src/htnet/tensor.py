"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive used by the model lives here. A tensor keeps
its parents and a closure that pushes the output gradient back to them;
:meth:`Tensor.backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Window/stride/padding produce an empty output."""


_KINKS: contextvars.ContextVar[list | None] = contextvars.ContextVar("kinks", default=None)


@contextlib.contextmanager
def kink_trace() -> Iterator[list[np.ndarray]]:
    """Collect the branch pattern (ReLU masks, max-pool argmaxes) of a forward pass.

    Two passes with equal patterns lie on the same smooth piece of the
    function, which is what a finite-difference stencil needs.
    """
    log: list[np.ndarray] = []
    token = _KINKS.set(log)
    try:
        yield log
    finally:
        _KINKS.reset(token)


def _note_branch(pattern: np.ndarray) -> None:
    log = _KINKS.get()
    if log is not None:
        log.append(pattern)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other) -> Tensor:
        return Tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(src),)
        )

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx) -> Tensor:
        src_shape = self.shape

        def back(g):
            full = np.zeros(src_shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        src_shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        out = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size / max(out.data.size, 1)
        return out * (1.0 / count)

    # -- pointwise nonlinearities ----------------------------------------

    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> Tensor:
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def relu(self) -> Tensor:
        mask = self.data > 0
        _note_branch(mask)
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like :func:`numpy.matmul`."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        else:
            gb = None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), back)


def concatenate(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back
    )


def relu(x: Tensor) -> Tensor:
    return x.relu()


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: feature size {d} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv_std * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), back)


def _window_geometry(h: int, w: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (w + 2 * padding - 3) // stride + 1
    if h + 2 * padding < 3 or w + 2 * padding < 3 or ho < 1 or wo < 1:
        raise GeometryError(
            f"3x3 window on {h}x{w} with stride {stride}, padding {padding} "
            "yields an empty output"
        )
    return ho, wo


def _taps(xp: np.ndarray, ho: int, wo: int, stride: int):
    """Yield (ky, kx, strided view) for the nine taps of a 3x3 window, row-major."""
    for ky in range(3):
        for kx in range(3):
            yield ky, kx, xp[
                ...,
                ky : ky + stride * (ho - 1) + 1 : stride,
                kx : kx + stride * (wo - 1) + 1 : stride,
            ]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d_3x3(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1
) -> Tensor:
    """3x3 cross-correlation over ``C x H x W`` (or batched ``N x C x H x W``)."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"conv2d_3x3: weight {weight.shape} vs input channels {c}")
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} vs {cout} output channels")
    ho, wo = _window_geometry(h, w, stride, padding)
    p = padding
    xp = np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # columns: N x (C*9) x (Ho*Wo), channel-major then ky, kx to match weight layout
    cols = np.empty((n, c, 9, ho, wo))
    for ky, kx, view in _taps(xp, ho, wo, stride):
        cols[:, :, ky * 3 + kx] = view
    cols = cols.reshape(n, c * 9, ho * wo)
    wmat = weight.data.reshape(cout, c * 9)
    out = (wmat @ cols + bias.data[:, None]).reshape(n, cout, ho, wo)

    def back(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if xb.requires_grad:
            gcols = (wmat.T @ g2).reshape(n, c, 9, ho, wo)
            gxp = np.zeros_like(xp)
            for ky, kx, view in _taps(gxp, ho, wo, stride):
                view += gcols[:, :, ky * 3 + kx]
            gx = gxp[:, :, p : p + h, p : p + w]
        return gx, gw, gb

    out_t = Tensor._make(out, (xb, weight, bias), back)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


def maxpool2d_3x3(x: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """3x3 max pooling; the gradient goes to the first maximal tap (row-major)."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    ho, wo = _window_geometry(h, w, stride, padding)
    p = padding
    xp = np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    stacked = np.stack([view for _, _, view in _taps(xp, ho, wo, stride)], axis=0)
    arg = stacked.argmax(axis=0)
    _note_branch(arg)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def back(g):
        gxp = np.zeros_like(xp)
        for ky, kx, view in _taps(gxp, ho, wo, stride):
            view += np.where(arg == ky * 3 + kx, g, 0.0)
        return (gxp[:, :, p : p + h, p : p + w],)

    out_t = Tensor._make(out, (xb,), back)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


def parameters_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.data * p.data).sum()) for p in params)))
