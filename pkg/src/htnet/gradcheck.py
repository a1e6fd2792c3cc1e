"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, kink_trace


@dataclass
class ProbeResult:
    name: str
    index: tuple[int, ...]
    autodiff: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.autodiff), abs(self.numeric))
        if scale == 0.0:
            return 0.0
        return abs(self.autodiff - self.numeric) / scale


@dataclass
class GradCheckReport:
    probes: list[ProbeResult]
    # probes discarded because the +/-h stencil changed a ReLU/max-pool branch
    rejected: int

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    n_probes: int = 50,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_attempts: int | None = None,
) -> GradCheckReport:
    """Compare autodiff with central differences at randomly drawn coordinates.

    A parameter tensor is drawn uniformly, then a coordinate inside it, so
    small tensors (norm scales, biases) are probed as often as big ones.
    A probe whose stencil crosses a non-differentiable branch point is
    redrawn, since the finite difference is not an estimate of the
    derivative there.
    """
    rng = rng or np.random.default_rng(0)
    max_attempts = max_attempts or 10 * n_probes
    names = list(params)

    for p in params.values():
        p.grad = None
    with kink_trace() as base_pattern:
        loss = loss_fn()
    loss.backward()
    grads = {
        k: params[k].grad.copy() if params[k].grad is not None else np.zeros(params[k].shape)
        for k in names
    }

    probes: list[ProbeResult] = []
    rejected = 0
    attempts = 0
    while len(probes) < n_probes and attempts < max_attempts:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        tensor = params[name]
        idx = tuple(int(rng.integers(s)) for s in tensor.shape)
        old = tensor.data[idx]
        try:
            tensor.data[idx] = old + h
            with kink_trace() as plus_pattern:
                plus = loss_fn().item()
            tensor.data[idx] = old - h
            with kink_trace() as minus_pattern:
                minus = loss_fn().item()
        finally:
            tensor.data[idx] = old
        if not (
            _same_branches(plus_pattern, base_pattern)
            and _same_branches(minus_pattern, base_pattern)
        ):
            rejected += 1
            continue
        probes.append(ProbeResult(name, idx, float(grads[name][idx]), (plus - minus) / (2 * h)))
    return GradCheckReport(probes, rejected)
