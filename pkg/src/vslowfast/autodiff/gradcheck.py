"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], p: Tensor, index, eps: float) -> float:
    old = p.data[index]
    p.data[index] = old + eps
    hi = f().item()
    p.data[index] = old - eps
    lo = f().item()
    p.data[index] = old
    return (hi - lo) / (2.0 * eps)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative disagreement between backprop and central differences.

    For each parameter tensor the error is ``max|analytic - numeric|`` divided by
    the larger of the two gradients' max-abs values; the worst tensor is returned.
    ``max_entries`` limits how many coordinates per tensor are probed (chosen
    with ``rng``); by default every coordinate is checked.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
        idx = [np.unravel_index(i, p.shape) for i in flat]
        num = np.array([numeric_grad(f, p, i, eps) for i in idx])
        ana = np.array([a[i] for i in idx])
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
