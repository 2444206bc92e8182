"""Finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from flatlat.errors import ContractError, NumericError
from flatlat.nd.tensor import Tensor


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.size != 1:
        raise ContractError("checked function must return a scalar Tensor")
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("checked function returned a non-finite value")
    return v


def grad_check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
) -> float:
    """Max relative error of d loss / d tensors against central differences.

    `loss_fn` must rebuild the graph from the current contents of `tensors`.
    With `max_coords`, only the first coordinates of each tensor are checked.
    """
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        count = flat.size if max_coords is None else min(flat.size, max_coords)
        for i in range(count):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(loss_fn())
            flat[i] = orig - h
            down = _scalar(loss_fn())
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """grad_check_tensors for a function of a single tensor."""
    return grad_check_tensors(lambda: f(point), [point], h)
