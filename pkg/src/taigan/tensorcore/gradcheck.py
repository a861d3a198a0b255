"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor, backward, get_tape, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    The relative error of an entry is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = get_tape()
    n_before = len(tape)
    xt = Tensor(base, requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    backward(y)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.copy()
    del tape.nodes[n_before:]

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(base)).item()
            flat[i] = old - h
            fm = f(Tensor(base)).item()
            flat[i] = old
            num_flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(err.max())
