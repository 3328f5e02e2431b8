"""Central finite-difference gradient checking.

The numerical side never touches the backward pass: it re-runs the forward
function with perturbed inputs, so it stays an independent oracle for the
closed-form gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing x in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(|a|, |n|, 1e-3), reduced with max.

    The 1e-3 floor turns the comparison absolute for near-zero gradients so
    finite-difference noise on dead entries cannot dominate.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare autograd gradients of scalar f() against finite differences.

    f must rebuild its graph from the .data of the given inputs on every
    call. Returns the worst relative error over all inputs.
    """
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    loss = f()
    loss.backward()
    analytic = [np.array(t.grad) for t in inputs]

    def forward_value() -> float:
        with no_grad():
            return float(f().data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numerical_gradient(forward_value, t.data, h=h)
        worst = max(worst, max_relative_error(a, n))
    return worst
