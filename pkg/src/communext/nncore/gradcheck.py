"""Central finite-difference gradient checking (float64)."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = float(f())
        arr[i] = old - h
        fm = float(f())
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a| + |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def check_gradients(loss_fn, tensors, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite differences.

    ``loss_fn`` rebuilds the graph from the current tensor data and returns a
    scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.array(t.grad) for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        gn = numeric_grad(lambda: loss_fn().data, t.data, h)
        worst = max(worst, rel_error(ga, gn))
    return worst
