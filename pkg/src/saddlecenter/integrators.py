"""Gauss-Legendre collocation, the symplectic one-step methods used throughout.

An s-stage Gauss method has order 2s, is symplectic and symmetric, and
preserves quadratic invariants exactly.  Stage equations are solved by
fixed-point (Picard) iteration, which converges for ``h * Lip(f)`` small.
The step works on batches of states and is complex-safe.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np

VectorField = Callable[[float, np.ndarray], np.ndarray]


class ConvergenceError(RuntimeError):
    """Stage iteration failed to contract."""


@lru_cache(maxsize=None)
def gauss_tableau(stages: int):
    """Butcher tableau ``(A, b, c)`` of the Gauss-Legendre method."""
    nodes, weights = np.polynomial.legendre.leggauss(stages)
    c = (nodes + 1) / 2
    b = weights / 2
    # A_ij = int_0^{c_i} l_j(t) dt with l_j the Lagrange basis on the nodes
    A = np.zeros((stages, stages))
    for j in range(stages):
        others = np.delete(c, j)
        poly = np.poly1d([1.0])
        for m in others:
            poly = poly * np.poly1d([1.0, -m]) / (c[j] - m)
        integ = poly.integ()
        A[:, j] = integ(c) - integ(0.0)
    return A, b, c


def gauss_step(
    f: VectorField,
    t: float,
    y: np.ndarray,
    h: float,
    stages: int = 3,
    tol: float = 1e-13,
    max_iter: int = 50,
) -> np.ndarray:
    """One Gauss-Legendre step for a batch of states ``y`` (shape (..., n)).

    ``h`` is a scalar or an array of per-state step lengths (shape ``y.shape[:-1]``).
    """
    A, b, c = gauss_tableau(stages)
    h_arr = np.asarray(h, dtype=float)
    # per-point step lengths broadcast over the state dimension
    hh = h_arr[..., None] if h_arr.ndim else h_arr
    habs = float(np.max(np.abs(h_arr))) if h_arr.size else 0.0
    f0 = f(t, y)
    K = np.stack([f0] * stages, axis=0)
    scale = 1.0 + np.max(np.abs(y)) if y.size else 1.0
    for _ in range(max_iter):
        Y = y[None, ...] + hh * np.tensordot(A, K, axes=(1, 0))
        K_new = np.stack([f(t + c[i] * h_arr, Y[i]) for i in range(stages)], axis=0)
        delta = habs * np.max(np.abs(K_new - K)) if K.size else 0.0
        K = K_new
        if delta <= tol * scale:
            break
    else:
        raise ConvergenceError(f"stage iteration did not contract (last update {delta:.3e})")
    return y + hh * np.tensordot(b, K, axes=(0, 0))


def integrate_fixed(
    f: VectorField,
    y0: np.ndarray,
    t0: float,
    t1: float,
    h: float,
    stages: int = 3,
    tol: float = 1e-13,
    callback: Callable[[float, np.ndarray], bool] | None = None,
) -> tuple[float, np.ndarray]:
    """Fixed-step integration from t0 to t1 (the last step is shortened to land on t1).

    ``callback(t, y)`` is called after each step; returning True stops early.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    span = t1 - t0
    n = max(1, int(np.ceil(abs(span) / h - 1e-12)))
    step = span / n
    y = np.asarray(y0)
    t = t0
    for k in range(n):
        y = gauss_step(f, t, y, step, stages=stages, tol=tol)
        t = t0 + (k + 1) * step
        if callback is not None and callback(t, y):
            break
    return t, y
