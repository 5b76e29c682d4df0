"""Shared oracles and helpers for the test suite.

Oracles here are deliberately written as brute-force alternatives to the
library code paths they check: dense Toeplitz matrices, high-order Taylor
exponentials, and plain central finite differences.
"""

import numpy as np
import pytest


def taylor_expm_oracle(a: np.ndarray, terms: int = 40) -> np.ndarray:
    """Scaling-and-squaring exponential with a long explicit Taylor sum."""
    a = np.asarray(a, dtype=complex)
    norm = float(np.abs(a).sum(axis=-1).max()) if a.size else 0.0
    squarings = 0
    while norm > 0.05:
        norm /= 2.0
        squarings += 1
    scaled = a / (2.0**squarings)
    out = np.eye(a.shape[-1], dtype=complex)
    term = np.eye(a.shape[-1], dtype=complex)
    for j in range(1, terms + 1):
        term = term @ scaled / j
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def dense_spf_matrix(p: complex, n: int) -> np.ndarray:
    """Lower-triangular Toeplitz Jacobian of the single-pole recursion."""
    h = np.zeros((n, n), dtype=complex)
    for row in range(n):
        for col in range(row + 1):
            h[row, col] = (1.0 - p) * p ** (row - col)
    return h


def dense_szf_matrix(z: complex, n: int) -> np.ndarray:
    """Lower-triangular two-tap Toeplitz Jacobian of the single-zero filter."""
    h = np.zeros((n, n), dtype=complex)
    for row in range(n):
        h[row, row] = 1.0 / (1.0 - z)
        if row > 0:
            h[row, row - 1] = -z / (1.0 - z)
    return h


def dense_fir_matrix(taps: np.ndarray, n: int, dt: float) -> np.ndarray:
    """Lower-triangular Toeplitz matrix of a causal FIR kernel (carries dt)."""
    taps = np.asarray(taps, dtype=complex)
    h = np.zeros((n, n), dtype=complex)
    for row in range(n):
        for col in range(row + 1):
            if row - col < taps.size:
                h[row, col] = taps[row - col] * dt
    return h


def central_difference(func, x: np.ndarray, step: float) -> np.ndarray:
    """Dense central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = x.copy()
        plus[idx] += step
        minus = x.copy()
        minus[idx] -= step
        grad[idx] = (func(plus) - func(minus)) / (2.0 * step)
        it.iternext()
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(20250810)
