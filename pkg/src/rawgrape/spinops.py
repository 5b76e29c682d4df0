"""Spin-1/2 Liouville-space operators and piecewise-constant propagators.

Conventions used throughout the package:

* Spin operators are dimensionless angular momentum matrices with
  ``[S_X, S_Y] = i S_Z`` (Pauli matrices divided by two).
* Density-like 2x2 operators are vectorized row by row, so ``vec`` is a
  plain C-order reshape and the commutation superoperator of a
  Hamiltonian ``H`` is ``H (x) 1 - 1 (x) H^T``.  With this pairing
  ``commutation_superop(H) @ vec(rho) == vec(H @ rho - rho @ H)``.
* Evolution follows ``d/dt vec(rho) = -i L vec(rho)`` where the
  Liouvillian ``L`` collects the Hamiltonian commutator (rad/s) plus
  ``i R`` for an optional constant relaxation matrix ``R`` (1/s).  A
  slice of duration ``dt`` therefore propagates by ``exp(-i L dt)``.

All functions are pure and all returned arrays are freshly allocated;
nothing in this module holds mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NumericError, StructuralError

__all__ = [
    "SpinHalfOperators",
    "DriftSpec",
    "build_spin_half_ops",
    "vec",
    "unvec",
    "commutation_superop",
    "build_liouvillian",
    "expm",
    "propagator",
    "prop_deriv_action",
]

_IDENTITY2 = np.eye(2, dtype=complex)


class SpinHalfOperators(NamedTuple):
    """The three spin-1/2 operators and their commutation superoperators."""

    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    ad_sx: np.ndarray
    ad_sy: np.ndarray
    ad_sz: np.ndarray


def vec(operator: np.ndarray) -> np.ndarray:
    """Vectorize a square operator by stacking its rows."""
    operator = np.asarray(operator, dtype=complex)
    return operator.reshape(-1).copy()


def unvec(state: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec` for a length ``n*n`` state vector."""
    state = np.asarray(state, dtype=complex)
    n = math.isqrt(state.size)
    if n * n != state.size:
        raise StructuralError(f"state of length {state.size} is not a square operator")
    return state.reshape(n, n).copy()


def commutation_superop(hamiltonian: np.ndarray) -> np.ndarray:
    """Matrix representation of ``rho -> [H, rho]`` on vectorized operators."""
    h = np.asarray(hamiltonian, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise StructuralError(f"Hamiltonian must be square, got shape {h.shape}")
    eye = np.eye(h.shape[0], dtype=complex)
    return np.kron(h, eye) - np.kron(eye, h.T)


def build_spin_half_ops() -> SpinHalfOperators:
    """Build S_X, S_Y, S_Z and the corresponding commutation superoperators."""
    sx = 0.5 * np.array([[0, 1], [1, 0]], dtype=complex)
    sy = 0.5 * np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = 0.5 * np.array([[1, 0], [0, -1]], dtype=complex)
    return SpinHalfOperators(
        sx=sx,
        sy=sy,
        sz=sz,
        ad_sx=commutation_superop(sx),
        ad_sy=commutation_superop(sy),
        ad_sz=commutation_superop(sz),
    )


@dataclass(frozen=True)
class DriftSpec:
    """Uncontrollable part of the evolution generator.

    Parameters
    ----------
    offset:
        Resonance offset in the rotating frame, rad/s.  Enters the drift
        as ``offset * ad(S_Z)``.
    relaxation:
        Optional constant 4x4 real relaxation matrix R in 1/s, added to
        the Liouvillian as ``+ i R`` so that a slice contributes
        ``exp(R dt)`` to the evolution.  Supply a matrix with
        non-positive eigenvalues for decay; ``None`` means unitary
        evolution.
    """

    offset: float = 0.0
    relaxation: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        if not np.isfinite(self.offset):
            raise NumericError("drift offset must be finite")
        if self.relaxation is not None:
            r = np.asarray(self.relaxation, dtype=float)
            if r.shape != (4, 4):
                raise StructuralError(f"relaxation matrix must be 4x4, got {r.shape}")
            if not np.all(np.isfinite(r)):
                raise NumericError("relaxation matrix has non-finite entries")
            object.__setattr__(self, "relaxation", r)

    def superoperator(self) -> np.ndarray:
        """Drift superoperator ``offset * ad(S_Z) + i R``."""
        ops = build_spin_half_ops()
        drift = self.offset * ops.ad_sz
        if self.relaxation is not None:
            drift = drift + 1j * self.relaxation
        return drift


def build_liouvillian(
    drift: DriftSpec, controls: list[tuple[float, np.ndarray]]
) -> np.ndarray:
    """Assemble ``L = D + sum_k c_k C_k`` from a drift and control terms.

    ``controls`` is a list of ``(amplitude rad/s, superoperator)`` pairs.
    """
    liouvillian = drift.superoperator()
    for amplitude, op in controls:
        if not np.isfinite(amplitude):
            raise NumericError("control amplitude must be finite")
        op = np.asarray(op, dtype=complex)
        if op.shape != liouvillian.shape:
            raise StructuralError(
                f"control superoperator shape {op.shape} does not match "
                f"drift shape {liouvillian.shape}"
            )
        liouvillian = liouvillian + amplitude * op
    return liouvillian


# Truncated-Taylor scaling-and-squaring.  Order thresholds keep the
# series remainder below ~1e-16 at the scaled norm, so accuracy is set
# by roundoff and the squaring steps alone.
_EXPM_THETA = 0.25
_EXPM_ORDERS = ((0.015, 6), (0.06, 8), (0.15, 10), (_EXPM_THETA, 12))


def expm(matrices: np.ndarray) -> np.ndarray:
    """Matrix exponential of one matrix or a stack of matrices.

    Accepts an array of shape ``(..., n, n)`` and exponentiates the
    trailing square matrices.  The whole stack shares one scaling factor
    derived from the largest infinity norm, which keeps the evaluation
    deterministic across batch layouts.
    """
    a = np.asarray(matrices, dtype=complex)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise StructuralError(f"expected square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix exponential of non-finite input")

    norm = float(np.abs(a).sum(axis=-1).max()) if a.size else 0.0
    squarings = 0
    if norm > _EXPM_THETA:
        squarings = max(0, int(math.ceil(math.log2(norm / _EXPM_THETA))))
        norm /= 2.0**squarings
    scaled = a / (2.0**squarings) if squarings else a
    order = next(m for threshold, m in _EXPM_ORDERS if norm <= threshold)

    eye = np.eye(a.shape[-1], dtype=complex)
    result = eye + scaled / order
    for j in range(order - 1, 0, -1):
        result = eye + (scaled @ result) / j
    for _ in range(squarings):
        result = result @ result
    return result


def propagator(liouvillian: np.ndarray, dt: float) -> np.ndarray:
    """Slice propagator ``exp(-i L dt)`` for a piecewise-constant Liouvillian."""
    if not (dt > 0):
        raise NumericError(f"slice duration must be positive, got {dt}")
    liouvillian = np.asarray(liouvillian, dtype=complex)
    if not np.all(np.isfinite(liouvillian)):
        raise NumericError("Liouvillian has non-finite entries")
    return expm(-1j * dt * liouvillian)


def prop_deriv_action(
    a: np.ndarray, da: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Action of ``exp(A)`` and of its directional derivative on a vector.

    The derivative of ``exp(A)`` along the generator perturbation ``dA``
    is read off the top-right block of the exponential of the augmented
    matrix ``[[A, dA], [0, A]]``, so both actions come out of a single
    exponentiation::

        exp([[A, dA], [0, A]]) @ [0, x] = [d(exp(A)) x, exp(A) x]

    Returns ``(exp(A) @ x, [d exp(A)/d alpha] @ x)``.
    """
    a = np.asarray(a, dtype=complex)
    da = np.asarray(da, dtype=complex)
    x = np.asarray(x, dtype=complex)
    if a.shape != da.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError(
            f"generator and perturbation must be same-size square matrices, "
            f"got {a.shape} and {da.shape}"
        )
    n = a.shape[0]
    if x.shape[0] != n:
        raise StructuralError(f"state length {x.shape[0]} does not match generator size {n}")

    augmented = np.zeros((2 * n, 2 * n), dtype=complex)
    augmented[:n, :n] = a
    augmented[:n, n:] = da
    augmented[n:, n:] = a
    block = expm(augmented)
    return block[n:, n:] @ x, block[:n, n:] @ x
