"""Ensemble-averaged, distortion-aware fidelity and its exact gradient.

The figure of merit is the phase-sensitive overlap

    fidelity = Re <delta | P_N ... P_1 | rho> / (|delta| |rho|),

averaged uniformly over the transfer pairs and, with weights, over the
ensemble of (drift, power scale, distortion cascade) members.  Each
member first distorts the control waveform through its cascade; the
gradient with respect to the raw controls chains the propagator
derivatives through the cascade vector-Jacobian products, exactly as in
backpropagation.

Per slice and channel the propagator derivative acts through the
augmented-matrix exponential (see :func:`rawgrape.spinops.prop_deriv_action`);
the ensemble code evaluates the same construction batched over members,
which keeps results identical to the scalar operations up to roundoff.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EngineError, StructuralError
from .filters import Cascade, ControlSequence, cascade_apply, cascade_vjp
from .spinops import DriftSpec, build_spin_half_ops, expm, vec

__all__ = [
    "TransferSet",
    "ControlProblem",
    "EnsembleMember",
    "FidelityReport",
    "transfer_preset",
    "pair_fidelity",
    "pair_gradient",
    "ensemble_objective",
]


@dataclass(frozen=True)
class TransferSet:
    """Source/target state pairs defining the transfer problem.

    One pair is a state-to-state problem, several pairs a
    subspace-to-subspace problem, and a complete basis of pairs a gate
    design problem.
    """

    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        if len(self.pairs) < 1:
            raise StructuralError("transfer set needs at least one (source, target) pair")
        frozen = []
        for i, (rho, delta) in enumerate(self.pairs):
            rho = np.asarray(rho, dtype=complex).reshape(-1).copy()
            delta = np.asarray(delta, dtype=complex).reshape(-1).copy()
            if np.linalg.norm(rho) == 0 or np.linalg.norm(delta) == 0:
                raise StructuralError(f"transfer pair {i} has a zero source or target state")
            rho.flags.writeable = False
            delta.flags.writeable = False
            frozen.append((rho, delta))
        object.__setattr__(self, "pairs", tuple(frozen))

    @property
    def dim(self) -> int:
        return self.pairs[0][0].size

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sources as (dim, P), targets as (dim, P), and the norm products (P,)."""
        rho = np.stack([p[0] for p in self.pairs], axis=1)
        delta = np.stack([p[1] for p in self.pairs], axis=1)
        norms = np.linalg.norm(rho, axis=0) * np.linalg.norm(delta, axis=0)
        return rho, delta, norms


def transfer_preset(name: str) -> TransferSet:
    """Named transfer sets.

    ``ur90y`` is the three-pair universal 90-degree rotation about +Y:
    S_Z -> S_X, S_Y -> S_Y, S_X -> -S_Z.
    """
    ops = build_spin_half_ops()
    presets = {
        "ur90y": (
            (vec(ops.sz), vec(ops.sx)),
            (vec(ops.sy), vec(ops.sy)),
            (vec(ops.sx), -vec(ops.sz)),
        ),
    }
    if name not in presets:
        raise StructuralError(
            f"unknown transfer preset '{name}'; available: {sorted(presets)}"
        )
    return TransferSet(pairs=presets[name])


@dataclass(frozen=True)
class EnsembleMember:
    """One (drift, power scale, cascade) combination with its weight."""

    member_id: str
    weight: float
    drift: DriftSpec
    power_scale: float
    cascade: Cascade


@dataclass(frozen=True)
class ControlProblem:
    """Everything the objective needs besides the waveform itself.

    The ensemble is the Cartesian product
    ``drift_grid x power_scale_grid x cascade_rows`` unless ``members``
    lists explicit (drift, power scale, cascade) triples.  Weights are
    uniform when not given and must sum to one when they are.
    """

    drift_grid: tuple[DriftSpec, ...]
    control_ops: tuple[np.ndarray, ...]
    transfer: TransferSet
    duration: float
    n_slices: int
    power_scale_grid: tuple[float, ...] = (1.0,)
    cascade_rows: tuple[Cascade, ...] = (Cascade(),)
    member_weights: tuple[float, ...] | None = None
    members: tuple[tuple[DriftSpec, float, Cascade], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "drift_grid", tuple(self.drift_grid))
        object.__setattr__(self, "power_scale_grid", tuple(float(s) for s in self.power_scale_grid))
        object.__setattr__(self, "cascade_rows", tuple(self.cascade_rows))
        if self.members is not None:
            object.__setattr__(self, "members", tuple(self.members))
        if self.member_weights is not None:
            object.__setattr__(self, "member_weights", tuple(float(w) for w in self.member_weights))
        if not self.drift_grid:
            raise StructuralError("drift grid must contain at least one entry")
        if not self.power_scale_grid:
            raise StructuralError("power scale grid must contain at least one entry")
        if not self.cascade_rows:
            raise StructuralError("at least one cascade row is required (may be empty)")
        ops = []
        dim = self.transfer.dim
        for op in self.control_ops:
            op = np.asarray(op, dtype=complex)
            if op.shape != (dim, dim):
                raise StructuralError(
                    f"control superoperator shape {op.shape} does not match state dimension {dim}"
                )
            op = op.copy()
            op.flags.writeable = False
            ops.append(op)
        if not ops:
            raise StructuralError("at least one control operator is required")
        object.__setattr__(self, "control_ops", tuple(ops))
        if not (self.duration > 0 and self.n_slices >= 1):
            raise StructuralError(
                f"need positive duration and at least one slice, got "
                f"T={self.duration}, N={self.n_slices}"
            )
        n = len(self.enumerate_members())
        if self.member_weights is not None:
            w = np.asarray(self.member_weights, dtype=float)
            if w.size != n:
                raise StructuralError(
                    f"{w.size} weights given for {n} ensemble members"
                )
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise StructuralError("member weights must be nonnegative and sum to 1")

    @property
    def dt(self) -> float:
        return self.duration / self.n_slices

    @property
    def n_channels(self) -> int:
        return len(self.control_ops)

    def enumerate_members(self) -> list[EnsembleMember]:
        """Canonically ordered ensemble members (drift-major, then power, then cascade)."""
        if self.members is not None:
            triples = list(self.members)
            ids = [f"m{i}" for i in range(len(triples))]
        else:
            triples = []
            ids = []
            for i, drift in enumerate(self.drift_grid):
                for j, scale in enumerate(self.power_scale_grid):
                    for q, cascade in enumerate(self.cascade_rows):
                        triples.append((drift, scale, cascade))
                        ids.append(f"d{i}.s{j}.c{q}")
        n = len(triples)
        if self.member_weights is not None and len(self.member_weights) == n:
            weights = list(self.member_weights)
        else:
            weights = [1.0 / n] * n
        return [
            EnsembleMember(member_id=mid, weight=w, drift=d, power_scale=s, cascade=c)
            for mid, w, (d, s, c) in zip(ids, weights, triples)
        ]


@dataclass
class FidelityReport:
    """Ensemble objective value, its per-member breakdown, and optionally the gradient."""

    total: float
    per_member: list[tuple[str, float]]
    gradient: np.ndarray | None = field(default=None, repr=False)


def _slice_generators(
    dt: float,
    drifts: list[DriftSpec],
    control_ops: tuple[np.ndarray, ...],
) -> tuple[np.ndarray, np.ndarray]:
    """Batched drift part of -i L dt (B, d, d) and scaled control generators (K, d, d)."""
    dim = control_ops[0].shape[0]
    base = np.zeros((len(drifts), dim, dim), dtype=complex)
    for b, drift in enumerate(drifts):
        base[b] = -1j * dt * drift.superoperator()
    gen_k = np.stack([-1j * dt * op for op in control_ops], axis=0)
    return base, gen_k


def _group_evaluate(
    distorted: np.ndarray,
    dt: float,
    drifts: list[DriftSpec],
    powers: np.ndarray,
    control_ops: tuple[np.ndarray, ...],
    transfer: TransferSet,
    want_gradient: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Fidelity (B,) and gradient (B, K, M) for members sharing one distorted waveform."""
    n_ch, n_sl = distorted.shape
    if n_ch != len(control_ops):
        raise StructuralError(
            f"waveform has {n_ch} channels but {len(control_ops)} control operators given"
        )
    batch = len(drifts)
    rho, delta, norms = transfer.stacked()
    dim = rho.shape[0]

    a_base, gen_k = _slice_generators(dt, drifts, control_ops)

    sigma = np.broadcast_to(rho, (batch, dim, rho.shape[1])).copy()
    a_slices: list[np.ndarray] = []
    props: list[np.ndarray] = []
    states: list[np.ndarray] = [sigma]
    for n in range(n_sl):
        coeff = powers[:, None] * distorted[:, n][None, :]
        a_n = a_base + np.einsum("bk,kij->bij", coeff, gen_k)
        p_n = expm(a_n)
        sigma = p_n @ sigma
        if want_gradient:
            a_slices.append(a_n)
            props.append(p_n)
            states.append(sigma)

    overlap = np.einsum("ip,bip->bp", np.conj(delta), sigma).real
    fidelities = (overlap / norms[None, :]).mean(axis=1)

    if not want_gradient:
        return fidelities, None

    grad = np.empty((batch, n_ch, n_sl), dtype=float)
    chi = np.broadcast_to(delta, (batch, dim, delta.shape[1])).copy()
    for n in range(n_sl - 1, -1, -1):
        # Augmented generators for every channel at once: exp of
        # [[A, dA_k], [0, A]] holds the propagator derivative in its
        # top-right block (same construction as prop_deriv_action).
        aux = np.zeros((n_ch, batch, 2 * dim, 2 * dim), dtype=complex)
        aux[:, :, :dim, :dim] = a_slices[n][None]
        aux[:, :, dim:, dim:] = a_slices[n][None]
        aux[:, :, :dim, dim:] = powers[None, :, None, None] * gen_k[:, None]
        deriv_action = expm(aux)[:, :, :dim, dim:] @ states[n][None]
        contrib = np.einsum("bip,kbip->kbp", np.conj(chi), deriv_action).real
        grad[:, :, n] = (contrib / norms[None, None, :]).mean(axis=2).T
        chi = np.conj(props[n]).transpose(0, 2, 1) @ chi

    return fidelities, grad


def pair_fidelity(
    distorted: ControlSequence,
    drift: DriftSpec,
    control_ops: tuple[np.ndarray, ...],
    pair: tuple[np.ndarray, np.ndarray],
    power_scale: float = 1.0,
) -> float:
    """Overlap fidelity for one transfer pair under one distorted waveform."""
    transfer = TransferSet(pairs=((pair[0], pair[1]),))
    fid, _ = _group_evaluate(
        distorted.values,
        distorted.dt,
        [drift],
        np.array([power_scale], dtype=float),
        tuple(np.asarray(c, dtype=complex) for c in control_ops),
        transfer,
        want_gradient=False,
    )
    return float(fid[0])


def pair_gradient(
    distorted: ControlSequence,
    drift: DriftSpec,
    control_ops: tuple[np.ndarray, ...],
    pair: tuple[np.ndarray, np.ndarray],
    power_scale: float = 1.0,
) -> np.ndarray:
    """Exact fidelity gradient w.r.t. the distorted waveform, shape (K, N + pad)."""
    transfer = TransferSet(pairs=((pair[0], pair[1]),))
    _, grad = _group_evaluate(
        distorted.values,
        distorted.dt,
        [drift],
        np.array([power_scale], dtype=float),
        tuple(np.asarray(c, dtype=complex) for c in control_ops),
        transfer,
        want_gradient=True,
    )
    return grad[0]


def ensemble_objective(
    sequence: ControlSequence,
    problem: ControlProblem,
    *,
    gradient: bool = True,
    workers: int = 1,
) -> FidelityReport:
    """Weighted ensemble fidelity of a raw waveform, with the pulled-back gradient.

    Each member distorts the waveform through its cascade, the fidelity
    and its gradient w.r.t. the distorted sequence are evaluated, and the
    gradient is pulled back through the cascade VJP.  Members sharing a
    cascade are evaluated in one batch; groups may fan out over
    ``workers`` threads, and results are reduced in member order so
    totals do not depend on scheduling.
    """
    if sequence.n_channels != problem.n_channels:
        raise StructuralError(
            f"waveform has {sequence.n_channels} channels but the problem defines "
            f"{problem.n_channels} control operators"
        )
    if sequence.n_slices != problem.n_slices:
        raise StructuralError(
            f"waveform has {sequence.n_slices} slices but the problem defines "
            f"{problem.n_slices}"
        )
    if abs(sequence.dt - problem.dt) > 1e-12 * max(sequence.dt, problem.dt):
        raise StructuralError(
            f"waveform dt {sequence.dt} does not match problem dt {problem.dt}"
        )

    members = problem.enumerate_members()
    groups: dict[int, list[tuple[int, EnsembleMember]]] = {}
    order: list[int] = []
    for idx, member in enumerate(members):
        key = id(member.cascade)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append((idx, member))

    def run_group(key: int) -> tuple[list[tuple[int, float]], np.ndarray | None]:
        entries = groups[key]
        cascade = entries[0][1].cascade
        ids = [m.member_id for _, m in entries]
        try:
            distorted, cache = cascade_apply(cascade, sequence)
            fids, grads = _group_evaluate(
                distorted.values,
                sequence.dt,
                [m.drift for _, m in entries],
                np.array([m.power_scale for _, m in entries], dtype=float),
                problem.control_ops,
                problem.transfer,
                want_gradient=gradient,
            )
        except Exception as exc:
            raise EngineError(
                f"evaluation failed for ensemble members {ids}: {exc}"
            ) from exc
        for b, fid in enumerate(fids):
            if not np.isfinite(fid):
                raise EngineError(
                    f"ensemble member '{ids[b]}' produced a non-finite fidelity"
                )
        pullback = None
        if gradient:
            weighted = np.einsum(
                "b,bkm->km", np.array([m.weight for _, m in entries]), grads
            )
            pullback = cascade_vjp(cascade, cache, weighted)
        return [(idx, float(f)) for (idx, _), f in zip(entries, fids)], pullback

    if workers > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_group, order))
    else:
        results = [run_group(key) for key in order]

    per_member_values: dict[int, float] = {}
    total_gradient = None
    for fid_entries, pullback in results:
        per_member_values.update(fid_entries)
        if gradient:
            total_gradient = pullback if total_gradient is None else total_gradient + pullback

    per_member = [(m.member_id, per_member_values[i]) for i, m in enumerate(members)]
    total = float(sum(m.weight * per_member_values[i] for i, m in enumerate(members)))
    return FidelityReport(total=total, per_member=per_member, gradient=total_gradient)
