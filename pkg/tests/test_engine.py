"""Fidelity, gradients, and ensemble reduction of the optimization engine."""

import numpy as np
import pytest

from rawgrape.engine import (
    ControlProblem,
    TransferSet,
    ensemble_objective,
    pair_fidelity,
    pair_gradient,
    transfer_preset,
)
from rawgrape.errors import EngineError, StructuralError
from rawgrape.filters import (
    Cascade,
    ControlSequence,
    SaturationFilter,
    SinglePoleFilter,
    SingleZeroFilter,
)
from rawgrape.spinops import (
    DriftSpec,
    build_spin_half_ops,
    prop_deriv_action,
    propagator,
    vec,
)

from conftest import central_difference
from test_cascade import random_cascade

OPS = build_spin_half_ops()
CONTROL_OPS = (OPS.ad_sx, OPS.ad_sy)


def reference_pair_fidelity(seq, drift, control_ops, pair, power_scale=1.0):
    """Direct product-of-propagators implementation, no ensemble code path."""
    rho, delta = np.asarray(pair[0], complex), np.asarray(pair[1], complex)
    state = rho.copy()
    for n in range(seq.n_slices):
        liou = drift.superoperator()
        for k, op in enumerate(control_ops):
            liou = liou + power_scale * seq.values[k, n] * op
        state = propagator(liou, seq.dt) @ state
    return float(
        np.real(np.vdot(delta, state)) / (np.linalg.norm(delta) * np.linalg.norm(rho))
    )


def reference_pair_gradient(seq, drift, control_ops, pair, power_scale=1.0):
    """Forward/backward sweep built directly on the scalar operations."""
    rho, delta = np.asarray(pair[0], complex), np.asarray(pair[1], complex)
    norms = np.linalg.norm(delta) * np.linalg.norm(rho)
    n_slices = seq.n_slices
    props = []
    states = [rho.copy()]
    for n in range(n_slices):
        liou = drift.superoperator()
        for k, op in enumerate(control_ops):
            liou = liou + power_scale * seq.values[k, n] * op
        p = propagator(liou, seq.dt)
        props.append(p)
        states.append(p @ states[-1])
    grad = np.zeros((len(control_ops), n_slices))
    chi = delta.copy()
    for n in range(n_slices - 1, -1, -1):
        liou = drift.superoperator()
        for k, op in enumerate(control_ops):
            liou = liou + power_scale * seq.values[k, n] * op
        a = -1j * seq.dt * liou
        for k, op in enumerate(control_ops):
            da = -1j * seq.dt * power_scale * op
            _, deriv = prop_deriv_action(a, da, states[n])
            grad[k, n] = np.real(np.vdot(chi, deriv)) / norms
        chi = props[n].conj().T @ chi
    return grad


def square_pulse_y(omega1, duration, n_slices):
    values = np.zeros((2, n_slices))
    values[1, :] = omega1
    return ControlSequence(values, dt=duration / n_slices)


class TestPairFidelity:
    def test_identity_evolution(self):
        seq = ControlSequence(np.zeros((2, 8)), dt=0.1)
        rho = vec(OPS.sz)
        fid = pair_fidelity(seq, DriftSpec(offset=0.0), CONTROL_OPS, (rho, rho))
        assert abs(fid - 1.0) < 1e-12

    def test_on_resonance_90y_all_pairs(self):
        omega1 = 2 * np.pi * 25e3
        duration = (np.pi / 2) / omega1
        seq = square_pulse_y(omega1, duration, 20)
        for rho, delta in transfer_preset("ur90y").pairs:
            fid = pair_fidelity(seq, DriftSpec(offset=0.0), CONTROL_OPS, (rho, delta))
            assert abs(fid - 1.0) < 1e-10

    def test_offset_degrades_square_pulse(self):
        omega1 = 2 * np.pi * 25e3
        duration = (np.pi / 2) / omega1
        seq = square_pulse_y(omega1, duration, 20)
        pair = transfer_preset("ur90y").pairs[0]
        fid = pair_fidelity(seq, DriftSpec(offset=omega1), CONTROL_OPS, pair)
        assert fid < 0.9

    def test_matches_reference(self, rng):
        for _ in range(10):
            seq = ControlSequence(rng.standard_normal((2, 12)), dt=0.17)
            drift = DriftSpec(offset=float(rng.uniform(-1, 1)))
            rho = rng.standard_normal(4) + 1j * rng.standard_normal(4)
            delta = rng.standard_normal(4) + 1j * rng.standard_normal(4)
            scale = float(rng.uniform(0.5, 1.5))
            fast = pair_fidelity(seq, drift, CONTROL_OPS, (rho, delta), scale)
            slow = reference_pair_fidelity(seq, drift, CONTROL_OPS, (rho, delta), scale)
            assert abs(fast - slow) < 1e-13


class TestPairGradient:
    def test_stationary_point_of_cosine(self):
        # Zero controls, zero drift, source equals target: the overlap is
        # cos(theta) at theta = 0, so every slice gradient vanishes.
        seq = ControlSequence(np.zeros((1, 10)), dt=0.2)
        rho = vec(OPS.sz)
        grad = pair_gradient(seq, DriftSpec(offset=0.0), (OPS.ad_sx,), (rho, rho))
        assert np.allclose(grad, 0.0, atol=1e-14)

    def test_matches_finite_differences(self, rng):
        worst = 0.0
        for _ in range(8):
            seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.15)
            drift = DriftSpec(offset=float(rng.uniform(-1, 1)))
            rho = rng.standard_normal(4) + 1j * rng.standard_normal(4)
            delta = rng.standard_normal(4) + 1j * rng.standard_normal(4)
            grad = pair_gradient(seq, drift, CONTROL_OPS, (rho, delta))

            def scalar(values):
                return pair_fidelity(
                    seq.with_values(values), drift, CONTROL_OPS, (rho, delta)
                )

            fd = central_difference(scalar, seq.values, 1e-5)
            scale = max(np.max(np.abs(fd)), 1e-300)
            worst = max(worst, np.max(np.abs(grad - fd)) / scale)
        assert worst <= 1e-6

    def test_power_scale_doubles_gradient_at_zero(self):
        seq = ControlSequence(np.zeros((2, 6)), dt=0.1)
        drift = DriftSpec(offset=0.3)
        rho, delta = vec(OPS.sz), vec(OPS.sx)
        g1 = pair_gradient(seq, drift, CONTROL_OPS, (rho, delta), power_scale=1.0)
        g2 = pair_gradient(seq, drift, CONTROL_OPS, (rho, delta), power_scale=2.0)
        assert np.allclose(g2, 2.0 * g1, atol=1e-12)

    def test_matches_reference(self, rng):
        seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
        drift = DriftSpec(offset=0.4)
        rho = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        delta = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        fast = pair_gradient(seq, drift, CONTROL_OPS, (rho, delta), 1.3)
        slow = reference_pair_gradient(seq, drift, CONTROL_OPS, (rho, delta), 1.3)
        assert np.max(np.abs(fast - slow)) < 1e-14


def simple_problem(n_slices=10, dt=0.1, offsets=(0.2,), powers=(1.0,), rows=None, weights=None):
    return ControlProblem(
        drift_grid=tuple(DriftSpec(offset=o) for o in offsets),
        control_ops=CONTROL_OPS,
        transfer=transfer_preset("ur90y"),
        duration=n_slices * dt,
        n_slices=n_slices,
        power_scale_grid=powers,
        cascade_rows=rows if rows is not None else (Cascade(),),
        member_weights=weights,
    )


class TestEnsembleObjective:
    def test_reduces_to_plain_grape(self, rng):
        # Single member, empty cascade: totals and gradients must agree
        # with the direct no-ensemble implementation to within roundoff.
        seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.1)
        problem = simple_problem()
        report = ensemble_objective(seq, problem)
        drift = problem.drift_grid[0]
        fids = [
            reference_pair_fidelity(seq, drift, CONTROL_OPS, pair)
            for pair in problem.transfer.pairs
        ]
        grads = [
            reference_pair_gradient(seq, drift, CONTROL_OPS, pair)
            for pair in problem.transfer.pairs
        ]
        assert abs(report.total - np.mean(fids)) < 1e-14
        assert np.max(np.abs(report.gradient - np.mean(grads, axis=0))) < 1e-14

    def test_two_identical_members_match_single(self, rng):
        seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
        single = ensemble_objective(seq, simple_problem(n_slices=8))
        doubled = ensemble_objective(
            seq, simple_problem(n_slices=8, rows=(Cascade(), Cascade()), weights=(0.5, 0.5))
        )
        assert abs(single.total - doubled.total) < 1e-14
        assert np.max(np.abs(single.gradient - doubled.gradient)) < 1e-13
        assert len(doubled.per_member) == 2

    def test_total_is_weighted_mean(self, rng):
        seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
        problem = simple_problem(n_slices=8, offsets=(0.0, 0.4), powers=(0.9, 1.1))
        report = ensemble_objective(seq, problem, gradient=False)
        members = problem.enumerate_members()
        recomputed = sum(m.weight * f for m, (_, f) in zip(members, report.per_member))
        assert abs(report.total - recomputed) < 1e-14

    def test_fidelity_bounds(self, rng):
        for _ in range(5):
            seq = ControlSequence(2.0 * rng.standard_normal((2, 12)), dt=0.2)
            problem = simple_problem(n_slices=12, dt=0.2, offsets=(0.0, 1.0), powers=(0.7, 1.3))
            report = ensemble_objective(seq, problem, gradient=False)
            for _, fid in report.per_member:
                assert -1.0 - 1e-12 <= fid <= 1.0 + 1e-12

    def test_gradient_through_cascades_matches_fd(self, rng):
        worst = 0.0
        for _ in range(6):
            rows = tuple(random_cascade(rng, max_stages=3) for _ in range(rng.integers(1, 3)))
            problem = simple_problem(n_slices=8, offsets=(0.1, -0.3), rows=rows)
            seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
            report = ensemble_objective(seq, problem)

            def scalar(values):
                rep = ensemble_objective(seq.with_values(values), problem, gradient=False)
                return rep.total

            fd = central_difference(scalar, seq.values, 1e-5)
            scale = max(np.max(np.abs(fd)), 1e-300)
            worst = max(worst, np.max(np.abs(report.gradient - fd)) / scale)
        assert worst <= 1e-6

    def test_linear_cascade_pullback_is_fixed_operator(self, rng):
        # For a purely linear cascade the pull-back equals applying the
        # fixed adjoint Toeplitz operator to the distorted-waveform
        # gradient, independent of the operating point.
        from rawgrape.filters import cascade_apply, cascade_vjp

        row = Cascade(stages=(SinglePoleFilter(0.35 + 0.1j), SingleZeroFilter(0.2)))
        problem = simple_problem(n_slices=10, rows=(row,))
        seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.1)
        report = ensemble_objective(seq, problem)

        distorted, cache = cascade_apply(row, seq)
        raw_grad = np.mean(
            [
                pair_gradient(distorted, problem.drift_grid[0], CONTROL_OPS, pair)
                for pair in problem.transfer.pairs
            ],
            axis=0,
        )
        pulled = cascade_vjp(row, cache, raw_grad)
        assert np.max(np.abs(report.gradient - pulled)) < 1e-12

    def test_ring_down_padding_contributes(self, rng):
        # With padding, filter tails keep driving the system after the
        # nominal pulse, so the objective must differ from the unpadded one.
        row_pad = Cascade(stages=(SinglePoleFilter(0.8),), pad_slices=12)
        row_nopad = Cascade(stages=(SinglePoleFilter(0.8),), pad_slices=0)
        seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.1)
        rep_pad = ensemble_objective(seq, simple_problem(rows=(row_pad,)), gradient=False)
        rep_nopad = ensemble_objective(seq, simple_problem(rows=(row_nopad,)), gradient=False)
        assert abs(rep_pad.total - rep_nopad.total) > 1e-6

    def test_workers_reduce_deterministically(self, rng):
        rows = tuple(random_cascade(rng, max_stages=2) for _ in range(4))
        problem = simple_problem(n_slices=8, offsets=(0.1, 0.5), rows=rows)
        seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
        serial = ensemble_objective(seq, problem, workers=1)
        threaded = ensemble_objective(seq, problem, workers=4)
        assert serial.total == threaded.total
        assert np.array_equal(serial.gradient, threaded.gradient)
        assert serial.per_member == threaded.per_member

    def test_member_id_surfaced_on_failure(self, rng):
        class ExplodingFilter(SinglePoleFilter):
            def apply(self, values, dt):
                raise ValueError("boom")

        rows = (Cascade(stages=(ExplodingFilter(0.1),)),)
        problem = simple_problem(rows=rows)
        seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.1)
        with pytest.raises(EngineError, match="d0.s0.c0"):
            ensemble_objective(seq, problem)

    def test_shape_validation(self, rng):
        problem = simple_problem(n_slices=10)
        with pytest.raises(StructuralError):
            ensemble_objective(ControlSequence(np.zeros((2, 9)), dt=0.1), problem)
        with pytest.raises(StructuralError):
            ensemble_objective(ControlSequence(np.zeros((3, 10)), dt=0.1), problem)
        with pytest.raises(StructuralError):
            ensemble_objective(ControlSequence(np.zeros((2, 10)), dt=0.2), problem)

    def test_weights_validation(self):
        with pytest.raises(StructuralError):
            simple_problem(weights=(0.7, 0.7))
        with pytest.raises(StructuralError):
            simple_problem(offsets=(0.0, 0.1), weights=(1.0,))

    def test_explicit_member_list(self, rng):
        seq = ControlSequence(rng.standard_normal((2, 8)), dt=0.1)
        problem = ControlProblem(
            drift_grid=(DriftSpec(0.0),),
            control_ops=CONTROL_OPS,
            transfer=transfer_preset("ur90y"),
            duration=0.8,
            n_slices=8,
            members=(
                (DriftSpec(offset=0.2), 1.0, Cascade()),
                (DriftSpec(offset=-0.2), 1.1, Cascade(stages=(SinglePoleFilter(0.5),))),
            ),
        )
        report = ensemble_objective(seq, problem)
        assert len(report.per_member) == 2
        assert report.per_member[0][0] == "m0"

    def test_gradient_with_relaxation_matches_fd(self, rng):
        relax = -0.3 * np.eye(4) + 0.05 * rng.standard_normal((4, 4))
        drift = DriftSpec(offset=0.4, relaxation=relax)
        problem = ControlProblem(
            drift_grid=(drift,),
            control_ops=CONTROL_OPS,
            transfer=transfer_preset("ur90y"),
            duration=1.0,
            n_slices=10,
        )
        seq = ControlSequence(rng.standard_normal((2, 10)), dt=0.1)
        report = ensemble_objective(seq, problem)

        def scalar(values):
            return ensemble_objective(seq.with_values(values), problem, gradient=False).total

        fd = central_difference(scalar, seq.values, 1e-5)
        scale = max(np.max(np.abs(fd)), 1e-300)
        assert np.max(np.abs(report.gradient - fd)) / scale <= 1e-6

    def test_relaxation_damps_fidelity(self):
        # A uniformly decaying relaxation matrix shrinks the overlap.
        omega1 = 2 * np.pi * 25e3
        duration = (np.pi / 2) / omega1
        seq = square_pulse_y(omega1, duration, 16)
        pair = transfer_preset("ur90y").pairs[0]
        rate = 0.1 / duration
        relax = -rate * np.eye(4)
        fid_unitary = pair_fidelity(seq, DriftSpec(0.0), CONTROL_OPS, pair)
        fid_damped = pair_fidelity(
            seq, DriftSpec(0.0, relaxation=relax), CONTROL_OPS, pair
        )
        assert fid_damped < fid_unitary
        assert abs(fid_damped - fid_unitary * np.exp(-0.1)) < 1e-6
