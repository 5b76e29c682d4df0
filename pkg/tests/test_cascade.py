"""Cascade composition: forward action, backward pass, and the chain rule."""

import numpy as np
import pytest

from rawgrape.errors import NumericError, StructuralError
from rawgrape.filters import (
    Cascade,
    ControlSequence,
    FirFilter,
    RLCSpec,
    SaturationFilter,
    SinglePoleFilter,
    SingleZeroFilter,
    UserFilter,
    cascade_apply,
    cascade_vjp,
    fd_jacobian_fallback,
    pack_complex,
    rlc_filter_pair,
    saturate_tanh,
)
from rawgrape.pulses import composite_90x180y90x

from conftest import central_difference, dense_spf_matrix


def random_sequence(rng, k=2, n=24, dt=0.1, scale=1.0):
    return ControlSequence(scale * rng.standard_normal((k, n)), dt=dt)


def random_cascade(rng, max_stages=3, pad=0, scale=1.0):
    stages = []
    for _ in range(rng.integers(0, max_stages + 1)):
        kind = rng.integers(0, 4)
        if kind == 0:
            r = rng.uniform(0.1, 0.9)
            phi = rng.uniform(-np.pi, np.pi)
            stages.append(SinglePoleFilter(r * np.exp(1j * phi)))
        elif kind == 1:
            r = rng.uniform(0.1, 0.9)
            phi = rng.uniform(-np.pi, np.pi)
            stages.append(SingleZeroFilter(r * np.exp(1j * phi)))
        elif kind == 2:
            stages.append(SaturationFilter(level=scale * rng.uniform(0.8, 3.0), model="tanh"))
        else:
            stages.append(
                SaturationFilter(
                    level=scale * rng.uniform(0.8, 3.0),
                    model="rroot",
                    sharpness=rng.uniform(1.5, 4.0),
                )
            )
    return Cascade(stages=tuple(stages), pad_slices=pad)


class TestCascadeForward:
    def test_empty_cascade_identity(self, rng):
        seq = random_sequence(rng)
        out, _ = cascade_apply(Cascade(), seq)
        assert np.array_equal(out.values, seq.values)

    def test_empty_cascade_with_padding(self, rng):
        seq = random_sequence(rng, n=10)
        out, _ = cascade_apply(Cascade(pad_slices=4), seq)
        assert out.n_slices == 14
        assert np.array_equal(out.values[:, :10], seq.values)
        assert np.array_equal(out.values[:, 10:], np.zeros((2, 4)))

    def test_trivial_single_pole(self, rng):
        seq = random_sequence(rng)
        out, _ = cascade_apply(Cascade(stages=(SinglePoleFilter(0.0),)), seq)
        assert np.allclose(out.values, seq.values, atol=1e-15)

    def test_odd_channel_count_rejected(self, rng):
        seq = ControlSequence(rng.standard_normal((3, 8)), dt=0.1)
        with pytest.raises(StructuralError):
            cascade_apply(Cascade(stages=(SinglePoleFilter(0.5),)), seq)

    def test_rlc_stack_smooths_composite_pulse(self):
        # Two-pole resonant response on the composite inversion pulse:
        # output matches the dense-Toeplitz oracle and is visibly
        # smoothed (lower slew) relative to the stepped input.
        pulse = composite_90x180y90x(amplitude=2 * np.pi * 25e3, slices_per_90=20, gap_slices=3)
        spec = RLCSpec(natural_frequency=2 * np.pi * 40e6, quality_factor=300.0, frame_frequency=2 * np.pi * 40e6)
        stage1, stage2 = rlc_filter_pair(spec, pulse.dt)
        cascade = Cascade(stages=(stage1, stage2))
        out, _ = cascade_apply(cascade, pulse)

        u = pack_complex(pulse.values[0], pulse.values[1])
        dense = dense_spf_matrix(stage2.p, u.size) @ dense_spf_matrix(stage1.p, u.size)
        expected = dense @ u
        got = pack_complex(out.values[0], out.values[1])
        assert np.allclose(got, expected, atol=1e-9 * np.max(np.abs(expected)))

        slew = lambda w: np.max(np.abs(np.diff(w)))
        assert slew(out.values[0]) < 0.7 * slew(pulse.values[0])
        assert not np.allclose(out.values, pulse.values)

    def test_saturation_flattens_shaped_pulse_peaks(self):
        from rawgrape.pulses import shaped_selective_pulse

        pulse = shaped_selective_pulse(peak_amplitude=2 * np.pi * 10e3, duration=2e-3, n_slices=200)
        level = 0.6 * 2 * np.pi * 10e3
        cascade = Cascade(stages=(SaturationFilter(level=level, model="tanh"),))
        out, _ = cascade_apply(cascade, pulse)
        assert np.max(np.abs(out.values)) <= level
        assert np.max(np.abs(out.values)) < np.max(np.abs(pulse.values))


class TestCascadeBackward:
    def test_empty_cascade_vjp_is_identity(self, rng):
        seq = random_sequence(rng)
        cascade = Cascade()
        _, cache = cascade_apply(cascade, seq)
        g = rng.standard_normal(seq.values.shape)
        assert np.array_equal(cascade_vjp(cascade, cache, g), g)

    def test_padding_truncation(self, rng):
        seq = random_sequence(rng, n=10)
        cascade = Cascade(pad_slices=5)
        _, cache = cascade_apply(cascade, seq)
        g = rng.standard_normal((2, 15))
        assert np.array_equal(cascade_vjp(cascade, cache, g), g[:, :10])

    def test_linear_cascade_vjp_independent_of_input(self, rng):
        cascade = Cascade(stages=(SinglePoleFilter(0.4 + 0.2j), SingleZeroFilter(0.3)))
        g = rng.standard_normal((2, 16))
        results = []
        for _ in range(2):
            seq = random_sequence(rng, n=16)
            _, cache = cascade_apply(cascade, seq)
            results.append(cascade_vjp(cascade, cache, g))
        assert np.allclose(results[0], results[1], atol=1e-13)

    def test_linear_vjp_matches_dense_complex_adjoint(self, rng):
        # Real-channel pull-back through a complex-linear stage is the
        # Hermitian adjoint of the dense Toeplitz Jacobian.
        p = 0.5 * np.exp(1j * 0.8)
        cascade = Cascade(stages=(SinglePoleFilter(p),))
        seq = random_sequence(rng, n=20)
        _, cache = cascade_apply(cascade, seq)
        g = rng.standard_normal((2, 20))
        got = cascade_vjp(cascade, cache, g)
        dense = dense_spf_matrix(p, 20)
        pulled = np.conj(dense).T @ pack_complex(g[0], g[1])
        assert np.allclose(got[0], pulled.real, atol=1e-12)
        assert np.allclose(got[1], pulled.imag, atol=1e-12)

    def test_stale_cache_rejected(self, rng):
        seq = random_sequence(rng)
        cascade_a = Cascade(stages=(SinglePoleFilter(0.5),))
        cascade_b = Cascade(stages=(SinglePoleFilter(0.5),))
        _, cache = cascade_apply(cascade_a, seq)
        with pytest.raises(StructuralError):
            cascade_vjp(cascade_b, cache, np.zeros(seq.values.shape))

    def test_wrong_gradient_shape_rejected(self, rng):
        seq = random_sequence(rng, n=10)
        cascade = Cascade(pad_slices=2)
        _, cache = cascade_apply(cascade, seq)
        with pytest.raises(StructuralError):
            cascade_vjp(cascade, cache, np.zeros((2, 10)))

    @pytest.mark.parametrize("pad", [0, 3])
    def test_chain_rule_against_finite_differences(self, rng, pad):
        # <g, cascade(C)> differentiated by hand must match the VJP for
        # cascades of length 0..4 mixing linear and saturating stages.
        worst = 0.0
        for trial in range(12):
            cascade = random_cascade(rng, max_stages=4, pad=pad)
            seq = random_sequence(rng, n=14)
            g = rng.standard_normal((2, 14 + pad))
            _, cache = cascade_apply(cascade, seq)
            analytic = cascade_vjp(cascade, cache, g)

            def scalar(values):
                out, _ = cascade_apply(cascade, seq.with_values(values))
                return float(np.sum(g * out.values))

            fd = central_difference(scalar, seq.values, 1e-6)
            scale = max(np.max(np.abs(fd)), np.max(np.abs(analytic)), 1e-300)
            worst = max(worst, np.max(np.abs(analytic - fd)) / scale)
        assert worst <= 1e-6


class TestFiniteDifferenceFallback:
    def test_identity_map(self, rng):
        base = rng.standard_normal((2, 6))
        fd = fd_jacobian_fallback(lambda v: v, base, step=1e-6)
        g = rng.standard_normal((2, 6))
        assert np.allclose(fd.vjp(g), g, atol=1e-9)

    def test_linear_map_recovered(self, rng):
        h = rng.standard_normal((6, 6))

        def linear(values):
            return values @ h.T

        base = rng.standard_normal((2, 6))
        fd = fd_jacobian_fallback(linear, base, step=1e-7)
        g = rng.standard_normal((2, 6))
        assert np.allclose(fd.vjp(g), g @ h, atol=1e-6)

    def test_matches_analytic_tanh_jacobian(self, rng):
        level = 1.7

        def sat(values):
            v, _ = saturate_tanh(values, level)
            return v

        base = rng.standard_normal((2, 8))
        fd = fd_jacobian_fallback(sat, base, step=1e-6)
        g = rng.standard_normal((2, 8))
        _, jac = saturate_tanh(base, level)
        analytic = g * jac
        err = np.max(np.abs(fd.vjp(g) - analytic)) / np.max(np.abs(analytic))
        assert err <= 1e-6

    def test_nondeterministic_map_rejected(self, rng):
        state = {"calls": 0}

        def flaky(values):
            state["calls"] += 1
            return values + 1e-6 * state["calls"]

        with pytest.raises(NumericError):
            fd_jacobian_fallback(flaky, rng.standard_normal((2, 4)))

    def test_user_filter_in_cascade(self, rng):
        def squash(values):
            v, _ = saturate_tanh(values, 2.0)
            return v

        cascade = Cascade(stages=(SinglePoleFilter(0.3), UserFilter(squash)))
        seq = random_sequence(rng, n=10)
        _, cache = cascade_apply(cascade, seq)
        g = rng.standard_normal((2, 10))
        analytic = cascade_vjp(cascade, cache, g)

        def scalar(values):
            out, _ = cascade_apply(cascade, seq.with_values(values))
            return float(np.sum(g * out.values))

        fd = central_difference(scalar, seq.values, 1e-6)
        assert np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)) <= 1e-5
