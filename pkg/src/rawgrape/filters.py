"""Differentiable instrument-distortion filters and cascade composition.

A distortion stage maps a control waveform (channels x time slices) to
another waveform of the same shape and exposes two operations:

* ``apply`` -- the forward action;
* ``vjp`` -- the vector-Jacobian product, i.e. the transpose of the
  real-valued Jacobian applied to a downstream gradient.

Cascades compose stages; the backward pass runs the stage VJPs in
reverse, which is exactly backpropagation.  Dense Jacobians are never
formed outside of test oracles.

Rotating-frame linear filters (single-pole, single-zero, FIR, and the
RLC response factored into two single-pole filters) act on the complex
signal ``u = c_x + i c_y`` built from an X/Y channel pair; complex
coefficients then realize frequency shifts and X/Y cross-talk.  The
low-level ``*_apply``/``*_vjp`` functions below operate on such complex
signals, and the ``*_vjp`` variants compute the plain (bilinear)
transpose ``H^T g`` of the complex Toeplitz Jacobian.  The stage classes
convert these into real-channel VJPs, which for a complex-linear map
amounts to using the conjugated coefficient.

Amplitude saturation acts on the per-sample pair amplitude
``sqrt(c_x^2 + c_y^2)`` with the phase preserved; its Jacobian is a
symmetric 2x2 block per sample.

All recursions start from zero internal state.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    NumericError,
    StabilityError,
    StructuralError,
)

__all__ = [
    "ControlSequence",
    "FilterCoefficient",
    "RLCSpec",
    "SaturationSpec",
    "FIRKernel",
    "pack_complex",
    "unpack_complex",
    "spf_apply",
    "spf_vjp",
    "szf_apply",
    "szf_vjp",
    "fir_apply",
    "fir_vjp",
    "rlc_poles",
    "saturate_tanh",
    "saturate_rroot",
    "Filter",
    "SinglePoleFilter",
    "SingleZeroFilter",
    "FirFilter",
    "SaturationFilter",
    "UserFilter",
    "rlc_filter_pair",
    "Cascade",
    "CascadeCache",
    "cascade_apply",
    "cascade_vjp",
    "fd_jacobian_fallback",
    "FDJacobian",
]


@dataclass(frozen=True)
class ControlSequence:
    """Real K-channel x N-slice control waveform with uniform slice duration.

    Rows are channels, columns are time slices; entries are nutation
    frequencies in rad/s.  The value array is copied and frozen so
    sequences can be shared between threads.
    """

    values: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise StructuralError(f"control values must be 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise StructuralError("control sequence needs at least one time slice")
        if not np.all(np.isfinite(values)):
            raise NumericError("control sequence has non-finite entries")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise NumericError(f"slice duration must be positive and finite, got {self.dt}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_slices(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return self.n_slices * self.dt

    def with_values(self, values: np.ndarray) -> "ControlSequence":
        return ControlSequence(values=values, dt=self.dt)


def pack_complex(x_row: np.ndarray, y_row: np.ndarray) -> np.ndarray:
    """Pack two real channel rows into the complex signal ``x + i y``."""
    return np.asarray(x_row, dtype=float) + 1j * np.asarray(y_row, dtype=float)


def unpack_complex(signal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a complex signal back into its two real channel rows."""
    signal = np.asarray(signal, dtype=complex)
    return signal.real.copy(), signal.imag.copy()


@dataclass(frozen=True)
class FilterCoefficient:
    """Dimensionless pole or zero location of a first-order filter."""

    value: complex

    @classmethod
    def from_rates(
        cls,
        damping_rate: float,
        frequency: float,
        frame_frequency: float,
        dt: float,
    ) -> "FilterCoefficient":
        """Coefficient ``exp(-r dt + i (w - w_RF) dt)`` from physical rates.

        ``damping_rate`` r is in 1/s, ``frequency`` and the rotating-frame
        ``frame_frequency`` in rad/s, ``dt`` in s.
        """
        if not (dt > 0):
            raise NumericError(f"dt must be positive, got {dt}")
        return cls(cmath.exp((-damping_rate + 1j * (frequency - frame_frequency)) * dt))


def _coeff(p: complex | FilterCoefficient) -> complex:
    return complex(p.value) if isinstance(p, FilterCoefficient) else complex(p)


def spf_apply(u: np.ndarray, p: complex | FilterCoefficient) -> np.ndarray:
    """Single-pole recursion ``v_n = (1 - p) u_n + p v_{n-1}`` with unit DC gain."""
    pv = _coeff(p)
    if abs(pv) >= 1.0:
        raise StabilityError(f"single-pole coefficient must satisfy |p| < 1, got |p| = {abs(pv)}")
    u = np.asarray(u, dtype=complex)
    v = np.empty_like(u)
    acc = 0.0 + 0.0j
    gain = 1.0 - pv
    for n in range(u.shape[-1]):
        acc = gain * u[n] + pv * acc
        v[n] = acc
    return v


def spf_vjp(g: np.ndarray, p: complex | FilterCoefficient) -> np.ndarray:
    """Transpose-Jacobian product of :func:`spf_apply`.

    The Jacobian is the lower-triangular Toeplitz matrix with entries
    ``(1 - p) p^(n - m)``; its transpose is applied as the time-reversed
    recursion, never as a dense matrix.
    """
    pv = _coeff(p)
    if abs(pv) >= 1.0:
        raise StabilityError(f"single-pole coefficient must satisfy |p| < 1, got |p| = {abs(pv)}")
    g = np.asarray(g, dtype=complex)
    w = np.empty_like(g)
    acc = 0.0 + 0.0j
    gain = 1.0 - pv
    for n in range(g.shape[-1] - 1, -1, -1):
        acc = gain * g[n] + pv * acc
        w[n] = acc
    return w


def szf_apply(u: np.ndarray, z: complex | FilterCoefficient) -> np.ndarray:
    """Single-zero filter ``v_n = (u_n - z u_{n-1}) / (1 - z)``, unit DC gain."""
    zv = _coeff(z)
    if zv == 1.0:
        raise StabilityError("single-zero coefficient z = 1 divides by zero")
    u = np.asarray(u, dtype=complex)
    v = np.empty_like(u)
    v[0] = u[0] / (1.0 - zv)
    if u.shape[-1] > 1:
        v[1:] = (u[1:] - zv * u[:-1]) / (1.0 - zv)
    return v


def szf_vjp(g: np.ndarray, z: complex | FilterCoefficient) -> np.ndarray:
    """Transpose-Jacobian product of :func:`szf_apply` (two-tap correlation)."""
    zv = _coeff(z)
    if zv == 1.0:
        raise StabilityError("single-zero coefficient z = 1 divides by zero")
    g = np.asarray(g, dtype=complex)
    w = g.astype(complex, copy=True)
    w[:-1] -= zv * g[1:]
    return w / (1.0 - zv)


@dataclass(frozen=True)
class FIRKernel:
    """Finite memory kernel; tap units are 1/s so the Toeplitz matrix carries dt."""

    taps: np.ndarray

    def __post_init__(self) -> None:
        taps = np.atleast_1d(np.asarray(self.taps, dtype=complex)).copy()
        if taps.ndim != 1 or taps.size < 1:
            raise StructuralError("FIR kernel must be a non-empty 1-D tap vector")
        if not np.all(np.isfinite(taps)):
            raise NumericError("FIR kernel has non-finite taps")
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)


def fir_apply(u: np.ndarray, h: np.ndarray | FIRKernel, dt: float) -> np.ndarray:
    """Causal discrete convolution ``v_n = sum_m h_m u_{n-m} dt`` with u_{k<0} = 0."""
    taps = h.taps if isinstance(h, FIRKernel) else FIRKernel(h).taps
    u = np.asarray(u, dtype=complex)
    n = u.shape[-1]
    if taps.size > n:
        raise StructuralError(
            f"FIR kernel length {taps.size} exceeds signal length {n}"
        )
    full = np.convolve(u, taps) * dt
    return full[:n]


def fir_vjp(g: np.ndarray, h: np.ndarray | FIRKernel, dt: float) -> np.ndarray:
    """Transpose-Jacobian product of :func:`fir_apply` (causal correlation)."""
    taps = h.taps if isinstance(h, FIRKernel) else FIRKernel(h).taps
    g = np.asarray(g, dtype=complex)
    n = g.shape[-1]
    if taps.size > n:
        raise StructuralError(
            f"FIR kernel length {taps.size} exceeds signal length {n}"
        )
    # (H^T g)_k = sum_{n >= k} h_{n-k} g_n dt: correlate without conjugation.
    full = np.convolve(g[::-1], taps) * dt
    return full[:n][::-1].copy()


@dataclass(frozen=True)
class RLCSpec:
    """Resonant-circuit response: natural frequency, quality factor, frame frequency."""

    natural_frequency: float
    quality_factor: float
    frame_frequency: float = 0.0

    def __post_init__(self) -> None:
        if not (self.quality_factor > 0.5):
            raise DomainError(
                f"under-damped RLC response requires Q > 1/2, got Q = {self.quality_factor}"
            )


def rlc_poles(spec: RLCSpec, dt: float) -> tuple[FilterCoefficient, FilterCoefficient]:
    """Discrete pole pair of the RLC response, for a two-stage single-pole cascade.

    The poles share the damping factor ``exp(-|w| dt / (2 Q))`` and carry
    opposite imaginary parts ``+- (w - w_RF) dt sqrt(1 - 1/(4 Q^2))``.
    """
    if not (dt > 0):
        raise NumericError(f"dt must be positive, got {dt}")
    w, q, w_rf = spec.natural_frequency, spec.quality_factor, spec.frame_frequency
    damping = abs(w) * dt / (2.0 * q)
    phase = (w - w_rf) * dt * math.sqrt(1.0 - 1.0 / (4.0 * q * q))
    p1 = cmath.exp(complex(-damping, phase))
    p2 = cmath.exp(complex(-damping, -phase))
    return FilterCoefficient(p1), FilterCoefficient(p2)


@dataclass(frozen=True)
class SaturationSpec:
    """Reciprocal-root saturation: level a (rad/s) and sharpness s > 1."""

    level: float
    sharpness: float

    def __post_init__(self) -> None:
        if not (self.level > 0):
            raise DomainError(f"saturation level must be positive, got {self.level}")
        if not (self.sharpness > 1):
            raise DomainError(f"saturation sharpness must exceed 1, got {self.sharpness}")


def saturate_tanh(u: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude compression ``v = a tanh(u / a)``.

    Returns the compressed amplitudes and the diagonal Jacobian entries
    ``sech^2(u / a)``.
    """
    if not (a > 0):
        raise DomainError(f"saturation level must be positive, got {a}")
    u = np.asarray(u, dtype=float)
    t = np.tanh(u / a)
    # sech^2 written as 1 - tanh^2 to avoid cosh overflow at large |u|.
    return a * t, 1.0 - t * t


def saturate_rroot(u: np.ndarray, spec: SaturationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Reciprocal-root amplitude compression ``v = u / (1 + |u/a|^s)^(1/s)``.

    Odd in ``u``, bounded by the level, with diagonal Jacobian
    ``(1 + |u/a|^s)^(-1 - 1/s)``.
    """
    u = np.asarray(u, dtype=float)
    t = np.abs(u / spec.level) ** spec.sharpness
    base = 1.0 + t
    v = u * base ** (-1.0 / spec.sharpness)
    jac = base ** (-1.0 - 1.0 / spec.sharpness)
    return v, jac


class Filter:
    """A differentiable waveform-to-waveform map.

    Subclasses implement ``apply`` and ``vjp``; both take and return
    real (K, M) arrays.  ``vjp`` receives the cached stage input so that
    non-linear stages can evaluate their Jacobian at the right point.
    """

    #: stages that act on X/Y channel pairs require an even channel count
    pairwise = True

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        raise NotImplementedError

    def _check_channels(self, values: np.ndarray) -> None:
        if self.pairwise and values.shape[0] % 2 != 0:
            raise StructuralError(
                f"{type(self).__name__} acts on X/Y channel pairs and needs an even "
                f"channel count, got {values.shape[0]}"
            )


def _map_pairs(values: np.ndarray, func) -> np.ndarray:
    """Apply a complex-signal function to each consecutive channel pair."""
    out = np.empty_like(values, dtype=float)
    for j in range(0, values.shape[0], 2):
        result = func(pack_complex(values[j], values[j + 1]))
        out[j], out[j + 1] = result.real, result.imag
    return out


class SinglePoleFilter(Filter):
    """First-order recursive low-pass/resonant stage with unit DC gain."""

    def __init__(self, p: complex | FilterCoefficient):
        self.p = _coeff(p)
        if abs(self.p) >= 1.0:
            raise StabilityError(
                f"single-pole coefficient must satisfy |p| < 1, got |p| = {abs(self.p)}"
            )

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(values)
        return _map_pairs(values, lambda u: spf_apply(u, self.p))

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        # Real-channel transpose of a complex-linear map is H^H, i.e. the
        # bilinear transpose taken at the conjugated coefficient.
        self._check_channels(grad)
        return _map_pairs(grad, lambda g: spf_vjp(g, np.conj(self.p)))

    def __repr__(self) -> str:
        return f"SinglePoleFilter(p={self.p!r})"


class SingleZeroFilter(Filter):
    """First-order finite-difference stage with unit DC gain."""

    def __init__(self, z: complex | FilterCoefficient):
        self.z = _coeff(z)
        if self.z == 1.0:
            raise StabilityError("single-zero coefficient z = 1 divides by zero")

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(values)
        return _map_pairs(values, lambda u: szf_apply(u, self.z))

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(grad)
        return _map_pairs(grad, lambda g: szf_vjp(g, np.conj(self.z)))

    def __repr__(self) -> str:
        return f"SingleZeroFilter(z={self.z!r})"


class FirFilter(Filter):
    """Causal convolution with a finite memory kernel."""

    def __init__(self, taps: np.ndarray | FIRKernel):
        self.kernel = taps if isinstance(taps, FIRKernel) else FIRKernel(taps)

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(values)
        return _map_pairs(values, lambda u: fir_apply(u, self.kernel, dt))

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(grad)
        conj_kernel = FIRKernel(np.conj(self.kernel.taps))
        return _map_pairs(grad, lambda g: fir_vjp(g, conj_kernel, dt))

    def __repr__(self) -> str:
        return f"FirFilter(taps={self.kernel.taps!r})"


def rlc_filter_pair(spec: RLCSpec, dt: float) -> tuple[SinglePoleFilter, SinglePoleFilter]:
    """Two single-pole stages realizing an under-damped RLC response."""
    p1, p2 = rlc_poles(spec, dt)
    return SinglePoleFilter(p1), SinglePoleFilter(p2)


class SaturationFilter(Filter):
    """Amplifier compression of the per-sample pair amplitude, phase preserved."""

    def __init__(self, level: float, model: str = "tanh", sharpness: float | None = None):
        if model not in ("tanh", "rroot"):
            raise DomainError(f"unknown saturation model '{model}'")
        if not (level > 0):
            raise DomainError(f"saturation level must be positive, got {level}")
        if model == "rroot":
            self.spec = SaturationSpec(level=level, sharpness=float(sharpness if sharpness is not None else 2.0))
        elif sharpness is not None:
            raise DomainError("sharpness only applies to the reciprocal-root model")
        self.level = float(level)
        self.model = model

    def _amplitude_map(self, amp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.model == "tanh":
            return saturate_tanh(amp, self.level)
        return saturate_rroot(amp, self.spec)

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        self._check_channels(values)
        out = np.empty_like(values, dtype=float)
        for j in range(0, values.shape[0], 2):
            x, y = values[j], values[j + 1]
            amp = np.hypot(x, y)
            compressed, _ = self._amplitude_map(amp)
            ratio = np.ones_like(amp)
            big = amp > 0
            ratio[big] = compressed[big] / amp[big]
            out[j], out[j + 1] = ratio * x, ratio * y
        return out

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        # Per-sample Jacobian in (x, y) coordinates is the symmetric block
        # (f/A) I + (f' - f/A) uu^T / A^2, so the VJP is the same block.
        self._check_channels(grad)
        out = np.empty_like(grad, dtype=float)
        for j in range(0, grad.shape[0], 2):
            x, y = stage_input[j], stage_input[j + 1]
            gx, gy = grad[j], grad[j + 1]
            amp = np.hypot(x, y)
            compressed, deriv = self._amplitude_map(amp)
            ratio = np.ones_like(amp)
            big = amp > self.level * 1e-9
            ratio[big] = compressed[big] / amp[big]
            radial = np.zeros_like(amp)
            radial[big] = (deriv[big] - ratio[big]) / amp[big] ** 2
            dot = x * gx + y * gy
            out[j] = ratio * gx + radial * dot * x
            out[j + 1] = ratio * gy + radial * dot * y
        return out

    def __repr__(self) -> str:
        if self.model == "rroot":
            return f"SaturationFilter(level={self.level!r}, model='rroot', sharpness={self.spec.sharpness!r})"
        return f"SaturationFilter(level={self.level!r}, model='tanh')"


class FDJacobian:
    """Central-difference VJP provider for an opaque, pure waveform map.

    Jacobian columns are assembled lazily, one input entry at a time, and
    cached; the probe step is scaled by the per-entry magnitude.
    """

    def __init__(self, func, reference: np.ndarray, step: float = 1e-6):
        self.func = func
        self.reference = np.array(reference, dtype=float, copy=True)
        self.step = float(step)
        if not (self.step > 0):
            raise NumericError(f"finite-difference step must be positive, got {step}")
        first = np.asarray(func(self.reference.copy()), dtype=float)
        again = np.asarray(func(self.reference.copy()), dtype=float)
        if first.shape != self.reference.shape:
            raise StructuralError(
                f"user filter changed the waveform shape from {self.reference.shape} "
                f"to {first.shape}"
            )
        if not np.array_equal(first, again):
            raise NumericError("user filter is not deterministic: repeat evaluations differ")
        self.output = first
        scale = float(np.mean(np.abs(self.reference)))
        self._entry_scale = np.maximum(np.abs(self.reference), max(scale, 1.0))
        self._columns: dict[tuple[int, int], np.ndarray] = {}

    def column(self, channel: int, sample: int) -> np.ndarray:
        """Central-difference Jacobian column for one input entry."""
        key = (channel, sample)
        if key not in self._columns:
            h = self.step * self._entry_scale[channel, sample]
            plus = self.reference.copy()
            plus[channel, sample] += h
            minus = self.reference.copy()
            minus[channel, sample] -= h
            diff = np.asarray(self.func(plus), dtype=float) - np.asarray(
                self.func(minus), dtype=float
            )
            self._columns[key] = diff / (2.0 * h)
        return self._columns[key]

    def vjp(self, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        out = np.empty_like(self.reference)
        for j in range(self.reference.shape[0]):
            for n in range(self.reference.shape[1]):
                out[j, n] = float(np.sum(grad * self.column(j, n)))
        return out


def fd_jacobian_fallback(func, values: np.ndarray, step: float = 1e-6) -> FDJacobian:
    """Build a finite-difference VJP provider for a user-supplied filter map."""
    return FDJacobian(func, values, step)


class UserFilter(Filter):
    """Wrap an arbitrary pure waveform map, with a finite-difference VJP fallback.

    ``func`` takes and returns a real (K, M) array.  Supply ``vjp_func``
    with signature ``(grad, stage_input) -> grad_in`` when an analytic
    Jacobian is available; otherwise central differences are used.
    """

    pairwise = False

    def __init__(self, func, vjp_func=None, step: float = 1e-6):
        self.func = func
        self.vjp_func = vjp_func
        self.step = float(step)

    def apply(self, values: np.ndarray, dt: float) -> np.ndarray:
        out = np.asarray(self.func(values.copy()), dtype=float)
        if out.shape != values.shape:
            raise StructuralError(
                f"user filter changed the waveform shape from {values.shape} to {out.shape}"
            )
        return out

    def vjp(self, grad: np.ndarray, stage_input: np.ndarray, dt: float) -> np.ndarray:
        if self.vjp_func is not None:
            return np.asarray(self.vjp_func(grad, stage_input), dtype=float)
        return fd_jacobian_fallback(self.func, stage_input, self.step).vjp(grad)

    def __repr__(self) -> str:
        return f"UserFilter(func={getattr(self.func, '__name__', self.func)!r})"


@dataclass(frozen=True)
class Cascade:
    """Ordered distortion stages plus optional zero-input ring-down padding.

    ``pad_slices`` zero columns are appended before the first stage so
    that filter tails keep evolving the system after the nominal pulse;
    the overall Jacobian is then (N + pad) x N and the backward pass
    truncates accordingly.
    """

    stages: tuple[Filter, ...] = ()
    pad_slices: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.pad_slices < 0:
            raise StructuralError(f"pad_slices must be >= 0, got {self.pad_slices}")


@dataclass(frozen=True)
class CascadeCache:
    """Per-invocation forward-pass record consumed by :func:`cascade_vjp`."""

    cascade: Cascade
    stage_inputs: tuple[np.ndarray, ...]
    input_shape: tuple[int, int]
    dt: float


def cascade_apply(cascade: Cascade, sequence: ControlSequence) -> tuple[ControlSequence, CascadeCache]:
    """Run the forward distortion pass, returning the distorted sequence and cache."""
    values = np.asarray(sequence.values, dtype=float)
    if cascade.pad_slices:
        values = np.concatenate(
            [values, np.zeros((values.shape[0], cascade.pad_slices))], axis=1
        )
    inputs = []
    for stage in cascade.stages:
        inputs.append(values)
        values = stage.apply(values, sequence.dt)
        if values.shape != inputs[-1].shape:
            raise StructuralError(
                f"stage {stage!r} changed the waveform shape from "
                f"{inputs[-1].shape} to {values.shape}"
            )
    cache = CascadeCache(
        cascade=cascade,
        stage_inputs=tuple(inputs),
        input_shape=(sequence.n_channels, sequence.n_slices),
        dt=sequence.dt,
    )
    return sequence.with_values(values), cache


def cascade_vjp(cascade: Cascade, cache: CascadeCache, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the distorted output back to the raw controls.

    Stage VJPs run in reverse order; the ring-down padding columns are
    truncated at the end.  ``grad`` must have the distorted shape
    (K, N + pad); the result has the raw shape (K, N).
    """
    if cache.cascade is not cascade:
        raise StructuralError("cascade cache does not belong to this cascade")
    grad = np.asarray(grad, dtype=float)
    k, n = cache.input_shape
    expected = (k, n + cascade.pad_slices)
    if grad.shape != expected:
        raise StructuralError(
            f"gradient shape {grad.shape} does not match distorted shape {expected}"
        )
    for stage, stage_input in zip(reversed(cascade.stages), reversed(cache.stage_inputs)):
        grad = stage.vjp(grad, stage_input, cache.dt)
    return grad[:, :n].copy()
