"""Limited-memory quasi-Newton minimization of ensemble infidelity.

The optimizer runs L-BFGS (two-loop recursion) with a strong-Wolfe line
search on ``1 - fidelity``.  An amplitude cap is enforced by the smooth
reparameterization ``cap * tanh(x / cap)`` of the per-sample pair
amplitude; the clamp is implemented as a saturation stage prepended to
every member's distortion cascade, so its chain rule reuses the cascade
machinery and gradients stay exact.

Internally the waveform is scaled by the initial amplitude so the
optimization variable is O(1); this only affects conditioning, not the
minimizer.  Progress lines go to the ``rawgrape.optimizer`` logger in
``key=value`` form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import ControlProblem, FidelityReport, ensemble_objective
from .errors import StructuralError
from .filters import Cascade, ControlSequence, SaturationFilter

__all__ = ["OptimizerConfig", "OptimizationResult", "initial_guess", "minimize"]

logger = logging.getLogger("rawgrape.optimizer")

# largest per-iteration change of any waveform entry, in units of the
# amplitude scale of the problem
_MAX_STEP = 1.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`minimize`.

    ``gradient_tolerance`` applies to the max-norm of the gradient in the
    scaled (dimensionless) optimization variable, relative to the
    objective scale.  ``amplitude_cap`` bounds the per-sample pair
    amplitude in rad/s; ``initial_amplitude`` sets the scale of the
    random initial waveform (defaults to half the cap).
    ``target_infidelity`` stops the run early once reached.
    """

    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    memory_pairs: int = 20
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    amplitude_cap: float | None = None
    seed: int = 0
    initial_amplitude: float | None = None
    target_infidelity: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise StructuralError(
                f"Wolfe parameters need 0 < c1 < c2 < 1, got c1={self.wolfe_c1}, c2={self.wolfe_c2}"
            )
        if self.memory_pairs < 1:
            raise StructuralError(f"memory_pairs must be >= 1, got {self.memory_pairs}")
        if self.max_iterations < 0:
            raise StructuralError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.amplitude_cap is not None and not (self.amplitude_cap > 0):
            raise StructuralError(f"amplitude cap must be positive, got {self.amplitude_cap}")


@dataclass
class OptimizationResult:
    """Best waveform found, the infidelity trace, and why the run stopped."""

    waveform: ControlSequence
    infidelity_trace: list[float]
    final_report: FidelityReport
    termination: str
    n_evaluations: int = 0
    gradient_norms: list[float] = field(default_factory=list)


def initial_guess(
    n_channels: int,
    n_slices: int,
    amplitude_scale: float,
    seed: int,
    dt: float,
) -> ControlSequence:
    """Smooth random waveform with RMS amplitude ``amplitude_scale / 3``.

    White noise is low-pass filtered (zero-phase, first-order smoothing
    run forward then backward) and rescaled; the result is reproducible
    from the seed.
    """
    if amplitude_scale == 0.0:
        return ControlSequence(np.zeros((n_channels, n_slices)), dt=dt)
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((n_channels, n_slices))
    smoothing = min(0.95, max(0.0, 1.0 - 16.0 / n_slices))
    if smoothing > 0.0:
        for row in values:
            acc = 0.0
            for n in range(n_slices):
                acc = (1.0 - smoothing) * row[n] + smoothing * acc
                row[n] = acc
            acc = 0.0
            for n in range(n_slices - 1, -1, -1):
                acc = (1.0 - smoothing) * row[n] + smoothing * acc
                row[n] = acc
    rms = float(np.sqrt(np.mean(values**2)))
    values *= (amplitude_scale / 3.0) / rms
    return ControlSequence(values, dt=dt)


def _two_loop_direction(grad: np.ndarray, memory: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """L-BFGS two-loop recursion producing a descent direction from (s, y) pairs."""
    q = grad.copy()
    alphas = []
    for s, y in reversed(memory):
        rho = 1.0 / float(y @ s)
        alpha = rho * float(s @ q)
        alphas.append((alpha, rho))
        q -= alpha * y
    if memory:
        s, y = memory[-1]
        q *= float(s @ y) / float(y @ y)
    for (alpha, rho), (s, y) in zip(reversed(alphas), memory):
        beta = rho * float(y @ q)
        q += (alpha - beta) * s
    return -q


def _strong_wolfe(
    evaluate, f0, g0, direction, c1, c2, alpha_max=np.inf, max_expand=25, max_zoom=30
):
    """Strong-Wolfe line search (bracket and bounded bisection zoom).

    ``evaluate(alpha)`` returns ``(f, grad)`` at ``x + alpha d``.  The
    step is capped at ``alpha_max``; a capped step that still satisfies
    the sufficient-decrease condition is accepted even when the
    curvature condition cannot be met (the caller's curvature guard then
    skips the quasi-Newton update).  Returns ``(alpha, f, grad,
    n_evals)`` or ``None`` when no acceptable step was found.
    """
    slope0 = float(g0 @ direction)
    if slope0 >= 0:
        return None
    evals = 0

    def phi(alpha):
        nonlocal evals
        f, g = evaluate(alpha)
        evals += 1
        return f, g, float(g @ direction)

    def zoom(lo, f_lo, hi, f_hi):
        for _ in range(max_zoom):
            alpha = 0.5 * (lo + hi)
            f, g, slope = phi(alpha)
            if f > f0 + c1 * alpha * slope0 or f >= f_lo:
                hi, f_hi = alpha, f
            else:
                if abs(slope) <= -c2 * slope0:
                    return alpha, f, g
                if slope * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo = alpha, f
        return None

    alpha_prev, f_prev = 0.0, f0
    alpha = min(1.0, alpha_max)
    for i in range(max_expand):
        f, g, slope = phi(alpha)
        if f > f0 + c1 * alpha * slope0 or (i > 0 and f >= f_prev):
            result = zoom(alpha_prev, f_prev, alpha, f)
            break
        if abs(slope) <= -c2 * slope0:
            result = (alpha, f, g)
            break
        if slope >= 0:
            result = zoom(alpha, f, alpha_prev, f_prev)
            break
        if alpha >= alpha_max * (1.0 - 1e-12):
            result = (alpha, f, g)
            break
        alpha_prev, f_prev = alpha, f
        alpha = min(2.0 * alpha, alpha_max)
    else:
        result = None

    if result is None:
        return None
    return result[0], result[1], result[2], evals


def _clamped_problem(problem: ControlProblem, cap: float) -> tuple[ControlProblem, SaturationFilter]:
    """Prepend the tanh amplitude clamp to every member's cascade."""
    clamp = SaturationFilter(level=cap, model="tanh")

    def with_clamp(cascade: Cascade) -> Cascade:
        return Cascade(stages=(clamp,) + cascade.stages, pad_slices=cascade.pad_slices)

    if problem.members is not None:
        members = tuple((d, s, with_clamp(c)) for d, s, c in problem.members)
        return replace(problem, members=members), clamp
    rows = tuple(with_clamp(row) for row in problem.cascade_rows)
    return replace(problem, cascade_rows=rows), clamp


def minimize(
    problem: ControlProblem,
    config: OptimizerConfig,
    initial: ControlSequence | None = None,
    workers: int = 1,
) -> OptimizationResult:
    """Minimize ensemble infidelity over the control waveform.

    Returns the best iterate seen, with termination one of
    ``gradient-converged``, ``iteration-cap``, ``line-search-failure``,
    or ``target-reached``.
    """
    n_channels = problem.n_channels
    n_slices = problem.n_slices
    dt = problem.dt
    cap = config.amplitude_cap

    scale = config.initial_amplitude
    if scale is None:
        if initial is not None:
            rms = float(np.sqrt(np.mean(initial.values**2)))
            scale = 3.0 * rms if rms > 0 else (0.5 * cap if cap else 1.0)
        else:
            scale = 0.5 * cap if cap else 1.0
    if initial is None:
        initial = initial_guess(n_channels, n_slices, scale, config.seed, dt)
    if initial.values.shape != (n_channels, n_slices):
        raise StructuralError(
            f"initial waveform shape {initial.values.shape} does not match problem "
            f"({n_channels}, {n_slices})"
        )

    clamp = None
    work_problem = problem
    if cap is not None:
        work_problem, clamp = _clamped_problem(problem, cap)

    ref = max(abs(scale), 1e-12) if scale else (cap or 1.0)

    def emit(raw: np.ndarray) -> ControlSequence:
        values = raw.reshape(n_channels, n_slices) * ref
        if clamp is not None:
            values = clamp.apply(values, dt)
        return ControlSequence(values, dt=dt)

    n_evals = 0

    def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
        nonlocal n_evals
        n_evals += 1
        seq = ControlSequence(z.reshape(n_channels, n_slices) * ref, dt=dt)
        report = ensemble_objective(seq, work_problem, gradient=True, workers=workers)
        grad = -ref * report.gradient
        return 1.0 - report.total, grad.reshape(-1)

    z = (initial.values / ref).reshape(-1).copy()
    f, g = objective(z)
    trace = [f]
    grad_norms = [float(np.max(np.abs(g)))]
    best_f, best_z = f, z.copy()
    memory: list[tuple[np.ndarray, np.ndarray]] = []
    termination = "iteration-cap"
    logger.info("iter=0 infidelity=%.15e grad_norm=%.6e", f, grad_norms[-1])

    def converged(fval: float, gvec: np.ndarray) -> bool:
        return float(np.max(np.abs(gvec))) <= config.gradient_tolerance * max(1.0, abs(fval))

    def hit_target(fval: float) -> bool:
        return config.target_infidelity is not None and fval <= config.target_infidelity

    if converged(f, g):
        termination = "gradient-converged"
    elif hit_target(f):
        termination = "target-reached"
    else:
        for iteration in range(1, config.max_iterations + 1):
            direction = _two_loop_direction(g, memory)
            if float(g @ direction) >= 0:
                memory.clear()
                direction = -g

            # Bound the per-iteration displacement (in units of the
            # amplitude scale) so the search cannot catapult into the
            # flat, saturated region of the amplitude clamp.
            alpha_max = _MAX_STEP / max(float(np.max(np.abs(direction))), 1e-300)
            search = _strong_wolfe(
                lambda a: objective(z + a * direction),
                f,
                g,
                direction,
                config.wolfe_c1,
                config.wolfe_c2,
                alpha_max=alpha_max,
            )
            if search is None:
                termination = "line-search-failure"
                break
            alpha, f_new, g_new, _ = search

            step = alpha * direction
            y = g_new - g
            if float(step @ y) > 1e-10 * float(np.linalg.norm(step) * np.linalg.norm(y)):
                memory.append((step, y))
                if len(memory) > config.memory_pairs:
                    memory.pop(0)

            z = z + step
            f, g = f_new, g_new
            trace.append(f)
            grad_norms.append(float(np.max(np.abs(g))))
            if f < best_f:
                best_f, best_z = f, z.copy()
            logger.info(
                "iter=%d infidelity=%.15e grad_norm=%.6e step=%.6e",
                iteration,
                f,
                grad_norms[-1],
                alpha,
            )
            if converged(f, g):
                termination = "gradient-converged"
                break
            if hit_target(f):
                termination = "target-reached"
                break

    waveform = emit(best_z)
    final_report = ensemble_objective(waveform, problem, gradient=False)
    return OptimizationResult(
        waveform=waveform,
        infidelity_trace=trace,
        final_report=final_report,
        termination=termination,
        n_evaluations=n_evals,
        gradient_norms=grad_norms,
    )
