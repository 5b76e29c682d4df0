"""Command-line front end.

Subcommands::

    optimize   design a pulse from a config, write waveform/trace/member tables
    evaluate   grid-evaluate a stored waveform over swept parameters
    distort    push a stored waveform through the first distortion cascade row
    gradcheck  compare the analytic gradient against finite differences

Exit codes: 0 ok, 2 config error, 3 optimization non-convergence
(line-search failure; artifacts are still written), 4 gradcheck failure.
Every report also renders a figure next to its delimited output unless
``output.figures`` is disabled in the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    ProblemInfo,
    build_cascade_rows,
    build_problem,
    load_config,
    ppm_to_rad_per_s,
)
from .engine import ControlProblem, ensemble_objective
from .errors import ConfigError, RawGrapeError, StructuralError
from .filters import cascade_apply
from .optimizer import OptimizerConfig, initial_guess, minimize
from .spinops import DriftSpec
from .wavefile import read_waveform, write_table, write_waveform

__all__ = ["main"]

_SWEEP_PARAMS = ("offset_ppm", "power", "q", "sat_level")


def _parse_sweep(text: str) -> tuple[str, np.ndarray]:
    try:
        name, rest = text.split("=", 1)
        lo, hi, count = rest.split(":")
        values = np.linspace(float(lo), float(hi), int(count))
    except ValueError:
        raise ConfigError(
            f"bad sweep spec '{text}'; expected param=lo:hi:n"
        ) from None
    name = name.strip()
    if name not in _SWEEP_PARAMS:
        raise ConfigError(
            f"unknown sweep parameter '{name}'; available: {list(_SWEEP_PARAMS)}"
        )
    if int(count) < 1:
        raise ConfigError(f"sweep '{text}' needs at least one point")
    return name, values


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _optimizer_config(config: ExperimentConfig, seed_override: int | None) -> OptimizerConfig:
    opt = config.optimizer
    return OptimizerConfig(
        max_iterations=opt.max_iterations,
        gradient_tolerance=opt.gradient_tolerance,
        memory_pairs=opt.memory_pairs,
        wolfe_c1=opt.wolfe_c1,
        wolfe_c2=opt.wolfe_c2,
        amplitude_cap=config.controls.amplitude_cap,
        seed=opt.seed if seed_override is None else seed_override,
        initial_amplitude=opt.initial_amplitude,
        target_infidelity=opt.target_infidelity,
    )


def cmd_optimize(args) -> int:
    config = load_config(args.config)
    problem, _ = build_problem(config)
    out = _out_dir(args, config)
    opt_config = _optimizer_config(config, args.seed)

    result = minimize(problem, opt_config, workers=args.workers)

    write_waveform(out / "waveform.txt", result.waveform)
    write_table(
        out / "trace.csv",
        ["iteration", "infidelity", "gradient_norm"],
        [
            [i, f"{f:.17g}", f"{g:.17g}"]
            for i, (f, g) in enumerate(zip(result.infidelity_trace, result.gradient_norms))
        ],
        comments={"termination": result.termination},
    )
    write_table(
        out / "members.csv",
        ["member", "fidelity"],
        [[mid, f"{fid:.17g}"] for mid, fid in result.final_report.per_member],
        comments={"total": f"{result.final_report.total:.17g}"},
    )
    if config.output.figures:
        from . import report

        report.save_waveform_figure(out / "waveform.png", {"optimized": result.waveform})
        report.save_trace_figure(out / "trace.png", result.infidelity_trace)

    print(
        f"optimize: infidelity {1.0 - result.final_report.total:.3e} "
        f"after {len(result.infidelity_trace) - 1} iterations ({result.termination}); "
        f"artifacts in {out}"
    )
    return 3 if result.termination == "line-search-failure" else 0


def _swept_problem(
    base: ControlProblem,
    config: ExperimentConfig,
    info: ProblemInfo,
    assignments: dict[str, float],
) -> ControlProblem:
    """The base problem with swept parameter values substituted."""
    changes: dict = {}
    if "offset_ppm" in assignments:
        if config.system.nucleus is None or config.system.field_tesla is None:
            raise ConfigError("sweeping offset_ppm needs system.nucleus and field_tesla")
        offset = ppm_to_rad_per_s(
            assignments["offset_ppm"], config.system.nucleus, config.system.field_tesla
        )
        relaxation = base.drift_grid[0].relaxation
        changes["drift_grid"] = (DriftSpec(offset=offset, relaxation=relaxation),)
    if "power" in assignments:
        changes["power_scale_grid"] = (float(assignments["power"]),)
    if "q" in assignments or "sat_level" in assignments:
        rows = []
        found = {"q": False, "sat_level": False}
        for template in config.distortions.rows:
            new_row = []
            for stage in template:
                stage = dict(stage)
                if stage["type"] == "rlc" and "q" in assignments:
                    stage["quality_factor"] = float(assignments["q"])
                    found["q"] = True
                if stage["type"] in ("sat_tanh", "sat_rroot") and "sat_level" in assignments:
                    stage["level"] = float(assignments["sat_level"])
                    found["sat_level"] = True
                new_row.append(stage)
            rows.append(tuple(new_row))
        for name in ("q", "sat_level"):
            if name in assignments and not found[name]:
                raise ConfigError(
                    f"sweeping '{name}' needs a matching distortion stage in the config"
                )
        section = dataclasses.replace(config.distortions, rows=tuple(rows))
        changes["cascade_rows"] = build_cascade_rows(section, config.system, base.dt)
    if changes:
        changes["member_weights"] = None
        return dataclasses.replace(base, **changes)
    return base


def _trained_range(name: str, info: ProblemInfo) -> tuple[float, float] | None:
    values = {
        "offset_ppm": info.offsets_ppm,
        "power": info.power_scales,
        "q": np.asarray(info.quality_factors),
        "sat_level": np.asarray(info.saturation_levels),
    }[name]
    if values.size > 1 and float(values.max()) > float(values.min()):
        return float(values.min()), float(values.max())
    return None


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    problem, info = build_problem(config)
    out = _out_dir(args, config)
    waveform = read_waveform(args.waveform)
    if waveform.n_channels != problem.n_channels:
        raise StructuralError(
            f"waveform has {waveform.n_channels} channels but the config defines "
            f"{problem.n_channels}"
        )
    if waveform.n_slices != problem.n_slices or abs(waveform.dt - problem.dt) > 1e-12 * problem.dt:
        raise StructuralError(
            "waveform discretization does not match the config "
            f"(waveform: {waveform.n_slices} x {waveform.dt:g} s, "
            f"config: {problem.n_slices} x {problem.dt:g} s)"
        )

    sweeps = [_parse_sweep(s) for s in (args.sweep or [])]
    if len(sweeps) > 2:
        raise ConfigError("at most two swept parameters are supported")
    names = [name for name, _ in sweeps]
    if len(set(names)) != len(names):
        raise ConfigError("swept parameters must be distinct")

    grids = [values for _, values in sweeps]
    mesh = [()] if not sweeps else [
        tuple(point)
        for point in (
            [(v,) for v in grids[0]]
            if len(sweeps) == 1
            else [(a, b) for a in grids[0] for b in grids[1]]
        )
    ]

    rows = []
    points = []
    means = []
    for point in mesh:
        assignments = dict(zip(names, point))
        swept = _swept_problem(problem, config, info, assignments)
        rep = ensemble_objective(waveform, swept, gradient=False, workers=args.workers)
        p1 = f"{point[0]:.10g}" if len(point) >= 1 else ""
        p2 = f"{point[1]:.10g}" if len(point) >= 2 else ""
        for mid, fid in rep.per_member:
            rows.append([p1, p2, mid, f"{fid:.17g}"])
        rows.append([p1, p2, "total", f"{rep.total:.17g}"])
        points.append(point)
        means.append(rep.total)

    comments = {"param1": names[0] if len(names) > 0 else "none"}
    comments["param2"] = names[1] if len(names) > 1 else "none"
    write_table(out / "fidelity_table.csv", ["param1", "param2", "member", "fidelity"], rows, comments)

    if config.output.figures and sweeps:
        from . import report

        box = None
        ranges = [_trained_range(name, info) for name in names]
        if all(r is not None for r in ranges):
            box = (ranges[0], ranges[0]) if len(ranges) == 1 else (ranges[0], ranges[1])
        report.save_sweep_figure(
            out / "fidelity.png",
            names,
            np.asarray([list(p) for p in points], dtype=float),
            np.asarray(means),
            box=box,
        )

    print(f"evaluate: {len(points)} sweep point(s); table in {out / 'fidelity_table.csv'}")
    return 0


def cmd_distort(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    waveform = read_waveform(args.waveform)
    if waveform.n_channels != config.controls.channels:
        raise StructuralError(
            f"waveform has {waveform.n_channels} channels but the config defines "
            f"{config.controls.channels}"
        )
    # Filter coefficients follow the discretization of the waveform itself.
    rows = build_cascade_rows(config.distortions, config.system, waveform.dt)
    distorted, _ = cascade_apply(rows[0], waveform)

    write_waveform(out / "input_waveform.txt", waveform)
    write_waveform(out / "distorted_waveform.txt", distorted)
    if config.output.figures:
        from . import report

        report.save_waveform_figure(
            out / "distort.png", {"input": waveform, "distorted": distorted}
        )
    print(f"distort: wrote input and distorted waveforms to {out}")
    return 0


def _downsized_problem(problem: ControlProblem, max_slices: int = 32) -> ControlProblem:
    """Shrink a problem for gradient checking, keeping dt (and hence filters) intact."""
    n = min(problem.n_slices, max_slices)
    drift = problem.drift_grid
    if len(drift) > 3:
        idx = np.linspace(0, len(drift) - 1, 3).astype(int)
        drift = tuple(drift[i] for i in idx)
    powers = problem.power_scale_grid[:2]
    rows = problem.cascade_rows[:2]
    rows = tuple(
        dataclasses.replace(row, pad_slices=min(row.pad_slices, 4)) for row in rows
    )
    return dataclasses.replace(
        problem,
        n_slices=n,
        duration=n * problem.dt,
        drift_grid=drift,
        power_scale_grid=powers,
        cascade_rows=rows,
        member_weights=None,
    )


def gradient_check(
    config: ExperimentConfig,
    seed: int,
    workers: int = 1,
    corrupt: float = 0.0,
) -> tuple[float, ControlProblem]:
    """Max relative deviation between the analytic and finite-difference gradient."""
    problem, _ = build_problem(config)
    problem = _downsized_problem(problem)
    scale = config.optimizer.initial_amplitude
    if scale is None:
        scale = 0.5 * config.controls.amplitude_cap if config.controls.amplitude_cap else 1.0
    seq = initial_guess(problem.n_channels, problem.n_slices, scale, seed, problem.dt)

    report = ensemble_objective(seq, problem, gradient=True, workers=workers)
    analytic = report.gradient.copy()
    if corrupt:
        analytic[0, problem.n_slices // 2] *= 1.0 + corrupt
        analytic[0, problem.n_slices // 2] += corrupt * np.max(np.abs(analytic))

    step = 1e-3 * max(float(np.sqrt(np.mean(seq.values**2))), 1e-6)
    fd = np.zeros_like(analytic)
    for k in range(seq.n_channels):
        for n in range(seq.n_slices):
            plus = seq.values.copy()
            plus[k, n] += step
            minus = seq.values.copy()
            minus[k, n] -= step
            f_plus = ensemble_objective(
                seq.with_values(plus), problem, gradient=False, workers=workers
            ).total
            f_minus = ensemble_objective(
                seq.with_values(minus), problem, gradient=False, workers=workers
            ).total
            fd[k, n] = (f_plus - f_minus) / (2.0 * step)

    denom = max(float(np.max(np.abs(fd))), float(np.max(np.abs(analytic))), 1e-300)
    return float(np.max(np.abs(analytic - fd)) / denom), problem


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    seed = args.seed if args.seed is not None else config.optimizer.seed
    error, problem = gradient_check(config, seed, workers=args.workers, corrupt=args.corrupt)
    tolerance = 1e-5
    passed = error <= tolerance
    write_table(
        out / "gradcheck.csv",
        ["quantity", "value"],
        [
            ["max_relative_error", f"{error:.17g}"],
            ["tolerance", f"{tolerance:.17g}"],
            ["slices", problem.n_slices],
            ["members", len(problem.enumerate_members())],
            ["result", "pass" if passed else "fail"],
        ],
    )
    print(
        f"gradcheck: max relative error {error:.3e} "
        f"(tolerance {tolerance:.0e}) on N={problem.n_slices}, "
        f"{len(problem.enumerate_members())} members: {'PASS' if passed else 'FAIL'}"
    )
    return 0 if passed else 4


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rawgrape",
        description=(
            "Response-aware GRAPE pulse design: optimal control with "
            "instrument-distortion cascades inside the optimization loop."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, waveform=False):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out-dir", default=None, help="output directory (default from config)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="thread cap for ensemble groups")
        if waveform:
            p.add_argument("--waveform", required=True, help="stored waveform file")

    common(sub.add_parser("optimize", help="design a pulse"))
    common(sub.add_parser("evaluate", help="grid-evaluate a waveform"), waveform=True)
    sub.choices["evaluate"].add_argument(
        "--sweep",
        action="append",
        metavar="param=lo:hi:n",
        help=f"swept parameter, repeatable up to twice; params: {', '.join(_SWEEP_PARAMS)}",
    )
    common(sub.add_parser("distort", help="apply the first cascade row"), waveform=True)
    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(gc)
    gc.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    handlers = {
        "optimize": cmd_optimize,
        "evaluate": cmd_evaluate,
        "distort": cmd_distort,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, StructuralError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RawGrapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
