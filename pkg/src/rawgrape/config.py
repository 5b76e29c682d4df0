"""Experiment configuration: YAML schema, unit handling, problem assembly.

The configuration is a structured YAML document with sections ``system``,
``controls``, ``transfer``, ``distortions``, ``ensemble``, ``optimizer``,
and ``output``; the full schema is documented in the README.  Frequencies
accept plain numbers (rad/s) or strings with units ("70 kHz" means a
nutation/offset frequency and is converted via 2*pi); times accept plain
seconds or "ns"/"us"/"ms" strings.  The token ``larmor`` resolves to the
magnitude of the nucleus Larmor frequency from the gyromagnetic table.

Offsets are given in ppm and converted to rad/s through
``ppm * 1e-6 * gamma * B0``; the gyromagnetic table below (gamma/2pi in
MHz/T) is pinned by unit tests.

Stage grid parameters written as ``{min, max, count}`` expand one row
template into ``count`` rows, which is how distortion-parameter ensembles
are declared.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .engine import ControlProblem, TransferSet, transfer_preset
from .errors import ConfigError
from .filters import (
    Cascade,
    FilterCoefficient,
    FirFilter,
    RLCSpec,
    SaturationFilter,
    SinglePoleFilter,
    SingleZeroFilter,
    rlc_filter_pair,
)
from .spinops import DriftSpec, build_spin_half_ops, vec

__all__ = [
    "GYROMAGNETIC_MHZ_PER_T",
    "ExperimentConfig",
    "load_config",
    "dumps_config",
    "parse_frequency",
    "parse_time",
    "ppm_to_rad_per_s",
    "larmor_frequency",
    "build_problem",
    "build_transfer",
    "build_cascade_rows",
    "ProblemInfo",
]

# gamma / 2pi in MHz per tesla
GYROMAGNETIC_MHZ_PER_T = {
    "1H": 42.577478461,
    "2H": 6.535902311,
    "13C": 10.7084,
    "15N": -4.316,
    "19F": 40.078,
    "31P": 17.235,
}

_FREQ_UNITS = {
    "hz": 2.0 * math.pi,
    "khz": 2.0 * math.pi * 1e3,
    "mhz": 2.0 * math.pi * 1e6,
    "ghz": 2.0 * math.pi * 1e9,
    "rad/s": 1.0,
    "krad/s": 1e3,
    "mrad/s": 1e6,
}

_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}


def _parse_with_units(value, units: dict[str, float], what: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        parts = value.strip().split()
        if len(parts) == 1:
            # bare numbers like "5e-05" that YAML 1.1 leaves as strings
            try:
                return float(parts[0])
            except ValueError:
                raise ConfigError(f"cannot parse {what} '{value}'") from None
        if len(parts) == 2:
            try:
                number = float(parts[0])
            except ValueError:
                raise ConfigError(f"cannot parse {what} '{value}'") from None
            unit = parts[1].lower()
            if unit in units:
                return number * units[unit]
        raise ConfigError(
            f"cannot parse {what} '{value}'; use a number or 'value unit' with "
            f"unit in {sorted(units)}"
        )
    raise ConfigError(f"cannot parse {what} {value!r}")


def parse_frequency(value) -> float:
    """Frequency in rad/s from a number or a unit-suffixed string like '70 kHz'."""
    return _parse_with_units(value, _FREQ_UNITS, "frequency")


def parse_time(value) -> float:
    """Time in seconds from a number or a unit-suffixed string like '50 us'."""
    return _parse_with_units(value, _TIME_UNITS, "time")


def larmor_frequency(nucleus: str, field_tesla: float) -> float:
    """Magnitude of the Larmor frequency ``|gamma| B0`` in rad/s."""
    if nucleus not in GYROMAGNETIC_MHZ_PER_T:
        raise ConfigError(
            f"unknown nucleus '{nucleus}'; known: {sorted(GYROMAGNETIC_MHZ_PER_T)}"
        )
    gamma = 2.0 * math.pi * GYROMAGNETIC_MHZ_PER_T[nucleus] * 1e6
    return abs(gamma * field_tesla)


def ppm_to_rad_per_s(ppm: float, nucleus: str, field_tesla: float) -> float:
    """Chemical-shift offset in rad/s from ppm, nucleus, and field."""
    return ppm * 1e-6 * larmor_frequency(nucleus, field_tesla)


def _grid_values(spec, what: str) -> list[float]:
    """A list of floats from a scalar, list, or {min, max, count} mapping."""
    if isinstance(spec, dict):
        missing = {"min", "max", "count"} - set(spec)
        if missing:
            raise ConfigError(f"{what} grid needs min/max/count, missing {sorted(missing)}")
        count = int(spec["count"])
        if count < 1:
            raise ConfigError(f"{what} grid count must be >= 1, got {count}")
        return [float(v) for v in np.linspace(float(spec["min"]), float(spec["max"]), count)]
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    return [float(spec)]


@dataclass(frozen=True)
class SystemSection:
    nucleus: str | None = None
    field_tesla: float | None = None
    offsets_ppm: object = None
    relaxation: object = None

    def larmor(self) -> float:
        if self.nucleus is None or self.field_tesla is None:
            raise ConfigError("system.nucleus and system.field_tesla are required here")
        return larmor_frequency(self.nucleus, self.field_tesla)


@dataclass(frozen=True)
class ControlsSection:
    channels: int = 2
    duration: float = 50e-6
    slices: int = 500
    amplitude_cap: float | None = None


@dataclass(frozen=True)
class TransferSection:
    preset: str | None = None
    pairs: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class DistortionsSection:
    rows: tuple[tuple[dict, ...], ...] = ()
    pad_slices: int = 0


@dataclass(frozen=True)
class EnsembleSection:
    power_scales: object = 1.0
    weights: object = "uniform"


@dataclass(frozen=True)
class OptimizerSection:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    memory_pairs: int = 20
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    initial_amplitude: float | None = None
    target_infidelity: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    figures: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    controls: ControlsSection = field(default_factory=ControlsSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    distortions: DistortionsSection = field(default_factory=DistortionsSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["transfer"]["pairs"] = [list(p) for p in self.transfer.pairs]
        raw["distortions"]["rows"] = [
            [dict(stage) for stage in row] for row in self.distortions.rows
        ]
        return raw


_KNOWN_SECTIONS = {
    "system", "controls", "transfer", "distortions", "ensemble", "optimizer", "output",
}
_STAGE_TYPES = {"spf", "szf", "rlc", "fir", "sat_tanh", "sat_rroot"}


def _require_mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    return node


def _section(raw: dict, name: str, known: set[str]) -> dict:
    node = _require_mapping(raw.get(name), name)
    unknown = set(node) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return node


def _parse_stage(stage, path: str) -> dict:
    stage = _require_mapping(stage, path)
    if "type" not in stage:
        raise ConfigError(f"{path}: distortion stage needs a 'type'")
    if stage["type"] not in _STAGE_TYPES:
        raise ConfigError(
            f"{path}: unknown filter type '{stage['type']}'; "
            f"available: {sorted(_STAGE_TYPES)}"
        )
    return dict(stage)


def load_config(source) -> ExperimentConfig:
    """Parse a YAML config from a path, string, or dict into an ExperimentConfig."""
    if isinstance(source, ExperimentConfig):
        return source
    if isinstance(source, dict):
        raw = source
    else:
        if isinstance(source, Path):
            text = source.read_text()
        elif isinstance(source, str) and "\n" not in source and Path(source).exists():
            text = Path(source).read_text()
        else:
            text = str(source)
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"YAML parse error{where}: {exc}") from exc
    raw = _require_mapping(raw, "config")
    unknown = set(raw) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")

    sys_node = _section(raw, "system", {"nucleus", "field_tesla", "offsets_ppm", "relaxation"})
    system = SystemSection(
        nucleus=sys_node.get("nucleus"),
        field_tesla=float(sys_node["field_tesla"]) if "field_tesla" in sys_node else None,
        offsets_ppm=sys_node.get("offsets_ppm"),
        relaxation=sys_node.get("relaxation"),
    )

    ctl_node = _section(raw, "controls", {"channels", "duration", "slices", "amplitude_cap"})
    controls = ControlsSection(
        channels=int(ctl_node.get("channels", 2)),
        duration=parse_time(ctl_node.get("duration", 50e-6)),
        slices=int(ctl_node.get("slices", 500)),
        amplitude_cap=(
            parse_frequency(ctl_node["amplitude_cap"])
            if ctl_node.get("amplitude_cap") is not None
            else None
        ),
    )
    if controls.channels < 1 or controls.slices < 1 or not controls.duration > 0:
        raise ConfigError("controls: channels and slices must be >= 1 and duration > 0")

    tr_node = _section(raw, "transfer", {"preset", "pairs"})
    pairs = []
    for i, pair in enumerate(tr_node.get("pairs") or []):
        pair = _require_mapping(pair, f"transfer.pairs[{i}]")
        if "source" not in pair or "target" not in pair:
            raise ConfigError(f"transfer.pairs[{i}]: needs 'source' and 'target'")
        pairs.append((str(pair["source"]), str(pair["target"])))
    transfer = TransferSection(preset=tr_node.get("preset"), pairs=tuple(pairs))
    if transfer.preset is None and not transfer.pairs:
        raise ConfigError("transfer: give a 'preset' or a non-empty 'pairs' list")

    dist_node = _section(raw, "distortions", {"rows", "pad_slices"})
    rows = []
    for i, row in enumerate(dist_node.get("rows") or []):
        if not isinstance(row, list):
            raise ConfigError(f"distortions.rows[{i}]: expected a list of stages")
        rows.append(
            tuple(_parse_stage(stage, f"distortions.rows[{i}][{j}]") for j, stage in enumerate(row))
        )
    distortions = DistortionsSection(
        rows=tuple(rows), pad_slices=int(dist_node.get("pad_slices", 0))
    )
    if distortions.pad_slices < 0:
        raise ConfigError("distortions.pad_slices must be >= 0")

    ens_node = _section(raw, "ensemble", {"power_scales", "weights"})
    ensemble = EnsembleSection(
        power_scales=ens_node.get("power_scales", 1.0),
        weights=ens_node.get("weights", "uniform"),
    )

    opt_node = _section(
        raw,
        "optimizer",
        {
            "max_iterations", "gradient_tolerance", "memory_pairs", "wolfe_c1",
            "wolfe_c2", "initial_amplitude", "target_infidelity", "seed",
        },
    )
    optimizer = OptimizerSection(
        max_iterations=int(opt_node.get("max_iterations", 500)),
        gradient_tolerance=float(opt_node.get("gradient_tolerance", 1e-8)),
        memory_pairs=int(opt_node.get("memory_pairs", 20)),
        wolfe_c1=float(opt_node.get("wolfe_c1", 1e-4)),
        wolfe_c2=float(opt_node.get("wolfe_c2", 0.9)),
        initial_amplitude=(
            parse_frequency(opt_node["initial_amplitude"])
            if opt_node.get("initial_amplitude") is not None
            else None
        ),
        target_infidelity=(
            float(opt_node["target_infidelity"])
            if opt_node.get("target_infidelity") is not None
            else None
        ),
        seed=int(opt_node.get("seed", 0)),
    )

    out_node = _section(raw, "output", {"directory", "figures"})
    output = OutputSection(
        directory=str(out_node.get("directory", "out")),
        figures=bool(out_node.get("figures", True)),
    )

    return ExperimentConfig(
        system=system,
        controls=controls,
        transfer=transfer,
        distortions=distortions,
        ensemble=ensemble,
        optimizer=optimizer,
        output=output,
    )


def dumps_config(config: ExperimentConfig) -> str:
    """Serialize a normalized config back to YAML."""
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


_STATE_VECTORS = None


def _state_vector(label: str):
    global _STATE_VECTORS
    if _STATE_VECTORS is None:
        ops = build_spin_half_ops()
        _STATE_VECTORS = {
            "x": vec(ops.sx),
            "y": vec(ops.sy),
            "z": vec(ops.sz),
            "-x": -vec(ops.sx),
            "-y": -vec(ops.sy),
            "-z": -vec(ops.sz),
        }
    key = label.strip().lower()
    if key not in _STATE_VECTORS:
        raise ConfigError(
            f"unknown state label '{label}'; use one of {sorted(_STATE_VECTORS)}"
        )
    return _STATE_VECTORS[key]


def build_transfer(section: TransferSection) -> TransferSet:
    """Transfer set from a named preset or explicit state-label pairs."""
    if section.preset is not None:
        try:
            return transfer_preset(section.preset)
        except Exception as exc:
            raise ConfigError(f"transfer.preset: {exc}") from exc
    pairs = tuple(
        (_state_vector(src), _state_vector(dst)) for src, dst in section.pairs
    )
    return TransferSet(pairs=pairs)


def _resolve_frequency(value, system: SystemSection, path: str) -> float:
    if isinstance(value, str) and value.strip().lower() == "larmor":
        try:
            return system.larmor()
        except ConfigError as exc:
            raise ConfigError(f"{path}: 'larmor' needs system.nucleus and field_tesla ({exc})")
    try:
        return parse_frequency(value)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _expand_row(row: tuple[dict, ...], path: str) -> list[tuple[dict, ...]]:
    """Expand one gridded stage parameter into multiple rows."""
    grids = []
    for j, stage in enumerate(row):
        for key, value in stage.items():
            if isinstance(value, dict) and {"min", "max", "count"} <= set(value):
                grids.append((j, key, _grid_values(value, f"{path}[{j}].{key}")))
    if not grids:
        return [row]
    if len(grids) > 1:
        raise ConfigError(f"{path}: only one gridded parameter per row is supported")
    j, key, values = grids[0]
    expanded = []
    for v in values:
        new_row = []
        for jj, stage in enumerate(row):
            stage = dict(stage)
            if jj == j:
                stage[key] = v
            new_row.append(stage)
        expanded.append(tuple(new_row))
    return expanded


def _build_stage(stage: dict, system: SystemSection, dt: float, path: str):
    kind = stage["type"]
    params = {k: v for k, v in stage.items() if k != "type"}

    def take(name, default=None, required=False):
        if required and name not in params:
            raise ConfigError(f"{path}: stage '{kind}' requires parameter '{name}'")
        return params.pop(name, default)

    if kind in ("spf", "szf"):
        coefficient = take("coefficient")
        if coefficient is not None:
            if not isinstance(coefficient, (list, tuple)) or len(coefficient) != 2:
                raise ConfigError(f"{path}: 'coefficient' must be [re, im]")
            value = complex(float(coefficient[0]), float(coefficient[1]))
        else:
            damping = float(take("damping_rate", required=True))
            frequency = _resolve_frequency(take("frequency", 0.0), system, path)
            frame = _resolve_frequency(take("frame_frequency", frequency), system, path)
            value = FilterCoefficient.from_rates(damping, frequency, frame, dt).value
        built = SinglePoleFilter(value) if kind == "spf" else SingleZeroFilter(value)
    elif kind == "rlc":
        natural = _resolve_frequency(take("natural_frequency", "larmor"), system, path)
        q = float(take("quality_factor", required=True))
        frame = _resolve_frequency(take("frame_frequency", "larmor"), system, path)
        built = rlc_filter_pair(RLCSpec(natural, q, frame), dt)
    elif kind == "fir":
        taps = take("taps", required=True)
        built = FirFilter(np.asarray(taps, dtype=float))
    elif kind == "sat_tanh":
        level = _resolve_frequency(take("level", required=True), system, path)
        built = SaturationFilter(level=level, model="tanh")
    else:  # sat_rroot
        level = _resolve_frequency(take("level", required=True), system, path)
        sharpness = float(take("sharpness", 2.0))
        built = SaturationFilter(level=level, model="rroot", sharpness=sharpness)

    if params:
        raise ConfigError(f"{path}: stage '{kind}' got unknown parameters {sorted(params)}")
    return built


def build_cascade_rows(
    distortions: DistortionsSection, system: SystemSection, dt: float
) -> tuple[Cascade, ...]:
    """Cascade rows from the config, expanding gridded stage parameters."""
    if not distortions.rows:
        return (Cascade(pad_slices=distortions.pad_slices),)
    rows = []
    for i, template in enumerate(distortions.rows):
        for row in _expand_row(template, f"distortions.rows[{i}]"):
            stages: list = []
            for j, stage in enumerate(row):
                built = _build_stage(stage, system, dt, f"distortions.rows[{i}][{j}]")
                if isinstance(built, tuple):
                    stages.extend(built)
                else:
                    stages.append(built)
            rows.append(Cascade(stages=tuple(stages), pad_slices=distortions.pad_slices))
    return tuple(rows)


def _build_relaxation(spec, path: str) -> np.ndarray | None:
    if spec is None:
        return None
    if isinstance(spec, dict):
        unknown = set(spec) - {"t1", "t2"}
        if unknown:
            raise ConfigError(f"{path}: unknown relaxation keys {sorted(unknown)}")
        r = np.zeros((4, 4))
        if "t2" in spec:
            rate = 1.0 / parse_time(spec["t2"])
            r[1, 1] -= rate
            r[2, 2] -= rate
        if "t1" in spec:
            # symmetric population exchange: d(p0 - p1)/dt = -(p0 - p1)/T1
            rate = 0.5 / parse_time(spec["t1"])
            r[0, 0] -= rate
            r[0, 3] += rate
            r[3, 0] += rate
            r[3, 3] -= rate
        return r
    r = np.asarray(spec, dtype=float)
    if r.shape != (4, 4):
        raise ConfigError(f"{path}: relaxation matrix must be 4x4, got shape {r.shape}")
    return r


@dataclass
class ProblemInfo:
    """Ancillary quantities derived while building a problem (for reports)."""

    offsets_ppm: np.ndarray
    offsets_rad: np.ndarray
    amplitude_cap: float | None
    larmor: float | None
    power_scales: np.ndarray
    quality_factors: tuple[float, ...]
    saturation_levels: tuple[float, ...]


def build_problem(config: ExperimentConfig) -> tuple[ControlProblem, ProblemInfo]:
    """Assemble the ControlProblem described by a config."""
    controls = config.controls
    if controls.channels != 2:
        raise ConfigError(
            "only two control channels (X and Y on one spin) are supported; "
            f"got channels={controls.channels}"
        )
    dt = controls.duration / controls.slices

    system = config.system
    relaxation = _build_relaxation(system.relaxation, "system.relaxation")
    offsets_ppm = system.offsets_ppm
    if offsets_ppm is None and system.nucleus is not None and system.field_tesla is not None:
        # default chemical-shift range: 100 offsets over +-100 ppm
        offsets_ppm = {"min": -100.0, "max": 100.0, "count": 100}
    if offsets_ppm is not None:
        if system.nucleus is None or system.field_tesla is None:
            raise ConfigError("system.offsets_ppm needs system.nucleus and field_tesla")
        ppm = np.asarray(_grid_values(offsets_ppm, "system.offsets_ppm"), dtype=float)
        offsets = np.array(
            [ppm_to_rad_per_s(p, system.nucleus, system.field_tesla) for p in ppm]
        )
    else:
        ppm = np.array([0.0])
        offsets = np.array([0.0])
    drift_grid = tuple(DriftSpec(offset=float(o), relaxation=relaxation) for o in offsets)

    transfer = build_transfer(config.transfer)

    rows = build_cascade_rows(config.distortions, system, dt)

    power_scales = np.asarray(
        _grid_values(config.ensemble.power_scales, "ensemble.power_scales"), dtype=float
    )
    if np.any(power_scales <= 0):
        raise ConfigError("ensemble.power_scales must be positive")

    weights = None
    if config.ensemble.weights != "uniform":
        weights = tuple(float(w) for w in config.ensemble.weights)

    ops = build_spin_half_ops()
    try:
        problem = ControlProblem(
            drift_grid=drift_grid,
            control_ops=(ops.ad_sx, ops.ad_sy),
            transfer=transfer,
            duration=controls.duration,
            n_slices=controls.slices,
            power_scale_grid=tuple(power_scales),
            cascade_rows=rows,
            member_weights=weights,
        )
    except Exception as exc:
        raise ConfigError(f"problem assembly failed: {exc}") from exc

    larmor = None
    if system.nucleus is not None and system.field_tesla is not None:
        larmor = system.larmor()
    quality_factors = []
    saturation_levels = []
    for template in config.distortions.rows:
        for stage in template:
            if stage["type"] == "rlc":
                quality_factors.extend(
                    _grid_values(stage["quality_factor"], "quality_factor")
                )
            if stage["type"] in ("sat_tanh", "sat_rroot"):
                level = stage["level"]
                if isinstance(level, dict):
                    saturation_levels.extend(_grid_values(level, "level"))
                elif not isinstance(level, str) or level.strip().lower() != "larmor":
                    saturation_levels.append(parse_frequency(level))

    info = ProblemInfo(
        offsets_ppm=ppm,
        offsets_rad=offsets,
        amplitude_cap=controls.amplitude_cap,
        larmor=larmor,
        power_scales=power_scales,
        quality_factors=tuple(quality_factors),
        saturation_levels=tuple(saturation_levels),
    )
    return problem, info
