"""Delimited text formats for waveforms and result tables.

Waveform files carry a mandatory comment header (channels, slices, dt,
units) followed by one tab-separated row of K channel values (rad/s) per
time slice.  Values are written with 17 significant digits so
read -> write -> read round-trips float64 exactly.  Tables are plain CSV
with a mandatory header row; all files are UTF-8 with unix newlines.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .errors import StructuralError
from .filters import ControlSequence

__all__ = ["write_waveform", "read_waveform", "write_table", "read_table"]

_MAGIC = "control waveform v1"


def write_waveform(path, sequence: ControlSequence) -> None:
    """Write a waveform file with header and one row per time slice."""
    lines = [
        f"# {_MAGIC}",
        f"# channels: {sequence.n_channels}",
        f"# slices: {sequence.n_slices}",
        f"# dt: {sequence.dt:.17g}",
        "# units: rad/s",
    ]
    for n in range(sequence.n_slices):
        lines.append("\t".join(f"{v:.17g}" for v in sequence.values[:, n]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_waveform(path) -> ControlSequence:
    """Read a waveform file written by :func:`write_waveform`."""
    text = Path(path).read_text(encoding="utf-8")
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                key, value = body.split(":", 1)
                header[key.strip()] = value.strip()
            continue
        try:
            rows.append([float(v) for v in line.split("\t")])
        except ValueError as exc:
            raise StructuralError(f"{path}: bad data row at line {lineno}: {exc}") from exc

    for key in ("channels", "slices", "dt", "units"):
        if key not in header:
            raise StructuralError(f"{path}: missing mandatory header field '{key}'")
    channels = int(header["channels"])
    slices = int(header["slices"])
    dt = float(header["dt"])
    if header["units"] != "rad/s":
        raise StructuralError(f"{path}: unsupported units '{header['units']}'")
    if len(rows) != slices:
        raise StructuralError(
            f"{path}: header promises {slices} slices but file has {len(rows)} data rows"
        )
    values = np.asarray(rows, dtype=float)
    if values.shape[1] != channels:
        raise StructuralError(
            f"{path}: header promises {channels} channels but rows have {values.shape[1]}"
        )
    return ControlSequence(values.T, dt=dt)


def write_table(path, columns: list[str], rows: list[list], comments: dict | None = None) -> None:
    """Write a CSV table with optional '# key: value' comment lines."""
    buffer = io.StringIO()
    if comments:
        for key, value in comments.items():
            buffer.write(f"# {key}: {value}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    Path(path).write_text(buffer.getvalue(), encoding="utf-8", newline="\n")


def read_table(path) -> tuple[list[str], list[list[str]], dict[str, str]]:
    """Read a CSV table; returns (columns, rows, comments)."""
    comments: dict[str, str] = {}
    data_lines = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                key, value = body.split(":", 1)
                comments[key.strip()] = value.strip()
            continue
        if line.strip():
            data_lines.append(line)
    reader = csv.reader(data_lines)
    rows = list(reader)
    if not rows:
        raise StructuralError(f"{path}: table has no header row")
    return rows[0], rows[1:], comments
