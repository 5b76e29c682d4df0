"""Reference waveform generators: hard pulses, composite pulses, shaped pulses.

All generators return two-channel (X, Y) :class:`ControlSequence` objects
with amplitudes in rad/s.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import StructuralError
from .filters import ControlSequence

__all__ = ["hard_pulse", "composite_90x180y90x", "shaped_selective_pulse"]

_PHASES = {"x": 0.0, "y": 0.5 * math.pi, "-x": math.pi, "-y": 1.5 * math.pi}


def hard_pulse(
    amplitude: float,
    flip_angle: float = 0.5 * math.pi,
    phase: str = "y",
    n_slices: int = 40,
) -> ControlSequence:
    """Square pulse of constant amplitude realizing ``flip_angle`` about an axis.

    The duration follows from ``flip_angle / amplitude``; a 90-degree
    pulse at 62.5 kHz nutation is the classic 4 us hard pulse.
    """
    if phase not in _PHASES:
        raise StructuralError(f"unknown pulse phase '{phase}'; use one of {sorted(_PHASES)}")
    if not (amplitude > 0 and flip_angle > 0 and n_slices >= 1):
        raise StructuralError("hard pulse needs positive amplitude, angle, and slice count")
    duration = flip_angle / amplitude
    dt = duration / n_slices
    values = np.zeros((2, n_slices))
    values[0, :] = amplitude * math.cos(_PHASES[phase])
    values[1, :] = amplitude * math.sin(_PHASES[phase])
    return ControlSequence(values, dt=dt)


def composite_90x180y90x(
    amplitude: float,
    slices_per_90: int = 25,
    gap_slices: int = 3,
) -> ControlSequence:
    """The 90x-180y-90x composite inversion pulse, segments slightly spaced out.

    The small zero-amplitude gaps make the segment edges visible when the
    waveform is plotted before and after a distortion cascade.
    """
    if not (amplitude > 0 and slices_per_90 >= 1 and gap_slices >= 0):
        raise StructuralError("composite pulse needs positive amplitude and slice counts")
    dt = (0.5 * math.pi / amplitude) / slices_per_90
    seg90_x = np.zeros((2, slices_per_90))
    seg90_x[0, :] = amplitude
    seg180_y = np.zeros((2, 2 * slices_per_90))
    seg180_y[1, :] = amplitude
    gap = np.zeros((2, gap_slices))
    values = np.concatenate([seg90_x, gap, seg180_y, gap, seg90_x], axis=1)
    return ControlSequence(values, dt=dt)


def shaped_selective_pulse(
    peak_amplitude: float,
    duration: float,
    n_slices: int = 256,
    n_lobes: int = 3,
) -> ControlSequence:
    """Band-selective shaped pulse: a Blackman-windowed sinc on the X channel.

    The envelope has one tall central peak flanked by smaller lobes,
    which makes amplifier compression of the peaks easy to see.
    """
    if not (peak_amplitude > 0 and duration > 0 and n_slices >= 2 and n_lobes >= 1):
        raise StructuralError("shaped pulse needs positive amplitude, duration, and slices")
    t = np.linspace(-1.0, 1.0, n_slices)
    envelope = np.sinc(n_lobes * t)
    window = 0.42 + 0.5 * np.cos(math.pi * t) + 0.08 * np.cos(2 * math.pi * t)
    shape = envelope * window
    shape *= peak_amplitude / np.max(np.abs(shape))
    values = np.zeros((2, n_slices))
    values[0, :] = shape
    return ControlSequence(values, dt=duration / n_slices)
