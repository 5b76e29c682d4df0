"""Figure rendering for CLI reports.

Every CLI command that emits delimited data also renders a matplotlib
figure next to it: waveforms (per-channel traces plus the amplitude
envelope), optimization traces, and 1-D/2-D fidelity sweeps.  The Agg
backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .filters import ControlSequence

__all__ = [
    "save_waveform_figure",
    "save_trace_figure",
    "save_sweep_figure",
]


def _amplitude(seq: ControlSequence) -> np.ndarray:
    if seq.n_channels >= 2:
        return np.hypot(seq.values[0], seq.values[1])
    return np.abs(seq.values[0])


def save_waveform_figure(path, sequences: dict[str, ControlSequence]) -> None:
    """Overlay named waveforms: one panel per channel plus the amplitude envelope.

    All sequences must share the channel count; the time axes may differ
    (ring-down padding makes distorted waveforms longer).
    """
    first = next(iter(sequences.values()))
    n_channels = first.n_channels
    fig, axes = plt.subplots(
        n_channels + 1, 1, figsize=(8, 2.2 * (n_channels + 1)), sharex=True
    )
    axes = np.atleast_1d(axes)
    for label, seq in sequences.items():
        t = np.arange(seq.n_slices) * seq.dt * 1e6
        for ch in range(n_channels):
            axes[ch].step(t, seq.values[ch] / (2 * np.pi * 1e3), where="post", label=label)
        axes[-1].step(t, _amplitude(seq) / (2 * np.pi * 1e3), where="post", label=label)
    for ch in range(n_channels):
        axes[ch].set_ylabel(f"ch {ch} (kHz)")
        axes[ch].grid(alpha=0.3)
    axes[-1].set_ylabel("amplitude (kHz)")
    axes[-1].set_xlabel("time (us)")
    axes[-1].grid(alpha=0.3)
    axes[0].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_trace_figure(path, infidelity_trace: list[float]) -> None:
    """Semilog plot of infidelity against iteration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    trace = np.maximum(np.asarray(infidelity_trace, dtype=float), 1e-18)
    ax.semilogy(np.arange(trace.size), trace)
    ax.set_xlabel("iteration")
    ax.set_ylabel("infidelity")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_figure(
    path,
    param_names: list[str],
    points: np.ndarray,
    mean_fidelity: np.ndarray,
    box: tuple[tuple[float, float], tuple[float, float]] | None = None,
) -> None:
    """Render a fidelity sweep.

    For one swept parameter this is an infidelity line plot; for two, a
    log-infidelity map with an optional dashed box marking trained
    parameter ranges.
    """
    infidelity = np.maximum(1.0 - np.asarray(mean_fidelity, dtype=float), 1e-18)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    if len(param_names) == 1:
        ax.semilogy(points[:, 0], infidelity, marker="o", ms=3)
        ax.set_xlabel(param_names[0])
        ax.set_ylabel("infidelity")
        ax.grid(alpha=0.3, which="both")
        if box is not None:
            ax.axvline(box[0][0], ls="--", color="k", lw=1)
            ax.axvline(box[0][1], ls="--", color="k", lw=1)
    else:
        xs = np.unique(points[:, 0])
        ys = np.unique(points[:, 1])
        grid = np.full((ys.size, xs.size), np.nan)
        for (x, y), value in zip(points, infidelity):
            grid[np.searchsorted(ys, y), np.searchsorted(xs, x)] = value
        mesh = ax.pcolormesh(
            xs,
            ys,
            np.log10(grid),
            shading="nearest",
            cmap="viridis",
        )
        fig.colorbar(mesh, ax=ax, label="log10 infidelity")
        ax.set_xlabel(param_names[0])
        ax.set_ylabel(param_names[1])
        if box is not None:
            (x0, x1), (y0, y1) = box
            ax.plot(
                [x0, x1, x1, x0, x0],
                [y0, y0, y1, y1, y0],
                ls="--",
                color="w",
                lw=1.5,
            )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
