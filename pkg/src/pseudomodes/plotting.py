"""Static PNG figures written next to result CSVs (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_series(path: str | Path, times: np.ndarray, series: Mapping[str, np.ndarray],
                title: str = "", ylabel: str = "value", stderr: Mapping[str, np.ndarray] | None = None,
                reference: Mapping[str, np.ndarray] | None = None, logy: bool = False) -> Path:
    """Real parts of each series vs time, with optional 1-SE bands and dashed references."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, y in series.items():
        y = np.real(np.asarray(y))
        line, = ax.plot(times, np.abs(y) if logy else y, label=name)
        if stderr is not None and name in stderr:
            se = np.asarray(stderr[name])
            ax.fill_between(times, y - se, y + se, color=line.get_color(), alpha=0.25, lw=0)
    for name, y in (reference or {}).items():
        y = np.real(np.asarray(y))
        ax.plot(times, np.abs(y) if logy else y, "k--", lw=1, label=f"{name} (deterministic)")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_heat_currents(path: str | Path, times: np.ndarray, currents: np.ndarray) -> Path:
    """Real and imaginary parts of the per-mode currents and their sum."""
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    for n in range(currents.shape[1]):
        a1.plot(times, currents[:, n].real, label=f"Re q_{n + 1}")
        a2.plot(times, currents[:, n].imag, label=f"Im q_{n + 1}")
    total = currents.sum(axis=1)
    a1.plot(times, total.real, "k--", lw=1, label="Re total")
    a2.plot(times, total.imag, "k--", lw=1, label="Im total")
    a1.set_ylabel("Re heat current")
    a2.set_ylabel("Im heat current")
    a2.set_xlabel("t")
    a1.legend(fontsize=8)
    a2.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_convergence(path: str | Path, counts: np.ndarray, fractions: Mapping[str, np.ndarray]) -> Path:
    """Convergence fraction vs number of trajectories, one line per strategy."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name, f in fractions.items():
        ax.plot(counts, f, "o-", label=name)
    ax.set_xscale("log")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("trajectories")
    ax.set_ylabel("convergence fraction")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))
