"""Matplotlib figure rendering for the report paths.

Every figure lands next to the delimited output it visualizes; the CSV/PGM
files remain the machine-readable artifacts. All functions save to a file and
return the path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_phase_figure",
    "save_energy_figure",
    "save_series_figure",
    "save_mse_figure",
    "save_density_figure",
    "save_vector_field_figure",
    "save_kv_figure",
]

_DPI = 130


def save_phase_figure(path, states: np.ndarray, dt: float, title: str = "trajectory"):
    """Phase portrait plus time series of the first (q, p) pair."""
    t = np.arange(states.shape[0]) * dt
    n = states.shape[1] // 2
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 4))
    ax0.plot(states[:, 0], states[:, n], "-o", ms=2.5, lw=1)
    ax0.set_xlabel("q")
    ax0.set_ylabel("p")
    ax0.set_title(f"{title}: phase portrait")
    ax0.axis("equal")
    ax1.plot(t, states[:, 0], label="q")
    ax1.plot(t, states[:, n], label="p")
    ax1.set_xlabel("t")
    ax1.legend()
    ax1.set_title("coordinates vs time")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_energy_figure(path, energies: np.ndarray, dt: float, title: str = "energy"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(energies)) * dt, energies, lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("H")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_series_figure(path, values: np.ndarray, ylabel: str, title: str, logy: bool = False):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, lw=1.0)
    if logy and np.all(np.asarray(values) > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_mse_figure(path, mean: np.ndarray, std: np.ndarray | None, title: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(mean))
    ax.plot(steps, mean, lw=1.4)
    if std is not None:
        ax.fill_between(steps, mean - std, mean + std, alpha=0.25, lw=0)
    ax.set_xlabel("rollout step")
    ax.set_ylabel("MSE")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_density_figure(path, xs, ys, grid: np.ndarray, title: str = "density"):
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    mesh = ax.pcolormesh(xs, ys, np.asarray(grid).T, shading="auto", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="density")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_vector_field_figure(path, rows, title: str = "one leapfrog step"):
    arr = np.asarray(rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.4, 4.8))
    ax.quiver(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], angles="xy", scale_units="xy", scale=1.0)
    ax.set_xlabel("q")
    ax.set_ylabel("p")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_kv_figure(path, coords: np.ndarray, kinetic: np.ndarray, potential: np.ndarray):
    """Learned kinetic and potential energy profiles along one coordinate."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 4))
    ax0.plot(coords, kinetic, lw=1.4)
    ax0.set_xlabel("p")
    ax0.set_ylabel("K(p)")
    ax0.set_title("learned kinetic energy")
    ax1.plot(coords, potential, lw=1.4, color="tab:orange")
    ax1.set_xlabel("q")
    ax1.set_ylabel("V(q)")
    ax1.set_title("learned potential energy")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
