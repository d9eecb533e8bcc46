"""Shared evaluation metrics and delimited-output writers.

CSV schemas:
  mse.csv   step, mean, std
  hvar.csv  split, system, integrator, variance   (unscaled; see note below)
  kde.csv   x, y, density
  grid.csv  x, y, logp
  field.csv q, p, dq, dp

Hamiltonian variances are stored unscaled; published tables sometimes scale
such numbers by 1e+4, which belongs to presentation, not storage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import EnergyFunction, PhaseState, Trajectory
from .integrators import leapfrog_step

__all__ = [
    "MetricSeries",
    "per_step_mse",
    "aggregate_series",
    "hamiltonian_variance",
    "energy_series",
    "kde_grid",
    "total_variation",
    "vector_field_rows",
    "write_csv",
    "write_mse_csv",
    "write_hvar_csv",
    "write_kde_csv",
    "write_series_csv",
]


@dataclass
class MetricSeries:
    """Per-step metric values, optionally with a cross-trajectory std."""

    name: str
    values: np.ndarray
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.std is not None:
            self.std = np.asarray(self.std, dtype=np.float64)
            if self.std.shape != self.values.shape:
                raise ValueError("std must match values in length")

    def __len__(self):
        return len(self.values)


def per_step_mse(predicted: Trajectory, target: Trajectory) -> MetricSeries:
    """Mean squared error per step, averaged over coordinates."""
    if len(predicted) != len(target) or predicted.dim != target.dim:
        raise ValueError("trajectories must have equal lengths and dimensions")
    diff = predicted.as_array() - target.as_array()
    return MetricSeries(name="mse", values=np.mean(diff * diff, axis=1))


def aggregate_series(series: list) -> MetricSeries:
    """Mean and std across trajectories of equal-length series."""
    if not series:
        raise ValueError("nothing to aggregate")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValueError("series lengths are inconsistent")
    stacked = np.stack([s.values for s in series])
    return MetricSeries(
        name=series[0].name, values=stacked.mean(axis=0), std=stacked.std(axis=0)
    )


def energy_series(h: EnergyFunction, traj: Trajectory) -> np.ndarray:
    return np.array([h.energy(s) for s in traj.states])


def hamiltonian_variance(h: EnergyFunction, traj: Trajectory) -> float:
    """Population variance of H over trajectory states."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return float(np.var(energy_series(h, traj)))


def kde_grid(samples: np.ndarray, bandwidth: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Isotropic Gaussian KDE of 2-D samples evaluated on the xs x ys grid.

    The kernel std is exactly `bandwidth` (no data-driven rescaling), matching
    a fixed-bandwidth estimator. Returns a (len(xs), len(ys)) density grid.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("KDE needs at least one sample")
    if samples.shape[1] != 2:
        raise ValueError("kde_grid expects 2-D samples")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    norm = 1.0 / (2.0 * np.pi * bandwidth**2)
    grid = np.zeros((len(xs), len(ys)))
    inv2h2 = 1.0 / (2.0 * bandwidth**2)
    for sx, sy in samples:
        gx = np.exp(-np.square(xs - sx) * inv2h2)
        gy = np.exp(-np.square(ys - sy) * inv2h2)
        grid = grid + norm * np.outer(gx, gy)
    return grid / samples.shape[0]


def total_variation(grid_a: np.ndarray, grid_b: np.ndarray, cell_area: float) -> float:
    """0.5 * integral |a - b| over the shared grid."""
    if grid_a.shape != grid_b.shape:
        raise ValueError("grids must share a shape")
    return float(0.5 * np.sum(np.abs(grid_a - grid_b)) * cell_area)


def vector_field_rows(h: EnergyFunction, extent: float, n: int, dt: float) -> list:
    """One-leapfrog-step displacement field on an n x n grid of a 2-D phase
    plane; rows are (q, p, dq, dp)."""
    rows = []
    for q in np.linspace(-extent, extent, n):
        for p in np.linspace(-extent, extent, n):
            s = PhaseState(q=[q], p=[p])
            moved = leapfrog_step(h, s, dt)
            rows.append((q, p, float(moved.q[0] - q), float(moved.p[0] - p)))
    return rows


# ------------------------------------------------------------------- CSV I/O


def write_csv(path, header: list, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_mse_csv(path, series: MetricSeries):
    std = series.std if series.std is not None else np.zeros_like(series.values)
    rows = [(t, v, s) for t, (v, s) in enumerate(zip(series.values, std))]
    write_csv(path, ["step", "mean", "std"], rows)


def write_hvar_csv(path, rows):
    """rows: (split, system, integrator, variance)."""
    write_csv(path, ["split", "system", "integrator", "variance"], rows)


def write_kde_csv(path, xs, ys, grid, value_name="density"):
    rows = []
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            rows.append((x, y, grid[i, j]))
    write_csv(path, ["x", "y", value_name], rows)


def write_series_csv(path, name: str, values):
    write_csv(path, ["step", name], list(enumerate(values)))
