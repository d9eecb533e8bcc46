"""Dataset generation: initial-condition sampling, ground-truth integration,
observation noise, frame rendering, and the on-disk dataset format.

Initial states are drawn by sampling a radius uniformly and placing the phase
point on the radius-r sphere of the system's sampling space. Ground truth
trajectories come from the fixed fine-step RK4 reference integrator (100
substeps per output interval), vectorized across trajectories. Every
trajectory owns a forked RngStream keyed by its global index, so regeneration
is byte-identical for any thread count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .core import NumericalError, PhaseState, RngStream, Trajectory, state_concat, state_split
from .images import to_uint8, write_ppm
from .integrators import REFERENCE_SUBSTEPS, reference_rollout
from .systems import (
    MassSpringParams,
    NBodyParams,
    PendulumParams,
    SYSTEM_NAMES,
    mass_spring_hamiltonian,
    nbody_hamiltonian,
    pendulum_hamiltonian,
)

__all__ = [
    "DatasetSpec",
    "RenderSpec",
    "sample_initial_state",
    "generate_trajectory",
    "add_observation_noise",
    "render_frame",
    "scene_positions",
    "write_dataset",
    "read_dataset",
    "ks_statistic_uniform",
    "KS_CRITICAL_1PCT",
    "default_dataset_spec",
]

FORMAT_VERSION = 1

# Per-system defaults: radius range and observation noise std.
SYSTEM_DEFAULTS = {
    "mass_spring": {"radius_range": (0.1, 1.0), "noise_std": 0.1},
    "pendulum": {"radius_range": (1.3, 2.3), "noise_std": 0.1},
    "two_body": {"radius_range": (0.5, 1.5), "noise_std": 0.05},
    "three_body": {"radius_range": (0.9, 1.2), "noise_std": 0.2},
}

# Half-extent of the rendered scene in phase-space units, per system.
SCENE_HALF_EXTENT = {
    "mass_spring": 1.5,
    "pendulum": 1.5,
    "two_body": 2.5,
    "three_body": 2.0,
}

BODY_COLORS = (
    (0.86, 0.27, 0.27),
    (0.25, 0.78, 0.30),
    (0.29, 0.45, 0.92),
)

# Asymptotic 1% critical value of the one-sample KS statistic is 1.628/sqrt(n).
KS_CRITICAL_1PCT = 1.628

GENERATION_SOFTENING = 1e-2  # keeps n-body close encounters finite


@dataclass(frozen=True)
class DatasetSpec:
    system: str
    n_train: int = 1000
    n_test: int = 200
    n_steps: int = 30
    dt: float = 0.125
    radius_range: tuple = None
    noise_std: float = None
    image_size: int = 64
    channels: int = 3
    seed: int = 0
    softening: float = GENERATION_SOFTENING
    render: bool = True

    def __post_init__(self):
        if self.system not in SYSTEM_NAMES:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEM_NAMES}")
        defaults = SYSTEM_DEFAULTS[self.system]
        if self.radius_range is None:
            object.__setattr__(self, "radius_range", tuple(defaults["radius_range"]))
        if self.noise_std is None:
            object.__setattr__(self, "noise_std", defaults["noise_std"])
        lo, hi = self.radius_range
        if lo > hi:  # lo == hi is the degenerate single-radius case
            raise ValueError("radius_range must satisfy lo <= hi")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("trajectory counts must be non-negative")


def default_dataset_spec(system: str, **overrides) -> DatasetSpec:
    return DatasetSpec(system=system, **overrides)


def system_energy(spec_or_name, softening: float = 0.0):
    name = spec_or_name.system if isinstance(spec_or_name, DatasetSpec) else spec_or_name
    if name == "mass_spring":
        return mass_spring_hamiltonian(MassSpringParams())
    if name == "pendulum":
        return pendulum_hamiltonian(PendulumParams())
    if name == "two_body":
        return nbody_hamiltonian(NBodyParams(n_bodies=2, softening=softening))
    return nbody_hamiltonian(NBodyParams(n_bodies=3, softening=softening))


def _system_bodies(name: str) -> int:
    return {"mass_spring": 1, "pendulum": 1, "two_body": 2, "three_body": 3}[name]


def _system_dim(name: str) -> int:
    return {"mass_spring": 1, "pendulum": 1, "two_body": 4, "three_body": 6}[name]


def sample_initial_state(system: str, radius_range: tuple, rng: RngStream) -> PhaseState:
    """r ~ U(lo, hi), then a point uniform on the radius-r sphere.

    One-dimensional systems use the (q, p) circle directly. For n-body systems
    the direction is drawn on the 4n-sphere, the per-body momenta are shifted
    to zero total momentum, and the concatenated vector is rescaled to norm r.
    """
    lo, hi = radius_range
    r = float(rng.uniform(1, lo, hi)[0])
    if system in ("mass_spring", "pendulum"):
        angle = float(rng.uniform(1, 0.0, 2.0 * np.pi)[0])
        return PhaseState(q=[r * np.cos(angle)], p=[r * np.sin(angle)])
    n = _system_dim(system)
    bodies = _system_bodies(system)
    direction = rng.normal(2 * n)
    p_part = direction[n:].reshape(bodies, 2)
    p_part = p_part - p_part.mean(axis=0)  # zero total momentum
    vec = np.concatenate([direction[:n], p_part.ravel()])
    norm = np.linalg.norm(vec)
    if norm == 0.0:  # probability zero, but keep the contract total
        vec = np.zeros(2 * n)
        vec[0] = 1.0
        norm = 1.0
    vec = vec * (r / norm)
    return state_split(vec)


def generate_trajectory(h, s0: PhaseState, n_steps: int, dt: float) -> Trajectory:
    """Reference-quality ground truth: RK4 with 100 substeps per dt."""
    return reference_rollout(h, s0, n_steps, dt)


def _generate_batch(h, S0: np.ndarray, n_steps: int, dt: float) -> np.ndarray:
    """reference_rollout vectorized over trajectory rows; identical arithmetic
    to the per-state path, so results agree bitwise. Returns (B, T+1, 2n)."""
    B, full = S0.shape
    n = full // 2
    out = np.empty((B, n_steps + 1, full))
    out[:, 0] = S0
    Q, P = S0[:, :n].copy(), S0[:, n:].copy()
    sub = dt / REFERENCE_SUBSTEPS

    def field_(Q, P):
        return h.grad_p_batch(Q, P), -h.grad_q_batch(Q, P)

    for t in range(1, n_steps + 1):
        for _ in range(REFERENCE_SUBSTEPS):
            k1q, k1p = field_(Q, P)
            k2q, k2p = field_(Q + 0.5 * sub * k1q, P + 0.5 * sub * k1p)
            k3q, k3p = field_(Q + 0.5 * sub * k2q, P + 0.5 * sub * k2p)
            k4q, k4p = field_(Q + sub * k3q, P + sub * k3p)
            Q = Q + sub * (k1q / 6.0 + k2q / 3.0 + k3q / 3.0 + k4q / 6.0)
            P = P + sub * (k1p / 6.0 + k2p / 3.0 + k3p / 3.0 + k4p / 6.0)
        out[:, t, :n] = Q
        out[:, t, n:] = P
    return out


def add_observation_noise(traj: Trajectory, noise_std: float, rng: RngStream) -> Trajectory:
    """i.i.d. Gaussian perturbation of every coordinate of every state."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if noise_std == 0.0:
        return traj
    arr = traj.as_array()
    noise = rng.normal(arr.size, std=noise_std).reshape(arr.shape)
    noisy = arr + noise
    states = tuple(state_split(row) for row in noisy)
    return Trajectory(states=states, dt=traj.dt, integrator_id=traj.integrator_id)


# ------------------------------------------------------------------ rendering


@dataclass
class RenderSpec:
    """Smooth-disc rendering parameters; intensity falls off through a sigmoid
    edge so circles have no hard boundary."""

    image_size: int = 64
    radius_px: float = 6.0
    blur_px: float = 1.5
    colors: tuple = BODY_COLORS
    half_extent: float = 1.5
    clipped_count: int = 0

    @property
    def scale(self) -> float:
        return (self.image_size / 2.0) / self.half_extent


def scene_positions(system: str, state: PhaseState) -> np.ndarray:
    """(n_bodies, 2) scene coordinates for a phase state."""
    if system == "mass_spring":
        return np.array([[state.q[0], 0.0]])
    if system == "pendulum":
        # Bob position for a unit rod: angle measured from the downward axis.
        return np.array([[np.sin(state.q[0]), -np.cos(state.q[0])]])
    return state.q.reshape(-1, 2)


def render_frame(spec: RenderSpec, positions: np.ndarray) -> np.ndarray:
    """Each body becomes an anti-aliased disc; bodies whose centers leave the
    frame are clipped and counted. Returns (H, W, 3) uint8."""
    size = spec.image_size
    img = np.zeros((size, size, 3))
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if positions.size == 0:
        return to_uint8(img)
    if not np.all(np.isfinite(positions)):
        raise NumericalError("cannot render non-finite positions")
    centers = size / 2.0
    rows = np.arange(size) + 0.5
    cols = np.arange(size) + 0.5
    for b, (x, y) in enumerate(positions):
        px = centers + x * spec.scale
        py = centers - y * spec.scale
        if not (0.0 <= px < size and 0.0 <= py < size):
            spec.clipped_count += 1
        dist = np.sqrt((cols[None, :] - px) ** 2 + (rows[:, None] - py) ** 2)
        intensity = 1.0 / (1.0 + np.exp((dist - spec.radius_px) / spec.blur_px))
        color = np.asarray(spec.colors[b % len(spec.colors)])
        img += intensity[:, :, None] * color[None, None, :]
    return to_uint8(img)


def default_render_spec(spec: DatasetSpec) -> RenderSpec:
    return RenderSpec(
        image_size=spec.image_size,
        radius_px=spec.image_size * 3.0 / 32.0,
        blur_px=spec.image_size / 42.0,
        half_extent=SCENE_HALF_EXTENT[spec.system],
    )


# --------------------------------------------------------------- disk format


def _draw_valid_initials(spec: DatasetSpec, count: int, offset: int, master: RngStream):
    """Per-trajectory forked streams; resample until the initial state is far
    from any singularity. Returns (S0 array, streams, resample count)."""
    dim = _system_dim(spec.system)
    bodies = _system_bodies(spec.system)
    S0 = np.empty((count, 2 * dim))
    streams = []
    resamples = 0
    for i in range(count):
        stream = master.fork(offset + i)
        while True:
            s0 = sample_initial_state(spec.system, spec.radius_range, stream)
            if bodies == 1:
                break
            pos = s0.q.reshape(bodies, 2)
            dmin = min(
                np.linalg.norm(pos[a] - pos[b])
                for a in range(bodies)
                for b in range(a + 1, bodies)
            )
            if dmin >= 0.1:
                break
            resamples += 1
        S0[i] = state_concat(s0)
        streams.append(stream)
    return S0, streams, resamples


def _split_payload(spec: DatasetSpec, count: int, offset: int, master: RngStream, threads: int):
    h = system_energy(spec, softening=spec.softening)
    S0, streams, resamples = _draw_valid_initials(spec, count, offset, master)
    if count == 0:
        dim = _system_dim(spec.system)
        empty = np.empty((0, spec.n_steps + 1, 2 * dim))
        return empty, empty, resamples

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        shards = np.array_split(np.arange(count), threads)
        clean = np.empty((count, spec.n_steps + 1, S0.shape[1]))

        def work(idx):
            if len(idx):
                clean[idx] = _generate_batch(h, S0[idx], spec.n_steps, spec.dt)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, shards))
    else:
        clean = _generate_batch(h, S0, spec.n_steps, spec.dt)
    if not np.all(np.isfinite(clean)):
        raise NumericalError("ground-truth integration diverged")

    noisy = clean.copy()
    if spec.noise_std > 0:
        for i, stream in enumerate(streams):
            noise = stream.normal(clean[i].size, std=spec.noise_std).reshape(clean[i].shape)
            noisy[i] = clean[i] + noise
    return clean, noisy, resamples


def write_dataset(spec: DatasetSpec, out_dir, threads: int = 1) -> dict:
    """Write manifest + per-split state files (+ frames). Returns the manifest.

    A `.incomplete` marker exists for the duration of the write and is removed
    on success, so partial outputs are detectable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".incomplete"
    marker.write_text("write in progress\n")

    master = RngStream(spec.seed)
    render_spec = default_render_spec(spec)
    resamples = {}
    try:
        for split, count, offset in (
            ("train", spec.n_train, 0),
            ("test", spec.n_test, spec.n_train),
        ):
            split_dir = out / split
            split_dir.mkdir(exist_ok=True)
            clean, noisy, n_resampled = _split_payload(spec, count, offset, master, threads)
            resamples[split] = n_resampled
            (split_dir / "states_clean.f64").write_bytes(
                np.ascontiguousarray(clean, dtype="<f8").tobytes()
            )
            (split_dir / "states_noisy.f64").write_bytes(
                np.ascontiguousarray(noisy, dtype="<f8").tobytes()
            )
            if spec.render:
                dim = _system_dim(spec.system)
                for i in range(count):
                    traj_dir = split_dir / "frames" / f"traj{i:06d}"
                    traj_dir.mkdir(parents=True, exist_ok=True)
                    for t in range(spec.n_steps + 1):
                        state = state_split(noisy[i, t])
                        frame = render_frame(
                            render_spec, scene_positions(spec.system, state)
                        )
                        write_ppm(traj_dir / f"step{t:03d}.ppm", frame)

        manifest = {
            "format_version": FORMAT_VERSION,
            "generator_version": __version__,
            "system": spec.system,
            "n_train": spec.n_train,
            "n_test": spec.n_test,
            "n_steps": spec.n_steps,
            "dt": spec.dt,
            "noise_std": spec.noise_std,
            "radius_range": list(spec.radius_range),
            "image_size": spec.image_size,
            "channels": spec.channels,
            "seed": spec.seed,
            "softening": spec.softening,
            "render": spec.render,
            "phase_dim": 2 * _system_dim(spec.system),
            "resampled_initial_states": resamples,
            "render_clipped_bodies": render_spec.clipped_count,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except BaseException:
        raise
    else:
        marker.unlink()
    return manifest


def read_dataset(dataset_dir) -> dict:
    """Load manifest and state arrays; raises on missing or incomplete data."""
    root = Path(dataset_dir)
    if (root / ".incomplete").exists():
        raise ValueError(f"{root}: dataset write did not complete")
    manifest = json.loads((root / "manifest.json").read_text())
    out = {"manifest": manifest}
    full = manifest["phase_dim"]
    steps = manifest["n_steps"] + 1
    for split, count_key in (("train", "n_train"), ("test", "n_test")):
        count = manifest[count_key]
        for kind in ("clean", "noisy"):
            raw = (root / split / f"states_{kind}.f64").read_bytes()
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            out[f"{split}_{kind}"] = arr.reshape(count, steps, full)
    return out


def dataset_trajectories(data: dict, split: str, kind: str = "clean", limit: int | None = None):
    """Trajectory objects from a loaded dataset dict."""
    manifest = data["manifest"]
    arr = data[f"{split}_{kind}"]
    n = arr.shape[0] if limit is None else min(limit, arr.shape[0])
    trajs = []
    for i in range(n):
        states = tuple(state_split(row) for row in arr[i])
        trajs.append(Trajectory(states=states, dt=manifest["dt"], integrator_id="reference"))
    return trajs


def ks_statistic_uniform(samples: np.ndarray, lo: float, hi: float) -> float:
    """One-sample Kolmogorov-Smirnov statistic against U(lo, hi)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise ValueError("need at least one sample")
    cdf = (x - lo) / (hi - lo)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(np.max(np.maximum(upper - cdf, cdf - lower)))
