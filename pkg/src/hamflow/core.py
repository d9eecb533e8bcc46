"""Phase-space primitives shared by every other module.

Conventions: all floats are 64-bit, vectors are 1-D numpy arrays, and a
phase-space point is the pair (q, p) of equal-length position and momentum
vectors. Randomness goes through `RngStream`, a counter-keyed Philox wrapper,
so that any draw is a pure function of (seed, counter) and parallel work items
can be given independent, scheduling-invariant streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NumericalError",
    "SingularityError",
    "PhaseState",
    "EnergyFunction",
    "Trajectory",
    "RngStream",
    "state_concat",
    "state_split",
    "sample_gaussian",
    "gradient_check",
]

_MASK64 = (1 << 64) - 1


class NumericalError(RuntimeError):
    """A computation produced NaN/Inf or otherwise left the valid domain.

    `step_index` carries the failing rollout/training step when known.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class SingularityError(NumericalError):
    """Evaluation at a pole of the energy, e.g. coincident bodies."""


def _as_vector(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class PhaseState:
    """Immutable phase-space point s = (q, p) with len(q) == len(p)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = _as_vector(self.q)
        p = _as_vector(self.p)
        if len(q) != len(p):
            raise ValueError(f"q and p must have equal length, got {len(q)} and {len(p)}")
        if not (np.isfinite(q).all() and np.isfinite(p).all()):
            raise NumericalError("PhaseState entries must be finite")
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return len(self.q)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PhaseState)
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.p, other.p)
        )

    def __hash__(self):
        return hash((self.q.tobytes(), self.p.tobytes()))


@dataclass(frozen=True)
class EnergyFunction:
    """Contract for a Hamiltonian H(q, p): scalar energy plus its partial gradients.

    `is_separable` marks H = T(p) + V(q), required by the leapfrog stepper.
    Optional `*_batch` callables evaluate gradients on (B, n) coordinate arrays;
    they must agree elementwise with the per-state callables and exist purely
    as a fast path for bulk trajectory generation.
    """

    energy: Callable[[PhaseState], float]
    grad_q: Callable[[PhaseState], np.ndarray]
    grad_p: Callable[[PhaseState], np.ndarray]
    is_separable: bool = False
    grad_q_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    grad_p_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None


INTEGRATOR_IDS = ("euler", "rk4", "leapfrog", "reference")


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered phase states produced by one integrator at fixed step dt.

    Negative dt encodes backward time; dt == 0 is rejected.
    """

    states: tuple
    dt: float
    integrator_id: str

    def __post_init__(self):
        states = tuple(self.states)
        if not states:
            raise ValueError("a trajectory needs at least one state")
        n = states[0].dim
        if any(s.dim != n for s in states):
            raise ValueError("all states in a trajectory must share dimension")
        if self.dt == 0:
            raise ValueError("dt must be nonzero")
        if self.integrator_id not in INTEGRATOR_IDS:
            raise ValueError(f"unknown integrator_id {self.integrator_id!r}")
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def as_array(self) -> np.ndarray:
        """(T+1, 2n) array of concatenated [q || p] rows."""
        return np.stack([state_concat(s) for s in self.states])


def _splitmix64(x: int) -> int:
    # Standard splitmix64 finalizer; used to derive independent child keys.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based deterministic random stream.

    Every draw is generated by a fresh Philox generator keyed by the 128-bit
    pair (seed, counter); the counter then advances by one. Identical
    (seed, counter) therefore yields identical draws on any platform and under
    any scheduling of parallel work, and `counter` can be reset to replay.
    Fork a child stream per work item instead of sharing one stream between
    threads.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    def _next_generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key))

    def fork(self, index: int) -> "RngStream":
        """Independent child stream for work item `index` (deterministic)."""
        child_seed = _splitmix64(self.seed ^ _splitmix64(index & _MASK64))
        return RngStream(child_seed, 0)

    def normal(self, dim: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        if std == 0.0:
            self.counter = (self.counter + 1) & _MASK64  # keep call accounting uniform
            return np.full(dim, float(mean))
        return mean + std * self._next_generator().standard_normal(dim)

    def uniform(self, dim: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next_generator().uniform(low, high, dim)

    def integers(self, dim: int, low: int, high: int) -> np.ndarray:
        return self._next_generator().integers(low, high, size=dim)


def state_concat(s: PhaseState) -> np.ndarray:
    """[q || p], length 2n."""
    return np.concatenate([s.q, s.p])


def state_split(x: np.ndarray) -> PhaseState:
    """Inverse of state_concat."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) % 2 != 0:
        raise ValueError("expected a flat vector of even length")
    n = len(x) // 2
    return PhaseState(q=x[:n], p=x[n:])


def sample_gaussian(rng: RngStream, dim: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """dim i.i.d. N(mean, std^2) draws, deterministic given the stream state."""
    return rng.normal(dim, mean, std)


def gradient_check(
    h: EnergyFunction,
    states,
    rel_tol: float = 1e-5,
    step: float = 1e-5,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    The relative error at a state is ||g_analytic - g_fd|| / max(1, ||g_fd||),
    taken over the concatenated (grad_q, grad_p) vector. Raises AssertionError
    if any state exceeds `rel_tol`; returns the maximum error observed.
    """
    worst = 0.0
    for s in states:
        analytic = np.concatenate([h.grad_q(s), h.grad_p(s)])
        x0 = state_concat(s)
        fd = np.empty_like(x0)
        for j in range(len(x0)):
            hi = x0.copy()
            lo = x0.copy()
            hi[j] += step
            lo[j] -= step
            fd[j] = (h.energy(state_split(hi)) - h.energy(state_split(lo))) / (2 * step)
        err = float(np.linalg.norm(analytic - fd) / max(1.0, np.linalg.norm(fd)))
        worst = max(worst, err)
        if err > rel_tol:
            raise AssertionError(
                f"gradient check failed at q={s.q}, p={s.p}: relative error {err:.3e} > {rel_tol:.1e}"
            )
    return worst
