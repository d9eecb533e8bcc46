"""Closed-form Hamiltonians and analytic gradients for the four physical systems.

Mass-spring and pendulum are one-dimensional; the n-body systems are planar,
with coordinates packed body-major as [x1, y1, x2, y2, ...]. All three
builders return `EnergyFunction`s that are separable (H = T(p) + V(q)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EnergyFunction, PhaseState, SingularityError

__all__ = [
    "MassSpringParams",
    "PendulumParams",
    "NBodyParams",
    "mass_spring_hamiltonian",
    "pendulum_hamiltonian",
    "nbody_hamiltonian",
    "system_hamiltonian",
    "SYSTEM_NAMES",
]

SYSTEM_NAMES = ("mass_spring", "pendulum", "two_body", "three_body")


@dataclass(frozen=True)
class MassSpringParams:
    k: float = 2.0
    m: float = 0.5

    def __post_init__(self):
        if self.k <= 0 or self.m <= 0:
            raise ValueError("spring stiffness and mass must be positive")


@dataclass(frozen=True)
class PendulumParams:
    m: float = 0.5
    g: float = 3.0
    l: float = 1.0

    def __post_init__(self):
        if self.m <= 0 or self.g <= 0 or self.l <= 0:
            raise ValueError("mass, gravity and rod length must be positive")


@dataclass(frozen=True)
class NBodyParams:
    """Planar gravitational system; `softening` regularizes pair distances as
    sqrt(||dq||^2 + softening^2). Zero softening raises on coincident bodies."""

    n_bodies: int = 2
    masses: tuple = None
    g: float = 1.0
    softening: float = 0.0

    def __post_init__(self):
        if self.n_bodies < 2:
            raise ValueError("need at least two bodies")
        masses = self.masses if self.masses is not None else (1.0,) * self.n_bodies
        masses = tuple(float(m) for m in masses)
        if len(masses) != self.n_bodies:
            raise ValueError("len(masses) must equal n_bodies")
        if any(m <= 0 for m in masses):
            raise ValueError("masses must be positive")
        if self.softening < 0:
            raise ValueError("softening must be non-negative")
        object.__setattr__(self, "masses", masses)

    @property
    def dim(self) -> int:
        return 2 * self.n_bodies


def _require_dim(s: PhaseState, n: int, what: str):
    if s.dim != n:
        raise ValueError(f"{what} expects phase dimension {n}, got {s.dim}")


def mass_spring_hamiltonian(params: MassSpringParams) -> EnergyFunction:
    """H = (1/2) k q^2 + p^2 / (2m), a 1-D undamped oscillator."""
    k, m = params.k, params.m

    def energy(s: PhaseState) -> float:
        _require_dim(s, 1, "mass_spring")
        return float(0.5 * k * s.q[0] ** 2 + s.p[0] ** 2 / (2.0 * m))

    def grad_q(s: PhaseState) -> np.ndarray:
        _require_dim(s, 1, "mass_spring")
        return k * s.q

    def grad_p(s: PhaseState) -> np.ndarray:
        _require_dim(s, 1, "mass_spring")
        return s.p / m

    return EnergyFunction(
        energy=energy,
        grad_q=grad_q,
        grad_p=grad_p,
        is_separable=True,
        grad_q_batch=lambda Q, P: k * Q,
        grad_p_batch=lambda Q, P: P / m,
    )


def pendulum_hamiltonian(params: PendulumParams) -> EnergyFunction:
    """H = 2 m g l (1 - cos q) + p^2 / (2 m l^2), a frictionless pendulum.

    The potential carries the factor 2mgl (not the textbook mgl); the analytic
    systems here reproduce the generating dynamics of the datasets exactly as
    specified, so the factor is kept.
    """
    m, g, l = params.m, params.g, params.l

    def energy(s: PhaseState) -> float:
        _require_dim(s, 1, "pendulum")
        return float(2.0 * m * g * l * (1.0 - np.cos(s.q[0])) + s.p[0] ** 2 / (2.0 * m * l**2))

    def grad_q(s: PhaseState) -> np.ndarray:
        _require_dim(s, 1, "pendulum")
        return 2.0 * m * g * l * np.sin(s.q)

    def grad_p(s: PhaseState) -> np.ndarray:
        _require_dim(s, 1, "pendulum")
        return s.p / (m * l**2)

    return EnergyFunction(
        energy=energy,
        grad_q=grad_q,
        grad_p=grad_p,
        is_separable=True,
        grad_q_batch=lambda Q, P: 2.0 * m * g * l * np.sin(Q),
        grad_p_batch=lambda Q, P: P / (m * l**2),
    )


def nbody_hamiltonian(params: NBodyParams) -> EnergyFunction:
    """H = sum_i ||p_i||^2 / (2 m_i) - sum_{i<j} g m_i m_j / r_ij for planar bodies.

    r_ij = sqrt(||q_j - q_i||^2 + softening^2). With zero softening, coincident
    bodies raise SingularityError instead of returning inf.
    """
    nb = params.n_bodies
    masses = np.asarray(params.masses)
    g = params.g
    eps2 = params.softening**2
    dim = params.dim

    def _pair_distances(Q: np.ndarray) -> np.ndarray:
        # Q: (..., nb, 2) -> (..., nb, nb) softened distances
        diff = Q[..., :, None, :] - Q[..., None, :, :]
        d2 = np.sum(diff * diff, axis=-1) + eps2
        return np.sqrt(d2)

    def energy(s: PhaseState) -> float:
        _require_dim(s, dim, "nbody")
        Q = s.q.reshape(nb, 2)
        P = s.p.reshape(nb, 2)
        kinetic = float(np.sum(np.sum(P * P, axis=1) / (2.0 * masses)))
        r = _pair_distances(Q)
        iu = np.triu_indices(nb, k=1)
        rij = r[iu]
        if np.any(rij == 0.0):
            raise SingularityError("coincident bodies with zero softening")
        mm = np.outer(masses, masses)[iu]
        potential = float(-np.sum(g * mm / rij))
        return kinetic + potential

    def grad_q(s: PhaseState) -> np.ndarray:
        _require_dim(s, dim, "nbody")
        return _grad_q_batch(s.q[None, :], None)[0]

    def grad_p(s: PhaseState) -> np.ndarray:
        _require_dim(s, dim, "nbody")
        return _grad_p_batch(None, s.p[None, :])[0]

    def _grad_q_batch(Qflat: np.ndarray, Pflat) -> np.ndarray:
        B = Qflat.shape[0]
        Q = Qflat.reshape(B, nb, 2)
        diff = Q[:, :, None, :] - Q[:, None, :, :]  # q_i - q_j
        d2 = np.sum(diff * diff, axis=-1) + eps2
        idx = np.arange(nb)
        d2[:, idx, idx] = 1.0  # self-pairs excluded below
        if eps2 == 0.0 and np.any(d2 <= 0.0):
            raise SingularityError("coincident bodies with zero softening")
        inv_r3 = d2 ** (-1.5)
        inv_r3[:, idx, idx] = 0.0
        mm = np.outer(masses, masses)  # (nb, nb)
        # dV/dq_i = sum_{j != i} g m_i m_j (q_i - q_j) / r_ij^3
        grad = g * np.einsum("ij,bij,bijc->bic", mm, inv_r3, diff)
        return grad.reshape(B, dim)

    def _grad_p_batch(Qflat, Pflat: np.ndarray) -> np.ndarray:
        B = Pflat.shape[0]
        P = Pflat.reshape(B, nb, 2)
        return (P / masses[None, :, None]).reshape(B, dim)

    return EnergyFunction(
        energy=energy,
        grad_q=grad_q,
        grad_p=grad_p,
        is_separable=True,
        grad_q_batch=_grad_q_batch,
        grad_p_batch=_grad_p_batch,
    )


def system_hamiltonian(name: str, softening: float = 0.0) -> EnergyFunction:
    """Default-parameter Hamiltonian for one of the four named systems."""
    if name == "mass_spring":
        return mass_spring_hamiltonian(MassSpringParams())
    if name == "pendulum":
        return pendulum_hamiltonian(PendulumParams())
    if name == "two_body":
        return nbody_hamiltonian(NBodyParams(n_bodies=2, softening=softening))
    if name == "three_body":
        return nbody_hamiltonian(NBodyParams(n_bodies=3, softening=softening))
    raise ValueError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
