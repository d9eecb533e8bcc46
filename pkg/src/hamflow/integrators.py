"""Euler, RK4 and leapfrog steppers plus rollout machinery.

All steppers advance the Hamiltonian vector field (dq/dt, dp/dt) =
(dH/dp, -dH/dq). Backward time is expressed by negating dt; the leapfrog
stepper is the kick-drift-kick form, which is time-symmetric, so a step with
-dt is the exact inverse of a step with +dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EnergyFunction, NumericalError, PhaseState, Trajectory, state_concat, state_split

__all__ = [
    "IntegratorSpec",
    "euler_step",
    "rk4_step",
    "leapfrog_step",
    "step_function",
    "rollout",
    "reference_rollout",
    "jacobian_determinant",
]

STEP_KINDS = ("euler", "rk4", "leapfrog")

DEFAULT_DT = 0.125

# Substeps per output interval used by the fixed-step reference integrator.
REFERENCE_SUBSTEPS = 100


@dataclass(frozen=True)
class IntegratorSpec:
    kind: str
    dt: float = DEFAULT_DT
    n_steps: int = 30

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown integrator kind {self.kind!r}; expected one of {STEP_KINDS}")
        if self.dt == 0:
            raise ValueError("dt must be nonzero")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")


def euler_step(h: EnergyFunction, s: PhaseState, dt: float) -> PhaseState:
    """Explicit Euler: both gradients evaluated at the incoming state."""
    return PhaseState(q=s.q + dt * h.grad_p(s), p=s.p - dt * h.grad_q(s))


def leapfrog_step(h: EnergyFunction, s: PhaseState, dt: float) -> PhaseState:
    """Kick-drift-kick leapfrog; requires a separable Hamiltonian."""
    if not h.is_separable:
        raise ValueError("leapfrog requires a separable Hamiltonian (H = T(p) + V(q))")
    p_half = s.p - 0.5 * dt * h.grad_q(s)
    mid = PhaseState(q=s.q, p=p_half)
    q_new = s.q + dt * h.grad_p(mid)
    end = PhaseState(q=q_new, p=p_half)
    p_new = p_half - 0.5 * dt * h.grad_q(end)
    return PhaseState(q=q_new, p=p_new)


def _vector_field(h: EnergyFunction, x: np.ndarray) -> np.ndarray:
    s = state_split(x)
    return np.concatenate([h.grad_p(s), -h.grad_q(s)])


def rk4_step(h: EnergyFunction, s: PhaseState, dt: float) -> PhaseState:
    """Classical fixed-step RK4 on the full phase vector."""
    x = state_concat(s)
    k1 = _vector_field(h, x)
    k2 = _vector_field(h, x + 0.5 * dt * k1)
    k3 = _vector_field(h, x + 0.5 * dt * k2)
    k4 = _vector_field(h, x + dt * k3)
    return state_split(x + dt * (k1 / 6.0 + k2 / 3.0 + k3 / 3.0 + k4 / 6.0))


_STEPPERS = {"euler": euler_step, "rk4": rk4_step, "leapfrog": leapfrog_step}


def step_function(kind: str):
    if kind not in _STEPPERS:
        raise ValueError(f"unknown integrator kind {kind!r}")
    return _STEPPERS[kind]


def rollout(h: EnergyFunction, s0: PhaseState, spec: IntegratorSpec) -> Trajectory:
    """n_steps applications of the chosen stepper; states[0] is s0.

    Raises NumericalError carrying the failing step index if a state goes
    non-finite.
    """
    step = step_function(spec.kind)
    states = [s0]
    s = s0
    for i in range(spec.n_steps):
        try:
            s = step(h, s, spec.dt)
        except NumericalError as exc:
            exc.step_index = i + 1
            raise
        states.append(s)
    return Trajectory(states=tuple(states), dt=spec.dt, integrator_id=spec.kind)


def reference_rollout(
    h: EnergyFunction,
    s0: PhaseState,
    n_steps: int,
    dt: float,
    substeps: int = REFERENCE_SUBSTEPS,
) -> Trajectory:
    """Reference-quality trajectory: RK4 with `substeps` substeps per dt,
    sampled every dt. Plays the role of the exact flow for dataset generation
    and oracle comparisons."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    states = [s0]
    s = s0
    sub_dt = dt / substeps
    for i in range(n_steps):
        for _ in range(substeps):
            s = rk4_step(h, s, sub_dt)
        if not (np.isfinite(s.q).all() and np.isfinite(s.p).all()):
            raise NumericalError("reference rollout diverged", step_index=i + 1)
        states.append(s)
    return Trajectory(states=tuple(states), dt=dt, integrator_id="reference")


def jacobian_determinant(
    h: EnergyFunction,
    s: PhaseState,
    step_kind: str,
    dt: float,
    fd_step: float = 1e-6,
) -> float:
    """det of d(step(s))/ds by central finite differences and a dense determinant.

    Symplectic maps have unit determinant; this makes the volume-preservation
    claim directly measurable. Restricted to small systems (n <= 8) where the
    dense 2n x 2n Jacobian is cheap.
    """
    n = s.dim
    if n > 8:
        raise ValueError(f"dense Jacobian determinant limited to n <= 8, got n = {n}")
    if dt == 0.0:
        return 1.0
    step = step_function(step_kind)
    x0 = state_concat(s)
    m = 2 * n
    jac = np.empty((m, m))
    for j in range(m):
        hi = x0.copy()
        lo = x0.copy()
        hi[j] += fd_step
        lo[j] -= fd_step
        f_hi = state_concat(step(h, state_split(hi), dt))
        f_lo = state_concat(step(h, state_split(lo), dt))
        jac[:, j] = (f_hi - f_lo) / (2.0 * fd_step)
    return float(np.linalg.det(jac))
