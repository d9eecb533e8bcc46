"""Symplectic Hamiltonian dynamics toolkit.

Simulates classical systems with reversible, volume-preserving integrators,
learns Hamiltonians from phase-space trajectories, and performs density
estimation with Hamiltonian normalizing flows.
"""

from .core import (
    EnergyFunction,
    NumericalError,
    PhaseState,
    RngStream,
    SingularityError,
    Trajectory,
    sample_gaussian,
    state_concat,
    state_split,
)
from .integrators import (
    IntegratorSpec,
    euler_step,
    jacobian_determinant,
    leapfrog_step,
    reference_rollout,
    rk4_step,
    rollout,
)
from .systems import (
    MassSpringParams,
    NBodyParams,
    PendulumParams,
    mass_spring_hamiltonian,
    nbody_hamiltonian,
    pendulum_hamiltonian,
    system_hamiltonian,
)

__version__ = "0.1.0"
