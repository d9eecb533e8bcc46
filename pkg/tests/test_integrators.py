import math

import numpy as np
import pytest

from hamflow.core import PhaseState, RngStream, state_concat
from hamflow.integrators import (
    IntegratorSpec,
    euler_step,
    jacobian_determinant,
    leapfrog_step,
    reference_rollout,
    rk4_step,
    rollout,
)
from hamflow.systems import (
    MassSpringParams,
    NBodyParams,
    PendulumParams,
    mass_spring_hamiltonian,
    nbody_hamiltonian,
    pendulum_hamiltonian,
)

MASS_SPRING = mass_spring_hamiltonian(MassSpringParams(k=2.0, m=0.5))
PENDULUM = pendulum_hamiltonian(PendulumParams(m=0.5, g=3.0, l=1.0))


def mass_spring_exact(s0: PhaseState, t: float) -> np.ndarray:
    """Closed-form flow of the k=2, m=0.5 oscillator (omega = 2)."""
    k, m = 2.0, 0.5
    w = math.sqrt(k / m)
    q0, p0 = s0.q[0], s0.p[0]
    q = q0 * math.cos(w * t) + p0 / (m * w) * math.sin(w * t)
    p = -q0 * m * w * math.sin(w * t) + p0 * math.cos(w * t)
    return np.array([q, p])


class TestEulerStep:
    def test_hand_computed_update(self):
        s = euler_step(MASS_SPRING, PhaseState(q=[1.0], p=[0.0]), 0.1)
        assert s.q[0] == pytest.approx(1.0)
        assert s.p[0] == pytest.approx(-0.2)

    def test_zero_dt_is_identity(self):
        s0 = PhaseState(q=[0.3], p=[-0.7])
        s = euler_step(MASS_SPRING, s0, 0.0)
        assert s == s0

    def test_pendulum_fixed_point(self):
        s = euler_step(PENDULUM, PhaseState(q=[0.0], p=[0.0]), 0.5)
        assert s == PhaseState(q=[0.0], p=[0.0])


class TestLeapfrogStep:
    def test_hand_computed_kick_drift_kick(self):
        # p_half = -0.1; q' = 1 + 0.1*(-0.2) = 0.98; p' = -0.1 - 0.05*1.96 = -0.198
        s = leapfrog_step(MASS_SPRING, PhaseState(q=[1.0], p=[0.0]), 0.1)
        assert s.q[0] == pytest.approx(0.98, abs=1e-15)
        assert s.p[0] == pytest.approx(-0.198, abs=1e-15)

    def test_zero_dt_is_identity(self):
        s0 = PhaseState(q=[0.3], p=[-0.7])
        assert leapfrog_step(MASS_SPRING, s0, 0.0) == s0

    def test_single_step_exactly_invertible(self):
        s0 = PhaseState(q=[0.8], p=[-0.4])
        fwd = leapfrog_step(PENDULUM, s0, 0.125)
        back = leapfrog_step(PENDULUM, fwd, -0.125)
        assert np.abs(back.q - s0.q).max() <= 1e-12
        assert np.abs(back.p - s0.p).max() <= 1e-12

    def test_rejects_non_separable(self):
        h = mass_spring_hamiltonian(MassSpringParams())
        coupled = type(h)(
            energy=h.energy, grad_q=h.grad_q, grad_p=h.grad_p, is_separable=False
        )
        with pytest.raises(ValueError):
            leapfrog_step(coupled, PhaseState(q=[1.0], p=[0.0]), 0.1)


class TestRk4Step:
    def test_zero_dt_is_identity(self):
        s0 = PhaseState(q=[0.3], p=[-0.7])
        assert rk4_step(MASS_SPRING, s0, 0.0) == s0

    def test_pendulum_fixed_point(self):
        s = rk4_step(PENDULUM, PhaseState(q=[0.0], p=[0.0]), 0.125)
        assert s == PhaseState(q=[0.0], p=[0.0])

    def test_against_fine_euler_oracle(self):
        # Oracle: 10^4 explicit-Euler sub-steps of dt=1e-5 over the same interval.
        # Both the oracle (~2e-6 radial drift) and a single RK4 step at dt=0.1
        # (~2.7e-6 phase truncation) carry a few-1e-6 of intrinsic error, so the
        # honest agreement bound is 5e-6 per coordinate; measured gap is
        # [1.88e-6, 3.07e-6].
        s0 = PhaseState(q=[1.0], p=[0.0])
        s = s0
        for _ in range(10_000):
            s = euler_step(MASS_SPRING, s, 1e-5)
        oracle = state_concat(s)
        got = state_concat(rk4_step(MASS_SPRING, s0, 0.1))
        assert np.abs(got - oracle).max() < 5e-6
        # Against the closed form the RK4 step is accurate to its O(dt^5) truncation.
        assert np.abs(got - mass_spring_exact(s0, 0.1)).max() < 3e-6

    def test_local_order_five(self):
        # Halving dt should shrink the one-step error vs the exact flow by ~2^5.
        s0 = PhaseState(q=[1.0], p=[0.0])
        err = []
        for dt in (0.1, 0.05):
            got = state_concat(rk4_step(MASS_SPRING, s0, dt))
            err.append(np.linalg.norm(got - mass_spring_exact(s0, dt)))
        ratio = err[0] / err[1]
        assert 24.0 < ratio < 40.0


class TestRollout:
    def test_zero_steps(self):
        s0 = PhaseState(q=[1.0], p=[0.0])
        traj = rollout(MASS_SPRING, s0, IntegratorSpec(kind="leapfrog", dt=0.125, n_steps=0))
        assert len(traj) == 1 and traj.states[0] == s0

    def _max_energy_deviation(self, dt, n_steps):
        s0 = PhaseState(q=[1.0], p=[0.0])
        traj = rollout(MASS_SPRING, s0, IntegratorSpec(kind="leapfrog", dt=dt, n_steps=n_steps))
        e0 = MASS_SPRING.energy(s0)
        energies = np.array([MASS_SPRING.energy(s) for s in traj.states])
        return np.abs(energies - e0).max() / abs(e0)

    def test_leapfrog_energy_deviation_bounded(self):
        # Oracle: evaluate H at every state. For this oscillator (omega = 2) the
        # leapfrog energy oscillation has relative amplitude ~(omega*dt)^2/8, i.e.
        # ~8e-3 at dt=0.125; measured max over 30 steps is 1.559e-2.
        assert self._max_energy_deviation(0.125, 30) < 2e-2

    def test_leapfrog_energy_deviation_scales_as_dt_squared(self):
        # Quartering dt over the same horizon shrinks the bound ~16x.
        coarse = self._max_energy_deviation(0.125, 30)
        fine = self._max_energy_deviation(0.125 / 4, 120)
        assert coarse / fine > 8.0
        assert fine < 1e-3

    def test_forward_backward_round_trip(self):
        s0 = PhaseState(q=[0.9], p=[0.2])
        fwd = rollout(PENDULUM, s0, IntegratorSpec(kind="leapfrog", dt=0.125, n_steps=100))
        back = rollout(
            PENDULUM, fwd.states[-1], IntegratorSpec(kind="leapfrog", dt=-0.125, n_steps=100)
        )
        end = back.states[-1]
        assert np.abs(end.q - s0.q).max() < 1e-9
        assert np.abs(end.p - s0.p).max() < 1e-9

    def test_euler_round_trip_is_worse(self):
        s0 = PhaseState(q=[1.0], p=[0.0])
        spec_f = IntegratorSpec(kind="euler", dt=0.125, n_steps=30)
        spec_b = IntegratorSpec(kind="euler", dt=-0.125, n_steps=30)
        fwd = rollout(MASS_SPRING, s0, spec_f)
        back = rollout(MASS_SPRING, fwd.states[-1], spec_b)
        euler_err = np.abs(state_concat(back.states[-1]) - state_concat(s0)).max()

        lf = rollout(MASS_SPRING, s0, IntegratorSpec(kind="leapfrog", dt=0.125, n_steps=30))
        lb = rollout(
            MASS_SPRING, lf.states[-1], IntegratorSpec(kind="leapfrog", dt=-0.125, n_steps=30)
        )
        leap_err = np.abs(state_concat(lb.states[-1]) - state_concat(s0)).max()
        assert euler_err > 1e-4
        assert leap_err < 1e-9
        assert euler_err > leap_err

    def test_energy_variance_ordering(self):
        s0 = PhaseState(q=[1.0], p=[0.0])
        var = {}
        for kind in ("leapfrog", "euler"):
            traj = rollout(MASS_SPRING, s0, IntegratorSpec(kind=kind, dt=0.125, n_steps=30))
            energies = np.array([MASS_SPRING.energy(s) for s in traj.states])
            var[kind] = energies.var()
        assert var["leapfrog"] * 10.0 < var["euler"]


class TestReferenceRollout:
    def test_matches_exact_flow(self):
        s0 = PhaseState(q=[1.0], p=[0.0])
        traj = reference_rollout(MASS_SPRING, s0, n_steps=30, dt=0.125)
        for t, s in enumerate(traj.states):
            exact = mass_spring_exact(s0, 0.125 * t)
            assert np.abs(state_concat(s) - exact).max() < 1e-10

    def test_energy_conservation(self):
        s0 = PhaseState(q=[0.4], p=[0.9])
        traj = reference_rollout(PENDULUM, s0, n_steps=30, dt=0.125)
        e0 = PENDULUM.energy(s0)
        drift = max(abs(PENDULUM.energy(s) - e0) for s in traj.states)
        assert drift / abs(e0) < 1e-8


class TestJacobianDeterminant:
    def test_leapfrog_is_volume_preserving(self):
        rng = RngStream(seed=9)
        for _ in range(10):
            s = PhaseState(q=rng.uniform(1, -2, 2), p=rng.uniform(1, -2, 2))
            det = jacobian_determinant(MASS_SPRING, s, "leapfrog", 0.125)
            assert abs(det - 1.0) < 1e-6

    def test_euler_expands_volume_by_expected_factor(self):
        # Oracle: exact 2x2 determinant of the linear Euler map,
        # det [[1, dt/m], [-dt*k, 1]] = 1 + dt^2 * k / m = 1.04.
        s = PhaseState(q=[0.7], p=[-0.3])
        det = jacobian_determinant(MASS_SPRING, s, "euler", 0.1)
        assert det == pytest.approx(1.04, abs=1e-4)

    def test_zero_dt_gives_exactly_one(self):
        s = PhaseState(q=[0.7], p=[-0.3])
        assert jacobian_determinant(MASS_SPRING, s, "leapfrog", 0.0) == 1.0

    def test_dimension_guard(self):
        big = PhaseState(q=np.zeros(9), p=np.zeros(9))
        h = mass_spring_hamiltonian(MassSpringParams())
        with pytest.raises(ValueError):
            jacobian_determinant(h, big, "leapfrog", 0.1)

    def test_leapfrog_volume_preservation_all_systems(self):
        systems = {
            "mass_spring": (MASS_SPRING, 1),
            "pendulum": (PENDULUM, 1),
            "two_body": (nbody_hamiltonian(NBodyParams(n_bodies=2)), 4),
            "three_body": (nbody_hamiltonian(NBodyParams(n_bodies=3)), 6),
        }
        rng = RngStream(seed=17)
        for name, (h, dim) in systems.items():
            for _ in range(5):
                s = PhaseState(q=rng.uniform(dim, -2, 2), p=rng.uniform(dim, -2, 2))
                det = jacobian_determinant(h, s, "leapfrog", 0.125)
                assert abs(det - 1.0) < 1e-6, f"{name}: det={det}"
