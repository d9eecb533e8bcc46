import numpy as np
import pytest

from hamflow.core import PhaseState, RngStream, state_concat
from hamflow.diffgraph import Tape
from hamflow.integrators import IntegratorSpec, rollout
from hamflow.learner import (
    LearnerTrainConfig,
    StateDataset,
    coordinate_constraint_loss,
    hnn_loss,
    model_rollout_batch,
    rollout_loss,
    rollout_mse_batch,
    train_learner,
)
from hamflow.models import MlpParameters, SeparableHamiltonianModel
from hamflow.systems import MassSpringParams, mass_spring_hamiltonian

MASS_SPRING = mass_spring_hamiltonian(MassSpringParams(k=2.0, m=0.5))


def quadratic_net(coeff: float) -> MlpParameters:
    return MlpParameters(
        weights=[np.array([[1.0]]), np.array([[coeff]])],
        biases=[np.zeros(1), np.zeros(1)],
        activations=["square", "identity"],
    )


def exact_mass_spring_model() -> SeparableHamiltonianModel:
    return SeparableHamiltonianModel(kinetic=quadratic_net(1.0), potential=quadratic_net(1.0))


def zero_model(dim=1) -> SeparableHamiltonianModel:
    sizes = [dim, 4, 1]
    zero = lambda: MlpParameters(
        weights=[np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        biases=[np.zeros(o) for o in sizes[1:]],
        activations=["softplus", "identity"],
    )
    return SeparableHamiltonianModel(kinetic=zero(), potential=zero())


def leapfrog_trajectories(n, n_steps, seed, dt=0.125):
    rng = RngStream(seed)
    trajs = []
    for i in range(n):
        r = rng.uniform(1, 0.1, 1.0)[0]
        angle = rng.uniform(1, 0.0, 2 * np.pi)[0]
        s0 = PhaseState(q=[r * np.cos(angle)], p=[r * np.sin(angle)])
        trajs.append(rollout(MASS_SPRING, s0, IntegratorSpec("leapfrog", dt, n_steps)))
    return trajs


class TestHnnLoss:
    def test_exact_model_with_exact_targets_is_zero(self):
        model = exact_mass_spring_model()
        s = PhaseState(q=[0.7], p=[-0.4])
        tape = Tape()
        loss = hnn_loss(model, s, MASS_SPRING.grad_p(s), -MASS_SPRING.grad_q(s), tape)
        assert abs(tape.forward(loss)) < 1e-12

    def test_zero_model_hand_computed_loss(self):
        # Targets dq/dt = 2, dp/dt = -2 at (q=1, p=1): loss = (4 + 4) / 2.
        model = zero_model()
        tape = Tape()
        loss = hnn_loss(
            model, PhaseState(q=[1.0], p=[1.0]), np.array([2.0]), np.array([-2.0]), tape
        )
        assert tape.forward(loss) == pytest.approx(4.0, abs=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = RngStream(seed=30)
        model = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=rng)
        s = PhaseState(q=[0.5], p=[-0.8])
        tq, tp = np.array([1.2]), np.array([-0.3])
        tape = Tape()
        loss = hnn_loss(model, s, tq, tp, tape)
        params = model.parameters()
        tape.forward(loss, bindings=params)
        grads = tape.gradients(loss, params.keys())

        for name in ("ham.V.W0", "ham.K.W1", "ham.V.b0"):
            theta = params[name]
            direction = rng.normal(theta.size).reshape(theta.shape)
            direction /= np.linalg.norm(direction)
            h = 1e-5
            vals = []
            for sign in (+1, -1):
                p2 = dict(params)
                p2[name] = theta + sign * h * direction
                vals.append(tape.forward(loss, bindings=p2))
            fd = (vals[0] - vals[1]) / (2 * h)
            analytic = float(np.sum(np.asarray(grads[name]) * direction))
            assert abs(analytic - fd) / max(1.0, abs(fd)) < 1e-6, name


class TestCoordinateConstraintLoss:
    def test_satisfied_constraint_is_zero(self):
        q_t = np.array([0.2, -0.4])
        q_next = np.array([0.5, -0.1])
        assert coordinate_constraint_loss(q_t, q_next, q_next - q_t) == 0.0

    def test_unit_violation(self):
        assert coordinate_constraint_loss(np.zeros(1), np.zeros(1), np.ones(1)) == 1.0

    def test_even_under_sign_flip(self):
        q_t, q_next, p_t = np.array([0.3]), np.array([0.9]), np.array([0.1])
        a = coordinate_constraint_loss(q_t, q_next, p_t)
        b = coordinate_constraint_loss(-q_t, -q_next, -p_t)
        assert a == b


class TestRolloutLoss:
    def test_exact_replay_has_vanishing_loss(self):
        # Data generated by the same leapfrog stepper the model rolls out with.
        traj = leapfrog_trajectories(1, 10, seed=31)[0]
        model = exact_mass_spring_model()
        tape = Tape()
        loss = rollout_loss(model, traj, tape)
        assert tape.forward(loss) < 1e-20

    def test_zero_model_equals_mean_squared_displacement(self):
        # Oracle: closed-form mean over the frozen rollout (a zero model never
        # moves, so every prediction equals the initial state).
        traj = leapfrog_trajectories(1, 8, seed=32)[0]
        arr = traj.as_array()
        expected = float(np.mean((arr[1:] - arr[0]) ** 2))
        tape = Tape()
        loss = rollout_loss(zero_model(), traj, tape)
        assert tape.forward(loss) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = RngStream(seed=33)
        model = SeparableHamiltonianModel.init(dim=1, hidden=6, rng=rng)
        traj = leapfrog_trajectories(1, 6, seed=34)[0]
        tape = Tape()
        loss = rollout_loss(model, traj, tape)
        params = model.parameters()
        tape.forward(loss, bindings=params)
        grads = tape.gradients(loss, params.keys())

        for name in ("ham.V.W0", "ham.K.W2", "ham.K.b1"):
            theta = params[name]
            direction = rng.normal(theta.size).reshape(theta.shape)
            direction /= np.linalg.norm(direction)
            h = 1e-6
            vals = []
            for sign in (+1, -1):
                p2 = dict(params)
                p2[name] = theta + sign * h * direction
                vals.append(tape.forward(loss, bindings=p2))
            fd = (vals[0] - vals[1]) / (2 * h)
            analytic = float(np.sum(np.asarray(grads[name]) * direction))
            assert abs(analytic - fd) / max(1.0, abs(fd)) < 1e-4, name

    def test_truncation(self):
        traj = leapfrog_trajectories(1, 10, seed=35)[0]
        tape = Tape()
        loss = rollout_loss(zero_model(), traj, tape, max_steps=3)
        arr = traj.as_array()
        expected = float(np.mean((arr[1:4] - arr[0]) ** 2))
        assert tape.forward(loss) == pytest.approx(expected, rel=1e-12)


class TestGaugeFreedom:
    def test_constant_potential_shift_changes_nothing(self):
        rng = RngStream(seed=36)
        model = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=rng)
        shifted = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=RngStream(seed=36))
        shifted.potential.biases[-1] = shifted.potential.biases[-1] + 7.5

        traj = leapfrog_trajectories(1, 8, seed=37)[0]
        s = traj.states[0]

        # Trajectories are exactly equal: gradients are blind to the shift.
        arr0 = traj.as_array()
        roll_a = model_rollout_batch(model, arr0[0][None, :], traj.dt, 8)
        roll_b = model_rollout_batch(shifted, arr0[0][None, :], traj.dt, 8)
        assert np.array_equal(roll_a, roll_b)

        tape_a, tape_b = Tape(), Tape()
        la = hnn_loss(model, s, np.array([1.0]), np.array([0.5]), tape_a)
        lb = hnn_loss(shifted, s, np.array([1.0]), np.array([0.5]), tape_b)
        assert abs(tape_a.forward(la) - tape_b.forward(lb)) < 1e-12

        tape_a, tape_b = Tape(), Tape()
        ra = rollout_loss(model, traj, tape_a)
        rb = rollout_loss(shifted, traj, tape_b)
        assert abs(tape_a.forward(ra) - tape_b.forward(rb)) < 1e-12


class TestEnergyConservationScaling:
    def test_quartering_dt_reduces_drift(self):
        rng = RngStream(seed=38)
        model = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=rng)
        s0 = np.array([[0.8, -0.3]])

        def max_drift(dt, n_steps):
            roll = model_rollout_batch(model, s0, dt, n_steps)
            from hamflow.models import model_energy_batch

            e = model_energy_batch(model, roll[:, 0, :1], roll[:, 0, 1:])
            return np.abs(e - e[0]).max()

        coarse = max_drift(0.125, 40)
        fine = max_drift(0.125 / 4, 160)
        assert coarse / fine >= 8.0


class TestStateDataset:
    def test_forward_difference_targets(self):
        traj = leapfrog_trajectories(1, 5, seed=39)[0]
        ds = StateDataset(trajectories=[traj])
        pairs = ds.derivative_pairs()
        assert len(pairs) == 5  # final state has no forward difference
        s, tq, tp = pairs[2]
        arr = traj.as_array()
        assert tq[0] == pytest.approx((arr[3, 0] - arr[2, 0]) / traj.dt)
        assert tp[0] == pytest.approx((arr[3, 1] - arr[2, 1]) / traj.dt)

    def test_exact_targets(self):
        traj = leapfrog_trajectories(1, 5, seed=40)[0]
        ds = StateDataset.with_exact_targets([traj], MASS_SPRING)
        pairs = ds.derivative_pairs()
        assert len(pairs) == 6
        s, tq, tp = pairs[0]
        assert tq[0] == pytest.approx(MASS_SPRING.grad_p(s)[0])
        assert tp[0] == pytest.approx(-MASS_SPRING.grad_q(s)[0])


class TestTrainLearner:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            StateDataset(trajectories=[])

    def test_hnn_smoke_and_reproducibility(self):
        trajs = leapfrog_trajectories(8, 10, seed=41)
        ds = StateDataset.with_exact_targets(trajs, MASS_SPRING)
        config = LearnerTrainConfig(hidden=8, steps=30, batch_size=4, seed=42, eval_every=30)
        a = train_learner(ds, "hnn", config)
        b = train_learner(ds, "hnn", config)
        assert not a.diverged
        assert np.array_equal(a.curve, b.curve)
        assert len(a.metrics) >= 1

    def test_rollout_smoke(self):
        trajs = leapfrog_trajectories(6, 8, seed=43)
        ds = StateDataset(trajectories=trajs)
        config = LearnerTrainConfig(
            hidden=8, steps=10, batch_size=2, seed=44, rollout_steps=4, eval_every=10
        )
        result = train_learner(ds, "rollout", config)
        assert not result.diverged
        assert len(result.curve) == 10

    def test_unknown_mode_rejected(self):
        trajs = leapfrog_trajectories(2, 4, seed=45)
        with pytest.raises(ValueError):
            train_learner(StateDataset(trajectories=trajs), "pixels", LearnerTrainConfig())


class TestRolloutMse:
    def test_exact_model_on_leapfrog_data(self):
        trajs = leapfrog_trajectories(4, 10, seed=46)
        mse = rollout_mse_batch(exact_mass_spring_model(), trajs)
        assert mse < 1e-20
