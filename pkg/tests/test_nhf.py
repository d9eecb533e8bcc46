import math

import numpy as np
import pytest

from hamflow.core import PhaseState, RngStream, state_concat
from hamflow.diffgraph import Tape
from hamflow.models import (
    GaussianEncoder,
    MlpParameters,
    SeparableHamiltonianModel,
    gaussian_logpdf,
)
from hamflow.nhf import (
    FlowStack,
    NhfTrainConfig,
    PriorSpec,
    RnvpTrainConfig,
    build_elbo_graph,
    elbo,
    flow_forward,
    flow_forward_batch,
    flow_inverse,
    flow_inverse_batch,
    log_density,
    marginal_log_density,
    rnvp_marginal_log_density,
    sample_flow,
    soft_uniform_logpdf,
    softplus_inverse,
    train_nhf,
    train_rnvp,
)


def quadratic_net(coeff: float) -> MlpParameters:
    return MlpParameters(
        weights=[np.array([[1.0]]), np.array([[coeff]])],
        biases=[np.zeros(1), np.zeros(1)],
        activations=["square", "identity"],
    )


def zero_net(sizes) -> MlpParameters:
    return MlpParameters(
        weights=[np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        biases=[np.zeros(o) for o in sizes[1:]],
        activations=["softplus"] * (len(sizes) - 2) + ["identity"],
    )


def identity_stack(dim=1, n_leapfrog=2, name="flow") -> FlowStack:
    sizes = [dim, 4, 1]
    model = SeparableHamiltonianModel(
        kinetic=zero_net(sizes), potential=zero_net(sizes), name="flow.h0"
    )
    return FlowStack(hamiltonians=[model], n_leapfrog=n_leapfrog, name=name)


def fixed_encoder(dim, mean_value, std_value, name="enc") -> GaussianEncoder:
    """Zero-weight encoder emitting constant mean and std regardless of q."""
    enc = GaussianEncoder(
        mean_net=zero_net([dim, 4, dim]), std_net=zero_net([dim, 4, dim]), name=name
    )
    enc.mean_net.biases[-1] = np.full(dim, float(mean_value))
    enc.std_net.biases[-1] = np.full(dim, softplus_inverse(std_value))
    return enc


def random_stack(seed=0, dim=1, n_hams=2, hidden=8, n_leapfrog=2) -> FlowStack:
    rng = RngStream(seed)
    return FlowStack.init(dim, n_hams, hidden, rng, n_leapfrog=n_leapfrog)


class TestFlowMaps:
    def test_zero_hamiltonians_give_identity(self):
        stack = identity_stack()
        s = PhaseState(q=[0.7], p=[-0.4])
        assert flow_forward(stack, s) == s
        assert flow_inverse(stack, s) == s

    def test_round_trip(self):
        stack = random_stack(seed=1)
        rng = RngStream(seed=2)
        for _ in range(10):
            s = PhaseState(q=rng.normal(1), p=rng.normal(1))
            back = flow_inverse(stack, flow_forward(stack, s))
            assert np.abs(state_concat(back) - state_concat(s)).max() < 1e-9

    def test_quadratic_hamiltonian_rotates_phase_space(self):
        # Oracle: the explicit 2x2 kick-drift-kick matrix raised to the step count.
        dt, L = 0.125, 4
        stack = FlowStack(
            hamiltonians=[
                SeparableHamiltonianModel(
                    kinetic=quadratic_net(0.5), potential=quadratic_net(0.5), name="flow.h0"
                )
            ],
            n_leapfrog=L,
            raw_dt=softplus_inverse(dt),
        )
        m = np.array([[1 - dt**2 / 2, dt], [-dt + dt**3 / 4, 1 - dt**2 / 2]])
        expected_map = np.linalg.matrix_power(m, L)
        s = PhaseState(q=[0.8], p=[-0.5])
        got = state_concat(flow_forward(stack, s))
        expected = expected_map @ state_concat(s)
        assert np.abs(got - expected).max() < 1e-12

    def test_pure_drift_inverse_subtracts_exactly(self):
        # V = 0 so the flow is q -> q + L*dt*dK/dp with p fixed.
        stack = FlowStack(
            hamiltonians=[
                SeparableHamiltonianModel(
                    kinetic=quadratic_net(0.5), potential=zero_net([1, 4, 1]), name="flow.h0"
                )
            ],
            n_leapfrog=3,
        )
        s = PhaseState(q=[0.2], p=[0.9])
        fwd = flow_forward(stack, s)
        assert fwd.p[0] == s.p[0]
        assert fwd.q[0] == pytest.approx(s.q[0] + 3 * stack.dt * s.p[0], abs=1e-15)
        back = flow_inverse(stack, fwd)
        assert back == s

    def test_batch_matches_graph_path(self):
        # Cross-check: hand-rolled batched backprop vs the tape engine.
        stack = random_stack(seed=3, dim=2, n_hams=1)
        rng = RngStream(seed=4)
        S = rng.normal(8).reshape(2, 4)
        batch_out = flow_inverse_batch(stack, S)

        for row in range(2):
            tape = Tape()
            q = tape.input("q", S[row, :2])
            p = tape.input("p", S[row, 2:])
            from hamflow.nhf import flow_inverse_graph

            q0, p0 = flow_inverse_graph(stack, q, p, tape)
            tape.forward(p0)
            graph_out = np.concatenate([np.asarray(q0.value), np.asarray(p0.value)])
            assert np.abs(graph_out - batch_out[row]).max() < 1e-12


class TestLogDensity:
    def test_identity_stack_standard_normal_origin(self):
        stack = identity_stack()
        prior = PriorSpec("standard_normal")
        val = log_density(stack, prior, PhaseState(q=[0.0], p=[0.0]))
        assert val == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_density_invariant_under_flow_round_trip(self):
        stack = random_stack(seed=5)
        prior = PriorSpec("standard_normal")
        s = PhaseState(q=[0.3], p=[-0.2])
        moved = flow_inverse(stack, flow_forward(stack, s))
        assert log_density(stack, prior, s) == pytest.approx(
            log_density(stack, prior, moved), abs=1e-9
        )

    def test_joint_density_integrates_to_one(self):
        # Volume preservation: the grid quadrature of exp(log_density) must
        # carry the full prior mass for any stack that keeps mass in the box.
        stack = random_stack(seed=6)
        prior = PriorSpec("standard_normal")
        xs = np.linspace(-4, 4, 200)
        cell = (xs[1] - xs[0]) ** 2
        Q, P = np.meshgrid(xs, xs, indexing="ij")
        S = np.column_stack([Q.ravel(), P.ravel()])
        from hamflow.nhf import log_density_batch

        mass = np.exp(log_density_batch(stack, prior, S)).sum() * cell
        assert mass == pytest.approx(1.0, abs=0.02)

    def test_identity_stack_marginal_is_base_normal(self):
        # Momentum quadrature of the identity flow returns the q marginal.
        stack = identity_stack()
        prior = PriorSpec("standard_normal")
        qs = np.array([-1.5, 0.0, 0.4])
        got = marginal_log_density(stack, prior, qs)
        expected = [gaussian_logpdf(np.array([q]), 0.0, 1.0) for q in qs]
        assert np.abs(got - expected).max() < 1e-6


class TestSoftUniformPrior:
    prior = PriorSpec("soft_uniform", sigma=6.0, beta=4.0)

    def test_symmetric_and_maximized_at_zero(self):
        at0 = soft_uniform_logpdf(self.prior, np.array([0.0]))
        for x in (0.5, 1.0, 2.9, 3.5):
            hi = soft_uniform_logpdf(self.prior, np.array([x]))
            lo = soft_uniform_logpdf(self.prior, np.array([-x]))
            assert hi == pytest.approx(lo, abs=1e-12)
            assert at0 >= hi

    def test_normalizer_quadrature(self):
        # Oracle: trapezoid at 4x the resolution and a wider window.
        sigma, beta = self.prior.sigma, self.prior.beta
        half = sigma / 2 + 60.0 / beta
        xs = np.linspace(-half, half, 400_001)
        vals = 1.0 / (1.0 + np.exp(-beta * (xs + sigma / 2)))
        vals *= 1.0 / (1.0 + np.exp(beta * (xs - sigma / 2)))
        z_oracle = np.trapezoid(vals, xs)
        z_stored = math.exp(self.prior.log_normalizer())
        assert abs(z_stored - z_oracle) / z_oracle < 1e-6

    def test_density_integrates_to_one(self):
        xs = np.linspace(-12, 12, 20001)
        dens = np.exp([soft_uniform_logpdf(self.prior, np.array([x])) for x in xs])
        assert np.trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-6)

    def test_sampling_matches_density(self):
        rng = RngStream(seed=7)
        draws = self.prior.sample(rng, 1, 20000).ravel()
        assert abs(draws.mean()) < 0.05
        # Plateau of width sigma=6: uniform std is sigma/sqrt(12) ~ 1.73, a bit
        # larger with the soft tails.
        assert 1.6 < draws.std() < 2.0


class TestElbo:
    def test_exact_for_true_posterior(self):
        # Identity flow + factorized normal prior: the encoder N(0,1) is the
        # true posterior, so every single-sample estimate equals ln N(qT).
        stack = identity_stack()
        prior = PriorSpec("standard_normal")
        enc = fixed_encoder(1, 0.0, 1.0)
        for q in (-1.3, 0.0, 0.7):
            val = elbo(stack, prior, enc, np.array([q]), RngStream(seed=8), n_samples=16)
            assert val == pytest.approx(gaussian_logpdf(np.array([q]), 0.0, 1.0), abs=1e-12)

    def test_shifted_encoder_gap_is_the_kl(self):
        # Oracle: KL(N(1,1) || N(0,1)) = 0.5 exactly.
        stack = identity_stack()
        prior = PriorSpec("standard_normal")
        enc = fixed_encoder(1, 1.0, 1.0)
        q = np.array([0.4])
        val = elbo(stack, prior, enc, q, RngStream(seed=9), n_samples=10_000)
        exact = gaussian_logpdf(q, 0.0, 1.0)
        assert (exact - val) == pytest.approx(0.5, abs=0.05)

    def test_single_sample_deterministic(self):
        stack = random_stack(seed=10)
        enc = GaussianEncoder.init(1, 8, RngStream(seed=11))
        prior = PriorSpec("standard_normal")
        q = np.array([0.2])
        a = elbo(stack, prior, enc, q, RngStream(seed=12, counter=3), n_samples=1)
        b = elbo(stack, prior, enc, q, RngStream(seed=12, counter=3), n_samples=1)
        assert a == b

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            elbo(
                identity_stack(),
                PriorSpec(),
                fixed_encoder(1, 0.0, 1.0),
                np.array([0.0]),
                RngStream(seed=0),
                n_samples=0,
            )

    def test_graph_elbo_matches_numeric(self):
        # The training graph and the batched numeric path must agree.
        stack = random_stack(seed=13)
        enc = GaussianEncoder.init(1, 8, RngStream(seed=14))
        prior = PriorSpec("soft_uniform", sigma=6.0, beta=4.0)
        tape = Tape()
        node = build_elbo_graph(stack, prior, enc, tape)

        qT = np.array([0.37])
        eps = np.array([-0.8])
        bindings = {**stack.parameters(), **enc.parameters(), "qT": qT, "eps": eps}
        graph_val = tape.forward(node, bindings=bindings)

        mean, std = enc.mean_std(qT)
        pT = mean + std * eps
        s0 = flow_inverse(stack, PhaseState(q=qT, p=pT))
        numeric = prior.logpdf(state_concat(s0)) - gaussian_logpdf(pT, mean, std)
        assert graph_val == pytest.approx(numeric, abs=1e-10)

    def test_elbo_gradient_matches_finite_differences(self):
        stack = random_stack(seed=15)
        enc = GaussianEncoder.init(1, 8, RngStream(seed=16))
        prior = PriorSpec("standard_normal")
        tape = Tape()
        neg = tape.neg(build_elbo_graph(stack, prior, enc, tape))
        params = {**stack.parameters(), **enc.parameters()}
        bindings = {**params, "qT": np.array([0.5]), "eps": np.array([0.3])}
        tape.forward(neg, bindings=bindings)
        grads = tape.gradients(neg, params.keys())

        rng = RngStream(seed=17)
        for name in ["flow.h0.V.W0", "flow.h0.K.W1", "enc.mean.W2", "enc.std.b2", "flow.raw_dt"]:
            theta = np.asarray(params[name], dtype=np.float64)
            direction = rng.normal(theta.size).reshape(theta.shape)
            direction /= np.linalg.norm(direction)
            h = 1e-5
            vals = []
            for sign in (+1, -1):
                p2 = dict(params)
                p2[name] = theta + sign * h * direction
                vals.append(tape.forward(neg, bindings={**bindings, **p2}))
            fd = (vals[0] - vals[1]) / (2 * h)
            analytic = float(np.sum(np.asarray(grads[name]) * direction))
            assert abs(analytic - fd) / max(1.0, abs(fd)) < 1e-6, name


class TestSampling:
    def test_identity_stack_samples_follow_prior(self):
        stack = identity_stack()
        prior = PriorSpec("standard_normal")
        S = sample_flow(stack, prior, RngStream(seed=18), 5000)
        assert S.shape == (5000, 2)
        assert abs(S.mean()) < 0.05
        assert abs(S.std() - 1.0) < 0.05


class TestTraining:
    def test_point_mass_pulls_density_mode_to_origin(self):
        # Oracle: grid argmax of the learned marginal density.
        data = np.full((256, 1), 0.0)
        config = NhfTrainConfig(
            n_hamiltonians=1,
            n_leapfrog=2,
            hidden=16,
            encoder_hidden=16,
            lr=3e-3,
            steps=300,
            batch_size=8,
            seed=19,
        )
        result = train_nhf(data, config)
        assert not result.diverged
        qs = np.linspace(-2.0, 2.0, 161)
        logp = marginal_log_density(result.stack, PriorSpec("standard_normal"), qs)
        mode = qs[np.argmax(logp)]
        assert abs(mode) < 0.2

    def test_loss_curve_reproducible(self):
        data = RngStream(seed=20).normal(64).reshape(64, 1)
        config = NhfTrainConfig(hidden=8, encoder_hidden=8, steps=12, batch_size=4, seed=21)
        a = train_nhf(data, config)
        b = train_nhf(data, config)
        assert np.array_equal(a.curve, b.curve)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_nhf(np.empty((0, 1)), NhfTrainConfig())


class TestRnvpBaseline:
    def test_identity_flow_marginal_is_standard_normal(self):
        # Zero-initialized final layers make the initial flow the identity, so
        # the aux-augmented marginal is exactly the base normal.
        from hamflow.models import RnvpFlow

        flow = RnvpFlow.init(2, 2, 8, RngStream(seed=22))
        qs = np.array([-1.0, 0.0, 0.8])
        got = rnvp_marginal_log_density(flow, qs)
        expected = [gaussian_logpdf(np.array([q]), 0.0, 1.0) for q in qs]
        assert np.abs(got - expected).max() < 1e-6

    def test_training_improves_loss_and_is_reproducible(self):
        rng = RngStream(seed=23)
        data = np.concatenate([rng.normal(48, -1.5, 0.2), rng.normal(48, 1.5, 0.2)]).reshape(-1, 1)
        config = RnvpTrainConfig(n_layers=2, hidden=8, lr=3e-3, steps=60, batch_size=8, seed=24)
        a = train_rnvp(data, config)
        b = train_rnvp(data, config)
        assert a.augmented
        assert np.array_equal(a.curve, b.curve)
        assert a.curve[-10:].mean() < a.curve[:10].mean()
