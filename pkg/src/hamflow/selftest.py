"""Built-in invariant suite behind the `selftest` CLI subcommand.

Runs the fast acceptance checks (symplecticity, reversibility, the ELBO
bound, gradient integrity, dataset fidelity) and one representative invariant
per module, printing a pass/fail table. Training-scale checks live in the
pytest acceptance suite; everything here finishes in well under a minute.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .core import PhaseState, RngStream, gradient_check, state_concat
from .datagen import (
    DatasetSpec,
    KS_CRITICAL_1PCT,
    default_render_spec,
    ks_statistic_uniform,
    read_dataset,
    render_frame,
    scene_positions,
    system_energy,
    write_dataset,
)
from .diffgraph import Tape
from .integrators import IntegratorSpec, jacobian_determinant, rollout
from .learner import StateDataset, hnn_loss, rollout_loss
from .models import (
    GaussianEncoder,
    MlpParameters,
    SeparableHamiltonianModel,
    gaussian_logpdf,
)
from .nhf import FlowStack, PriorSpec, build_elbo_graph, elbo, flow_inverse_batch
from .reports import hamiltonian_variance, kde_grid
from .systems import system_hamiltonian

__all__ = ["run_selftest", "SELFTEST_CHECKS"]


def _zero_net(sizes):
    return MlpParameters(
        weights=[np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        biases=[np.zeros(o) for o in sizes[1:]],
        activations=["softplus"] * (len(sizes) - 2) + ["identity"],
    )


def _identity_stack():
    model = SeparableHamiltonianModel(
        kinetic=_zero_net([1, 4, 1]), potential=_zero_net([1, 4, 1]), name="flow.h0"
    )
    return FlowStack(hamiltonians=[model], n_leapfrog=2)


def _fixed_encoder(mean_value, std_value):
    from .nhf import softplus_inverse

    enc = GaussianEncoder(mean_net=_zero_net([1, 4, 1]), std_net=_zero_net([1, 4, 1]))
    enc.mean_net.biases[-1] = np.array([float(mean_value)])
    enc.std_net.biases[-1] = np.array([softplus_inverse(std_value)])
    return enc


# ---------------------------------------------------------- acceptance checks


def check_symplecticity():
    """Leapfrog Jacobian determinant is 1 +- 1e-6 on all systems + a learned model."""
    rng = RngStream(seed=101)
    cases = [(name, system_hamiltonian(name)) for name in
             ("mass_spring", "pendulum", "two_body", "three_body")]
    model = SeparableHamiltonianModel.init(dim=1, hidden=32, rng=rng)
    cases.append(("learned_model", model.as_energy_function()))
    dims = {"mass_spring": 1, "pendulum": 1, "two_body": 4, "three_body": 6, "learned_model": 1}
    worst = 0.0
    for name, h in cases:
        d = dims[name]
        for _ in range(50):
            s = PhaseState(q=rng.uniform(d, -2, 2), p=rng.uniform(d, -2, 2))
            det = jacobian_determinant(h, s, "leapfrog", 0.125)
            worst = max(worst, abs(det - 1.0))
            if abs(det - 1.0) >= 1e-6:
                return False, f"{name}: |det - 1| = {abs(det - 1.0):.2e}"
    return True, f"max |det - 1| = {worst:.2e} over 250 states"


def check_reversibility():
    """100-step leapfrog round trip < 1e-9; Euler on the same inputs > 1e-4."""
    worst_leap = 0.0
    worst_euler = np.inf
    for name, s0 in (("mass_spring", PhaseState(q=[1.0], p=[0.0])),
                     ("pendulum", PhaseState(q=[0.9], p=[0.2]))):
        h = system_hamiltonian(name)
        for kind in ("leapfrog", "euler"):
            fwd = rollout(h, s0, IntegratorSpec(kind, 0.125, 100))
            back = rollout(h, fwd.states[-1], IntegratorSpec(kind, -0.125, 100))
            err = np.abs(state_concat(back.states[-1]) - state_concat(s0)).max()
            if kind == "leapfrog":
                worst_leap = max(worst_leap, err)
            else:
                worst_euler = min(worst_euler, err)
    ok = worst_leap < 1e-9 and worst_euler > 1e-4
    return ok, f"leapfrog err {worst_leap:.2e}, euler err {worst_euler:.2e}"


def check_elbo_bound():
    """Exact encoder matches the log-marginal; shifted encoder sits 0.5 nats lower."""
    stack = _identity_stack()
    prior = PriorSpec("standard_normal")
    q = np.array([0.4])
    exact = gaussian_logpdf(q, 0.0, 1.0)
    val = elbo(stack, prior, _fixed_encoder(0.0, 1.0), q, RngStream(seed=102), 10_000)
    if abs(val - exact) > 1e-10:
        return False, f"true-posterior ELBO off by {abs(val - exact):.2e}"
    shifted = elbo(stack, prior, _fixed_encoder(1.0, 1.0), q, RngStream(seed=103), 10_000)
    gap = exact - shifted
    ok = abs(gap - 0.5) < 0.05
    return ok, f"shifted-encoder gap {gap:.4f} (expect 0.5 +- 0.05)"


def check_gradient_integrity():
    """FD directional checks of hnn, rollout, and negative-ELBO losses < 1e-4."""
    rng = RngStream(seed=104)
    worst = 0.0

    def directional(tape, loss, params, bindings, n_dirs=20):
        nonlocal worst
        tape.forward(loss, bindings={**params, **bindings})
        grads = tape.gradients(loss, params.keys())
        flat_names = list(params.keys())
        for _ in range(n_dirs):
            name = flat_names[int(rng.uniform(1, 0, len(flat_names))[0])]
            theta = np.asarray(params[name], dtype=np.float64)
            direction = rng.normal(theta.size).reshape(theta.shape)
            direction /= np.linalg.norm(direction)
            h = 1e-5
            vals = []
            for sign in (+1, -1):
                p2 = dict(params)
                p2[name] = theta + sign * h * direction
                vals.append(tape.forward(loss, bindings={**bindings, **p2}))
            fd = (vals[0] - vals[1]) / (2 * h)
            analytic = float(np.sum(np.asarray(grads[name]) * direction))
            err = abs(analytic - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
            if err >= 1e-4:
                return False
        return True

    model = SeparableHamiltonianModel.init(dim=1, hidden=16, rng=rng)
    tape = Tape()
    loss = hnn_loss(model, PhaseState(q=[0.5], p=[-0.3]), np.array([1.0]), np.array([0.2]), tape)
    if not directional(tape, loss, model.parameters(), {}):
        return False, "hnn_loss gradient check failed"

    h_true = system_hamiltonian("mass_spring")
    traj = rollout(h_true, PhaseState(q=[0.7], p=[0.1]), IntegratorSpec("leapfrog", 0.125, 8))
    model2 = SeparableHamiltonianModel.init(dim=1, hidden=12, rng=rng)
    tape2 = Tape()
    loss2 = rollout_loss(model2, traj, tape2)
    if not directional(tape2, loss2, model2.parameters(), {}):
        return False, "rollout_loss gradient check failed"

    stack = FlowStack.init(1, 1, 12, rng)
    enc = GaussianEncoder.init(1, 12, rng)
    tape3 = Tape()
    neg = tape3.neg(build_elbo_graph(stack, PriorSpec("standard_normal"), enc, tape3))
    params = {**stack.parameters(), **enc.parameters()}
    if not directional(tape3, neg, params, {"qT": np.array([0.4]), "eps": np.array([-0.6])}):
        return False, "negative-ELBO gradient check failed"
    return True, f"worst relative error {worst:.2e} over 60 directions"


def check_dataset_fidelity():
    """Desk-scale mass-spring dataset: KS radii, energy drift, noise std,
    byte-identical regeneration."""
    spec = DatasetSpec(system="mass_spring", n_train=1000, n_test=200, seed=42, render=False)
    h = system_energy("mass_spring")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_dataset(spec, tmp / "a")
        write_dataset(spec, tmp / "b")
        for rel in ("train/states_clean.f64", "train/states_noisy.f64",
                    "test/states_clean.f64", "test/states_noisy.f64"):
            if (tmp / "a" / rel).read_bytes() != (tmp / "b" / rel).read_bytes():
                return False, f"regeneration differs in {rel}"
        data = read_dataset(tmp / "a")

    clean = data["train_clean"]
    radii = np.linalg.norm(clean[:, 0, :], axis=1)
    ks = ks_statistic_uniform(radii, 0.1, 1.0)
    ks_crit = KS_CRITICAL_1PCT / np.sqrt(len(radii))
    if ks >= ks_crit:
        return False, f"KS statistic {ks:.4f} >= {ks_crit:.4f}"

    drift = 0.0
    for i in range(clean.shape[0]):
        e = np.array([h.energy(PhaseState(q=row[:1], p=row[1:])) for row in clean[i]])
        drift = max(drift, np.abs(e - e[0]).max() / max(abs(e[0]), 1e-12))
    if drift >= 1e-8:
        return False, f"clean energy drift {drift:.2e} >= 1e-8"

    noise = data["train_noisy"] - clean
    std = noise.std()
    if abs(std - spec.noise_std) / spec.noise_std >= 0.02:
        return False, f"noise std {std:.4f} not within 2% of {spec.noise_std}"
    return True, f"KS {ks:.4f} < {ks_crit:.4f}, drift {drift:.1e}, noise std {std:.4f}"


# ------------------------------------------------------------ module invariants


def check_core_rng_and_gradients():
    a = RngStream(seed=7, counter=3).normal(16)
    b = RngStream(seed=7, counter=3).normal(16)
    if not np.array_equal(a, b):
        return False, "RngStream not reproducible"
    rng = RngStream(seed=105)
    for name, d in (("mass_spring", 1), ("pendulum", 1), ("two_body", 4)):
        h = system_hamiltonian(name)
        states = [PhaseState(q=rng.uniform(d, -2, 2), p=rng.uniform(d, -2, 2)) for _ in range(100)]
        try:
            gradient_check(h, states)
        except AssertionError as exc:
            return False, f"{name}: {exc}"
    return True, "RNG reproducible; analytic gradients pass 1e-5 FD check"


def check_systems_invariants():
    h = system_hamiltonian("three_body")
    rng = RngStream(seed=106)
    for _ in range(20):
        q = rng.uniform(6, -2, 2)
        p = rng.uniform(6, -2, 2)
        shift = np.tile(rng.uniform(2, -5, 5), 3)
        if abs(h.energy(PhaseState(q=q + shift, p=p)) - h.energy(PhaseState(q=q, p=p))) > 1e-12:
            return False, "translation invariance violated"
    from .integrators import reference_rollout

    for name in ("mass_spring", "pendulum"):
        hs = system_hamiltonian(name)
        s0 = PhaseState(q=[0.8], p=[0.3])
        traj = reference_rollout(hs, s0, 30, 0.125)
        e0 = hs.energy(s0)
        drift = max(abs(hs.energy(s) - e0) for s in traj.states) / abs(e0)
        if drift >= 1e-6:
            return False, f"{name}: reference drift {drift:.2e}"
    return True, "translation invariance and reference energy conservation hold"


def check_integrator_orderings():
    h = system_hamiltonian("mass_spring")
    s0 = PhaseState(q=[1.0], p=[0.0])
    var = {}
    for kind in ("leapfrog", "euler"):
        traj = rollout(h, s0, IntegratorSpec(kind, 0.125, 30))
        var[kind] = hamiltonian_variance(h, traj)
    if var["leapfrog"] * 10 >= var["euler"]:
        return False, f"variance ordering violated: {var}"

    from .integrators import rk4_step

    w = 2.0
    exact = lambda t: np.array([np.cos(w * t), -np.sin(w * t)])
    errs = []
    for dt in (0.1, 0.05):
        got = state_concat(rk4_step(h, s0, dt))
        errs.append(np.linalg.norm(got - exact(dt)))
    ratio = errs[0] / errs[1]
    if not (24.0 < ratio < 40.0):
        return False, f"RK4 order ratio {ratio:.1f} outside [24, 40]"
    return True, f"var(H) ratio {var['euler']/var['leapfrog']:.0f}x, RK4 order ratio {ratio:.1f}"


def check_diffgraph_invariants():
    t = Tape()
    x = t.input("x", 0.0)
    y = t.softplus(x)
    (gy,) = t.grad_as_graph(y, [x])
    t.forward(gy)
    (g2,) = t.backward(gy, [x])
    if abs(g2 - 0.25) > 1e-12:
        return False, f"second derivative of softplus at 0: {g2}"

    rng = RngStream(seed=107)
    x0 = rng.normal(3)
    t2 = Tape()
    xv = t2.input("x", x0)
    f = t2.sum(t2.square(xv))
    g = t2.sum(t2.tanh(xv))
    combo = t2.add(t2.scale(2.0, f), t2.scale(-3.0, g))
    t2.forward(combo)
    lhs = t2.backward(combo, [xv])[0]
    rhs = 2.0 * t2.backward(f, [xv])[0] - 3.0 * t2.backward(g, [xv])[0]
    if not np.array_equal(lhs, rhs):
        return False, "backward linearity violated"
    return True, "second-order and linearity invariants hold"


def check_models_invariants():
    from .models import RnvpFlow
    from .nhf import rnvp_forward_batch, rnvp_inverse_batch

    rng = RngStream(seed=108)
    flow = RnvpFlow.init(2, 3, 8, rng)
    for c in flow.couplings:
        for net in (c.scale_net, c.translate_net):
            net.weights[-1] = rng.normal(net.weights[-1].size, std=0.3).reshape(
                net.weights[-1].shape
            )
    X = rng.normal(10).reshape(5, 2)
    Y, logdet_f = rnvp_forward_batch(flow, X)
    back, logdet_i = rnvp_inverse_batch(flow, Y)
    if np.abs(back - X).max() > 1e-10:
        return False, "RNVP round trip failed"
    if np.abs(logdet_f + logdet_i).max() > 1e-8:
        return False, "RNVP logdets do not negate"

    enc = GaussianEncoder.init(2, 8, RngStream(seed=109))
    mean, std = enc.mean_std(np.array([0.3, 0.7]))
    xs = np.linspace(-8, 8, 401)
    mass = 1.0
    for mu, sd in zip(mean, std):
        dens = np.exp(-0.5 * ((xs - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        mass *= np.trapezoid(dens, xs)
    if abs(mass - 1.0) > 1e-2:
        return False, f"encoder density mass {mass:.4f}"
    return True, "RNVP invertibility and encoder normalization hold"


def check_nhf_invariants():
    # Eq.-4 made operational: the measured log|det J| of the inverse flow is 0.
    rng = RngStream(seed=110)
    stack = FlowStack.init(1, 2, 8, rng)
    x0 = np.array([0.3, -0.4])
    eps = 1e-6
    jac = np.empty((2, 2))
    for j in range(2):
        hi = x0.copy()
        lo = x0.copy()
        hi[j] += eps
        lo[j] -= eps
        jac[:, j] = (
            flow_inverse_batch(stack, hi[None, :])[0] - flow_inverse_batch(stack, lo[None, :])[0]
        ) / (2 * eps)
    logdet = np.log(abs(np.linalg.det(jac)))
    if abs(logdet) > 1e-5:
        return False, f"flow log|det J| = {logdet:.2e}"

    prior = PriorSpec("soft_uniform", sigma=6.0, beta=4.0)
    xs = np.linspace(-12, 12, 10001)
    dens = np.exp(prior.logpdf_batch(xs[:, None]))
    mass = np.trapezoid(dens, xs)
    if abs(mass - 1.0) > 1e-6:
        return False, f"soft-uniform mass {mass:.8f}"
    return True, f"flow log|det J| = {logdet:.1e}; soft-uniform normalized"


def check_learner_invariants():
    rng = RngStream(seed=111)
    model = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=rng)
    shifted = SeparableHamiltonianModel.init(dim=1, hidden=8, rng=RngStream(seed=111))
    shifted.potential.biases[-1] = shifted.potential.biases[-1] + 3.0
    s = PhaseState(q=[0.4], p=[-0.2])
    ta, tb = Tape(), Tape()
    la = hnn_loss(model, s, np.array([1.0]), np.array([0.5]), ta)
    lb = hnn_loss(shifted, s, np.array([1.0]), np.array([0.5]), tb)
    if abs(ta.forward(la) - tb.forward(lb)) > 1e-12:
        return False, "gauge freedom violated for hnn_loss"
    return True, "potential shift leaves losses unchanged"


def check_datagen_render():
    spec = DatasetSpec(system="pendulum", n_train=1, n_test=0, n_steps=2, seed=9)
    rs = default_render_spec(spec)
    s = PhaseState(q=[0.3], p=[0.0])
    a = render_frame(rs, scene_positions("pendulum", s))
    b = render_frame(rs, scene_positions("pendulum", s))
    if not np.array_equal(a, b):
        return False, "rendering not deterministic"
    return True, "rendering deterministic"


def check_reports_invariants():
    xs = np.linspace(-2, 2, 41)
    grid = kde_grid(np.array([[0.0, 0.0]]), 0.3, xs, xs)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    expected = np.exp(-(X**2 + Y**2) / (2 * 0.09)) / (2 * np.pi * 0.09)
    if np.abs(grid - expected).max() > 1e-12:
        return False, "single-sample KDE is not the kernel"
    return True, "KDE kernel identity holds"


SELFTEST_CHECKS = [
    ("criterion-1 symplecticity", check_symplecticity),
    ("criterion-2 reversibility", check_reversibility),
    ("criterion-6 elbo bound", check_elbo_bound),
    ("criterion-7 gradient integrity", check_gradient_integrity),
    ("criterion-8 dataset fidelity", check_dataset_fidelity),
    ("core invariants", check_core_rng_and_gradients),
    ("systems invariants", check_systems_invariants),
    ("integrator orderings", check_integrator_orderings),
    ("diffgraph invariants", check_diffgraph_invariants),
    ("models invariants", check_models_invariants),
    ("nhf invariants", check_nhf_invariants),
    ("learner invariants", check_learner_invariants),
    ("datagen rendering", check_datagen_render),
    ("reports invariants", check_reports_invariants),
]


def run_selftest(out=print) -> bool:
    all_ok = True
    width = max(len(name) for name, _ in SELFTEST_CHECKS)
    for name, fn in SELFTEST_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name.ljust(width)}  {detail}")
    out(("all checks passed" if all_ok else "SELFTEST FAILED"))
    return all_ok
