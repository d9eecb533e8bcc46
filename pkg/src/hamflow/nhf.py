"""Hamiltonian normalizing flows for density estimation.

A `FlowStack` chains per-step learned separable Hamiltonians, each applied for
a fixed number of leapfrog steps. Because leapfrog is exactly invertible and
volume preserving, the log-density of a transformed sample is just the prior
log-density of its inverse image: no Jacobian term appears anywhere.

The data is the position block only; the momentum is a latent variable
marginalized with a variational Gaussian encoder, trained by maximizing a
Monte Carlo ELBO with reparameterized momentum samples. A data vector of
dimension d therefore lives in a 2d-dimensional phase space internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, PhaseState, RngStream, state_concat, state_split
from .diffgraph import Node, Tape
from .models import (
    AdamState,
    GaussianEncoder,
    RnvpFlow,
    SeparableHamiltonianModel,
    adam_step,
    gaussian_logpdf,
    leapfrog_batch,
    mlp_eval_batch,
    rnvp_inverse,
)
from .training import Worker, minibatch_gradients

__all__ = [
    "PriorSpec",
    "FlowStack",
    "flow_forward",
    "flow_inverse",
    "flow_forward_batch",
    "flow_inverse_batch",
    "log_density",
    "log_density_batch",
    "marginal_log_density",
    "soft_uniform_logpdf",
    "elbo",
    "build_elbo_graph",
    "leapfrog_graph",
    "flow_inverse_graph",
    "sample_flow",
    "softplus_inverse",
    "NhfTrainConfig",
    "NhfResult",
    "train_nhf",
    "rnvp_forward_batch",
    "rnvp_inverse_batch",
    "rnvp_log_density_batch",
    "rnvp_marginal_log_density",
    "RnvpTrainConfig",
    "RnvpResult",
    "train_rnvp",
    "MIXTURES",
    "mixture_sample",
    "mixture_logpdf",
    "save_nhf_checkpoint",
    "load_nhf_checkpoint",
    "save_rnvp_checkpoint",
    "load_rnvp_checkpoint",
]


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


# ---------------------------------------------------------------------- prior

_SOFT_UNIFORM_QUAD_POINTS = 100_001


def _soft_uniform_log_normalizer(sigma: float, beta: float) -> float:
    """log of the 1-D normalizer, by trapezoid quadrature (cached per spec)."""
    half_width = sigma / 2.0 + 40.0 / beta
    xs = np.linspace(-half_width, half_width, _SOFT_UNIFORM_QUAD_POINTS)
    log_un = _soft_uniform_unnormalized_log(xs, sigma, beta)
    return float(np.log(np.trapezoid(np.exp(log_un), xs)))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _soft_uniform_unnormalized_log(x, sigma: float, beta: float):
    x = np.asarray(x, dtype=np.float64)
    return _log_sigmoid(beta * (x + sigma / 2.0)) + _log_sigmoid(-beta * (x - sigma / 2.0))


_NORMALIZER_CACHE: dict = {}


@dataclass(frozen=True)
class PriorSpec:
    """Base density over the full (q, p) phase vector, i.i.d. per coordinate.

    `soft_uniform` is the product of two opposed sigmoids of sharpness beta
    over a plateau of width sigma, normalized numerically.
    """

    kind: str = "standard_normal"
    sigma: float = 6.0
    beta: float = 4.0

    def __post_init__(self):
        if self.kind not in ("standard_normal", "soft_uniform"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "soft_uniform" and (self.sigma <= 0 or self.beta <= 0):
            raise ValueError("soft_uniform requires sigma > 0 and beta > 0")

    def log_normalizer(self) -> float:
        key = (self.sigma, self.beta)
        if key not in _NORMALIZER_CACHE:
            _NORMALIZER_CACHE[key] = _soft_uniform_log_normalizer(self.sigma, self.beta)
        return _NORMALIZER_CACHE[key]

    def logpdf(self, x: np.ndarray) -> float:
        return float(self.logpdf_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def logpdf_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "standard_normal":
            return -0.5 * x.shape[1] * np.log(2.0 * np.pi) - 0.5 * np.sum(x * x, axis=1)
        per_coord = _soft_uniform_unnormalized_log(x, self.sigma, self.beta)
        return np.sum(per_coord, axis=1) - x.shape[1] * self.log_normalizer()

    def logpdf_node(self, tape: Tape, x: Node) -> Node:
        d = len(x.value)
        if self.kind == "standard_normal":
            quad = tape.scale(-0.5, tape.sum(tape.square(x)))
            return tape.add(quad, tape.constant(-0.5 * d * math.log(2.0 * math.pi)))
        half = tape.constant(np.full(d, self.sigma / 2.0))
        lo = tape.neg(tape.softplus(tape.neg(tape.scale(self.beta, tape.add(x, half)))))
        hi = tape.neg(tape.softplus(tape.neg(tape.scale(self.beta, tape.sub(half, x)))))
        raw = tape.add(tape.sum(lo), tape.sum(hi))
        return tape.add(raw, tape.constant(-d * self.log_normalizer()))

    def sample(self, rng: RngStream, dim: int, count: int) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.normal(dim * count).reshape(count, dim)
        # Inverse-CDF on a cached quadrature grid.
        half_width = self.sigma / 2.0 + 40.0 / self.beta
        xs = np.linspace(-half_width, half_width, 20_001)
        pdf = np.exp(_soft_uniform_unnormalized_log(xs, self.sigma, self.beta))
        cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(xs))])
        cdf /= cdf[-1]
        u = rng.uniform(dim * count)
        return np.interp(u, cdf, xs).reshape(count, dim)


def soft_uniform_logpdf(prior: PriorSpec, s: np.ndarray) -> float:
    """Normalized log-density of the soft-uniform prior, summed over coords."""
    if prior.kind != "soft_uniform":
        raise ValueError("soft_uniform_logpdf requires a soft_uniform prior")
    return prior.logpdf(s)


# ----------------------------------------------------------------- flow stack


@dataclass
class FlowStack:
    """Composition of per-step Hamiltonians, each integrated for `n_leapfrog`
    leapfrog steps of (learnable, positive) size dt = softplus(raw_dt)."""

    hamiltonians: list
    n_leapfrog: int = 2
    raw_dt: float = softplus_inverse(0.125)
    learn_dt: bool = True
    name: str = "flow"

    def __post_init__(self):
        if not self.hamiltonians:
            raise ValueError("flow stack needs at least one Hamiltonian")
        dims = {m.dim for m in self.hamiltonians}
        if len(dims) != 1:
            raise ValueError("all flow Hamiltonians must share dimension")
        if self.n_leapfrog < 1:
            raise ValueError("need at least one leapfrog step per Hamiltonian")

    @classmethod
    def init(
        cls,
        dim: int,
        n_hamiltonians: int,
        hidden: int,
        rng: RngStream,
        n_leapfrog: int = 2,
        dt_init: float = 0.125,
        learn_dt: bool = True,
    ) -> "FlowStack":
        hams = [
            SeparableHamiltonianModel.init(dim, hidden, rng, name=f"flow.h{i}")
            for i in range(n_hamiltonians)
        ]
        return cls(
            hamiltonians=hams,
            n_leapfrog=n_leapfrog,
            raw_dt=softplus_inverse(dt_init),
            learn_dt=learn_dt,
        )

    @property
    def dim(self) -> int:
        return self.hamiltonians[0].dim

    @property
    def dt(self) -> float:
        return float(np.logaddexp(0.0, self.raw_dt))

    def parameters(self) -> dict:
        params = {}
        for m in self.hamiltonians:
            params.update(m.parameters())
        if self.learn_dt:
            params[f"{self.name}.raw_dt"] = np.float64(self.raw_dt)
        return params

    def set_parameters(self, values: dict):
        for m in self.hamiltonians:
            m.set_parameters(values)
        if self.learn_dt:
            self.raw_dt = float(values[f"{self.name}.raw_dt"])


def flow_forward_batch(stack: FlowStack, S: np.ndarray) -> np.ndarray:
    """Apply the stack to rows of a (B, 2d) phase array."""
    d = stack.dim
    Q, P = S[:, :d].copy(), S[:, d:].copy()
    for model in stack.hamiltonians:
        Q, P = leapfrog_batch(model, Q, P, stack.dt, stack.n_leapfrog)
    out = np.concatenate([Q, P], axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericalError("flow_forward produced non-finite states")
    return out


def flow_inverse_batch(stack: FlowStack, S: np.ndarray) -> np.ndarray:
    """Exact inverse: reversed Hamiltonian order, dt negated."""
    d = stack.dim
    Q, P = S[:, :d].copy(), S[:, d:].copy()
    for model in reversed(stack.hamiltonians):
        Q, P = leapfrog_batch(model, Q, P, -stack.dt, stack.n_leapfrog)
    out = np.concatenate([Q, P], axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericalError("flow_inverse produced non-finite states")
    return out


def flow_forward(stack: FlowStack, s0: PhaseState) -> PhaseState:
    return state_split(flow_forward_batch(stack, state_concat(s0)[None, :])[0])


def flow_inverse(stack: FlowStack, sT: PhaseState) -> PhaseState:
    return state_split(flow_inverse_batch(stack, state_concat(sT)[None, :])[0])


def log_density(stack: FlowStack, prior: PriorSpec, sT: PhaseState) -> float:
    """ln p(s_T) = ln pi(inverse(s_T)); volume preservation removes the
    Jacobian correction entirely."""
    return prior.logpdf(state_concat(flow_inverse(stack, sT)))


def log_density_batch(stack: FlowStack, prior: PriorSpec, S: np.ndarray) -> np.ndarray:
    return prior.logpdf_batch(flow_inverse_batch(stack, S))


def marginal_log_density(
    stack: FlowStack,
    prior: PriorSpec,
    q_values: np.ndarray,
    p_lo: float = -8.0,
    p_hi: float = 8.0,
    p_points: int = 401,
) -> np.ndarray:
    """ln p(q) for 1-d data by trapezoid quadrature over the latent momentum."""
    if stack.dim != 1:
        raise ValueError("momentum quadrature implemented for 1-d data only")
    q_values = np.atleast_1d(np.asarray(q_values, dtype=np.float64))
    ps = np.linspace(p_lo, p_hi, p_points)
    out = np.empty(len(q_values))
    for i, q in enumerate(q_values):
        S = np.column_stack([np.full(p_points, q), ps])
        dens = np.exp(log_density_batch(stack, prior, S))
        out[i] = np.log(np.trapezoid(dens, ps))
    return out


def sample_flow(stack: FlowStack, prior: PriorSpec, rng: RngStream, count: int) -> np.ndarray:
    """(count, 2d) array of flow samples: prior draws pushed forward."""
    s0 = prior.sample(rng, 2 * stack.dim, count)
    return flow_forward_batch(stack, s0)


# ----------------------------------------------------------------- graph path


def leapfrog_graph(
    model: SeparableHamiltonianModel,
    q: Node,
    p: Node,
    dt_node: Node,
    tape: Tape,
    n_steps: int,
) -> tuple:
    """Differentiable kick-drift-kick steps; dH/dq and dH/dp enter the graph
    via emitted gradient nodes, so losses built on top expose second-order
    parameter derivatives."""
    half = tape.scale(0.5, dt_node)
    for _ in range(n_steps):
        (gq,) = tape.grad_as_graph(model.potential_node(tape, q), [q])
        p = tape.sub(p, tape.mul(half, gq))
        (gp,) = tape.grad_as_graph(model.kinetic_node(tape, p), [p])
        q = tape.add(q, tape.mul(dt_node, gp))
        (gq2,) = tape.grad_as_graph(model.potential_node(tape, q), [q])
        p = tape.sub(p, tape.mul(half, gq2))
    return q, p


def _dt_node(stack: FlowStack, tape: Tape) -> Node:
    raw = tape.input(f"{stack.name}.raw_dt", stack.raw_dt)
    return tape.softplus(raw)


def flow_inverse_graph(stack: FlowStack, q: Node, p: Node, tape: Tape) -> tuple:
    dt = _dt_node(stack, tape)
    neg_dt = tape.neg(dt)
    for model in reversed(stack.hamiltonians):
        q, p = leapfrog_graph(model, q, p, neg_dt, tape, stack.n_leapfrog)
    return q, p


def build_elbo_graph(
    stack: FlowStack, prior: PriorSpec, enc: GaussianEncoder, tape: Tape
) -> Node:
    """Single-sample reparameterized ELBO with rebindable `qT` and `eps`.

    ELBO = ln pi(inverse(qT, pT)) - ln f(pT | qT) with pT = mean + std * eps;
    under reparameterization the entropy term reduces to sum(log std) + const,
    which is used directly. The prior factorizes per coordinate, so it is
    evaluated blockwise on the q and p halves.
    """
    d = stack.dim
    qT = tape.input("qT", np.zeros(d))
    eps = tape.input("eps", np.zeros(d))
    mean = enc.mean_node(tape, qT)
    std = enc.std_node(tape, qT)
    pT = tape.add(mean, tape.mul(std, eps))

    q0, p0 = flow_inverse_graph(stack, qT, pT, tape)
    log_prior = tape.add(prior.logpdf_node(tape, q0), prior.logpdf_node(tape, p0))

    log_f = tape.add(
        tape.constant(-0.5 * d * math.log(2.0 * math.pi)),
        tape.add(tape.neg(tape.sum(tape.log(std))), tape.scale(-0.5, tape.sum(tape.square(eps)))),
    )
    return tape.sub(log_prior, log_f)


def elbo(
    stack: FlowStack,
    prior: PriorSpec,
    enc: GaussianEncoder,
    qT: np.ndarray,
    rng: RngStream,
    n_samples: int,
) -> float:
    """Monte Carlo ELBO estimate; deterministic given the stream state."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    qT = np.asarray(qT, dtype=np.float64)
    d = len(qT)
    mean, std = enc.mean_std(qT)
    eps = rng.normal(d * n_samples).reshape(n_samples, d)
    pT = mean + std * eps
    S = np.column_stack([np.tile(qT, (n_samples, 1)), pT])
    log_prior = log_density_batch(stack, prior, S)
    log_f = np.array([gaussian_logpdf(pT[i], mean, std) for i in range(n_samples)])
    return float(np.mean(log_prior - log_f))


# ------------------------------------------------------- synthetic densities

# Benchmark target densities for density-estimation runs. `mixture2` is the
# 1-d two-mode benchmark; `mixture4` puts four modes on the corners of a
# square of side 4 (a stand-in for the unspecified 2-d benchmark).
MIXTURES = {
    "mixture2": (np.array([[-2.0], [2.0]]), 0.3),
    "mixture4": (
        np.array([[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]]),
        0.3,
    ),
}


def mixture_sample(name: str, rng: RngStream, count: int) -> np.ndarray:
    if name not in MIXTURES:
        raise ValueError(f"unknown density {name!r}; expected one of {sorted(MIXTURES)}")
    modes, std = MIXTURES[name]
    k, d = modes.shape
    which = rng.integers(count, 0, k)
    noise = rng.normal(count * d, std=std).reshape(count, d)
    return modes[which] + noise


def mixture_logpdf(name: str, x: np.ndarray) -> np.ndarray:
    """Exact mixture log-density, vectorized over rows."""
    if name not in MIXTURES:
        raise ValueError(f"unknown density {name!r}; expected one of {sorted(MIXTURES)}")
    modes, std = MIXTURES[name]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    k, d = modes.shape
    diff = x[:, None, :] - modes[None, :, :]
    comp = -0.5 * np.sum(diff * diff, axis=2) / std**2 - d * np.log(std) - 0.5 * d * np.log(2 * np.pi)
    m = comp.max(axis=1)
    return m + np.log(np.mean(np.exp(comp - m[:, None]), axis=1))


# ------------------------------------------------------------------- training


@dataclass
class NhfTrainConfig:
    n_hamiltonians: int = 1
    n_leapfrog: int = 2
    hidden: int = 32
    encoder_hidden: int = 32
    dt_init: float = 0.125
    learn_dt: bool = True
    prior: PriorSpec = field(default_factory=PriorSpec)
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    threads: int = 1


@dataclass
class NhfResult:
    stack: FlowStack
    encoder: GaussianEncoder
    curve: np.ndarray  # per-step negative ELBO (training batches)
    diverged: bool = False


def train_nhf(data: np.ndarray, config: NhfTrainConfig) -> NhfResult:
    """Maximize the mean ELBO with Adam. On divergence (non-finite loss or
    gradient) the last good parameters are kept and `diverged` is set."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("training data must be nonempty")
    n, d = data.shape

    rng = RngStream(config.seed)
    stack = FlowStack.init(
        d,
        config.n_hamiltonians,
        config.hidden,
        rng,
        n_leapfrog=config.n_leapfrog,
        dt_init=config.dt_init,
        learn_dt=config.learn_dt,
    )
    enc = GaussianEncoder.init(d, config.encoder_hidden, rng)

    def build_worker() -> Worker:
        tape = Tape()
        neg_elbo = tape.neg(build_elbo_graph(stack, config.prior, enc, tape))
        bind = lambda ex: {"qT": ex[0], "eps": ex[1]}
        return Worker(tape, neg_elbo, bind, params.keys())

    params = {**stack.parameters(), **enc.parameters()}
    workers = [build_worker() for _ in range(max(1, config.threads))]

    adam = AdamState(lr=config.lr)
    curve = []
    diverged = False
    for step in range(config.steps):
        idx = rng.integers(config.batch_size, 0, n)
        eps = rng.normal(config.batch_size * d).reshape(config.batch_size, d)
        examples = [(data[i], eps[j]) for j, i in enumerate(idx)]
        try:
            loss, grads = minibatch_gradients(workers, params, examples)
            if not np.isfinite(loss):
                raise NumericalError("non-finite training loss", step_index=step)
            new_params = adam_step(adam, params, grads)
        except NumericalError:
            diverged = True
            break
        params = new_params
        curve.append(loss)

    stack.set_parameters(params)
    enc.set_parameters(params)
    return NhfResult(stack=stack, encoder=enc, curve=np.array(curve), diverged=diverged)


# ------------------------------------------------------------- RNVP baseline


def rnvp_inverse_batch(flow: RnvpFlow, Y: np.ndarray) -> tuple:
    """Numeric data-to-latent pass over rows; returns (X, logdet_inv)."""
    X = np.asarray(Y, dtype=np.float64).copy()
    logdet = np.zeros(X.shape[0])
    for c in reversed(flow.couplings):
        masked = X * c.mask
        s_out = mlp_eval_batch(c.scale_net, masked) * (1.0 - c.mask)
        t_out = mlp_eval_batch(c.translate_net, masked) * (1.0 - c.mask)
        X = masked + (1.0 - c.mask) * ((X - t_out) * np.exp(-s_out))
        logdet -= np.sum(s_out, axis=1)
    return X, logdet


def rnvp_forward_batch(flow: RnvpFlow, X: np.ndarray) -> tuple:
    """Numeric latent-to-data pass over rows; returns (Y, logdet)."""
    Y = np.asarray(X, dtype=np.float64).copy()
    logdet = np.zeros(Y.shape[0])
    for c in flow.couplings:
        masked = Y * c.mask
        s_out = mlp_eval_batch(c.scale_net, masked) * (1.0 - c.mask)
        t_out = mlp_eval_batch(c.translate_net, masked) * (1.0 - c.mask)
        Y = masked + (1.0 - c.mask) * (Y * np.exp(s_out) + t_out)
        logdet += np.sum(s_out, axis=1)
    return Y, logdet


def rnvp_log_density_batch(flow: RnvpFlow, Y: np.ndarray) -> np.ndarray:
    """ln p(y) under the flow with a standard-normal base density."""
    X, logdet_inv = rnvp_inverse_batch(flow, Y)
    base = -0.5 * Y.shape[1] * math.log(2.0 * math.pi) - 0.5 * np.sum(X * X, axis=1)
    return base + logdet_inv


def rnvp_marginal_log_density(
    flow: RnvpFlow,
    q_values: np.ndarray,
    aux_lo: float = -8.0,
    aux_hi: float = 8.0,
    aux_points: int = 401,
) -> np.ndarray:
    """ln p(q) for an aux-augmented 1-d RNVP, by quadrature over the aux coord."""
    if flow.dim != 2:
        raise ValueError("aux-coordinate quadrature implemented for 2-d flows only")
    q_values = np.atleast_1d(np.asarray(q_values, dtype=np.float64))
    aux = np.linspace(aux_lo, aux_hi, aux_points)
    out = np.empty(len(q_values))
    for i, q in enumerate(q_values):
        Y = np.column_stack([np.full(aux_points, q), aux])
        dens = np.exp(rnvp_log_density_batch(flow, Y))
        out[i] = np.log(np.trapezoid(dens, aux))
    return out


@dataclass
class RnvpTrainConfig:
    n_layers: int = 2
    hidden: int = 32
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    threads: int = 1


@dataclass
class RnvpResult:
    flow: RnvpFlow
    curve: np.ndarray  # per-step negative log-likelihood (training batches)
    augmented: bool = False
    diverged: bool = False


def train_rnvp(data: np.ndarray, config: RnvpTrainConfig) -> RnvpResult:
    """Maximum-likelihood training of the coupling baseline.

    Coupling layers need at least two dimensions, so 1-d data is augmented
    with one standard-normal auxiliary coordinate (mirroring the latent
    momentum of the Hamiltonian flow); marginal densities then come from
    quadrature over the auxiliary coordinate.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("training data must be nonempty")
    n, d = data.shape
    augmented = d == 1
    d_model = 2 if augmented else d

    rng = RngStream(config.seed)
    flow = RnvpFlow.init(d_model, config.n_layers, config.hidden, rng)

    def build_worker() -> Worker:
        tape = Tape()
        y = tape.input("y", np.zeros(d_model))
        z, logdet_inv = rnvp_inverse(flow, y, tape)
        base = tape.add(
            tape.constant(-0.5 * d_model * math.log(2.0 * math.pi)),
            tape.scale(-0.5, tape.sum(tape.square(z))),
        )
        nll = tape.neg(tape.add(base, logdet_inv))
        return Worker(tape, nll, lambda ex: {"y": ex}, params.keys())

    params = flow.parameters()
    workers = [build_worker() for _ in range(max(1, config.threads))]

    adam = AdamState(lr=config.lr)
    curve = []
    diverged = False
    for step in range(config.steps):
        idx = rng.integers(config.batch_size, 0, n)
        batch = data[idx]
        if augmented:
            aux = rng.normal(config.batch_size).reshape(-1, 1)
            batch = np.hstack([batch, aux])
        try:
            loss, grads = minibatch_gradients(workers, params, list(batch))
            if not np.isfinite(loss):
                raise NumericalError("non-finite training loss", step_index=step)
            new_params = adam_step(adam, params, grads)
        except NumericalError:
            diverged = True
            break
        params = new_params
        curve.append(loss)

    flow.set_parameters(params)
    return RnvpResult(flow=flow, curve=np.array(curve), augmented=augmented, diverged=diverged)


# ----------------------------------------------------------------- checkpoints


def _mlp_meta(net) -> dict:
    return {"sizes": net.sizes, "activations": list(net.activations)}


def _mlp_from_meta(meta: dict, arrays: dict, prefix: str):
    from .models import MlpParameters

    sizes = meta["sizes"]
    weights = [arrays[f"{prefix}.W{i}"] for i in range(len(sizes) - 1)]
    biases = [arrays[f"{prefix}.b{i}"] for i in range(len(sizes) - 1)]
    return MlpParameters(weights=weights, biases=biases, activations=list(meta["activations"]))


def save_nhf_checkpoint(path, stack: FlowStack, enc: GaussianEncoder, prior: PriorSpec, extra=None):
    from .models import write_checkpoint

    meta = {
        "n_hamiltonians": len(stack.hamiltonians),
        "n_leapfrog": stack.n_leapfrog,
        "raw_dt": stack.raw_dt,
        "learn_dt": stack.learn_dt,
        "hamiltonians": [
            {"name": m.name, "kinetic": _mlp_meta(m.kinetic), "potential": _mlp_meta(m.potential)}
            for m in stack.hamiltonians
        ],
        "encoder": {"mean": _mlp_meta(enc.mean_net), "std": _mlp_meta(enc.std_net)},
        "prior": {"kind": prior.kind, "sigma": prior.sigma, "beta": prior.beta},
        "extra": extra or {},
    }
    arrays = {**stack.parameters(), **enc.parameters()}
    arrays.pop(f"{stack.name}.raw_dt", None)  # scalar lives in the header
    write_checkpoint(path, "nhf", arrays, meta)


def load_nhf_checkpoint(path):
    from .models import read_checkpoint

    kind, meta, arrays = read_checkpoint(path)
    if kind != "nhf":
        raise ValueError(f"{path}: expected an nhf checkpoint, got {kind!r}")
    hams = []
    for spec in meta["hamiltonians"]:
        hams.append(
            SeparableHamiltonianModel(
                kinetic=_mlp_from_meta(spec["kinetic"], arrays, f"{spec['name']}.K"),
                potential=_mlp_from_meta(spec["potential"], arrays, f"{spec['name']}.V"),
                name=spec["name"],
            )
        )
    stack = FlowStack(
        hamiltonians=hams,
        n_leapfrog=meta["n_leapfrog"],
        raw_dt=meta["raw_dt"],
        learn_dt=meta["learn_dt"],
    )
    enc = GaussianEncoder(
        mean_net=_mlp_from_meta(meta["encoder"]["mean"], arrays, "enc.mean"),
        std_net=_mlp_from_meta(meta["encoder"]["std"], arrays, "enc.std"),
    )
    prior = PriorSpec(**meta["prior"])
    return stack, enc, prior, meta.get("extra", {})


def save_rnvp_checkpoint(path, flow: RnvpFlow, augmented: bool, extra=None):
    from .models import write_checkpoint

    meta = {
        "n_layers": len(flow.couplings),
        "augmented": augmented,
        "couplings": [
            {"scale": _mlp_meta(c.scale_net), "translate": _mlp_meta(c.translate_net)}
            for c in flow.couplings
        ],
        "extra": extra or {},
    }
    arrays = dict(flow.parameters())
    for i, c in enumerate(flow.couplings):
        arrays[f"{flow.name}.{i}.mask"] = c.mask
    write_checkpoint(path, "rnvp", arrays, meta)


def load_rnvp_checkpoint(path):
    from .models import RnvpCoupling, read_checkpoint

    kind, meta, arrays = read_checkpoint(path)
    if kind != "rnvp":
        raise ValueError(f"{path}: expected an rnvp checkpoint, got {kind!r}")
    couplings = []
    for i, spec in enumerate(meta["couplings"]):
        couplings.append(
            RnvpCoupling(
                mask=arrays[f"rnvp.{i}.mask"],
                scale_net=_mlp_from_meta(spec["scale"], arrays, f"rnvp.{i}.s"),
                translate_net=_mlp_from_meta(spec["translate"], arrays, f"rnvp.{i}.t"),
            )
        )
    flow = RnvpFlow(couplings=couplings)
    return flow, bool(meta["augmented"]), meta.get("extra", {})
