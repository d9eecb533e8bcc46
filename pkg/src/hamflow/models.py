"""Parameterized networks and their optimizer.

Everything here is a thin layer over `diffgraph`: models hold plain numpy
parameter arrays, know how to append their forward pass to a tape, and expose
their parameters as flat name->array dicts for the Adam optimizer. The learned
Hamiltonian is separable by construction, H(q, p) = K(p) + V(q), so every
integrator property (symplecticity, exact reversibility) applies to it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import EnergyFunction, NumericalError, PhaseState, RngStream
from .diffgraph import Node, Tape

__all__ = [
    "MlpParameters",
    "mlp_forward",
    "mlp_eval",
    "mlp_eval_batch",
    "mlp_grad_batch",
    "SeparableHamiltonianModel",
    "model_energy",
    "model_energy_batch",
    "leapfrog_batch",
    "GaussianEncoder",
    "RnvpCoupling",
    "RnvpFlow",
    "rnvp_forward",
    "rnvp_inverse",
    "AdamState",
    "adam_step",
    "write_checkpoint",
    "read_checkpoint",
    "gaussian_logpdf",
]

ACTIVATIONS = ("softplus", "relu", "tanh", "square", "identity")


@dataclass
class MlpParameters:
    """Dense MLP weights: per-layer (out, in) matrices, bias vectors, and an
    activation tag applied after each affine layer."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("one weight, bias and activation per layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError("layer shapes must compose")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for prev, nxt in zip(self.weights[:-1], self.weights[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise ValueError("consecutive layer shapes must compose")

    @classmethod
    def init(
        cls,
        sizes,
        rng: RngStream,
        activation: str = "softplus",
        output_activation: str = "identity",
    ) -> "MlpParameters":
        """Gaussian init with std 1/sqrt(fan_in), zero biases."""
        weights, biases, acts = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = 1.0 / np.sqrt(fan_in)
            weights.append(rng.normal(fan_out * fan_in, std=std).reshape(fan_out, fan_in))
            biases.append(np.zeros(fan_out))
            acts.append(activation if i < len(sizes) - 2 else output_activation)
        return cls(weights=weights, biases=biases, activations=acts)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def parameters(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def set_parameters(self, prefix: str, values: dict):
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(values[f"{prefix}.W{i}"], dtype=np.float64)
            self.biases[i] = np.asarray(values[f"{prefix}.b{i}"], dtype=np.float64)


def _apply_activation(tape: Tape, node: Node, act: str) -> Node:
    if act == "identity":
        return node
    return getattr(tape, act)(node)


def mlp_forward(params: MlpParameters, x: Node, tape: Tape, name: str) -> Node:
    """Append the MLP forward pass to `tape`; parameters become named inputs
    (`name.Wi`, `name.bi`) shared across repeated calls with the same name."""
    h = x
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        wn = tape.input(f"{name}.W{i}", w)
        bn = tape.input(f"{name}.b{i}", b)
        h = tape.add(tape.matvec(wn, h), bn)
        h = _apply_activation(tape, h, act)
    return h


def mlp_eval(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (no tape)."""
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = w @ h + b
        if act == "softplus":
            h = np.logaddexp(0.0, h)
        elif act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        elif act == "square":
            h = np.square(h)
    return h


def mlp_eval_batch(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    """Forward pass vectorized over rows of a (B, d_in) array."""
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = h @ w.T + b
        if act == "softplus":
            h = np.logaddexp(0.0, h)
        elif act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        elif act == "square":
            h = np.square(h)
    return h


def _activation_derivative(act: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if act == "identity":
        return np.ones_like(pre)
    if act == "softplus":
        z = np.clip(pre, -500, 500)
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    if act == "relu":
        return (pre > 0.0).astype(np.float64)
    if act == "tanh":
        return 1.0 - np.square(post)
    if act == "square":
        return 2.0 * pre
    raise ValueError(f"unknown activation {act!r}")


def mlp_grad_batch(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    """Gradient of the scalar MLP output w.r.t. its input, vectorized over
    rows of a (B, d_in) array. Requires output dimension 1. Hand-rolled
    backprop, independent of the tape engine; used on bulk evaluation paths
    (density grids, batched flows)."""
    if params.sizes[-1] != 1:
        raise ValueError("mlp_grad_batch requires a scalar-valued net")
    h = np.asarray(x, dtype=np.float64)
    pres, posts = [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = h @ w.T + b
        if act == "softplus":
            h = np.logaddexp(0.0, pre)
        elif act == "relu":
            h = np.maximum(pre, 0.0)
        elif act == "tanh":
            h = np.tanh(pre)
        elif act == "square":
            h = np.square(pre)
        else:
            h = pre
        pres.append(pre)
        posts.append(h)
    grad = np.ones((x.shape[0], 1))
    for w, act, pre, post in zip(
        reversed(params.weights), reversed(params.activations), reversed(pres), reversed(posts)
    ):
        grad = (grad * _activation_derivative(act, pre, post)) @ w
    return grad


@dataclass
class SeparableHamiltonianModel:
    """Learned separable Hamiltonian H(q, p) = K(p) + V(q).

    `name` prefixes the parameter bindings so several models can share a tape
    (e.g. the per-step Hamiltonians of a flow stack).
    """

    kinetic: MlpParameters
    potential: MlpParameters
    name: str = "ham"

    def __post_init__(self):
        dk, dv = self.kinetic.sizes[0], self.potential.sizes[0]
        if dk != dv:
            raise ValueError("K and V must act on the same dimension")
        if self.kinetic.sizes[-1] != 1 or self.potential.sizes[-1] != 1:
            raise ValueError("K and V must be scalar-valued")

    @classmethod
    def init(cls, dim: int, hidden: int, rng: RngStream, name: str = "ham"):
        sizes = [dim, hidden, hidden, 1]
        return cls(
            kinetic=MlpParameters.init(sizes, rng, activation="softplus"),
            potential=MlpParameters.init(sizes, rng, activation="softplus"),
            name=name,
        )

    @property
    def dim(self) -> int:
        return self.kinetic.sizes[0]

    def parameters(self) -> dict:
        params = self.kinetic.parameters(f"{self.name}.K")
        params.update(self.potential.parameters(f"{self.name}.V"))
        return params

    def set_parameters(self, values: dict):
        self.kinetic.set_parameters(f"{self.name}.K", values)
        self.potential.set_parameters(f"{self.name}.V", values)

    def kinetic_node(self, tape: Tape, p: Node) -> Node:
        return tape.sum(mlp_forward(self.kinetic, p, tape, f"{self.name}.K"))

    def potential_node(self, tape: Tape, q: Node) -> Node:
        return tape.sum(mlp_forward(self.potential, q, tape, f"{self.name}.V"))

    def energy_node(self, tape: Tape, q: Node, p: Node) -> Node:
        return tape.add(self.kinetic_node(tape, p), self.potential_node(tape, q))

    def as_energy_function(self) -> EnergyFunction:
        """EnergyFunction backed by a cached tape with emitted gradient nodes.

        Parameter values are rebound on every call, so the closures always see
        the model's current weights.
        """
        d = self.dim
        tape = Tape()
        q = tape.input("q", np.zeros(d))
        p = tape.input("p", np.zeros(d))
        h_node = self.energy_node(tape, q, p)
        gq_node, gp_node = tape.grad_as_graph(h_node, [q, p])

        def _bindings(s: PhaseState) -> dict:
            b = self.parameters()
            b["q"] = s.q
            b["p"] = s.p
            return b

        def energy(s: PhaseState) -> float:
            return float(tape.forward(h_node, bindings=_bindings(s)))

        def grad_q(s: PhaseState) -> np.ndarray:
            return np.array(tape.forward(gq_node, bindings=_bindings(s)), copy=True)

        def grad_p(s: PhaseState) -> np.ndarray:
            return np.array(tape.forward(gp_node, bindings=_bindings(s)), copy=True)

        return EnergyFunction(energy=energy, grad_q=grad_q, grad_p=grad_p, is_separable=True)


def model_energy(m: SeparableHamiltonianModel, s: PhaseState, tape: Tape) -> Node:
    """K(p) + V(q) at a concrete state, with `q`/`p` as rebindable inputs."""
    if s.dim != m.dim:
        raise ValueError(f"model expects dimension {m.dim}, got {s.dim}")
    q = tape.input("q", s.q)
    p = tape.input("p", s.p)
    return m.energy_node(tape, q, p)


def leapfrog_batch(model: SeparableHamiltonianModel, Q, P, dt: float, n_steps: int) -> tuple:
    """Kick-drift-kick over (B, d) blocks using the hand-rolled batched
    gradients; the fast evaluation-side counterpart of the graph leapfrog."""
    for _ in range(n_steps):
        P = P - 0.5 * dt * mlp_grad_batch(model.potential, Q)
        Q = Q + dt * mlp_grad_batch(model.kinetic, P)
        P = P - 0.5 * dt * mlp_grad_batch(model.potential, Q)
    return Q, P


def model_energy_batch(model: SeparableHamiltonianModel, Q, P) -> np.ndarray:
    """H = K(p) + V(q) over (B, d) blocks."""
    return mlp_eval_batch(model.kinetic, P)[:, 0] + mlp_eval_batch(model.potential, Q)[:, 0]


@dataclass
class GaussianEncoder:
    """Variational momentum encoder f(p | q) = N(p; mean(q), std(q)).

    The std net output is passed through softplus, keeping sigma positive.
    """

    mean_net: MlpParameters
    std_net: MlpParameters
    name: str = "enc"

    @classmethod
    def init(cls, dim: int, hidden: int, rng: RngStream, name: str = "enc"):
        sizes = [dim, hidden, hidden, dim]
        return cls(
            mean_net=MlpParameters.init(sizes, rng, activation="relu"),
            std_net=MlpParameters.init(sizes, rng, activation="relu"),
            name=name,
        )

    @property
    def dim(self) -> int:
        return self.mean_net.sizes[0]

    def parameters(self) -> dict:
        params = self.mean_net.parameters(f"{self.name}.mean")
        params.update(self.std_net.parameters(f"{self.name}.std"))
        return params

    def set_parameters(self, values: dict):
        self.mean_net.set_parameters(f"{self.name}.mean", values)
        self.std_net.set_parameters(f"{self.name}.std", values)

    def mean_node(self, tape: Tape, q: Node) -> Node:
        return mlp_forward(self.mean_net, q, tape, f"{self.name}.mean")

    def std_node(self, tape: Tape, q: Node) -> Node:
        return tape.softplus(mlp_forward(self.std_net, q, tape, f"{self.name}.std"))

    def mean_std(self, q: np.ndarray) -> tuple:
        return mlp_eval(self.mean_net, q), np.logaddexp(0.0, mlp_eval(self.std_net, q))

    def sample(self, q: np.ndarray, rng: RngStream) -> np.ndarray:
        mean, std = self.mean_std(q)
        return mean + std * rng.normal(len(mean))

    def logpdf(self, q: np.ndarray, p: np.ndarray) -> float:
        mean, std = self.mean_std(q)
        return gaussian_logpdf(p, mean, std)


def gaussian_logpdf(x: np.ndarray, mean, std) -> float:
    x = np.asarray(x, dtype=np.float64)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), x.shape)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), x.shape)
    z = (x - mean) / std
    return float(np.sum(-0.5 * np.log(2.0 * np.pi) - np.log(std) - 0.5 * z * z))


# ----------------------------------------------------------------- RNVP flow


@dataclass
class RnvpCoupling:
    """One affine coupling layer: the masked half parameterizes an elementwise
    affine map of the unmasked half."""

    mask: np.ndarray
    scale_net: MlpParameters
    translate_net: MlpParameters

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)


@dataclass
class RnvpFlow:
    couplings: list
    name: str = "rnvp"

    @classmethod
    def init(cls, dim: int, n_layers: int, hidden: int, rng: RngStream, name: str = "rnvp"):
        """Alternating binary masks; the final affine layer of each net starts
        at zero so the flow begins as the identity."""
        couplings = []
        for i in range(n_layers):
            mask = np.array([(j + i) % 2 for j in range(dim)], dtype=np.float64)
            nets = []
            for _ in range(2):
                net = MlpParameters.init([dim, hidden, hidden, dim], rng, activation="relu")
                net.weights[-1] = np.zeros_like(net.weights[-1])
                nets.append(net)
            couplings.append(RnvpCoupling(mask=mask, scale_net=nets[0], translate_net=nets[1]))
        return cls(couplings=couplings, name=name)

    @property
    def dim(self) -> int:
        return len(self.couplings[0].mask)

    def parameters(self) -> dict:
        params = {}
        for i, c in enumerate(self.couplings):
            params.update(c.scale_net.parameters(f"{self.name}.{i}.s"))
            params.update(c.translate_net.parameters(f"{self.name}.{i}.t"))
        return params

    def set_parameters(self, values: dict):
        for i, c in enumerate(self.couplings):
            c.scale_net.set_parameters(f"{self.name}.{i}.s", values)
            c.translate_net.set_parameters(f"{self.name}.{i}.t", values)


def _coupling_nodes(flow: RnvpFlow, i: int, masked: Node, tape: Tape) -> tuple:
    c = flow.couplings[i]
    s_out = mlp_forward(c.scale_net, masked, tape, f"{flow.name}.{i}.s")
    t_out = mlp_forward(c.translate_net, masked, tape, f"{flow.name}.{i}.t")
    return s_out, t_out


def rnvp_forward(flow: RnvpFlow, x: Node, tape: Tape) -> tuple:
    """Latent-to-data direction. Returns (y, logdet) nodes where logdet is the
    log |det dy/dx| accumulated over couplings."""
    y = x
    logdet = tape.constant(0.0)
    for i, c in enumerate(flow.couplings):
        mask = tape.constant(c.mask)
        inv_mask = tape.constant(1.0 - c.mask)
        masked = tape.mul(y, mask)
        s_out, t_out = _coupling_nodes(flow, i, masked, tape)
        s_masked = tape.mul(inv_mask, s_out)
        moved = tape.add(tape.mul(y, tape.exp(s_masked)), tape.mul(inv_mask, t_out))
        y = tape.add(masked, tape.mul(inv_mask, moved))
        logdet = tape.add(logdet, tape.sum(s_masked))
    return y, logdet


def rnvp_inverse(flow: RnvpFlow, y: Node, tape: Tape) -> tuple:
    """Data-to-latent direction: exact inverse of rnvp_forward. Returns
    (x, logdet_inv) with logdet_inv = -logdet of the forward map at x."""
    x = y
    logdet = tape.constant(0.0)
    for i, c in reversed(list(enumerate(flow.couplings))):
        mask = tape.constant(c.mask)
        inv_mask = tape.constant(1.0 - c.mask)
        masked = tape.mul(x, mask)
        s_out, t_out = _coupling_nodes(flow, i, masked, tape)
        s_masked = tape.mul(inv_mask, s_out)
        restored = tape.mul(
            tape.sub(x, tape.mul(inv_mask, t_out)), tape.exp(tape.neg(s_masked))
        )
        x = tape.add(masked, tape.mul(inv_mask, restored))
        logdet = tape.sub(logdet, tape.sum(s_masked))
    return x, logdet


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """Adam with bias correction; moments are shaped like the parameters."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update. Returns new parameter arrays; `state` is advanced in
    place. A non-finite gradient aborts before touching anything."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new_params = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params


# --------------------------------------------------------------- checkpoints

_CHECKPOINT_MAGIC = b"HFCK"
_CHECKPOINT_VERSION = 1


def write_checkpoint(path, kind: str, arrays: dict, meta: dict | None = None):
    """Versioned binary checkpoint: JSON header (kind, meta, entry shapes in
    order) followed by raw little-endian float64 payloads."""
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"kind": kind, "meta": meta or {}, "entries": entries}).encode()
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", _CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (kind, meta, arrays)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode())
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            arrays[entry["name"]] = arr
    return header["kind"], header["meta"], arrays
