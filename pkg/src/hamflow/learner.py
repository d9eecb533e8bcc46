"""State-space Hamiltonian learning.

Two training regimes over trajectories of (q, p) observations:

* `hnn` matches the symplectic gradient of the learned Hamiltonian against
  observed (or finite-differenced) time derivatives.
* `rollout` unrolls the learned Hamiltonian with leapfrog from the first
  observed state and regresses the whole trajectory, with full
  backpropagation through the integrator steps.

Because the model is separable and the rollouts use leapfrog, the trained
Hamiltonian inherits every symplectic-integrator guarantee of the analytic
systems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, PhaseState, RngStream, Trajectory
from .diffgraph import Node, Tape
from .models import (
    AdamState,
    SeparableHamiltonianModel,
    adam_step,
    leapfrog_batch,
    model_energy_batch,
)
from .training import Worker, minibatch_gradients

__all__ = [
    "StateDataset",
    "hnn_loss",
    "coordinate_constraint_loss",
    "rollout_loss",
    "LearnerTrainConfig",
    "LearnerResult",
    "train_learner",
    "model_rollout_batch",
    "rollout_mse_batch",
    "save_model_checkpoint",
    "load_model_checkpoint",
]


@dataclass
class StateDataset:
    """Trajectories plus optional per-state derivative targets.

    When targets are absent they are estimated by forward differences over one
    step, (s_{t+1} - s_t) / dt, leaving the final state of each trajectory
    without a training pair.
    """

    trajectories: list
    dq_dt: list | None = None  # one (T, n) array per trajectory
    dp_dt: list | None = None

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset needs at least one trajectory")
        if (self.dq_dt is None) != (self.dp_dt is None):
            raise ValueError("provide both derivative targets or neither")

    @classmethod
    def with_exact_targets(cls, trajectories: list, h) -> "StateDataset":
        """Derivative targets from an energy function: (dH/dp, -dH/dq)."""
        dq, dp = [], []
        for traj in trajectories:
            dq.append(np.stack([h.grad_p(s) for s in traj.states]))
            dp.append(np.stack([-h.grad_q(s) for s in traj.states]))
        return cls(trajectories=list(trajectories), dq_dt=dq, dp_dt=dp)

    def derivative_pairs(self) -> list:
        """(state, dq_dt, dp_dt) triples across all trajectories."""
        out = []
        for k, traj in enumerate(self.trajectories):
            if self.dq_dt is not None:
                for t, s in enumerate(traj.states):
                    out.append((s, self.dq_dt[k][t], self.dp_dt[k][t]))
            else:
                arr = traj.as_array()
                diffs = (arr[1:] - arr[:-1]) / traj.dt
                n = traj.dim
                for t, s in enumerate(traj.states[:-1]):
                    out.append((s, diffs[t, :n], diffs[t, n:]))
        return out


def hnn_loss(
    m: SeparableHamiltonianModel,
    s: PhaseState,
    dq_dt: np.ndarray,
    dp_dt: np.ndarray,
    tape: Tape,
) -> Node:
    """0.5 * [ (dH/dp - dq/dt)^2 + (dH/dq + dp/dt)^2 ], summed over coords.

    Inputs are rebindable (`q`, `p`, `dq_dt`, `dp_dt`); the Hamiltonian
    gradients enter as emitted graph nodes so backward yields exact
    second-order parameter gradients.
    """
    if s.dim != m.dim:
        raise ValueError(f"model expects dimension {m.dim}, got {s.dim}")
    q = tape.input("q", s.q)
    p = tape.input("p", s.p)
    tq = tape.input("dq_dt", np.asarray(dq_dt, dtype=np.float64))
    tp = tape.input("dp_dt", np.asarray(dp_dt, dtype=np.float64))
    h_node = m.energy_node(tape, q, p)
    gq, gp = tape.grad_as_graph(h_node, [q, p])
    r1 = tape.sub(gp, tq)
    r2 = tape.add(gq, tp)
    return tape.scale(0.5, tape.add(tape.sum(tape.square(r1)), tape.sum(tape.square(r2))))


def coordinate_constraint_loss(q_t: np.ndarray, q_next: np.ndarray, p_t: np.ndarray) -> float:
    """(p_t - (q_{t+1} - q_t))^2, summed over coordinates.

    The position-increment constraint used when momenta are not observed;
    off by default in training since p ~ Δq only holds for unit-mass systems.
    """
    q_t = np.asarray(q_t, dtype=np.float64)
    q_next = np.asarray(q_next, dtype=np.float64)
    p_t = np.asarray(p_t, dtype=np.float64)
    r = p_t - (q_next - q_t)
    return float(np.sum(r * r))


def rollout_loss(
    m: SeparableHamiltonianModel,
    traj: Trajectory,
    tape: Tape,
    max_steps: int | None = None,
) -> Node:
    """Mean squared error of a leapfrog rollout from traj.states[0] against
    the observed states, averaged over predicted steps and coordinates, and
    differentiable through every integrator step."""
    if len(traj) < 2:
        raise ValueError("rollout loss needs at least two states")
    n_steps = len(traj) - 1 if max_steps is None else min(max_steps, len(traj) - 1)
    d = traj.dim
    dt_node = tape.constant(traj.dt)
    half = tape.scale(0.5, dt_node)

    q = tape.input("q0", traj.states[0].q)
    p = tape.input("p0", traj.states[0].p)
    total = None
    for t in range(1, n_steps + 1):
        (gq,) = tape.grad_as_graph(m.potential_node(tape, q), [q])
        p = tape.sub(p, tape.mul(half, gq))
        (gp,) = tape.grad_as_graph(m.kinetic_node(tape, p), [p])
        q = tape.add(q, tape.mul(dt_node, gp))
        (gq2,) = tape.grad_as_graph(m.potential_node(tape, q), [q])
        p = tape.sub(p, tape.mul(half, gq2))

        tq = tape.input(f"target_q{t}", traj.states[t].q)
        tp = tape.input(f"target_p{t}", traj.states[t].p)
        err = tape.add(
            tape.sum(tape.square(tape.sub(q, tq))), tape.sum(tape.square(tape.sub(p, tp)))
        )
        total = err if total is None else tape.add(total, err)
    return tape.scale(1.0 / (n_steps * 2 * d), total)


def model_rollout_batch(
    model: SeparableHamiltonianModel, S0: np.ndarray, dt: float, n_steps: int
) -> np.ndarray:
    """(n_steps+1, B, 2d) leapfrog rollout of the model from (B, 2d) starts."""
    d = model.dim
    Q, P = S0[:, :d].copy(), S0[:, d:].copy()
    out = np.empty((n_steps + 1, S0.shape[0], 2 * d))
    out[0] = S0
    for t in range(1, n_steps + 1):
        Q, P = leapfrog_batch(model, Q, P, dt, 1)
        out[t, :, :d] = Q
        out[t, :, d:] = P
    if not np.all(np.isfinite(out)):
        raise NumericalError("model rollout diverged")
    return out


def rollout_mse_batch(
    model: SeparableHamiltonianModel, trajectories: list, n_steps: int | None = None
) -> float:
    """Mean rollout MSE of the model over a list of equal-length trajectories."""
    arrs = np.stack([t.as_array() for t in trajectories])  # (B, T+1, 2d)
    steps = arrs.shape[1] - 1 if n_steps is None else min(n_steps, arrs.shape[1] - 1)
    pred = model_rollout_batch(model, arrs[:, 0, :], trajectories[0].dt, steps)
    pred = np.swapaxes(pred, 0, 1)  # (B, steps+1, 2d)
    diff = pred[:, 1 : steps + 1] - arrs[:, 1 : steps + 1]
    return float(np.mean(diff * diff))


@dataclass
class LearnerTrainConfig:
    hidden: int = 32
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    threads: int = 1
    rollout_steps: int = 30  # truncation length for rollout-mode training
    # Optional staged truncation for rollout mode: ((steps, truncation, lr), ...).
    # Backpropagation through 30 chaotic steps of a randomly initialized model
    # is badly conditioned; lengthening the truncation over phases keeps the
    # loss surface tractable. Adam state restarts per phase.
    curriculum: tuple | None = None
    eval_every: int = 250
    eval_trajectories: int = 16


@dataclass
class LearnerResult:
    model: SeparableHamiltonianModel
    metrics: list  # rows: (step_index, train_mse, test_mse, hamiltonian_variance)
    curve: np.ndarray  # per-step training loss
    diverged: bool = False


def _metrics_row(model, step, train_trajs, test_trajs):
    train_mse = rollout_mse_batch(model, train_trajs)
    test_mse = rollout_mse_batch(model, test_trajs)
    # Hamiltonian variance of the model along its own leapfrog rollout.
    arr = test_trajs[0].as_array()
    d = model.dim
    roll = model_rollout_batch(model, arr[0][None, :], test_trajs[0].dt, len(test_trajs[0]) - 1)
    energies = model_energy_batch(model, roll[:, 0, :d], roll[:, 0, d:])
    return (step, train_mse, test_mse, float(np.var(energies)))


def train_learner(
    data: StateDataset, mode: str, config: LearnerTrainConfig, test_data: StateDataset | None = None
) -> LearnerResult:
    """Adam-train a separable Hamiltonian in `hnn` or `rollout` mode."""
    if mode not in ("hnn", "rollout"):
        raise ValueError(f"unknown training mode {mode!r}")
    trajectories = data.trajectories
    if not trajectories:
        raise ValueError("training dataset is empty")
    d = trajectories[0].dim

    rng = RngStream(config.seed)
    model = SeparableHamiltonianModel.init(d, config.hidden, rng)
    params = model.parameters()

    if mode == "hnn":
        pairs = data.derivative_pairs()
        if not pairs:
            raise ValueError("no derivative training pairs available")
        phases = ((config.steps, None, config.lr),)
    else:
        phases = config.curriculum or ((config.steps, config.rollout_steps, config.lr),)

    def build_worker(truncation) -> Worker:
        tape = Tape()
        if mode == "hnn":
            s0, tq0, tp0 = pairs[0]
            loss = hnn_loss(model, s0, tq0, tp0, tape)
            bind = lambda ex: {"q": ex[0].q, "p": ex[0].p, "dq_dt": ex[1], "dp_dt": ex[2]}
        else:
            loss = rollout_loss(model, trajectories[0], tape, max_steps=truncation)

            def bind(traj):
                b = {"q0": traj.states[0].q, "p0": traj.states[0].p}
                for t in range(1, truncation + 1):
                    b[f"target_q{t}"] = traj.states[t].q
                    b[f"target_p{t}"] = traj.states[t].p
                return b

        return Worker(tape, loss, bind, params.keys())

    examples = pairs if mode == "hnn" else trajectories
    test_trajs = (test_data.trajectories if test_data is not None else trajectories)[
        : config.eval_trajectories
    ]
    train_eval_trajs = trajectories[: config.eval_trajectories]

    curve = []
    metrics = []
    diverged = False
    for phase_steps, truncation, lr in phases:
        if truncation is not None:
            truncation = min(truncation, len(trajectories[0]) - 1)
        workers = [build_worker(truncation) for _ in range(max(1, config.threads))]
        adam = AdamState(lr=lr)
        for step in range(phase_steps):
            idx = rng.integers(config.batch_size, 0, len(examples))
            batch = [examples[i] for i in idx]
            try:
                loss, grads = minibatch_gradients(workers, params, batch)
                if not np.isfinite(loss):
                    raise NumericalError("non-finite training loss", step_index=step)
                new_params = adam_step(adam, params, grads)
            except NumericalError:
                diverged = True
                break
            params = new_params
            curve.append(loss)
            if len(curve) % config.eval_every == 0:
                model.set_parameters(params)
                metrics.append(_metrics_row(model, len(curve), train_eval_trajs, test_trajs))
        model.set_parameters(params)
        if diverged:
            break

    model.set_parameters(params)
    if not metrics or metrics[-1][0] != len(curve):
        metrics.append(_metrics_row(model, len(curve), train_eval_trajs, test_trajs))
    return LearnerResult(
        model=model, metrics=metrics, curve=np.array(curve), diverged=diverged
    )


def save_model_checkpoint(path, model: SeparableHamiltonianModel, extra=None):
    from .models import write_checkpoint

    meta = {
        "name": model.name,
        "kinetic": {"sizes": model.kinetic.sizes, "activations": list(model.kinetic.activations)},
        "potential": {
            "sizes": model.potential.sizes,
            "activations": list(model.potential.activations),
        },
        "extra": extra or {},
    }
    write_checkpoint(path, "hamiltonian", model.parameters(), meta)


def load_model_checkpoint(path):
    from .models import MlpParameters, read_checkpoint

    kind, meta, arrays = read_checkpoint(path)
    if kind != "hamiltonian":
        raise ValueError(f"{path}: expected a hamiltonian checkpoint, got {kind!r}")

    def net(block, prefix):
        sizes = meta[block]["sizes"]
        return MlpParameters(
            weights=[arrays[f"{prefix}.W{i}"] for i in range(len(sizes) - 1)],
            biases=[arrays[f"{prefix}.b{i}"] for i in range(len(sizes) - 1)],
            activations=list(meta[block]["activations"]),
        )

    name = meta["name"]
    model = SeparableHamiltonianModel(
        kinetic=net("kinetic", f"{name}.K"), potential=net("potential", f"{name}.V"), name=name
    )
    return model, meta.get("extra", {})
