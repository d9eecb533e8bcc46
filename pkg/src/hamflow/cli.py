"""Command-line entry point.

Subcommands: generate, simulate, train, eval, selftest. Configuration
precedence is CLI flags > JSON config file > built-in defaults, and every
command echoes its fully resolved configuration into the output directory, so
re-running from the echoed file reproduces the outputs (bit-identically in
single-threaded mode).

Exit codes: 0 success, 2 usage or config error, 3 numerical failure, 4 IO
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import NumericalError, PhaseState, RngStream, state_concat, state_split
from .datagen import (
    DatasetSpec,
    SYSTEM_DEFAULTS,
    dataset_trajectories,
    read_dataset,
    sample_initial_state,
    system_energy,
    write_dataset,
)
from .integrators import IntegratorSpec, rollout
from .learner import (
    LearnerTrainConfig,
    StateDataset,
    load_model_checkpoint,
    rollout_mse_batch,
    save_model_checkpoint,
    train_learner,
)
from .models import mlp_eval_batch, model_energy_batch, read_checkpoint
from .nhf import (
    FlowStack,
    NhfTrainConfig,
    PriorSpec,
    RnvpTrainConfig,
    load_nhf_checkpoint,
    load_rnvp_checkpoint,
    log_density_batch,
    marginal_log_density,
    mixture_logpdf,
    mixture_sample,
    rnvp_log_density_batch,
    rnvp_marginal_log_density,
    sample_flow,
    save_nhf_checkpoint,
    save_rnvp_checkpoint,
    train_nhf,
    train_rnvp,
)
from . import figures, reports
from .images import write_pgm
from .systems import SYSTEM_NAMES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------- config logic

GENERATE_DEFAULTS = {
    "system": None,  # required
    "n_train": 1000,
    "n_test": 200,
    "steps": 30,
    "dt": 0.125,
    "noise_std": None,  # per-system default
    "image_size": 64,
    "seed": 0,
    "render": True,
    "threads": 1,
    "out": None,  # required
}

SIMULATE_DEFAULTS = {
    "system": None,
    "integrator": "leapfrog",
    "steps": 30,
    "dt": 0.125,
    "dt_scale": 1.0,
    "q0": None,  # comma-separated floats; sampled when absent
    "p0": None,
    "seed": 0,
    "out": None,
    "figures": True,
}

TRAIN_DEFAULTS = {
    "mode": None,
    "dataset": None,
    "density": "mixture2",
    "hidden": 32,
    "lr": None,  # per-mode default
    "train_steps": None,  # per-mode default
    "batch_size": None,  # per-mode default
    "rollout_steps": 30,
    "exact_targets": False,
    "noisy": False,
    "n_train_samples": 2048,
    "n_hamiltonians": 1,
    "n_leapfrog": 2,
    "prior": "standard_normal",
    "prior_sigma": 6.0,
    "prior_beta": 4.0,
    "rnvp_layers": 2,
    "seed": 0,
    "threads": 1,
    "out": None,
    "figures": True,
}

MODE_DEFAULTS = {
    "hnn": {"lr": 1e-3, "train_steps": 2000, "batch_size": 8},
    "rollout": {"lr": 1e-3, "train_steps": 1500, "batch_size": 8},
    "nhf": {"lr": 3e-3, "train_steps": 2000, "batch_size": 32},
    "rnvp": {"lr": 3e-3, "train_steps": 2000, "batch_size": 32},
}

EVAL_DEFAULTS = {
    "checkpoint": None,
    "dataset": None,
    "grid_extent": 4.0,
    "grid_size": 100,
    "n_samples": 1000,
    "kde_bandwidth": 0.3,
    "dt": 0.125,
    "steps": 30,
    "seed": 0,
    "out": None,
    "figures": True,
}


def _resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly passed CLI flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(config: dict, out_dir: Path, command: str):
    payload = {"command": command, **config}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(config: dict, key: str, hint: str):
    if config.get(key) in (None, ""):
        raise ConfigError(f"--{key.replace('_', '-')} is required {hint}")


def _out_dir(config: dict) -> Path:
    _require(config, "out", "(output directory)")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",") if tok.strip() != ""])
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated floats, got {text!r}") from exc


# ----------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    config = _resolve_config(GENERATE_DEFAULTS, args)
    _require(config, "system", f"(one of {', '.join(SYSTEM_NAMES)})")
    if config["system"] not in SYSTEM_NAMES:
        raise ConfigError(f"unknown system {config['system']!r}; expected one of {SYSTEM_NAMES}")
    out = _out_dir(config)
    spec = DatasetSpec(
        system=config["system"],
        n_train=int(config["n_train"]),
        n_test=int(config["n_test"]),
        n_steps=int(config["steps"]),
        dt=float(config["dt"]),
        noise_std=config["noise_std"] if config["noise_std"] is None else float(config["noise_std"]),
        image_size=int(config["image_size"]),
        seed=int(config["seed"]),
        render=bool(config["render"]),
    )
    config["noise_std"] = spec.noise_std
    _echo_config(config, out, "generate")
    manifest = write_dataset(spec, out, threads=int(config["threads"]))
    print(f"wrote {manifest['n_train']}+{manifest['n_test']} trajectories to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _resolve_config(SIMULATE_DEFAULTS, args)
    _require(config, "system", f"(one of {', '.join(SYSTEM_NAMES)})")
    if config["system"] not in SYSTEM_NAMES:
        raise ConfigError(f"unknown system {config['system']!r}; expected one of {SYSTEM_NAMES}")
    out = _out_dir(config)
    _echo_config(config, out, "simulate")

    system = config["system"]
    h = system_energy(system, softening=0.0 if system in ("mass_spring", "pendulum") else 1e-2)
    if config["q0"] is not None and config["p0"] is not None:
        s0 = PhaseState(q=_parse_vector(str(config["q0"])), p=_parse_vector(str(config["p0"])))
    elif config["q0"] is not None or config["p0"] is not None:
        raise ConfigError("provide both --q0 and --p0, or neither")
    else:
        rng = RngStream(int(config["seed"]))
        s0 = sample_initial_state(system, SYSTEM_DEFAULTS[system]["radius_range"], rng)

    dt = float(config["dt"]) * float(config["dt_scale"])
    if dt == 0:
        raise ConfigError("dt * dt_scale must be nonzero")
    spec = IntegratorSpec(kind=config["integrator"], dt=dt, n_steps=int(config["steps"]))
    traj = rollout(h, s0, spec)
    arr = traj.as_array()
    n = traj.dim

    header = ["step", "t"] + [f"q{i}" for i in range(n)] + [f"p{i}" for i in range(n)]
    rows = [[t, t * dt, *arr[t]] for t in range(len(traj))]
    reports.write_csv(out / "trajectory.csv", header, rows)
    energies = reports.energy_series(h, traj)
    reports.write_csv(out / "energy.csv", ["step", "energy"], list(enumerate(energies)))
    if config["figures"]:
        figures.save_phase_figure(out / "trajectory.png", arr, dt, title=system)
        figures.save_energy_figure(out / "energy.png", energies, dt, title=f"{system} energy")
    print(f"simulated {len(traj)} states of {system} ({config['integrator']}, dt={dt})")
    return EXIT_OK


def _load_state_dataset(config, h) -> tuple:
    _require(config, "dataset", "for hnn/rollout training")
    data = read_dataset(config["dataset"])
    kind = "noisy" if config["noisy"] else "clean"
    train = dataset_trajectories(data, "train", kind)
    test = dataset_trajectories(data, "test", kind)
    if config["exact_targets"]:
        train_ds = StateDataset.with_exact_targets(train, h)
        test_ds = StateDataset.with_exact_targets(test, h)
    else:
        train_ds = StateDataset(trajectories=train)
        test_ds = StateDataset(trajectories=test)
    return data["manifest"], train_ds, test_ds


def cmd_train(args) -> int:
    config = _resolve_config(TRAIN_DEFAULTS, args)
    _require(config, "mode", "(hnn, rollout, nhf or rnvp)")
    mode = config["mode"]
    if mode not in MODE_DEFAULTS:
        raise ConfigError(f"unknown training mode {mode!r}")
    for key, value in MODE_DEFAULTS[mode].items():
        if config[key] is None:
            config[key] = value
    out = _out_dir(config)
    _echo_config(config, out, "train")
    threads = int(config["threads"])
    if threads > 1:
        print("note: multi-threaded training reduces gradients in completion order; "
              "results are not bit-exact across runs")

    if mode in ("hnn", "rollout"):
        manifest_path = Path(config["dataset"] or "")
        if not config["dataset"] or not (manifest_path / "manifest.json").exists():
            raise ConfigError("--dataset must point to a generated dataset directory")
        manifest = json.loads((manifest_path / "manifest.json").read_text())
        h = system_energy(manifest["system"], softening=manifest.get("softening", 0.0))
        manifest, train_ds, test_ds = _load_state_dataset(config, h)
        lcfg = LearnerTrainConfig(
            hidden=int(config["hidden"]),
            lr=float(config["lr"]),
            steps=int(config["train_steps"]),
            batch_size=int(config["batch_size"]),
            seed=int(config["seed"]),
            threads=threads,
            rollout_steps=int(config["rollout_steps"]),
        )
        result = train_learner(train_ds, mode, lcfg, test_data=test_ds)
        save_model_checkpoint(
            out / "model.ckpt",
            result.model,
            extra={"mode": mode, "system": manifest["system"], "dt": manifest["dt"]},
        )
        reports.write_csv(
            out / "metrics.csv",
            ["step_index", "train_mse", "test_mse", "hamiltonian_variance"],
            result.metrics,
        )
        header = (
            "non-bit-exact multithreaded reduction" if threads > 1 else "single-thread bit-exact"
        )
        reports.write_series_csv(out / "curve.csv", f"loss ({header})", result.curve)
        if config["figures"]:
            figures.save_series_figure(
                out / "curve.png", result.curve, "loss", f"{mode} training loss", logy=True
            )
        if result.diverged:
            print("training diverged; kept last good checkpoint")
            return EXIT_NUMERICAL
        print(f"trained {mode} model; final test rollout MSE {result.metrics[-1][2]:.3e}")
        return EXIT_OK

    # Density-estimation modes run on synthetic mixture samples.
    density = config["density"]
    rng = RngStream(int(config["seed"]) ^ 0x5EED)
    train_data = mixture_sample(density, rng, int(config["n_train_samples"]))
    if mode == "nhf":
        prior = PriorSpec(
            kind=config["prior"],
            sigma=float(config["prior_sigma"]),
            beta=float(config["prior_beta"]),
        )
        ncfg = NhfTrainConfig(
            n_hamiltonians=int(config["n_hamiltonians"]),
            n_leapfrog=int(config["n_leapfrog"]),
            hidden=int(config["hidden"]),
            encoder_hidden=int(config["hidden"]),
            prior=prior,
            lr=float(config["lr"]),
            steps=int(config["train_steps"]),
            batch_size=int(config["batch_size"]),
            seed=int(config["seed"]),
            threads=threads,
        )
        result = train_nhf(train_data, ncfg)
        save_nhf_checkpoint(
            out / "nhf.ckpt", result.stack, result.encoder, prior, extra={"density": density}
        )
        reports.write_series_csv(out / "curve.csv", "negative_elbo", result.curve)
        if config["figures"]:
            figures.save_series_figure(
                out / "curve.png", result.curve, "negative ELBO", "nhf training"
            )
        if result.diverged:
            print("training diverged; kept last good checkpoint")
            return EXIT_NUMERICAL
        print(f"trained nhf on {density}; final negative ELBO {result.curve[-1]:.4f}")
        return EXIT_OK

    rcfg = RnvpTrainConfig(
        n_layers=int(config["rnvp_layers"]),
        hidden=int(config["hidden"]),
        lr=float(config["lr"]),
        steps=int(config["train_steps"]),
        batch_size=int(config["batch_size"]),
        seed=int(config["seed"]),
        threads=threads,
    )
    result = train_rnvp(train_data, rcfg)
    save_rnvp_checkpoint(out / "rnvp.ckpt", result.flow, result.augmented, extra={"density": density})
    reports.write_series_csv(out / "curve.csv", "negative_log_likelihood", result.curve)
    if config["figures"]:
        figures.save_series_figure(out / "curve.png", result.curve, "NLL", "rnvp training")
    if result.diverged:
        print("training diverged; kept last good checkpoint")
        return EXIT_NUMERICAL
    print(f"trained rnvp on {density}; final NLL {result.curve[-1]:.4f}")
    return EXIT_OK


def _eval_hamiltonian(config, out: Path) -> int:
    model, extra = load_model_checkpoint(config["checkpoint"])
    h_model = model.as_energy_function()
    dt = float(extra.get("dt", config["dt"]))
    steps = int(config["steps"])
    d = model.dim

    rows = []
    rng = RngStream(int(config["seed"]))
    s0 = PhaseState(q=rng.uniform(d, -1, 1), p=rng.uniform(d, -1, 1))
    system = extra.get("system")
    if config["dataset"]:
        data = read_dataset(config["dataset"])
        system = data["manifest"]["system"]
        test = dataset_trajectories(data, "test", "clean", limit=32)
        series = [
            reports.per_step_mse(
                _model_traj(model, t.states[0], dt, len(t) - 1), t
            )
            for t in test
        ]
        agg = reports.aggregate_series(series)
        reports.write_mse_csv(out / "mse.csv", agg)
        if config["figures"]:
            figures.save_mse_figure(out / "mse.png", agg.values, agg.std, "rollout MSE per step")
        s0 = test[0].states[0]

    for kind in ("leapfrog", "euler"):
        traj = rollout(h_model, s0, IntegratorSpec(kind, dt, steps))
        rows.append(("eval", system or "unknown", kind, reports.hamiltonian_variance(h_model, traj)))
    if system in SYSTEM_NAMES:
        h_true = system_energy(system, softening=1e-2 if "body" in system else 0.0)
        try:
            for kind in ("leapfrog", "euler"):
                traj = rollout(h_true, s0, IntegratorSpec(kind, dt, steps))
                rows.append(
                    ("eval", f"{system}_analytic", kind, reports.hamiltonian_variance(h_true, traj))
                )
        except ValueError:
            pass  # checkpoint dimension differs from the named system
    reports.write_hvar_csv(out / "hvar.csv", rows)

    coords = np.linspace(-config["grid_extent"], config["grid_extent"], int(config["grid_size"]))
    if d == 1:
        kv_k = mlp_eval_batch(model.kinetic, coords[:, None])[:, 0]
        kv_v = mlp_eval_batch(model.potential, coords[:, None])[:, 0]
        reports.write_csv(out / "kv.csv", ["coord", "kinetic", "potential"], zip(coords, kv_k, kv_v))
        field = reports.vector_field_rows(h_model, config["grid_extent"], 25, dt)
        reports.write_csv(out / "field.csv", ["q", "p", "dq", "dp"], field)
        Q, P = np.meshgrid(coords, coords, indexing="ij")
        energy_grid = model_energy_batch(
            model, Q.ravel()[:, None], P.ravel()[:, None]
        ).reshape(Q.shape)
        reports.write_kde_csv(out / "energy_grid.csv", coords, coords, energy_grid, "energy")
        lo, hi = energy_grid.min(), energy_grid.max()
        write_pgm(out / "energy_grid.pgm", (energy_grid - lo) / max(hi - lo, 1e-12))
        if config["figures"]:
            figures.save_kv_figure(out / "kv.png", coords, kv_k, kv_v)
            figures.save_vector_field_figure(out / "field.png", field)
            figures.save_density_figure(out / "energy.png", coords, coords, energy_grid, "learned H")
    print(f"eval: wrote hvar.csv (+{'mse.csv, ' if config['dataset'] else ''}grids) to {out}")
    return EXIT_OK


def _model_traj(model, s0, dt, n_steps):
    from .learner import model_rollout_batch

    roll = model_rollout_batch(model, state_concat(s0)[None, :], dt, n_steps)
    from .core import Trajectory

    states = tuple(state_split(roll[t, 0]) for t in range(n_steps + 1))
    return Trajectory(states=states, dt=dt, integrator_id="leapfrog")


def _eval_nhf(config, out: Path) -> int:
    stack, enc, prior, extra = load_nhf_checkpoint(config["checkpoint"])
    extent = float(config["grid_extent"])
    n = int(config["grid_size"])
    coords = np.linspace(-extent, extent, n)
    cell = (coords[1] - coords[0]) ** 2

    Q, P = np.meshgrid(coords, coords, indexing="ij")
    S = np.column_stack([Q.ravel(), P.ravel()])
    logp = log_density_batch(stack, prior, S).reshape(n, n)
    reports.write_kde_csv(out / "grid.csv", coords, coords, logp, "logp")
    dens = np.exp(logp)
    write_pgm(out / "density.pgm", dens / max(dens.max(), 1e-300))
    mass = dens.sum() * cell

    rng = RngStream(int(config["seed"]))
    samples = sample_flow(stack, prior, rng, int(config["n_samples"]))
    reports.write_csv(
        out / "samples.csv", ["q", "p"], samples[:, [0, stack.dim]] if stack.dim > 1 else samples
    )
    kde = reports.kde_grid(samples[:, [0, stack.dim]], float(config["kde_bandwidth"]), coords, coords)
    reports.write_kde_csv(out / "kde.csv", coords, coords, kde)

    field = reports.vector_field_rows(
        stack.hamiltonians[0].as_energy_function(), extent, 25, stack.dt
    )
    reports.write_csv(out / "field.csv", ["q", "p", "dq", "dp"], field)
    kv_k = mlp_eval_batch(stack.hamiltonians[0].kinetic, coords[:, None])[:, 0]
    kv_v = mlp_eval_batch(stack.hamiltonians[0].potential, coords[:, None])[:, 0]
    reports.write_csv(out / "kv.csv", ["coord", "kinetic", "potential"], zip(coords, kv_k, kv_v))

    summary = {"quadrature_mass": float(mass), "dt": stack.dt, "n_leapfrog": stack.n_leapfrog}
    density = extra.get("density")
    if density and stack.dim == 1:
        rng_eval = RngStream(int(config["seed"]) ^ 0x7E57)
        test = mixture_sample(density, rng_eval, 512)
        model_nll = float(-np.mean(marginal_log_density(stack, prior, test[:, 0])))
        analytic_nll = float(-np.mean(mixture_logpdf(density, test)))
        summary.update(
            {"density": density, "model_nll": model_nll, "analytic_nll": analytic_nll}
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    if config["figures"]:
        figures.save_density_figure(out / "density.png", coords, coords, dens, "nhf joint density")
        figures.save_density_figure(out / "kde.png", coords, coords, kde, "sample KDE")
        figures.save_vector_field_figure(out / "field.png", field)
        figures.save_kv_figure(out / "kv.png", coords, kv_k, kv_v)
    print(f"eval: quadrature mass {mass:.4f}; artifacts in {out}")
    return EXIT_OK


def _eval_rnvp(config, out: Path) -> int:
    flow, augmented, extra = load_rnvp_checkpoint(config["checkpoint"])
    extent = float(config["grid_extent"])
    n = int(config["grid_size"])
    coords = np.linspace(-extent, extent, n)
    A, B = np.meshgrid(coords, coords, indexing="ij")
    Y = np.column_stack([A.ravel(), B.ravel()])
    logp = rnvp_log_density_batch(flow, Y).reshape(n, n)
    reports.write_kde_csv(out / "grid.csv", coords, coords, logp, "logp")
    dens = np.exp(logp)
    write_pgm(out / "density.pgm", dens / max(dens.max(), 1e-300))

    summary = {"quadrature_mass": float(dens.sum() * (coords[1] - coords[0]) ** 2)}
    density = extra.get("density")
    if density and augmented:
        rng_eval = RngStream(int(config["seed"]) ^ 0x7E57)
        test = mixture_sample(density, rng_eval, 512)
        summary.update(
            {
                "density": density,
                "model_nll": float(-np.mean(rnvp_marginal_log_density(flow, test[:, 0]))),
                "analytic_nll": float(-np.mean(mixture_logpdf(density, test))),
            }
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if config["figures"]:
        figures.save_density_figure(out / "density.png", coords, coords, dens, "rnvp density")
    print(f"eval: artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolve_config(EVAL_DEFAULTS, args)
    _require(config, "checkpoint", "(a model checkpoint)")
    if not Path(config["checkpoint"]).exists():
        raise ConfigError(f"checkpoint not found: {config['checkpoint']}")
    out = _out_dir(config)
    _echo_config(config, out, "eval")
    kind, _, _ = read_checkpoint(config["checkpoint"])
    if kind == "hamiltonian":
        return _eval_hamiltonian(config, out)
    if kind == "nhf":
        return _eval_nhf(config, out)
    if kind == "rnvp":
        return _eval_rnvp(config, out)
    raise ConfigError(f"cannot evaluate checkpoint kind {kind!r}")


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_NUMERICAL


# ---------------------------------------------------------------- arg parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamflow",
        description="Symplectic Hamiltonian dynamics: simulate, learn, and model densities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (flags override its values)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    g = sub.add_parser("generate", help="write a trajectory dataset to disk")
    add_common(g)
    g.add_argument("--system", choices=SYSTEM_NAMES)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--no-render", dest="render", action="store_false", default=None)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="roll out a system and write CSVs")
    add_common(s)
    s.add_argument("--system", choices=SYSTEM_NAMES)
    s.add_argument("--integrator", choices=("euler", "rk4", "leapfrog"))
    s.add_argument("--steps", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--dt-scale", dest="dt_scale", type=float)
    s.add_argument("--q0", help="comma-separated initial position")
    s.add_argument("--p0", help="comma-separated initial momentum")
    s.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a Hamiltonian or a density model")
    add_common(t)
    t.add_argument("--mode", choices=("hnn", "rollout", "nhf", "rnvp"))
    t.add_argument("--dataset", help="dataset directory (hnn/rollout)")
    t.add_argument("--density", choices=("mixture2", "mixture4"))
    t.add_argument("--hidden", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-steps", dest="train_steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--rollout-steps", dest="rollout_steps", type=int)
    t.add_argument("--exact-targets", dest="exact_targets", action="store_true", default=None)
    t.add_argument("--noisy", action="store_true", default=None)
    t.add_argument("--n-train-samples", dest="n_train_samples", type=int)
    t.add_argument("--n-hamiltonians", dest="n_hamiltonians", type=int)
    t.add_argument("--n-leapfrog", dest="n_leapfrog", type=int)
    t.add_argument("--prior", choices=("standard_normal", "soft_uniform"))
    t.add_argument("--prior-sigma", dest="prior_sigma", type=float)
    t.add_argument("--prior-beta", dest="prior_beta", type=float)
    t.add_argument("--rnvp-layers", dest="rnvp_layers", type=int)
    t.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and emit report files")
    add_common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--grid-extent", dest="grid_extent", type=float)
    e.add_argument("--grid-size", dest="grid_size", type=int)
    e.add_argument("--n-samples", dest="n_samples", type=int)
    e.add_argument("--kde-bandwidth", dest="kde_bandwidth", type=float)
    e.add_argument("--dt", type=float)
    e.add_argument("--steps", type=int)
    e.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", help="run the invariant suite and print a pass/fail table")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        step = f" at step {exc.step_index}" if exc.step_index is not None else ""
        print(f"numerical failure{step}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
