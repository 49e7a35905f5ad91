"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line and the lines are repeated in the
terminal summary. The training runs are long (about an hour in total on one
core); run just this file with ``pytest tests/test_acceptance.py -v``.
"""
from __future__ import annotations

import csv
import filecmp
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy.linalg import expm

from helpers import central_difference, rel_err
from test_autodiff import _op_cases
from test_solvers import observed_rk4_orders

from impnode.autodiff import OPS, Tape
from impnode.cli import main
from impnode.data import LINEAR2D, TimeSeries, simulate_truth, truth_field
from impnode.experiment import ExperimentConfig, load_config, run_experiment
from impnode.nets import (DYNAMICS, IMPLICIT, NetworkParams, NetworkSpec, evaluate_dynamics, evaluate_implicit,
                          init, load_params, normalize_time)
from impnode.solvers import SolverConfig, dopri5_integrate
from impnode.training import (DynamicsModel, LossWeights, Problem, TrainSchedule, composite_loss_and_grad,
                              train_imp_node, train_std_node_baseline)

pytestmark = pytest.mark.slow

LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    LINES.append(line)
    print(line)
    return ok


def summary_rows(run_dir: Path) -> dict[str, dict]:
    with open(run_dir / "summary.csv", newline="", encoding="utf-8") as fh:
        return {row["method"]: row for row in csv.DictReader(fh)}


def single_level(preset: str, mu: float, **changes) -> dict:
    cfg = load_config(preset, fast=True)
    d = cfg.to_dict()
    d["noise_levels"] = [asdict(cfg.level(mu))]
    d.update(sweep_bs=[], sweep_noise=None, **changes)
    return d


def cli_run(config: dict, out: Path) -> tuple[int, float]:
    out.mkdir(parents=True, exist_ok=True)
    path = out.with_suffix(".yaml")
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    start = time.perf_counter()
    code = main(["run", str(path), "--fast", "--out", str(out)])
    return code, time.perf_counter() - start


# ---------------------------------------------------------------------------
# 1: gradients

def test_gradients_match_finite_differences():
    start = time.perf_counter()
    worst_op, worst = "", 0.0
    cases = _op_cases()
    assert set(cases) == set(OPS)
    proj = np.random.default_rng(11)
    for name, (inputs, build) in sorted(cases.items()):
        tape = Tape()
        leaves = [tape.leaf(x) for x in inputs]
        out = build(leaves)
        w = proj.normal(size=out.shape)
        grads = tape.backward((out * tape.constant(w)).sum())
        for k, x0 in enumerate(inputs):
            def f(x, k=k):
                t = Tape()
                xs = [t.leaf(x if j == k else inputs[j]) for j in range(len(inputs))]
                return float((build(xs) * t.constant(w)).sum().value)
            err = rel_err(grads[leaves[k].id], central_difference(f, x0))
            if err > worst:
                worst_op, worst = name, err

    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 4, 2), NetworkSpec(DYNAMICS, 2, 2, 4, 2)
    model = DynamicsModel(dspec)
    t = np.linspace(0.0, 0.4, 5)
    problem = Problem.build(simulate_truth("cubic2d", None, t), t[1] - t[0], 2)
    weights, rk4 = LossWeights(1.0, 1.0, 1e-2), SolverConfig(method="rk4")
    theta, phi = init(ispec, 3).flat, init(dspec, 4).flat
    _, g_theta, g_phi = composite_loss_and_grad(theta, phi, ispec, model, problem, weights, rk4)

    def total(th, ph):
        return composite_loss_and_grad(th, ph, ispec, model, problem, weights, rk4)[0].total

    composite = max(rel_err(g_theta, central_difference(lambda th: total(th, phi), theta)),
                    rel_err(g_phi, central_difference(lambda ph: total(theta, ph), phi)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and composite < 1e-4 and elapsed < 10
    assert report(1, "autodiff vs finite differences", ok,
                  f"{len(cases)} ops worst rel err {worst:.2e} ({worst_op}); composite loss {composite:.2e}; "
                  f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2: solver accuracy

def test_solver_orders():
    start = time.perf_counter()
    order, _ = observed_rk4_orders()
    x0 = np.array([2.0, 0.0])
    t = np.array([0.0, 0.2])
    res = dopri5_integrate(lambda x: x @ x.tape.constant(LINEAR2D.T), Tape().constant(x0[None, :]), t,
                           SolverConfig(rtol=1e-7, atol=1e-9))
    end_err = float(np.max(np.abs(res.states[-1].value[0] - expm(LINEAR2D * t[-1]) @ x0)))
    elapsed = time.perf_counter() - start
    ok = 3.8 <= order <= 4.2 and end_err < 1e-6 and elapsed < 5
    assert report(2, "solver orders", ok,
                  f"RK4 observed order {order:.3f}; dopri5 endpoint error {end_err:.2e}; {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 3: stationarity at the true solution

def _ridge(features, targets, alpha):
    n = features.shape[1]
    a = np.vstack([features, np.sqrt(alpha) * np.eye(n)])
    b = np.vstack([targets, np.zeros((n, targets.shape[1]))])
    return np.linalg.lstsq(a, b, rcond=None)[0]


def prefit_implicit(t_norm, states, harmonics=300, period=2.5):
    # a single sine layer holding a Fourier basis on a period longer than [-1, 1]
    spec = NetworkSpec(IMPLICIT, 1, states.shape[1], 2 * harmonics, 1)
    k = np.arange(1, harmonics + 1)
    freq = np.concatenate([k, k]) * 2 * np.pi / period / spec.omega0
    phase = np.concatenate([np.zeros(harmonics), np.full(harmonics, np.pi / 2)]) / spec.omega0
    hidden = np.sin(spec.omega0 * (t_norm[:, None] * freq + phase))
    coef = _ridge(np.hstack([hidden, np.ones((t_norm.size, 1))]), states, 1e-8)
    return NetworkParams.flatten(spec, {"sine0.W": freq[None, :], "sine0.b": phase,
                                        "readout.W": coef[:-1], "readout.b": coef[-1]})


def prefit_dynamics(states, field, width=200, seed=0):
    # random residual features, identity second block, least-squares read-out
    rng = np.random.default_rng(seed)
    n = states.shape[1]
    layers = {"lift.W": rng.uniform(-1, 1, (n, width)), "lift.b": rng.uniform(-2, 2, width),
              "block0a.W": rng.uniform(-1, 1, (width, width)) / np.sqrt(width),
              "block0a.b": rng.uniform(-1, 1, width),
              "block0b.W": np.eye(width), "block0b.b": np.zeros(width),
              "readout.W": np.eye(width), "readout.b": np.zeros(width)}
    hidden = evaluate_dynamics(NetworkParams.flatten(NetworkSpec(DYNAMICS, n, width, width, 1), layers), states)
    coef = _ridge(np.hstack([hidden, np.ones((len(hidden), 1))]), field, 1e-12)
    layers["readout.W"], layers["readout.b"] = coef[:-1], coef[-1]
    return NetworkParams.flatten(NetworkSpec(DYNAMICS, n, n, width, 1), layers)


def test_stationarity_at_truth():
    start = time.perf_counter()
    cfg = load_config("cubic2d")
    clean = simulate_truth("cubic2d")
    t, states = clean.stacked()
    t_norm, scale = normalize_time(t, t[0], t[-1])
    theta = prefit_implicit(t_norm, states)
    phi = prefit_dynamics(states, truth_field("cubic2d", states))
    implicit_mse = float(np.mean((evaluate_implicit(theta, t_norm, scale)[0] - states) ** 2))
    dynamics_mse = float(np.mean((evaluate_dynamics(phi, states) - truth_field("cubic2d", states)) ** 2))

    model = DynamicsModel(phi.spec)
    problem = Problem.build(clean, cfg.dt, cfg.bs)
    weights = cfg.weights(cfg.level(0.01))
    rk4 = SolverConfig(method="rk4")
    before = composite_loss_and_grad(theta.flat, phi.flat, theta.spec, model, problem, weights, rk4)[0].total
    schedule = TrainSchedule(100, 0, cfg.implicit.lr, cfg.dynamics.lr, bs=cfg.bs, dt=cfg.dt)
    res = train_imp_node(clean, theta.spec, model, weights, schedule, seed=0, init_params=(theta, phi))
    after = composite_loss_and_grad(res.implicit.flat, res.dynamics.flat, theta.spec, model, problem,
                                    weights, rk4)[0].total
    elapsed = time.perf_counter() - start
    ok = implicit_mse < 1e-8 and dynamics_mse < 1e-8 and before < 1e-6 and after <= before and elapsed < 120
    assert report(3, "stationarity at truth", ok,
                  f"pre-fit MSE implicit {implicit_mse:.1e} dynamics {dynamics_mse:.1e}; composite loss "
                  f"{before:.2e} -> {after:.2e} after 100 Adam steps (lr {cfg.implicit.lr:g}); {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 4 and 5: cubic oscillator under noise

@pytest.fixture(scope="module")
def cubic_runs(tmp_path_factory):
    cache = {}

    def get(mu, methods):
        if mu not in cache:
            cfg = ExperimentConfig.from_dict(single_level("cubic2d", mu, methods=methods))
            out = tmp_path_factory.mktemp(f"cubic{int(mu * 100)}")
            start = time.process_time()
            run_dir, ok = run_experiment(cfg, out)
            cache[mu] = (run_dir, ok, time.process_time() - start)
        return cache[mu]
    return get


@pytest.mark.parametrize("mu", [0.1, 0.3])
def test_cubic_field_beats_baseline(cubic_runs, mu):
    run_dir, ok, cpu = cubic_runs(mu, ["imp", "std"])
    rows = summary_rows(run_dir)
    imp = float(rows["imp"]["mean_error"]) if "imp" in rows else float("inf")
    std = float(rows["std"]["mean_error"]) if "std" in rows else float("inf")
    passed = ok and imp < std and imp < 0.5 and cpu < 30 * 60
    assert report(4, f"cubic field error at {mu:.0%} noise", passed,
                  f"Imp mean {imp:.3f} vs Std mean {std:.3f}; {cpu / 60:.1f} CPU min")


def test_cubic_denoising(cubic_runs):
    run_dir, ok, cpu = cubic_runs(0.2, ["imp"])
    row = summary_rows(run_dir).get("imp", {})
    den, noisy = float(row.get("denoised_rmse") or "inf"), float(row.get("noisy_rmse") or "nan")
    passed = ok and den <= 0.5 * noisy
    assert report(5, "denoising at 20% noise", passed,
                  f"implicit RMSE {den:.4f} vs noisy RMSE {noisy:.4f} (ratio {den / noisy:.3f}); "
                  f"{cpu / 60:.1f} CPU min")


# ---------------------------------------------------------------------------
# 6: second-order pendulum

@pytest.fixture(scope="module")
def pendulum_config():
    return single_level("pendulum-so", 0.05)


@pytest.fixture(scope="module")
def pendulum_run(tmp_path_factory, pendulum_config):
    out = tmp_path_factory.mktemp("pendulum") / "run"
    code, elapsed = cli_run(pendulum_config, out)
    return out, code, elapsed


def test_pendulum_second_order(pendulum_run, pendulum_config):
    run_dir, code, elapsed = pendulum_run
    cfg = ExperimentConfig.from_dict(pendulum_config)
    model = cfg.dynamics_model()
    params = load_params(run_dir / "jobs" / "imp_noise0.05_bs2" / "dynamics.params")
    x = np.random.default_rng(0).uniform(-5, 5, size=(10_000, 2))
    g = model.evaluate(params, x)
    exact = bool(np.array_equal(g[:, 1], x[:, 0]))
    mean = float(summary_rows(run_dir)["imp"]["mean_error"])
    ok = code == 0 and exact and not cfg.filter_enabled and mean < 0.6 and elapsed < 20 * 60
    assert report(6, "second-order structure", ok,
                  f"velocity block bit-exact on 1e4 states: {exact}; pendulum mean field error {mean:.3f}; "
                  f"{elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 7: irregular sampling

def test_irregular_linear(tmp_path_factory):
    out = tmp_path_factory.mktemp("linear") / "run"
    config = single_level("linear2d-irregular", 0.1)
    code, elapsed = cli_run(config, out)
    noisy = TimeSeries.from_csv(out / "data" / "noise0.1_noisy.csv")
    split = not noisy.shared_grid
    rows = summary_rows(out) if (out / "summary.csv").exists() else {}
    mean = float(rows["imp"]["mean_error"]) if "imp" in rows else float("inf")
    cfg = ExperimentConfig.from_dict(config)
    try:
        train_std_node_baseline(noisy, cfg.dynamics_model(), cfg.schedule(cfg.noise_levels[0]), cfg.solver())
        refused = False
    except ValueError:
        refused = True
    ok = code == 0 and split and refused and mean < 0.5 and elapsed < 15 * 60
    sizes = "/".join(str(g.size) for g in noisy.grids)
    assert report(7, "irregular sampling", ok,
                  f"exit code {code}; split grids {split} ({sizes} samples); mean field error {mean:.3g}; "
                  f"baseline refuses split grids: {refused}; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 8: determinism

def test_rerun_is_byte_identical(pendulum_run, pendulum_config, tmp_path_factory):
    first = pendulum_run[0]
    second = tmp_path_factory.mktemp("pendulum_again") / "run"
    code, _ = cli_run(pendulum_config, second)
    files = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    again = sorted(p.relative_to(second) for p in second.rglob("*.csv"))
    differ = [str(p) for p in files if not filecmp.cmp(first / p, second / p, shallow=False)]
    ok = code == 0 and files == again and not differ and len(files) > 0
    assert report(8, "determinism", ok,
                  f"{len(files)} CSV files compared; differing: {differ or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
