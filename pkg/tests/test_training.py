import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impnode.autodiff import DualTrajectory, Tape
from impnode.data import TimeSeries, simulate_truth, subsample_irregular, truth_field
from impnode.nets import DYNAMICS, IMPLICIT, NetworkParams, NetworkSpec, init
from impnode.solvers import SolverConfig
from impnode.training import (Adam, DynamicsModel, LossBreakdown, LossWeights, Problem, TrainingError,
                              TrainSchedule, composite_loss_and_grad, loss_grad, loss_integral, loss_irregular,
                              loss_mse, train_imp_node, train_std_node_baseline, wrap_second_order, write_history)
from helpers import central_difference, rel_err


def test_weights_and_schedule_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        TrainSchedule(bs=0)
    with pytest.raises(ValueError):
        TrainSchedule(lr_decay=0.0)
    s = TrainSchedule()
    assert [s.lr_factor(e) for e in (0, 3999, 4000, 8000)] == [1.0, 1.0, 0.1, pytest.approx(0.01)]


def test_early_stop_caps_adaptive_epochs():
    assert TrainSchedule(adaptive_epochs=10000, early_stop=True).adaptive_cap == 1000
    assert TrainSchedule(adaptive_epochs=500, early_stop=True).adaptive_cap == 500
    assert TrainSchedule(adaptive_epochs=10000).adaptive_cap == 10000


def test_loss_mse_examples():
    tape = Tape()
    y = np.random.default_rng(0).normal(size=(6, 2))
    assert loss_mse(tape.constant(y), y).value == 0.0
    assert loss_mse(tape.constant(y + 0.3), y).value == pytest.approx(0.09, abs=1e-15)
    assert loss_mse(tape.constant([[1.0, 0.0]]), [[0.0, 0.0]]).value == 0.5
    with pytest.raises(ValueError):
        loss_mse(tape.constant(y[:5]), y)


def test_loss_integral_examples():
    tape = Tape()
    x = tape.constant(np.ones((5, 2)))
    assert loss_integral([x] * 4, [x] * 4).value == 0.0
    shifted = [tape.constant(np.ones((5, 2)) + 0.2)] * 4
    assert loss_integral(shifted, [x] * 4).value == pytest.approx(0.04, abs=1e-15)
    with pytest.raises(ValueError):
        loss_integral([x], [tape.constant(np.ones((4, 2)))])


def test_loss_grad_examples():
    tape = Tape()
    tan = tape.constant(np.random.default_rng(1).normal(size=(7, 2)))
    dual = DualTrajectory(tape.constant(np.zeros((7, 2))), tan)
    assert loss_grad(dual, tan).value == 0.0
    assert loss_grad(dual, tan + tape.constant([0.4, 0.0])).value == pytest.approx(0.08, abs=1e-15)
    with pytest.raises(ValueError):
        loss_grad(dual, tape.constant(np.zeros((7, 3))))


def toy_problem(n=5, bs=2):
    t = np.linspace(0.0, 0.4, n)
    clean = simulate_truth("cubic2d", None, t)
    return Problem.build(clean, t[1] - t[0], bs), clean


def test_grad_term_depends_on_both_networks():
    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 4, 2), NetworkSpec(DYNAMICS, 2, 2, 4, 2)
    model = DynamicsModel(dspec)
    problem, _ = toy_problem()
    theta, phi = init(ispec, 0).flat, init(dspec, 1).flat
    _, gt, gp = composite_loss_and_grad(theta, phi, ispec, model, problem, LossWeights(0.0, 0.0, 1.0),
                                        SolverConfig(method="rk4"))
    assert np.linalg.norm(gt) > 0 and np.linalg.norm(gp) > 0


@pytest.mark.parametrize("method", ["rk4", "dopri5"])
def test_composite_gradient_matches_fd(method):
    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 4, 2), NetworkSpec(DYNAMICS, 2, 2, 4, 2)
    model = DynamicsModel(dspec)
    problem, _ = toy_problem()
    weights = LossWeights(1.0, 1.0, 1e-2)
    solver = SolverConfig(method=method, rtol=1e-10, atol=1e-12)
    theta, phi = init(ispec, 3).flat, init(dspec, 4).flat
    _, gt, gp = composite_loss_and_grad(theta, phi, ispec, model, problem, weights, solver)

    def total(th, ph):
        return composite_loss_and_grad(th, ph, ispec, model, problem, weights, solver)[0].total

    assert rel_err(gt, central_difference(lambda th: total(th, phi), theta)) < 1e-4
    assert rel_err(gp, central_difference(lambda ph: total(theta, ph), phi)) < 1e-4


def test_breakdown_linearity_in_grad_weight():
    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 4, 2), NetworkSpec(DYNAMICS, 2, 2, 4, 2)
    model = DynamicsModel(dspec)
    problem, _ = toy_problem()
    theta, phi = init(ispec, 0).flat, init(dspec, 1).flat
    rk4 = SolverConfig(method="rk4")
    a = composite_loss_and_grad(theta, phi, ispec, model, problem, LossWeights(1.0, 1.0, 0.01), rk4)[0]
    b = composite_loss_and_grad(theta, phi, ispec, model, problem, LossWeights(1.0, 1.0, 0.02), rk4)[0]
    assert (a.mse, a.integral, a.grad) == (b.mse, b.integral, b.grad)
    assert b.total - a.total == pytest.approx(0.01 * a.grad, rel=1e-9, abs=1e-15)
    for bd in (a, b):
        w = bd.weights
        assert abs(bd.total - (w.mse * bd.mse + w.integral * bd.integral + w.grad * bd.grad)) < 1e-12
    ref = LossBreakdown.from_terms(LossWeights(1.0, 1.0, 0.02), a.mse, a.integral, a.grad)
    assert ref.total == pytest.approx(b.total, abs=1e-12)


def test_second_order_wrapper():
    with pytest.raises(ValueError):
        wrap_second_order(NetworkSpec(DYNAMICS, 3, 1, 4, 1))
    spec = NetworkSpec(DYNAMICS, 2, 1, 6, 2)
    model = wrap_second_order(spec)
    x = np.random.default_rng(0).normal(size=(50, 2))
    zero = model.evaluate(NetworkParams(spec, np.zeros(spec.size)), x)
    np.testing.assert_array_equal(zero[:, 0], 0.0)
    np.testing.assert_array_equal(zero[:, 1], x[:, 0])
    out = model.evaluate(init(spec, 5), x)
    assert np.array_equal(out[:, 1], x[:, 0])
    np.testing.assert_allclose(truth_field("pendulum", [[1.0, 0.0]]), [[-0.05, 1.0]])


def test_irregular_problem_counts():
    clean = simulate_truth("linear2d")
    sub = subsample_irregular(clean, 0.6, 0)
    problem = Problem.build(sub, 0.2, 1, grid=clean.grids[0])
    assert problem.grid.size == 101
    assert not problem.shared
    assert problem.obs_values.size == sum(g.size for g in sub.grids)
    tiny = TimeSeries([np.linspace(0, 20, 60), np.linspace(0.1, 19.9, 60)], [np.ones(60), np.ones(60)])
    assert Problem.build(tiny, 0.2, 1).obs_values.size == 120
    # without an explicit grid the prediction grid covers the data hull at dt
    auto = Problem.build(sub, 0.2, 1)
    assert np.allclose(np.diff(auto.grid), 0.2)
    empty = TimeSeries([np.array([]), np.array([0.0, 0.2])], [np.array([]), np.array([1.0, 1.0])])
    with pytest.raises(ValueError, match="at least one sample"):
        Problem.build(empty, 0.2, 1)


def test_irregular_loss_equals_shared_loss_on_equal_grids():
    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 4, 2), NetworkSpec(DYNAMICS, 2, 2, 4, 2)
    model = DynamicsModel(dspec)
    _, clean = toy_problem(9)
    dt = clean.grids[0][1] - clean.grids[0][0]
    shared = Problem.build(clean, dt, 2)
    # the same data presented as if the grids were independent
    split = Problem.build(clean, dt, 2)
    split.shared = False
    theta, phi = init(ispec, 0).flat, init(dspec, 1).flat
    rk4 = SolverConfig(method="rk4")
    w = LossWeights()
    a = composite_loss_and_grad(theta, phi, ispec, model, shared, w, rk4)[0]
    b = composite_loss_and_grad(theta, phi, ispec, model, split, w, rk4)[0]
    assert a.mse == pytest.approx(b.mse, rel=1e-12)
    assert a.total == pytest.approx(b.total, rel=1e-12)


def test_adam_first_step_and_reference():
    opt = Adam(np.array([1e-3]))
    p = opt.step(np.array([0.5]), np.array([1.0]))
    assert p[0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)

    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 3))
    lr = np.array([1e-3, 1e-3, 5e-4])
    opt = Adam(lr)
    p = np.zeros(3)
    m = v = np.zeros(3)
    q = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p = opt.step(p, g, factor=0.5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        q = q - 0.5 * lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-13, atol=0)


def small_setup():
    t = np.arange(41) * 0.05
    clean = simulate_truth("cubic2d", None, t)
    ispec, dspec = NetworkSpec(IMPLICIT, 1, 2, 8, 2), NetworkSpec(DYNAMICS, 2, 2, 8, 1)
    return clean, ispec, DynamicsModel(dspec)


def test_zero_epochs_returns_initial_params():
    clean, ispec, model = small_setup()
    res = train_imp_node(clean, ispec, model, LossWeights(), TrainSchedule(0, 0, bs=2, dt=0.05), seed=4)
    assert np.array_equal(res.implicit.flat, init(ispec, 4).flat)
    assert np.array_equal(res.dynamics.flat, init(model.spec, 5).flat)
    assert res.history == []


def test_training_reduces_loss_and_logs_phases(tmp_path):
    clean, ispec, model = small_setup()
    sched = TrainSchedule(60, 10, lr_implicit=1e-2, lr_dynamics=1e-2, bs=2, dt=0.05, decay_every=50)
    res = train_imp_node(clean, ispec, model, LossWeights(), sched, seed=0)
    hist = res.history
    assert [h.phase for h in hist] == ["rk4"] * 60 + ["dopri5"] * 10
    assert hist[-1].total < 0.5 * hist[0].total
    assert hist[49].lr == 1e-2 and hist[50].lr == pytest.approx(1e-3)
    write_history(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,total,mse,integral,grad,lr" and len(lines) == 71


def test_training_aborts_with_epoch_on_solver_failure():
    clean, ispec, model = small_setup()
    sched = TrainSchedule(2, 3, bs=2, dt=0.05)
    with pytest.raises(TrainingError) as info:
        train_imp_node(clean, ispec, model, LossWeights(), sched, SolverConfig(max_steps=1), seed=0)
    assert info.value.epoch == 2


def test_training_aborts_on_nonfinite_loss():
    clean, ispec, model = small_setup()
    bad = clean.copy()
    bad.values[0][3] = np.nan
    with pytest.raises(TrainingError):
        train_imp_node(bad, ispec, model, LossWeights(), TrainSchedule(3, 0, bs=2, dt=0.05), seed=0)


def test_std_baseline_learns_zero_field():
    t = np.arange(41) * 0.05
    data = TimeSeries.from_shared(t, np.tile([0.7, -0.4], (41, 1)))
    model = DynamicsModel(NetworkSpec(DYNAMICS, 2, 2, 8, 1))
    sched = TrainSchedule(300, 0, lr_dynamics=1e-2, bs=2, dt=0.05)
    res = train_std_node_baseline(data, model, sched, seed=0)
    pts = data.stacked()[1]
    assert np.mean(np.linalg.norm(model.evaluate(res.dynamics, pts), axis=1)) < 1e-2


def test_std_baseline_deterministic_and_refuses_split_grids():
    clean, _, model = small_setup()
    sched = TrainSchedule(5, 2, bs=2, dt=0.05)
    a = train_std_node_baseline(clean, model, sched, seed=1)
    b = train_std_node_baseline(clean, model, sched, seed=1)
    assert [h.total for h in a.history] == [h.total for h in b.history]
    split = subsample_irregular(clean, 0.6, 0)
    with pytest.raises(ValueError):
        train_std_node_baseline(split, model, sched)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_residual_net_with_zero_blocks_is_linear(a, b):
    A = np.array([[-0.1, 1.0], [-1.0, -0.1]])
    dspec = NetworkSpec(DYNAMICS, 2, 2, 2, 1)
    d = {k: np.zeros(v.shape) for k, v in init(dspec, 0).unflatten().items()}
    d["lift.W"] = np.eye(2)
    d["readout.W"] = A.T
    out = DynamicsModel(dspec).evaluate(NetworkParams.flatten(dspec, d), [[a, b]])
    np.testing.assert_allclose(out[0], A @ np.array([a, b]), atol=1e-14)
