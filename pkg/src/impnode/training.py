"""Joint training of the implicit and dynamics networks, and the plain neural-ODE baseline.

The composite objective is::

    total = w_mse * mse + w_integral * integral + w_grad * grad

* ``mse``: implicit-network states vs. measurements, on each variable's own grid.
* ``integral``: implicit states ``bs`` steps ahead vs. the dynamics network
  integrated from the implicit state at the segment start.
* ``grad``: time derivative of the implicit network vs. the dynamics network
  evaluated on the implicit states.

All three are means over samples and components.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import DualTrajectory, Tape, Var, concat, lincomb, mean_square, take_rows
from .data import TimeSeries
from .nets import (DYNAMICS, IMPLICIT, NetworkParams, NetworkSpec, forward_dynamics, forward_implicit,
                   implicit_values, init, normalize_time, unpack)
from .solvers import SolverConfig, SolverError, integrate_segment_batch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    integral: float = 1.0
    grad: float = 1e-2

    def __post_init__(self):
        vals = (self.mse, self.integral, self.grad)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")


@dataclass(frozen=True)
class TrainSchedule:
    warmstart_epochs: int = 5000
    adaptive_epochs: int = 10000
    lr_implicit: float = 1e-3
    lr_dynamics: float = 1e-3
    lr_decay: float = 0.1
    decay_every: int = 4000
    bs: int = 4
    dt: float = 1e-2
    early_stop: bool = False
    early_stop_epochs: int = 1000

    def __post_init__(self):
        if self.warmstart_epochs < 0 or self.adaptive_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.bs < 1 or not self.dt > 0:
            raise ValueError("need bs >= 1 and dt > 0")
        if not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise ValueError("lr_decay must lie in (0, 1] and decay_every >= 1")

    @property
    def adaptive_cap(self) -> int:
        if self.early_stop:
            return min(self.adaptive_epochs, self.early_stop_epochs)
        return self.adaptive_epochs

    def lr_factor(self, epoch: int) -> float:
        return self.lr_decay ** (epoch // self.decay_every)


@dataclass
class LossBreakdown:
    total: float
    mse: float
    integral: float
    grad: float
    weights: LossWeights

    @classmethod
    def from_terms(cls, weights: LossWeights, mse: float, integral: float, grad: float) -> "LossBreakdown":
        total = weights.mse * mse + weights.integral * integral + weights.grad * grad
        return cls(float(total), float(mse), float(integral), float(grad), weights)


# ---------------------------------------------------------------------------
# loss terms

def loss_mse(implicit_out, measurements) -> Var:
    """Mean squared deviation between implicit states and measurements."""
    value = implicit_out.value if isinstance(implicit_out, DualTrajectory) else implicit_out
    if isinstance(measurements, TimeSeries):
        measurements = measurements.stacked()[1]
    y = np.asarray(measurements, dtype=np.float64)
    if value.shape != y.shape:
        raise ValueError(f"implicit output shape {value.shape} does not match measurements {y.shape}")
    return mean_square(value - y)


def loss_integral(targets: list[Var], predictions: list[Var]) -> Var:
    """Mean squared mismatch between implicit states and integrated states, over all offsets."""
    if len(targets) != len(predictions) or not targets:
        raise ValueError("need one target per prediction offset")
    terms = []
    for tgt, pred in zip(targets, predictions):
        if tgt.shape != pred.shape:
            raise ValueError(f"misaligned shapes {tgt.shape} vs {pred.shape}")
        terms.append(mean_square(tgt - pred))
    if len(terms) == 1:
        return terms[0]
    return lincomb(terms, [1.0 / len(terms)] * len(terms))


def loss_grad(implicit_out: DualTrajectory, dynamics_out: Var) -> Var:
    if implicit_out.tangent.shape != dynamics_out.shape:
        raise ValueError(f"tangent shape {implicit_out.tangent.shape} != field shape {dynamics_out.shape}")
    return mean_square(dynamics_out - implicit_out.tangent)


# ---------------------------------------------------------------------------
# dynamics models

@dataclass(frozen=True)
class DynamicsModel:
    """A dynamics network, optionally wrapped in second-order companion form.

    In companion form the state is ``[v; q]`` (velocities first); the network
    maps the full state to the accelerations and the position block of the
    field is the velocity copied from the state.
    """

    spec: NetworkSpec
    second_order: bool = False

    @property
    def state_dim(self) -> int:
        return self.spec.input_dim

    def field(self, w: Var):
        layers = unpack(w, self.spec)
        if not self.second_order:
            return lambda x: forward_dynamics(w, self.spec, x, layers)
        n = self.spec.output_dim

        def companion(x: Var) -> Var:
            return concat([forward_dynamics(w, self.spec, x, layers), x[:, :n]], axis=1)
        return companion

    def evaluate(self, params: NetworkParams, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tape = Tape()
        return self.field(tape.constant(params.flat))(tape.constant(x)).value


def wrap_second_order(spec: NetworkSpec) -> DynamicsModel:
    """Companion-form field for ``v' = N(q, v), q' = v`` on states ``[v; q]``."""
    if spec.input_dim % 2:
        raise ValueError("second-order state dimension must be even")
    if spec.output_dim != spec.input_dim // 2:
        raise ValueError("network output must match the velocity block size")
    return DynamicsModel(spec, second_order=True)


# ---------------------------------------------------------------------------
# problem setup

@dataclass
class Problem:
    """Everything the composite loss needs, precomputed from a TimeSeries."""

    grid: np.ndarray            # uniform prediction grid T
    grid_norm: np.ndarray
    scale: float
    starts: np.ndarray          # segment start indices into the grid
    dt: float
    bs: int
    obs_norm: np.ndarray        # concatenated measurement times (normalized)
    obs_var: np.ndarray         # variable index of each measurement
    obs_values: np.ndarray
    shared: bool
    shared_values: np.ndarray | None = None
    t_domain: tuple[float, float] = (0.0, 1.0)

    @classmethod
    def build(cls, data: TimeSeries, dt: float, bs: int, grid=None) -> "Problem":
        if any(g.size == 0 for g in data.grids):
            raise ValueError("every variable needs at least one sample")
        t_lo, t_hi = data.time_hull()
        shared = data.shared_grid
        if grid is None:
            if shared:
                grid = data.grids[0]
            else:
                n = int(np.floor((t_hi - t_lo) / dt + 1e-9))
                grid = t_lo + dt * np.arange(n + 1)
        grid = np.asarray(grid, dtype=np.float64)
        if grid.size > 1 and not np.allclose(np.diff(grid), dt, rtol=1e-6, atol=1e-12):
            raise ValueError(f"prediction grid spacing does not match dt={dt}")
        if grid.size <= bs:
            raise ValueError(f"grid of {grid.size} points is too short for bs={bs}")
        lo, hi = min(t_lo, float(grid[0])), max(t_hi, float(grid[-1]))
        grid_norm, scale = normalize_time(grid, lo, hi)
        obs_t = np.concatenate(data.grids)
        obs_var = np.concatenate([np.full(g.size, k) for k, g in enumerate(data.grids)])
        obs_norm, _ = normalize_time(obs_t, lo, hi)
        shared_vals = None
        if shared and np.array_equal(data.grids[0], grid):
            shared_vals = data.stacked()[1]
        return cls(grid, np.clip(grid_norm, -1, 1), scale, np.arange(grid.size - bs), dt, bs,
                   np.clip(obs_norm, -1, 1), obs_var, np.concatenate(data.values),
                   shared_vals is not None, shared_vals, (lo, hi))


def loss_irregular(w_theta: Var, implicit_spec: NetworkSpec, dyn_field, problem: Problem,
                   weights: LossWeights, solver: SolverConfig) -> tuple[Var, dict[str, Var]]:
    """Composite loss; the MSE term uses each variable's own grid.

    With all variables on the prediction grid this is exactly the
    shared-grid objective.  Returns the weighted total and the unweighted
    terms as tape variables.
    """
    dual = forward_implicit(w_theta, implicit_spec, problem.grid_norm, problem.scale)
    if problem.shared:
        mse = loss_mse(dual.value, problem.shared_values)
    else:
        states = implicit_values(w_theta, implicit_spec, problem.obs_norm)
        rows = np.arange(problem.obs_var.size)
        picked = states[(rows, problem.obs_var)]
        mse = mean_square(picked - problem.obs_values)
    field_out = dyn_field(dual.value)
    grad = loss_grad(dual, field_out)
    x_starts = take_rows(dual.value, problem.starts)
    res = integrate_segment_batch(dyn_field, x_starts, problem.dt, problem.bs, solver)
    targets = [take_rows(dual.value, problem.starts + k) for k in range(1, problem.bs + 1)]
    integral = loss_integral(targets, res.states)
    total = lincomb([mse, integral, grad], [weights.mse, weights.integral, weights.grad])
    return total, {"mse": mse, "integral": integral, "grad": grad}


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with a per-entry learning-rate vector (one value per parameter group)."""

    def __init__(self, lr: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.lr)
        self.v = np.zeros_like(self.lr)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - factor * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class HistoryRow:
    epoch: int
    phase: str
    total: float
    mse: float
    integral: float
    grad: float
    lr: float


@dataclass
class TrainResult:
    dynamics: NetworkParams
    implicit: NetworkParams | None
    history: list[HistoryRow] = field(default_factory=list)
    problem: Problem | None = field(default=None, repr=False)

    def history_csv(self, path) -> None:
        write_history(self.history, path)


def write_history(history: list[HistoryRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,phase,total,mse,integral,grad,lr\n")
        for h in history:
            fh.write(f"{h.epoch},{h.phase},{h.total:.17g},{h.mse:.17g},{h.integral:.17g},{h.grad:.17g},{h.lr:.17g}\n")


def _phases(schedule: TrainSchedule):
    for e in range(schedule.warmstart_epochs):
        yield e, "rk4"
    for e in range(schedule.adaptive_cap):
        yield schedule.warmstart_epochs + e, "dopri5"


def _phase_solver(phase: str, solver: SolverConfig) -> SolverConfig:
    return replace(solver, method="rk4") if phase == "rk4" else replace(solver, method="dopri5")


def composite_loss_and_grad(theta: np.ndarray, phi: np.ndarray, implicit_spec: NetworkSpec,
                            model: DynamicsModel, problem: Problem, weights: LossWeights,
                            solver: SolverConfig):
    """Loss breakdown and flat gradients w.r.t. (theta, phi) on a fresh tape."""
    tape = Tape()
    wt = tape.leaf(theta, "theta")
    wp = tape.leaf(phi, "phi")
    total, terms = loss_irregular(wt, implicit_spec, model.field(wp), problem, weights, solver)
    bd = LossBreakdown(float(total.value), *(float(terms[k].value) for k in ("mse", "integral", "grad")), weights)
    if not np.isfinite(bd.total):
        return bd, None, None
    g = tape.backward(total)
    return bd, g[wt.id], g[wp.id]


def train_imp_node(data: TimeSeries, implicit_spec: NetworkSpec, model: DynamicsModel,
                   weights: LossWeights, schedule: TrainSchedule, solver: SolverConfig | None = None,
                   seed: int = 0, init_params: tuple[NetworkParams, NetworkParams] | None = None,
                   grid=None, callback=None) -> TrainResult:
    """Train both networks jointly: RK4 warm start, then adaptive integration."""
    solver = solver or SolverConfig()
    if implicit_spec.kind != IMPLICIT or model.spec.kind != DYNAMICS:
        raise ValueError("expected an implicit-sine and a residual-elu network")
    if implicit_spec.output_dim != data.n_vars or model.state_dim != data.n_vars:
        raise ValueError("network dimensions do not match the data")
    problem = Problem.build(data, schedule.dt, schedule.bs, grid)
    if init_params is None:
        theta_p = init(implicit_spec, seed)
        phi_p = init(model.spec, seed + 1)
    else:
        theta_p, phi_p = (p.copy() for p in init_params)
    theta, phi = theta_p.flat.copy(), phi_p.flat.copy()
    nt = theta.size
    lr = np.concatenate([np.full(nt, schedule.lr_implicit), np.full(phi.size, schedule.lr_dynamics)])
    opt = Adam(lr)
    history = []
    for epoch, phase in _phases(schedule):
        try:
            bd, gt, gp = composite_loss_and_grad(theta, phi, implicit_spec, model, problem, weights,
                                                 _phase_solver(phase, solver))
        except SolverError as exc:
            raise TrainingError(f"solver failure at epoch {epoch}: {exc}", epoch) from exc
        if gt is None or not (np.all(np.isfinite(gt)) and np.all(np.isfinite(gp))):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
        factor = schedule.lr_factor(epoch)
        history.append(HistoryRow(epoch, phase, bd.total, bd.mse, bd.integral, bd.grad,
                                  schedule.lr_dynamics * factor))
        new = opt.step(np.concatenate([theta, phi]), np.concatenate([gt, gp]), factor)
        theta, phi = new[:nt], new[nt:]
        if callback is not None:
            callback(epoch, bd)
    return TrainResult(NetworkParams(model.spec, phi, phi_p.seed),
                       NetworkParams(implicit_spec, theta, theta_p.seed), history, problem)


def std_loss_and_grad(phi: np.ndarray, model: DynamicsModel, problem: Problem, solver: SolverConfig):
    tape = Tape()
    wp = tape.leaf(phi, "phi")
    y = problem.shared_values
    x_starts = tape.constant(y[problem.starts])
    res = integrate_segment_batch(model.field(wp), x_starts, problem.dt, problem.bs, solver)
    targets = [tape.constant(y[problem.starts + k]) for k in range(1, problem.bs + 1)]
    loss = loss_integral(targets, res.states)
    val = float(loss.value)
    if not np.isfinite(val):
        return val, None
    return val, tape.backward(loss)[wp.id]


def train_std_node_baseline(data: TimeSeries, model: DynamicsModel, schedule: TrainSchedule,
                            solver: SolverConfig | None = None, seed: int = 0,
                            init_params: NetworkParams | None = None) -> TrainResult:
    """Neural-ODE baseline trained directly on the measured states."""
    solver = solver or SolverConfig()
    if not data.shared_grid:
        raise ValueError("the baseline needs all variables on one shared grid")
    if model.state_dim != data.n_vars:
        raise ValueError("network dimensions do not match the data")
    problem = Problem.build(data, schedule.dt, schedule.bs)
    phi_p = init(model.spec, seed + 1) if init_params is None else init_params.copy()
    phi = phi_p.flat.copy()
    opt = Adam(np.full(phi.size, schedule.lr_dynamics))
    history = []
    for epoch, phase in _phases(schedule):
        try:
            val, g = std_loss_and_grad(phi, model, problem, _phase_solver(phase, solver))
        except SolverError as exc:
            raise TrainingError(f"solver failure at epoch {epoch}: {exc}", epoch) from exc
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
        factor = schedule.lr_factor(epoch)
        history.append(HistoryRow(epoch, phase, val, 0.0, val, 0.0, schedule.lr_dynamics * factor))
        phi = opt.step(phi, g, factor)
    return TrainResult(NetworkParams(model.spec, phi, phi_p.seed), None, history, problem)
