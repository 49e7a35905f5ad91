"""Differentiable explicit Runge-Kutta integration on the tape.

Gradients come from backpropagating through the recorded solver stages
(discretize-then-optimize).  Step-size control decisions in
:func:`dopri5_integrate` are plain numpy and are not differentiated.

A *field* is any callable mapping a ``(batch, n)`` state variable to a
``(batch, n)`` derivative variable on the same tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Var, lincomb, put_rows, take_rows

Field = Callable[[Var], Var]


class SolverError(RuntimeError):
    """Integration failed; ``step`` and ``time`` locate the failure."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 10_000
    initial_step: float | None = None
    safety: float = 0.9

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class IntegrationResult:
    times: np.ndarray
    states: list[Var]
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0
    max_error: float = 0.0  # largest scaled error norm over accepted steps
    steps: np.ndarray | None = field(default=None, repr=False)


def _check_finite(v: Var, step: int, time: float):
    if not np.all(np.isfinite(v.value)):
        raise SolverError(f"non-finite state at step {step} (t={time:g})", step=step, time=time)


def rk4_integrate(f: Field, x0: Var, t_span, steps: int) -> IntegrationResult:
    """Classical four-stage RK4 with ``steps`` equal steps over ``t_span``.

    States are returned at every step boundary, starting with ``x0``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_finite(x0, 0, float(t_span[0]))
    t0, t1 = float(t_span[0]), float(t_span[1])
    h = (t1 - t0) / steps
    states = [x0]
    x = x0
    for i in range(steps):
        k1 = f(x)
        k2 = f(lincomb([x, k1], [1.0, h / 2]))
        k3 = f(lincomb([x, k2], [1.0, h / 2]))
        k4 = f(lincomb([x, k3], [1.0, h]))
        x = lincomb([x, k1, k2, k3, k4], [1.0, h / 6, h / 3, h / 3, h / 6])
        _check_finite(x, i + 1, t0 + (i + 1) * h)
        states.append(x)
    times = t0 + h * np.arange(steps + 1)
    times[-1] = t1
    return IntegrationResult(times, states, accepted=steps * x0.shape[0], nfev=4 * steps)


# Dormand-Prince 5(4) tableau
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# stage weights giving the solution at the step midpoint (Shampine's continuous extension)
_C_MID = np.array([
    6025192743 / 30085553152 / 2, 0.0, 51252292925 / 65400821598 / 2,
    -2691868925 / 45128329728 / 2, 187940372067 / 1594534317056 / 2,
    -1776094331 / 19743644256 / 2, 11237099 / 235043384 / 2,
])

_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_FAC_MIN, _FAC_MAX = 0.2, 10.0


def _quartic_weights(theta):
    """Weights on (y0, y1, y_mid, h*f0, h*f1) of the quartic through those data."""
    t2, t3, t4 = theta ** 2, theta ** 3, theta ** 4
    return (
        1 - 11 * t2 + 18 * t3 - 8 * t4,
        -5 * t2 + 14 * t3 - 8 * t4,
        16 * t2 - 32 * t3 + 16 * t4,
        theta - 4 * t2 + 5 * t3 - 2 * t4,
        t2 - 3 * t3 + 2 * t4,
    )


def _stage_weights(theta):
    """Per-stage weights of the quartic interpolant written as ``y0 + h * sum(w_i * k_i)``.

    Using increments instead of (y0, y1, y_mid) keeps a zero field exactly
    stationary and avoids cancellation when the weights are large.
    """
    _, w1, wm, w0f, w1f = _quartic_weights(theta)
    ws = [w1 * _B5[i] + wm * _C_MID[i] for i in range(7)]
    ws[0] = ws[0] + w0f
    ws[6] = ws[6] + w1f
    return ws


def _dense_value(ya, k, sub, n_active, theta, hs):
    parts = [ya] + list(k)
    if sub.size != n_active:
        parts = [take_rows(p, sub) for p in parts]
    ws = _stage_weights(theta)
    # stage 2 has no weight in either the solution or the midpoint formula
    return lincomb(parts, [1.0] + [0.0 if i == 1 else hs * w for i, w in enumerate(ws)])


def _rms(a):
    return np.sqrt(np.mean(np.square(a), axis=-1))


def _initial_step(tape, f: Field, y0: np.ndarray, f0: np.ndarray, cfg: SolverConfig, span: float) -> np.ndarray:
    sc = cfg.atol + cfg.rtol * np.abs(y0)
    d0, d1 = _rms(y0 / sc), _rms(f0 / sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y0 + h0[:, None] * f0
    with np.errstate(all="ignore"):
        f1 = f(tape.constant(y1)).value
    d2 = _rms((f1 - f0) / sc) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dmax, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), span)


def dopri5_integrate(f: Field, x0: Var, t_eval, config: SolverConfig | None = None) -> IntegrationResult:
    """Adaptive Dormand-Prince 5(4) integration with per-sample step control.

    Every row of ``x0`` is an independent initial state with its own step
    size.  States are returned at ``t_eval`` (first entry is the start time,
    so ``states[0]`` is ``x0``) using quartic dense output between steps.
    """
    cfg = config or SolverConfig()
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or t_eval.size == 0:
        raise ValueError("t_eval must be a non-empty 1-D array")
    if np.any(np.diff(t_eval) <= 0):
        raise ValueError("t_eval must be strictly increasing")
    tape = x0.tape
    _check_finite(x0, 0, float(t_eval[0]))
    nb, _ = x0.shape
    n_out = t_eval.size
    if n_out == 1:
        return IntegrationResult(t_eval, [x0], steps=np.zeros(nb, dtype=int))

    t0, t_end = float(t_eval[0]), float(t_eval[-1])
    span = t_end - t0
    outputs: list[Var | None] = [x0] + [None] * (n_out - 1)
    filled = np.zeros((n_out, nb), dtype=bool)
    filled[0] = True

    y = x0
    fy = f(x0)
    nfev = 1
    if cfg.initial_step is not None:
        h = np.full(nb, min(cfg.initial_step, span))
    else:
        h = _initial_step(tape, f, x0.value, fy.value, cfg, span)
        nfev += 1
    tau = np.full(nb, t0)
    facold = np.full(nb, 1e-4)
    just_rejected = np.zeros(nb, dtype=bool)
    steps = np.zeros(nb, dtype=int)
    n_acc = n_rej = 0
    max_err = 0.0

    while True:
        active = np.flatnonzero(tau < t_end)
        if active.size == 0:
            break
        steps[active] += 1
        if np.any(steps > cfg.max_steps):
            bad = int(np.argmax(steps))
            raise SolverError(
                f"max_steps={cfg.max_steps} exceeded; sample {bad} reached t={tau[bad]:.6g}",
                step=int(steps[bad]), time=float(tau[bad]),
            )
        ta = tau[active]
        remaining = t_end - ta
        ha = np.minimum(h[active], remaining)
        clipped = ha >= remaining
        if np.any(ha <= 1e-14 * np.maximum(1.0, np.abs(ta))):
            bad = active[int(np.argmin(ha))]
            raise SolverError(f"step size underflow at t={tau[bad]:.6g}", step=int(steps[bad]), time=float(tau[bad]))

        whole = active.size == nb
        ya = y if whole else take_rows(y, active)
        ka = fy if whole else take_rows(fy, active)
        hcol = ha[:, None]
        k = [ka]
        for i in range(1, 7):
            stage_in = lincomb([ya] + k[:i], [1.0] + [hcol * a if a else 0.0 for a in _A[i]])
            k.append(f(stage_in))
        nfev += 6
        # last stage input is the 5th-order solution; its derivative is reused (FSAL)
        y5 = stage_in
        with np.errstate(all="ignore"):
            errv = hcol * sum(e * kk.value for e, kk in zip(_E, k) if e != 0.0)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(ya.value), np.abs(y5.value))
            err = _rms(errv / scale)
        err = np.where(np.isfinite(err), err, np.inf)
        acc = err <= 1.0

        # step-size update (Hairer's PI controller)
        with np.errstate(all="ignore"):
            fac11 = err ** _EXPO
            fac = fac11 / facold[active] ** _BETA
            fac = np.clip(fac / cfg.safety, 1.0 / _FAC_MAX, 1.0 / _FAC_MIN)
            h_new = ha / fac
            h_rej = ha / np.minimum(1.0 / _FAC_MIN, fac11 / cfg.safety)
        h_rej = np.where(np.isfinite(h_rej), h_rej, ha * _FAC_MIN)
        h_acc = np.where(just_rejected[active], np.minimum(h_new, ha), h_new)
        h[active] = np.where(acc, h_acc, h_rej)
        just_rejected[active] = ~acc
        n_rej += int(np.sum(~acc))
        if not np.any(acc):
            continue
        pos = np.flatnonzero(acc)
        rows = active[pos]
        n_acc += pos.size
        max_err = max(max_err, float(np.max(err[pos])))
        facold[rows] = np.maximum(err[pos], 1e-4)

        new_tau = np.where(clipped[pos], t_end, ta[pos] + ha[pos])
        for j in range(1, n_out):
            T = t_eval[j]
            hit = (~filled[j, rows]) & (ta[pos] < T) & (T <= new_tau)
            if not np.any(hit):
                continue
            sub = pos[hit]
            theta = ((T - ta[sub]) / ha[sub])[:, None]
            at_end = np.all(T == new_tau[hit])
            if at_end:
                val = y5 if sub.size == active.size else take_rows(y5, sub)
            else:
                val = _dense_value(ya, k, sub, active.size, theta, ha[sub][:, None])
            out_rows = active[sub]
            if out_rows.size == nb:
                outputs[j] = val
            else:
                base = outputs[j] if outputs[j] is not None else tape.constant(np.zeros(x0.shape))
                outputs[j] = put_rows(base, out_rows, val)
            filled[j, out_rows] = True

        if rows.size == nb:
            y, fy = y5, k[6]
        else:
            y = put_rows(y, rows, take_rows(y5, pos))
            fy = put_rows(fy, rows, take_rows(k[6], pos))
        _check_finite(y, int(steps.max()), float(new_tau.min()))
        tau[rows] = new_tau

    if not filled.all():
        raise SolverError("internal error: some output times were not reached")
    return IntegrationResult(t_eval, outputs, n_acc, n_rej, nfev, max_err, steps)


def integrate_segment_batch(f: Field, x_starts: Var, dt: float, span_steps: int,
                            config: SolverConfig | None = None) -> IntegrationResult:
    """Integrate every start state over ``span_steps`` intervals of width ``dt``.

    The result holds ``span_steps`` prediction arrays, one per offset
    ``dt, 2*dt, ..., span_steps*dt``.
    """
    if span_steps < 1:
        raise ValueError("span_steps must be >= 1")
    cfg = config or SolverConfig()
    if cfg.method == "rk4":
        res = rk4_integrate(f, x_starts, (0.0, span_steps * dt), span_steps)
    else:
        res = dopri5_integrate(f, x_starts, dt * np.arange(span_steps + 1), cfg)
    res.times = res.times[1:]
    res.states = res.states[1:]
    return res
