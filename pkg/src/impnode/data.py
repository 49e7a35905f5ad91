"""Benchmark systems, reference simulation, noise, filtering and resampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp


@dataclass
class TimeSeries:
    """Per-variable sample grids and values; grids may differ between variables."""

    grids: list[np.ndarray]
    values: list[np.ndarray]
    names: list[str] | None = None

    def __post_init__(self):
        self.grids = [np.asarray(g, dtype=np.float64) for g in self.grids]
        self.values = [np.asarray(v, dtype=np.float64) for v in self.values]
        if len(self.grids) != len(self.values) or not self.grids:
            raise ValueError("need one grid per variable and at least one variable")
        for k, (g, v) in enumerate(zip(self.grids, self.values)):
            if g.ndim != 1 or g.shape != v.shape:
                raise ValueError(f"variable {k}: grid and values must be 1-D of equal length")
            if g.size > 1 and np.any(np.diff(g) <= 0):
                raise ValueError(f"variable {k}: grid must be strictly increasing")
        if self.names is None:
            self.names = [f"x{k}" for k in range(len(self.grids))]

    @classmethod
    def from_shared(cls, t, y, names=None) -> "TimeSeries":
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        return cls([np.array(t, dtype=np.float64) for _ in range(y.shape[1])],
                   [y[:, k].copy() for k in range(y.shape[1])], names)

    @property
    def n_vars(self) -> int:
        return len(self.grids)

    @property
    def shared_grid(self) -> bool:
        g0 = self.grids[0]
        return all(g.shape == g0.shape and np.array_equal(g, g0) for g in self.grids[1:])

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(t, Y) with Y of shape (m, n_vars); only for a shared grid."""
        if not self.shared_grid:
            raise ValueError("series is on split grids")
        return self.grids[0], np.stack(self.values, axis=1)

    def time_hull(self) -> tuple[float, float]:
        return min(float(g[0]) for g in self.grids), max(float(g[-1]) for g in self.grids)

    def copy(self) -> "TimeSeries":
        return TimeSeries([g.copy() for g in self.grids], [v.copy() for v in self.values], list(self.names))

    def to_csv(self, path) -> None:
        """Long format ``variable,time,value``; one row per sample."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "time", "value"])
            for name, g, v in zip(self.names, self.grids, self.values):
                for ti, vi in zip(g, v):
                    w.writerow([name, f"{ti:.17g}", f"{vi:.17g}"])

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        data: dict[str, tuple[list, list]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["variable", "time", "value"]:
                raise ValueError(f"{path}: expected header variable,time,value")
            for row in reader:
                ts, vs = data.setdefault(row["variable"], ([], []))
                ts.append(float(row["time"]))
                vs.append(float(row["value"]))
        names = list(data)
        return cls([np.array(data[n][0]) for n in names], [np.array(data[n][1]) for n in names], names)


@dataclass(frozen=True)
class SystemDef:
    name: str
    state_dim: int
    rhs: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    x0: tuple
    t_window: tuple[float, float]
    dt: float
    order: str = "first"
    names: tuple = ()

    def grid(self) -> np.ndarray:
        n = int(round((self.t_window[1] - self.t_window[0]) / self.dt))
        return self.t_window[0] + self.dt * np.arange(n + 1)


def _cubic(x):
    a, b = x[..., 0], x[..., 1]
    return np.stack([-0.1 * a ** 3 + 2.0 * b ** 3, -2.0 * a ** 3 - 0.1 * b ** 3], axis=-1)


def _pendulum(s):
    # state layout [velocity, position]
    v, p = s[..., 0], s[..., 1]
    return np.stack([-np.sin(p) - 0.05 * v, v], axis=-1)


LINEAR2D = np.array([[0.1, 2.0], [2.0, -0.1]])
LINEAR2D_DAMPED = np.array([[-0.1, 2.0], [-2.0, -0.1]])


def _linear(matrix):
    return lambda x: x @ matrix.T


SYSTEMS: dict[str, SystemDef] = {
    # 2500 samples at dt = 0.01 starting at t = 0
    "cubic2d": SystemDef("cubic2d", 2, _cubic, (2.0, 0.0), (0.0, 24.99), 0.01, "first", ("x", "y")),
    "pendulum": SystemDef("pendulum", 2, _pendulum, (-0.5, 2.0), (0.0, 40.0), 0.25, "second", ("xdot", "x")),
    "linear2d": SystemDef("linear2d", 2, _linear(LINEAR2D), (2.0, 0.0), (0.0, 20.0), 0.2, "first", ("x", "y")),
    "linear2d-damped": SystemDef("linear2d-damped", 2, _linear(LINEAR2D_DAMPED), (2.0, 0.0), (0.0, 20.0), 0.2,
                                 "first", ("x", "y")),
}


def get_system(name: str) -> SystemDef:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def truth_field(system: SystemDef | str, x) -> np.ndarray:
    sys_ = get_system(system) if isinstance(system, str) else system
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != sys_.state_dim:
        raise ValueError(f"{sys_.name} state has dimension {sys_.state_dim}, got {x.shape[-1]}")
    return sys_.rhs(x)


def simulate_truth(system: SystemDef | str, x0=None, t_grid=None) -> TimeSeries:
    """Reference trajectory from a tight-tolerance Dormand-Prince run."""
    sys_ = get_system(system) if isinstance(system, str) else system
    x0 = np.asarray(sys_.x0 if x0 is None else x0, dtype=np.float64)
    t = sys_.grid() if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be increasing")
    if t.size == 1:
        return TimeSeries.from_shared(t, x0[None, :], list(sys_.names) or None)
    sol = solve_ivp(lambda _, y: sys_.rhs(y), (t[0], t[-1]), x0, method="RK45",
                    t_eval=t, rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise RuntimeError(f"reference simulation of {sys_.name} failed: {sol.message}")
    return TimeSeries.from_shared(t, sol.y.T, list(sys_.names) or None)


def add_noise(clean: TimeSeries, level: float, seed) -> TimeSeries:
    """Add Gaussian noise with std ``level * RMS`` of each clean variable."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    out = clean.copy()
    for k, v in enumerate(clean.values):
        sigma = level * np.sqrt(np.mean(v ** 2))
        out.values[k] = v + rng.normal(0.0, 1.0, size=v.shape) * sigma
    return out


def lowpass_filter(noisy: TimeSeries, cutoff: float) -> TimeSeries:
    """Zero-phase spectral low-pass: drop all rFFT bins above ``cutoff`` x Nyquist."""
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff is a fraction of the Nyquist frequency in (0, 1]")
    t, y = noisy.stacked()
    if t.size > 2:
        d = np.diff(t)
        if not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise ValueError("low-pass filtering needs a uniform grid")
    m = t.size
    spec = np.fft.rfft(y, axis=0)
    freq = np.fft.rfftfreq(m)  # cycles per sample, Nyquist = 0.5
    spec[freq > cutoff * 0.5 * (1 + 1e-12)] = 0.0
    filtered = np.fft.irfft(spec, n=m, axis=0)
    return TimeSeries.from_shared(t, filtered, list(noisy.names))


def subsample_irregular(series: TimeSeries, keep_fraction: float, seed) -> TimeSeries:
    """Keep a random sorted subset of each variable's grid, independently per variable."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if keep_fraction == 1:
        return series.copy()
    rng = np.random.default_rng(seed)
    grids, values = [], []
    for g, v in zip(series.grids, series.values):
        count = int(np.floor(keep_fraction * g.size + 0.5))
        if count == 0:
            raise ValueError("subsampling left an empty grid")
        idx = np.sort(rng.choice(g.size, size=count, replace=False))
        grids.append(g[idx])
        values.append(v[idx])
    return TimeSeries(grids, values, list(series.names))
