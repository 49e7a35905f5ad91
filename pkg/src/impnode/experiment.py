"""Declarative experiment runs: data generation, training, metrics and CSV artifacts.

Run directory layout::

    <out>/
      config.json                 resolved configuration
      manifest.json               per-job status (and failures)
      summary.csv                 one field-error row per (noise, bs, method)
      data/noise<mu>_{clean,noisy,filtered,observed_clean}.csv
      jobs/<method>_noise<mu>_bs<bs>/
          dynamics.params, implicit.params (imp only)
          loss_history.csv, field_grid.csv, denoised.csv (imp only)
      plotdata/                   written by emit_plotdata
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .data import (TimeSeries, add_noise, get_system, lowpass_filter, simulate_truth, subsample_irregular,
                   truth_field)
from .nets import DYNAMICS, IMPLICIT, NetworkSpec, evaluate_implicit, load_params, normalize_time, save_params
from .solvers import SolverConfig, SolverError
from .training import (DynamicsModel, LossWeights, TrainingError, TrainSchedule, train_imp_node,
                       train_std_node_baseline, wrap_second_order, write_history)

log = logging.getLogger(__name__)

METHODS = ("imp", "std")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration

@dataclass
class NoiseLevel:
    level: float
    lambda_mse: float
    early_stop: bool = False


@dataclass
class NetConfig:
    width: int
    depth: int
    lr: float
    omega0: float = 30.0


@dataclass
class ExperimentConfig:
    system: str
    noise_levels: list[NoiseLevel]
    name: str = ""
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    keep_fraction: float = 1.0
    filter_enabled: bool = True
    filter_cutoff: float = 0.1
    lambda_integral: float = 1.0
    lambda_grad: float = 1e-2
    warmstart_epochs: int = 5000
    adaptive_epochs: int = 10000
    fast_warmstart_epochs: int = 2000
    fast_adaptive_epochs: int = 500
    early_stop_epochs: int = 1000
    lr_decay: float = 0.1
    decay_every: int = 4000
    bs: int = 4
    dt: float | None = None
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 10_000
    implicit: NetConfig = field(default_factory=lambda: NetConfig(20, 4, 1e-3))
    dynamics: NetConfig = field(default_factory=lambda: NetConfig(20, 4, 1e-3))
    grid_resolution: int = 25
    grid_inflate: float = 0.1
    grid_box: list[list[float]] | None = None
    sweep_noise: float | None = None
    sweep_bs: list[int] = field(default_factory=list)
    seed: int = 0
    output_dir: str = "runs/experiment"
    fast: bool = False

    def __post_init__(self):
        try:
            self.sys_def = get_system(self.system)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        if not self.noise_levels:
            raise ConfigError("at least one noise level is required")
        for nl in self.noise_levels:
            if nl.lambda_mse is None or nl.lambda_mse < 0:
                raise ConfigError(f"noise level {nl.level} needs a non-negative lambda_mse")
            if nl.level < 0:
                raise ConfigError("noise levels must be non-negative")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("keep_fraction must lie in (0, 1]")
        if self.sweep_bs and self.sweep_noise is None:
            raise ConfigError("batch-size sweep needs sweep_noise")
        if self.sweep_noise is not None and self.level(self.sweep_noise) is None:
            raise ConfigError(f"sweep noise {self.sweep_noise} is not one of the configured levels")
        if self.grid_resolution < 2:
            raise ConfigError("grid resolution must be >= 2")
        if self.dt is None:
            self.dt = self.sys_def.dt

    def level(self, mu: float) -> NoiseLevel | None:
        for nl in self.noise_levels:
            if np.isclose(nl.level, mu):
                return nl
        return None

    def schedule(self, nl: NoiseLevel, bs: int | None = None) -> TrainSchedule:
        warm = self.fast_warmstart_epochs if self.fast else self.warmstart_epochs
        adapt = self.fast_adaptive_epochs if self.fast else self.adaptive_epochs
        return TrainSchedule(warm, adapt, self.implicit.lr, self.dynamics.lr, self.lr_decay, self.decay_every,
                             bs or self.bs, self.dt, nl.early_stop, self.early_stop_epochs)

    def solver(self) -> SolverConfig:
        return SolverConfig("dopri5", self.rtol, self.atol, self.max_steps)

    def weights(self, nl: NoiseLevel) -> LossWeights:
        return LossWeights(nl.lambda_mse, self.lambda_integral, self.lambda_grad)

    def implicit_spec(self) -> NetworkSpec:
        return NetworkSpec(IMPLICIT, 1, self.sys_def.state_dim, self.implicit.width, self.implicit.depth,
                           self.implicit.omega0)

    def dynamics_model(self) -> DynamicsModel:
        n = self.sys_def.state_dim
        if self.sys_def.order == "second":
            return wrap_second_order(NetworkSpec(DYNAMICS, n, n // 2, self.dynamics.width, self.dynamics.depth))
        return DynamicsModel(NetworkSpec(DYNAMICS, n, n, self.dynamics.width, self.dynamics.depth))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("sys_def", None)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        try:
            raw["noise_levels"] = [NoiseLevel(**nl) if isinstance(nl, dict) else nl for nl in raw["noise_levels"]]
            for key in ("implicit", "dynamics"):
                if isinstance(raw.get(key), dict):
                    raw[key] = NetConfig(**raw[key])
            raw.pop("sys_def", None)
            return cls(**raw)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None


PRESETS = ("cubic2d", "pendulum-so", "linear2d-irregular")


def load_config(path_or_preset: str, **overrides) -> ExperimentConfig:
    """Read a YAML config file, or a shipped preset by name."""
    p = Path(path_or_preset)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    elif path_or_preset in PRESETS:
        text = resources.files("impnode.presets").joinpath(f"{path_or_preset}.yaml").read_text(encoding="utf-8")
    else:
        raise ConfigError(f"no config file or preset named {path_or_preset!r}")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path_or_preset}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path_or_preset}: expected a mapping at top level")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# field error

@dataclass
class FieldErrorReport:
    method: str
    noise: float
    mean: float
    median: float
    grid: str
    points: int


@dataclass
class FieldGrid:
    lower: np.ndarray
    upper: np.ndarray
    resolution: int

    @classmethod
    def around(cls, states: np.ndarray, inflate: float = 0.1, resolution: int = 25) -> "FieldGrid":
        """Bounding box of ``states`` with half-widths grown by ``inflate``."""
        lo, hi = states.min(axis=0), states.max(axis=0)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * (1 + inflate)
        return cls(mid - half, mid + half, resolution)

    def points(self) -> np.ndarray:
        axes = [np.linspace(a, b, self.resolution) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def describe(self) -> str:
        box = "x".join(f"[{a:.6g};{b:.6g}]" for a, b in zip(self.lower, self.upper))
        return f"{'x'.join([str(self.resolution)] * len(self.lower))}@{box}"


def field_error(true_field, learned_field, points: np.ndarray, method: str = "", noise: float = float("nan"),
                grid: str = "") -> FieldErrorReport:
    """Pointwise ``|g_hat - g| / mean(|g|)`` over the grid, summarised by mean and median."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("need a non-empty (points, dim) grid")
    g = np.asarray(true_field(points))
    gh = np.asarray(learned_field(points))
    e = pointwise_error(g, gh)
    return FieldErrorReport(method, noise, float(np.mean(e)), float(np.median(e)), grid, points.shape[0])


def pointwise_error(g: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    ref = np.mean(np.linalg.norm(g, axis=1))
    return np.linalg.norm(g_hat - g, axis=1) / ref


# ---------------------------------------------------------------------------
# running

def _key(mu: float) -> int:
    return int(round(mu * 1_000_000))


def _seeds(master: int, mu: float) -> tuple[int, int, int]:
    """Noise, subsampling and network-init seeds for one noise level."""
    ss = np.random.SeedSequence([master, _key(mu)])
    a, b, c = ss.generate_state(3)
    return int(a), int(b), int(c) % (2 ** 31 - 2)


def _tag(mu: float) -> str:
    return f"{mu:g}"


@dataclass
class LevelData:
    clean: TimeSeries           # full-grid truth
    observed_clean: TimeSeries  # truth on the measurement grid(s)
    noisy: TimeSeries
    filtered: TimeSeries


def make_level_data(cfg: ExperimentConfig, mu: float) -> LevelData:
    noise_seed, sub_seed, _ = _seeds(cfg.seed, mu)
    clean = simulate_truth(cfg.sys_def)
    observed = subsample_irregular(clean, cfg.keep_fraction, sub_seed) if cfg.keep_fraction < 1 else clean
    noisy = add_noise(observed, mu, noise_seed)
    filtered = lowpass_filter(noisy, cfg.filter_cutoff) if cfg.filter_enabled else noisy
    return LevelData(clean, observed, noisy, filtered)


def field_grid_for(cfg: ExperimentConfig, clean: TimeSeries) -> FieldGrid:
    if cfg.grid_box is not None:
        box = np.asarray(cfg.grid_box, dtype=np.float64)
        return FieldGrid(box[:, 0], box[:, 1], cfg.grid_resolution)
    return FieldGrid.around(clean.stacked()[1], cfg.grid_inflate, cfg.grid_resolution)


@dataclass
class Job:
    method: str
    noise: float
    bs: int

    @property
    def name(self) -> str:
        return f"{self.method}_noise{_tag(self.noise)}_bs{self.bs}"


def plan_jobs(cfg: ExperimentConfig) -> list[Job]:
    jobs = [Job(m, nl.level, cfg.bs) for nl in cfg.noise_levels for m in cfg.methods]
    for bs in cfg.sweep_bs:
        if bs != cfg.bs:
            jobs += [Job(m, cfg.sweep_noise, bs) for m in cfg.methods]
    return jobs


def _write_field_grid(path, points, g, g_hat):
    e = pointwise_error(g, g_hat)
    n = points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(n)] + [f"true{i}" for i in range(n)]
                   + [f"learned{i}" for i in range(n)] + ["error"])
        for p, a, b, ei in zip(points, g, g_hat, e):
            w.writerow([f"{v:.17g}" for v in (*p, *a, *b, ei)])


def denoised_series(implicit_params, observed: TimeSeries, t_domain) -> TimeSeries:
    values = []
    for k, grid in enumerate(observed.grids):
        tn, scale = normalize_time(grid, *t_domain)
        x, _ = evaluate_implicit(implicit_params, np.clip(tn, -1, 1), scale)
        values.append(x[:, k])
    return TimeSeries([g.copy() for g in observed.grids], values, list(observed.names))


def rmse(a: TimeSeries, b: TimeSeries) -> float:
    sq = np.concatenate([(va - vb) ** 2 for va, vb in zip(a.values, b.values)])
    return float(np.sqrt(np.mean(sq)))


def run_job(cfg: ExperimentConfig, job: Job, run_dir: Path) -> dict:
    """Train one method on one noise level and write its artifacts."""
    jdir = run_dir / "jobs" / job.name
    jdir.mkdir(parents=True, exist_ok=True)
    nl = cfg.level(job.noise)
    stage = "data"
    try:
        data = make_level_data(cfg, job.noise)
        _, _, train_seed = _seeds(cfg.seed, job.noise)
        model = cfg.dynamics_model()
        schedule = cfg.schedule(nl, job.bs)
        stage = "training"
        log.info("training %s", job.name)
        if job.method == "imp":
            # split grids are predicted on the system's uniform sampling grid
            grid = None if data.filtered.shared_grid else cfg.sys_def.grid()
            res = train_imp_node(data.filtered, cfg.implicit_spec(), model, cfg.weights(nl), schedule,
                                 cfg.solver(), seed=train_seed, grid=grid)
        else:
            res = train_std_node_baseline(data.filtered, model, schedule, cfg.solver(), seed=train_seed)
        stage = "artifacts"
        save_params(res.dynamics, jdir / "dynamics.params")
        write_history(res.history, jdir / "loss_history.csv")
        grid = field_grid_for(cfg, data.clean)
        pts = grid.points()
        g, g_hat = truth_field(cfg.sys_def, pts), model.evaluate(res.dynamics, pts)
        _write_field_grid(jdir / "field_grid.csv", pts, g, g_hat)
        report = field_error(lambda p: g, lambda p: g_hat, pts, job.method, job.noise, grid.describe())
        row = {"system": cfg.system, "method": job.method, "noise": job.noise, "bs": job.bs,
               "mean_error": report.mean, "median_error": report.median, "grid": report.grid,
               "denoised_rmse": None, "noisy_rmse": rmse(data.noisy, data.observed_clean)}
        if res.implicit is not None:
            save_params(res.implicit, jdir / "implicit.params")
            den = denoised_series(res.implicit, data.observed_clean, res.problem.t_domain)
            den.to_csv(jdir / "denoised.csv")
            row["denoised_rmse"] = rmse(den, data.observed_clean)
            (jdir / "t_domain.json").write_text(json.dumps(list(res.problem.t_domain)), encoding="utf-8")
        return {"job": job.name, "status": "ok", "row": row}
    except (TrainingError, SolverError, ValueError, FloatingPointError) as exc:
        log.error("job %s failed in stage %s: %s", job.name, stage, exc)
        return {"job": job.name, "status": "failed", "stage": stage, "error": str(exc)}


SUMMARY_COLUMNS = ["system", "method", "noise", "bs", "mean_error", "median_error", "grid",
                   "denoised_rmse", "noisy_rmse"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _job_entry(args):
    cfg_dict, job, run_dir = args
    return run_job(ExperimentConfig.from_dict(cfg_dict), job, Path(run_dir))


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, jobs: int = 1) -> tuple[Path, bool]:
    """Run every (noise, method[, bs]) job; returns the run directory and overall success."""
    run_dir = Path(out or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    ddir = run_dir / "data"
    ddir.mkdir(exist_ok=True)
    manifest = {"system": cfg.system, "jobs": []}
    levels = sorted({nl.level for nl in cfg.noise_levels})
    for mu in levels:
        try:
            data = make_level_data(cfg, mu)
        except (ValueError, RuntimeError) as exc:
            manifest["jobs"].append({"job": f"data_noise{_tag(mu)}", "status": "failed", "stage": "data",
                                     "error": str(exc)})
            continue
        data.clean.to_csv(ddir / f"noise{_tag(mu)}_clean.csv")
        data.observed_clean.to_csv(ddir / f"noise{_tag(mu)}_observed_clean.csv")
        data.noisy.to_csv(ddir / f"noise{_tag(mu)}_noisy.csv")
        data.filtered.to_csv(ddir / f"noise{_tag(mu)}_filtered.csv")

    planned = plan_jobs(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job_entry, [(cfg.to_dict(), j, str(run_dir)) for j in planned]))
    else:
        results = [run_job(cfg, j, run_dir) for j in planned]

    with open(run_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for res in results:
            if res["status"] == "ok":
                w.writerow([_fmt(res["row"][c]) for c in SUMMARY_COLUMNS])
    for res in results:
        manifest["jobs"].append({k: v for k, v in res.items() if k != "row"})
    ok = all(j["status"] == "ok" for j in manifest["jobs"])
    manifest["status"] = "ok" if ok else "failed"
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run_dir, ok


# ---------------------------------------------------------------------------
# post-processing

def _read_config(run_dir: Path) -> ExperimentConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return ExperimentConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def compute_metrics(run_dir) -> list[FieldErrorReport]:
    """Recompute field errors from the saved dynamics checkpoints."""
    run_dir = Path(run_dir)
    cfg = _read_config(run_dir)
    model = cfg.dynamics_model()
    reports = []
    for job in plan_jobs(cfg):
        ckpt = run_dir / "jobs" / job.name / "dynamics.params"
        if not ckpt.exists():
            continue
        params = load_params(ckpt)
        clean = TimeSeries.from_csv(run_dir / "data" / f"noise{_tag(job.noise)}_clean.csv")
        grid = field_grid_for(cfg, clean)
        rep = field_error(lambda p: truth_field(cfg.sys_def, p), lambda p: model.evaluate(params, p),
                          grid.points(), job.method, job.noise, grid.describe())
        reports.append(rep)
        with open(run_dir / "metrics.csv", "a" if len(reports) > 1 else "w", encoding="utf-8") as fh:
            if len(reports) == 1:
                fh.write("method,noise,bs,mean_error,median_error,points\n")
            fh.write(f"{job.method},{job.noise!r},{job.bs},{rep.mean!r},{rep.median!r},{rep.points}\n")
    return reports


def emit_plotdata(run_dir) -> dict[str, Path]:
    """Long-format CSVs for error curves, trajectory overlays and quiver grids."""
    run_dir = Path(run_dir)
    cfg = _read_config(run_dir)
    summary = _read_csv(run_dir / "summary.csv")
    pdir = run_dir / "plotdata"
    pdir.mkdir(exist_ok=True)
    out = {}

    out["error_vs_noise"] = pdir / "error_vs_noise.csv"
    with open(out["error_vs_noise"], "w", encoding="utf-8") as fh:
        fh.write("noise,method,statistic,value\n")
        for r in summary:
            if int(r["bs"]) == cfg.bs:
                for stat in ("mean", "median"):
                    fh.write(f"{r['noise']},{r['method']},{stat},{r[stat + '_error']}\n")

    out["error_vs_batchsize"] = pdir / "error_vs_batchsize.csv"
    sweep_mu = cfg.sweep_noise
    with open(out["error_vs_batchsize"], "w", encoding="utf-8") as fh:
        fh.write("noise,bs,method,statistic,value\n")
        rows = [r for r in summary if sweep_mu is not None and np.isclose(float(r["noise"]), sweep_mu)]
        for r in sorted(rows, key=lambda r: (int(r["bs"]), r["method"])):
            for stat in ("mean", "median"):
                fh.write(f"{r['noise']},{r['bs']},{r['method']},{stat},{r[stat + '_error']}\n")

    out["trajectories"] = pdir / "trajectories.csv"
    with open(out["trajectories"], "w", encoding="utf-8") as fh:
        fh.write("noise,series,variable,time,value\n")
        for nl in cfg.noise_levels:
            tag = _tag(nl.level)
            sources = {
                "truth": run_dir / "data" / f"noise{tag}_clean.csv",
                "noisy": run_dir / "data" / f"noise{tag}_noisy.csv",
                "filtered": run_dir / "data" / f"noise{tag}_filtered.csv",
                "denoised": run_dir / "jobs" / Job("imp", nl.level, cfg.bs).name / "denoised.csv",
            }
            for label, path in sources.items():
                if not path.exists():
                    if label == "denoised" and "imp" not in cfg.methods:
                        continue
                    raise FileNotFoundError(f"missing {path}")
                for r in _read_csv(path):
                    fh.write(f"{nl.level!r},{label},{r['variable']},{r['time']},{r['value']}\n")

    out["quiver"] = pdir / "quiver.csv"
    with open(out["quiver"], "w", encoding="utf-8") as fh:
        fh.write("noise,bs,method,point,component,x,true,learned,error\n")
        for job in plan_jobs(cfg):
            path = run_dir / "jobs" / job.name / "field_grid.csv"
            if not path.exists():
                continue
            rows = _read_csv(path)
            n = sum(1 for k in rows[0] if k.startswith("true"))
            for i, r in enumerate(rows):
                for c in range(n):
                    fh.write(f"{job.noise!r},{job.bs},{job.method},{i},{c},{r[f'x{c}']},"
                             f"{r[f'true{c}']},{r[f'learned{c}']},{r['error']}\n")
    return out
