"""Simulation studies: synthetic exposure, true curves, data generation,
replicate fitting with metrics, and the fixed-window comparison study."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .ace import weighted_exposure
from .fit import ConvergenceError, FitOptions, fit, fit_fixed_weights
from .inference import DEFAULT_DRAWS, delta_cis, fitted_exposure, sample_cis
from .model import DataSet, ModelSpec, SmoothTerm, discrete_weights
from .nbinom import sample_nb
from .splines import interpolate_exposure

MAX_LAG = 15.0
THETA = 8.0
EXPOSURE_SEED = 20240101
WORKERS_ENV = "ACEDLNM_WORKERS"

# exposure process: log-normal AR(1) with an annual cycle
EXPOSURE_LOG_MEAN = 1.95
EXPOSURE_LOG_SD = 0.55
EXPOSURE_AR = 0.7
EXPOSURE_SEASONAL = 0.25

# response curves, calibrated on the fixed synthetic exposure
F_BASE = 2.0
F_CENTER = 25.0
F_CUBIC_SCALE = 20.0
F_CUBIC_SIZE = 0.5
F_BUMP_SD = 8.0
F_BUMP_SIZE = 0.6
F_LINEAR_SLOPE = 0.02
H_AMPLITUDE = 0.5
H_PERIOD = 150.0


# ---------------------------------------------------------------- truths
def _w_shapes():
    return {
        "i": lambda l: l ** 2 * np.exp(-l / 1.5),
        "ii": lambda l: 1.0 / (1.0 + np.exp((l - 6.0) / 0.8)),
        "iii": lambda l: np.exp(-l / 2.5),
    }


def _unit_norms(L=MAX_LAG):
    nodes, weights = np.polynomial.legendre.leggauss(64)
    l = 0.5 * L * (nodes + 1.0)
    return {k: math.sqrt(0.5 * L * float(weights @ fn(l) ** 2)) for k, fn in _w_shapes().items()}


_NORMS = _unit_norms()


def true_weight(kind: str, lag):
    """True lag-weight curve, scaled to unit L2 norm on [0, L]."""
    fn = _w_shapes()[kind]
    lag = np.asarray(lag, dtype=float)
    return np.where((lag >= 0) & (lag <= MAX_LAG), fn(lag) / _NORMS[kind], 0.0)


def true_response(kind: str, E):
    E = np.asarray(E, dtype=float)
    if kind == "i":
        z = (E - F_CENTER) / F_CUBIC_SCALE
        return F_BASE + F_CUBIC_SIZE * (z ** 3 - 3.0 * z)
    if kind == "ii":
        z = (E - F_CENTER) / F_BUMP_SD
        return F_BASE + F_BUMP_SIZE * np.exp(-0.5 * z * z)
    if kind == "iii":
        return F_BASE + F_LINEAR_SLOPE * (E - F_CENTER)
    raise KeyError(kind)


def true_time_effect(t):
    return H_AMPLITUDE * np.sin(np.asarray(t, dtype=float) / H_PERIOD)


def synthetic_exposure(n_days: int, seed: int = EXPOSURE_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = np.empty(n_days)
    z[0] = rng.standard_normal()
    innov = math.sqrt(1.0 - EXPOSURE_AR ** 2)
    for i in range(1, n_days):
        z[i] = EXPOSURE_AR * z[i - 1] + innov * rng.standard_normal()
    t = np.arange(n_days)
    return np.exp(EXPOSURE_LOG_MEAN + EXPOSURE_SEASONAL * np.sin(2 * np.pi * t / 365.25) + EXPOSURE_LOG_SD * z)


# ---------------------------------------------------------------- scenarios
COMPARISON_WINDOWS = ("lag0", "avg0-1", "avg0-7", "avg0-14")
WEIGHT_KINDS = ("i", "ii", "iii", "discrete") + COMPARISON_WINDOWS


@dataclass(frozen=True)
class ScenarioSpec:
    w_kind: str = "i"                  # "i", "ii", "iii", "discrete" (type-i weights on lags 0..14) or a window
    f_kind: str = "i"
    n: int = 1000
    n_rep: int = 100
    seed: int = 1
    theta: float = THETA
    n_draws: int = DEFAULT_DRAWS
    n_grid: int = 100
    exposure_file: str | None = None

    def __post_init__(self):
        if self.w_kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight type {self.w_kind!r}")
        if self.f_kind not in ("i", "ii", "iii"):
            raise ValueError(f"unknown response type {self.f_kind!r}")
        if self.n < 100 or self.n_rep < 1:
            raise ValueError("n must be at least 100 and n_rep positive")
        if not self.theta > 0:
            raise ValueError("theta must be positive")


def model_spec(n_time_knots: int = 10) -> ModelSpec:
    return ModelSpec(max_lag=MAX_LAG, smooth=(SmoothTerm("time", n_time_knots),))


@dataclass
class Truth:
    times: np.ndarray      # all days, lag window included
    x: np.ndarray
    E: np.ndarray          # true exposure on the modelled rows
    rows: np.ndarray
    log_mu: np.ndarray
    h_shift: float         # mean of the time effect, absorbed by f in the fit


def discrete_true_weights(kind: str = "discrete") -> np.ndarray:
    """Weights on lags 0, 1, ...: type-i values at integer lags, or equal
    weights averaging a window such as ``"avg0-7"``."""
    if kind == "discrete":
        return true_weight("i", np.arange(int(MAX_LAG)))
    w = discrete_weights(kind)
    return w / w.sum()


def scenario_truth(sc: ScenarioSpec) -> Truth:
    lag = math.ceil(MAX_LAG)
    total = sc.n + lag
    times = np.arange(1.0, total + 1.0)
    if sc.exposure_file is None:
        x = synthetic_exposure(total)
    else:
        x = load_exposure_file(sc.exposure_file)
        if len(x) < total:
            raise ValueError(f"exposure series has {len(x)} days; {total} needed")
        x = x[:total]
    rows = np.arange(lag, total)
    if sc.w_kind not in ("i", "ii", "iii"):
        w = discrete_true_weights(sc.w_kind)
        E = x[rows[:, None] - np.arange(len(w))[None, :]] @ w
    else:
        spline = interpolate_exposure(times, x)
        E = weighted_exposure(spline, lambda l: true_weight(sc.w_kind, l), MAX_LAG, times[rows])
    h = true_time_effect(times[rows])
    log_mu = true_response(sc.f_kind, E) + h
    if np.max(log_mu) > 20.0:
        raise OverflowError("true mean overflows; check the scenario's curve constants")
    return Truth(times, x, E, rows, log_mu, float(h.mean()))


def simulate_dataset(truth: Truth, theta: float, rng: np.random.Generator) -> DataSet:
    y = np.zeros(len(truth.times))
    y[truth.rows] = sample_nb(rng, np.exp(truth.log_mu), theta)
    return DataSet(truth.times, y, truth.x, {"time": truth.times})


def load_exposure_file(path) -> np.ndarray:
    """Exposure series from a CSV with a header; uses the ``exposure`` column,
    or the only column when there is just one."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float, encoding="utf-8")
    names = data.dtype.names
    col = "exposure" if "exposure" in names else (names[0] if len(names) == 1 else None)
    if col is None:
        raise ValueError(f"{path}: expected an 'exposure' column")
    x = np.atleast_1d(data[col]).astype(float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: non-finite exposure at row {int(np.flatnonzero(~np.isfinite(x))[0]) + 1}")
    return x


# ---------------------------------------------------------------- metrics
@dataclass
class ReplicateMetrics:
    index: int
    ok: bool
    message: str = ""
    rmse_w: float = np.nan
    cvg_w: float = np.nan
    width_w: float = np.nan
    width_w_delta: float = np.nan
    rmse_f: float = np.nan
    cvg_f: float = np.nan
    width_f: float = np.nan
    rmse_h: float = np.nan
    theta: float = np.nan
    seconds: float = np.nan


def curve_metrics(curve, truth) -> dict:
    """RMSE, pointwise coverage and mean width of one curve against truth on its grid."""
    truth = np.asarray(truth, dtype=float)
    out = {"rmse": float(np.sqrt(np.mean((curve.point - truth) ** 2)))}
    if curve.lower is not None:
        out["cvg"] = float(np.mean((curve.lower <= truth) & (truth <= curve.upper)))
        out["width"] = float(np.mean(curve.upper - curve.lower))
    return out


METRIC_NAMES = ("rmse_w", "cvg_w", "width_w", "width_w_delta", "rmse_f", "cvg_f", "width_f", "rmse_h")


@dataclass
class MetricsSummary:
    scenario: dict
    n_ok: int
    n_failed: int
    mean: dict
    mc_se: dict            # None entries when fewer than two replicates succeeded
    theta_bias: float
    theta_rmse: float
    replicates: list = field(default_factory=list)

    def rows(self):
        """Flat records: one summary row then one row per replicate."""
        yield {"row": "summary", **{k: self.mean[k] for k in METRIC_NAMES},
               "theta_bias": self.theta_bias, "theta_rmse": self.theta_rmse,
               "n_ok": self.n_ok, "n_failed": self.n_failed}
        yield {"row": "mc_se", **{k: self.mc_se[k] for k in METRIC_NAMES},
               "theta_bias": self.mc_se.get("theta"), "theta_rmse": None, "n_ok": None, "n_failed": None}
        for r in self.replicates:
            yield {"row": f"rep{r.index}", **{k: getattr(r, k) for k in METRIC_NAMES},
                   "theta_bias": r.theta - self.scenario["theta"], "theta_rmse": None,
                   "n_ok": int(r.ok), "n_failed": int(not r.ok)}


def summarize(sc: ScenarioSpec, reps) -> MetricsSummary:
    ok = [r for r in reps if r.ok]
    mean, se = {}, {}
    for k in METRIC_NAMES + ("theta",):
        vals = np.array([getattr(r, k) for r in ok], dtype=float)
        mean[k] = float(vals.mean()) if len(vals) else None
        se[k] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
    th = np.array([r.theta for r in ok])
    bias = float(th.mean() - sc.theta) if len(th) else None
    rmse = float(np.sqrt(np.mean((th - sc.theta) ** 2))) if len(th) else None
    return MetricsSummary(asdict(sc), len(ok), len(reps) - len(ok), mean, se, bias, rmse, list(reps))


# ---------------------------------------------------------------- replicates
_TRUTHS: dict = {}


def _truth(sc: ScenarioSpec) -> Truth:
    key = (sc.w_kind, sc.f_kind, sc.n, sc.exposure_file)
    if key not in _TRUTHS:
        _TRUTHS[key] = scenario_truth(sc)
    return _TRUTHS[key]


def replicate_seeds(seed: int, n_rep: int):
    """Independent (data, draws) seed pairs per replicate; fixed by index."""
    children = np.random.SeedSequence(seed).spawn(n_rep)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


def _fit_failure(exc) -> bool:
    return isinstance(exc, (ConvergenceError, np.linalg.LinAlgError, ArithmeticError, ValueError))


def run_replicate(sc: ScenarioSpec, index: int, options: FitOptions | None = None) -> ReplicateMetrics:
    truth = _truth(sc)
    data_seed, draw_seed = replicate_seeds(sc.seed, sc.n_rep)[index]
    data = simulate_dataset(truth, sc.theta, np.random.default_rng(data_seed))
    start = time.perf_counter()
    quiet = options or FitOptions(record=False)
    try:
        res = fit(model_spec(), data, quiet)
    except Exception as exc:  # noqa: BLE001 - failures are reported, not raised
        if not _fit_failure(exc):
            raise
        return ReplicateMetrics(index, False, f"{type(exc).__name__}: {exc}")
    if not res.converged:
        return ReplicateMetrics(index, False, res.message)
    grids = {
        "w": np.linspace(0.0, MAX_LAG, sc.n_grid),
        "f": np.linspace(truth.E.min(), truth.E.max(), sc.n_grid),
        "h:time": np.linspace(truth.times[truth.rows[0]], truth.times[-1], sc.n_grid),
    }
    try:
        cw, cf, ch = sample_cis(res, grids, R=sc.n_draws, seed=draw_seed)
        dw = delta_cis(res, {"w": grids["w"]})[0]
    except Exception as exc:  # noqa: BLE001
        if not _fit_failure(exc):
            raise
        return ReplicateMetrics(index, False, f"{type(exc).__name__}: {exc}")
    w_kind = "i" if sc.w_kind == "discrete" else sc.w_kind
    mw = curve_metrics(cw, true_weight(w_kind, cw.grid))
    mf = curve_metrics(cf, true_response(sc.f_kind, cf.grid) + truth.h_shift)
    mh = curve_metrics(ch, true_time_effect(ch.grid) - truth.h_shift)
    return ReplicateMetrics(
        index, True, res.message, mw["rmse"], mw["cvg"], mw["width"], float(np.mean(dw.upper - dw.lower)),
        mf["rmse"], mf["cvg"], mf["width"], mh["rmse"], res.theta, time.perf_counter() - start)


def n_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer") from None
    return os.cpu_count() or 1


def _parallel_map(fn, args, workers):
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def run_scenario(sc: ScenarioSpec, workers: int | None = None, options: FitOptions | None = None) -> MetricsSummary:
    workers = n_workers() if workers is None else workers
    reps = _parallel_map(run_replicate, [(sc, i, options) for i in range(sc.n_rep)], workers)
    return summarize(sc, reps)


# ---------------------------------------------------------------- fixed-window comparison
@dataclass
class ComparisonSummary:
    scenario: dict
    models: tuple
    rmse: dict             # model -> mean RMSE of f(E_t) over t
    mc_se: dict
    n_ok: dict
    replicates: list       # per replicate: {model: rmse or nan}


def run_comparison_replicate(sc: ScenarioSpec, index: int, options: FitOptions | None = None) -> dict:
    truth = _truth(sc)
    data_seed, _ = replicate_seeds(sc.seed, sc.n_rep)[index]
    data = simulate_dataset(truth, sc.theta, np.random.default_rng(data_seed))
    target = true_response(sc.f_kind, truth.E) + truth.h_shift
    quiet = options or FitOptions(record=False)
    out = {}
    for name in ("ace",) + COMPARISON_WINDOWS:
        try:
            if name == "ace":
                res = fit(model_spec(), data, quiet)
            else:
                res = fit_fixed_weights(model_spec(), data, name, quiet)
        except Exception as exc:  # noqa: BLE001
            if not _fit_failure(exc):
                raise
            out[name] = np.nan
            continue
        if not res.converged:
            out[name] = np.nan
            continue
        m = res.model
        fitted = m.f_basis.design(fitted_exposure(res)) @ res.alpha_f
        out[name] = float(np.sqrt(np.mean((fitted - target) ** 2)))
    return out


def run_comparison(sc: ScenarioSpec, workers: int | None = None,
                   options: FitOptions | None = None) -> ComparisonSummary:
    workers = n_workers() if workers is None else workers
    reps = _parallel_map(run_comparison_replicate, [(sc, i, options) for i in range(sc.n_rep)], workers)
    models = ("ace",) + COMPARISON_WINDOWS
    rmse, se, n_ok = {}, {}, {}
    for name in models:
        v = np.array([r[name] for r in reps], dtype=float)
        v = v[np.isfinite(v)]
        n_ok[name] = int(len(v))
        rmse[name] = float(v.mean()) if len(v) else None
        se[name] = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else None
    return ComparisonSummary(asdict(sc), models, rmse, se, n_ok, reps)
