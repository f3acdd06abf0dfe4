"""Walk-forward backtesting of the filtered optimal portfolio.

Protocol per window: estimate the model on a trailing window, calibrate
the preference weights so the in-sample active risk hits a target, then
invest out of sample with daily filter updates and daily rebalancing.
Windows roll forward by a fixed step.  A one-state (GBM) fit run through
the identical pipeline serves as the comparison baseline.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .allocation import PreferenceSpec, optimal_portfolio_path
from .errors import HmmfolioError, InputError
from .estimation import EmConfig, em_fit, select_states
from .filtering import filter_path, init_filter
from .market import TRADING_DT, HmmModel, PricePath

Array = NDArray[np.float64]

_CRITERIA = ("AIC", "BIC", "ICL")


@dataclass(frozen=True)
class BacktestSpec:
    """Walk-forward protocol parameters.

    ``selection_criterion`` is one of ``"AIC"``, ``"BIC"``, ``"ICL"`` or an
    integer (fixed state count, no selection).  ``baseline`` is ``"none"``
    or ``"gbm"``.  Window sizes are in steps; the defaults are five years
    of estimation, one year of investment, monthly rolling.
    """

    estimation_window: int = 1260
    investment_window: int = 252
    roll_step: int = 21
    target_active_risk: float = 0.05
    selection_criterion: object = "ICL"
    candidate_states: tuple[int, ...] = (1, 2, 3)
    baseline: str = "none"
    prefs_template: PreferenceSpec = field(
        default_factory=lambda: PreferenceSpec(zeta0=1.0, zeta1=1.0, zeta2=0.0))
    dt: float = TRADING_DT
    seed: int = 0
    max_iters: int = 200
    n_restarts: int = 3
    tol: float = 1e-7

    def __post_init__(self):
        if min(self.estimation_window, self.investment_window, self.roll_step) < 1:
            raise InputError("window sizes and roll step must be >= 1")
        if self.target_active_risk <= 0 or self.dt <= 0:
            raise InputError("target_active_risk and dt must be positive")
        if self.baseline not in ("none", "gbm"):
            raise InputError("baseline must be 'none' or 'gbm'")
        sc = self.selection_criterion
        if not (sc in _CRITERIA or (isinstance(sc, (int, np.integer)) and sc >= 1)):
            raise InputError("selection_criterion must be AIC/BIC/ICL or a state count")
        z1 = np.max(self.prefs_template.zeta1)
        z2 = np.max(self.prefs_template.zeta2)
        if z1 <= 0 and z2 <= 0:
            raise InputError("prefs_template needs a positive zeta1 or zeta2 "
                             "for calibration to have a handle")

    @classmethod
    def from_config(cls, cfg: dict) -> "BacktestSpec":
        known = {"estimation_window", "investment_window", "roll_step",
                 "target_active_risk", "selection_criterion", "candidate_states",
                 "baseline", "prefs", "dt", "seed", "max_iters", "n_restarts", "tol"}
        unknown = set(cfg) - known
        if unknown:
            raise InputError(f"unknown backtest fields: {sorted(unknown)}")
        kwargs = {k: cfg[k] for k in cfg if k not in ("prefs", "candidate_states")}
        if "candidate_states" in cfg:
            kwargs["candidate_states"] = tuple(int(m) for m in cfg["candidate_states"])
        if "prefs" in cfg:
            kwargs["prefs_template"] = PreferenceSpec.from_config(cfg["prefs"])
        return cls(**kwargs)


def n_windows(n_steps: int, spec: BacktestSpec) -> int:
    """floor((T - est - inv) / roll) + 1 windows fit in T steps."""
    free = n_steps - spec.estimation_window - spec.investment_window
    if free < 0:
        raise InputError("data shorter than one estimation + investment window")
    return free // spec.roll_step + 1


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics(weights_path, benchmark_path, returns, dt: float) -> dict[str, float]:
    """Outperformance, active return and active risk of a weight path.

    ``returns`` are per-step simple returns.  OP is the terminal wealth
    ratio minus one; active return is the annualized mean of per-step
    active returns; active risk is their annualized standard deviation.
    """
    W = np.atleast_2d(np.asarray(weights_path, dtype=np.float64))
    E = np.atleast_2d(np.asarray(benchmark_path, dtype=np.float64))
    R = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    if not (W.shape == E.shape == R.shape):
        raise InputError("weights, benchmark and returns must share a shape")
    if dt <= 0:
        raise InputError("dt must be positive")
    port = np.einsum("ti,ti->t", W, R)
    bench = np.einsum("ti,ti->t", E, R)
    active = port - bench
    # direct compounding: stays finite even if a leveraged portfolio loses
    # more than its wealth on one step (log-wealth would be undefined)
    op = float(np.prod(1.0 + port) / np.prod(1.0 + bench) - 1.0)
    ar = float(active.mean() / dt)
    if len(active) > 1:
        risk = float(active.std(ddof=1) / np.sqrt(dt))
    else:
        risk = 0.0
    return {"OP": op, "active_return": ar, "active_risk": risk}


def gain_loss_ratio(op_values) -> float:
    """Mean positive OP over |mean negative OP|.

    All-gain inputs return +inf, all-loss (or all-zero) inputs return 0.
    """
    v = np.asarray(op_values, dtype=np.float64)
    if v.size == 0:
        raise InputError("op_values must be non-empty")
    gains = v[v > 0]
    losses = v[v < 0]
    if gains.size == 0:
        return 0.0
    if losses.size == 0:
        return float("inf")
    return float(gains.mean() / abs(losses.mean()))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _insample_paths(model: HmmModel, increments: Array, dt: float):
    """Projected growth applicable at each estimation-window step.

    Day t's weight is computed from the filter state after day t-1, so the
    first row is the prior-projected growth.
    """
    states, _ = filter_path(model, increments, dt)
    proj = np.vstack([init_filter(model).projected_growth]
                     + [s.projected_growth for s in states[:-1]])
    return proj


def _family_active_risk(s: float, gamma_path: Array, model: HmmModel,
                        prefs: PreferenceSpec, eta: Array, simple: Array,
                        dt: float) -> float:
    z1 = float(np.max(prefs.zeta1))
    z2 = float(np.max(prefs.zeta2))
    trial = prefs.with_zetas(1.0, s * z1, s * z2)
    W = optimal_portfolio_path(gamma_path, model.covariance, trial, eta)
    E = np.broadcast_to(eta, W.shape)
    return metrics(W, E, simple, dt)["active_risk"]


def calibrate_zeta(increments, model: HmmModel, prefs_template: PreferenceSpec,
                   target_active_risk: float, dt: float,
                   n_iters: int = 60) -> tuple[PreferenceSpec, float]:
    """Scale the penalty weights to hit a target in-sample active risk.

    Searches the one-parameter family zeta(s) = (1, s*zeta1, s*zeta2) by
    bisection on log s over [1e-3, 1e3]; in-sample active risk decreases
    in s (more penalty, tighter tracking).  If the target lies outside the
    attainable range the nearest endpoint is returned with a warning.
    Returns (calibrated prefs, s).
    """
    x = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    gamma_path = _insample_paths(model, x, dt)
    simple = np.expm1(x)
    eta = prefs_template.tracking_benchmark.evaluate(model.n_assets)

    def risk(s):
        return _family_active_risk(s, gamma_path, model, prefs_template,
                                   eta, simple, dt)

    lo, hi = 1e-3, 1e3
    r_lo, r_hi = risk(lo), risk(hi)
    z1 = float(np.max(prefs_template.zeta1))
    z2 = float(np.max(prefs_template.zeta2))
    if target_active_risk >= r_lo:
        if target_active_risk > r_lo * (1 + 1e-9):
            warnings.warn("target active risk above attainable range; "
                          "returning the least-penalized endpoint")
        s = lo
    elif target_active_risk <= r_hi:
        if target_active_risk < r_hi * (1 - 1e-9):
            warnings.warn("target active risk below attainable range; "
                          "returning the most-penalized endpoint")
        s = hi
    else:
        a, b = np.log(lo), np.log(hi)
        for _ in range(n_iters):
            mid = 0.5 * (a + b)
            if risk(np.exp(mid)) > target_active_risk:
                a = mid  # too risky: raise the penalty
            else:
                b = mid
        s = float(np.exp(0.5 * (a + b)))
    return prefs_template.with_zetas(1.0, s * z1, s * z2), s


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def gbm_baseline_fit(increments, dt: float) -> HmmModel:
    """Single-state MLE model: sample mean growth and covariance."""
    from .estimation import _regularize

    x = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    if x.shape[0] < 2:
        raise InputError("need at least two observations")
    mu = x.mean(axis=0)
    cov = _regularize(np.cov(x, rowvar=False, bias=True).reshape(x.shape[1], -1))
    return HmmModel(growth=mu[None, :] / dt, covariance=cov / dt,
                    generator=np.zeros((1, 1)), prior=np.ones(1))


# ---------------------------------------------------------------------------
# walk-forward harness
# ---------------------------------------------------------------------------

@dataclass
class BacktestReport:
    spec_summary: dict
    per_window: list[dict]
    aggregate: dict
    baseline_per_window: list[dict] = field(default_factory=list)
    baseline_aggregate: dict = field(default_factory=dict)
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_summary,
            "per_window": self.per_window,
            "aggregate": self.aggregate,
            "baseline_per_window": self.baseline_per_window,
            "baseline_aggregate": self.baseline_aggregate,
            "n_skipped": self.n_skipped,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=True)
            fh.write("\n")

    def per_window_csv(self, path, rows=None) -> None:
        rows = self.per_window if rows is None else rows
        cols = ["window", "start", "m_selected", "zeta_scale",
                "OP", "active_return", "active_risk", "skipped"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(
                    "%d" % r[c] if c in ("window", "start", "m_selected", "skipped")
                    else "%.17g" % r[c] for c in cols) + "\n")


def aggregate_metrics(rows: list[dict]) -> dict:
    """Summary statistics over non-skipped windows; exactly recomputable."""
    live = [r for r in rows if not r["skipped"]]
    if not live:
        return {"n_windows": 0}
    op = np.array([r["OP"] for r in live])
    risk = np.array([r["active_risk"] for r in live])
    return {
        "n_windows": len(live),
        "mean_OP": float(op.mean()),
        "fraction_OP_positive": float((op > 0).mean()),
        "gain_loss_ratio": gain_loss_ratio(op) if (op != 0).any() else 0.0,
        "worst_underperformance": float(op.min()),
        "mean_active_risk": float(risk.mean()),
    }


def _select_model(x_est: Array, spec: BacktestSpec, seed: int, m_override=None):
    """Fit (and select) the model for one estimation window."""
    sc = spec.selection_criterion if m_override is None else int(m_override)
    base = dict(dt=spec.dt, max_iters=spec.max_iters, tol=spec.tol,
                n_restarts=spec.n_restarts, seed=seed)
    if sc in _CRITERIA:
        cfg = EmConfig(n_states=max(spec.candidate_states), **base)
        chosen, table, fits = select_states(x_est, spec.candidate_states, cfg,
                                            criteria=(sc,))
        m = chosen[sc]
        return fits[m], m
    m = int(sc)
    res = em_fit(x_est, EmConfig(n_states=m, **base), fit_generator=False)
    return res, m


def _run_window(w: int, x: Array, spec: BacktestSpec, m_override=None):
    """Estimate, calibrate and invest one window; returns a per_window row."""
    start = w * spec.roll_step
    est, inv = spec.estimation_window, spec.investment_window
    x_est = x[start:start + est]
    row = {"window": w, "start": start, "m_selected": 0, "zeta_scale": np.nan,
           "OP": np.nan, "active_return": np.nan, "active_risk": np.nan,
           "skipped": 1}
    try:
        if m_override == 1:
            model, m = gbm_baseline_fit(x_est, spec.dt), 1
            # discrete transition of a single state is trivially the identity
        else:
            result, m = _select_model(x_est, spec, seed=spec.seed + 7919 * w,
                                      m_override=m_override)
            model = _discrete_model(result, spec.dt)
        prefs, s = calibrate_zeta(x_est, model, spec.prefs_template,
                                  spec.target_active_risk, spec.dt)
        # out of sample: burn the filter in over the estimation window,
        # then weight day t with the posterior formed after day t-1
        x_full = x[start:start + est + inv]
        states, _ = filter_path(model, x_full, spec.dt)
        proj = np.array([st.projected_growth for st in states])
        gamma_path = proj[est - 1:est + inv - 1]
        eta = prefs.tracking_benchmark.evaluate(model.n_assets)
        W = optimal_portfolio_path(gamma_path, model.covariance, prefs, eta)
        E = np.broadcast_to(eta, W.shape)
        simple = np.expm1(x[start + est:start + est + inv])
        row.update(metrics(W, E, simple, spec.dt))
        row.update(m_selected=m, zeta_scale=s, skipped=0)
    except HmmfolioError as exc:
        warnings.warn(f"window {w} skipped: {exc}")
    return row


def _discrete_model(result, dt: float) -> HmmModel:
    """EmResult -> HmmModel whose transition over dt matches EM's exactly.

    em_fit recovers a generator only approximately; for backtesting we
    build a model whose cached transition matrix is the fitted one, so the
    out-of-sample filter uses exactly the estimated chain.
    """
    res_model = result.model
    m = res_model.n_states
    model = HmmModel(growth=res_model.growth, covariance=res_model.covariance,
                     generator=np.zeros((m, m)), prior=res_model.prior)
    Z = result.transition.T.copy()
    Z.setflags(write=False)
    model._trans_cache[dt] = Z
    return model


def run_backtests(data, spec: BacktestSpec, threads: int = 1,
                  dt: float | None = None) -> BacktestReport:
    """Run every walk-forward window and assemble the report.

    ``data`` is a PricePath or a (T, n) array of log increments (``dt``
    required).  Windows execute independently (optionally across threads)
    and the report lists them by start index.
    """
    if isinstance(data, PricePath):
        x = data.increments()
        dt = data.dt
    else:
        x = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if dt is None:
            dt = spec.dt
    if abs(dt - spec.dt) > 1e-15:
        raise InputError("data step size does not match spec.dt")
    W = n_windows(x.shape[0], spec)

    def run_all(m_override):
        jobs = [(w, x, spec, m_override) for w in range(W)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                rows = list(ex.map(lambda a: _run_window(*a), jobs))
        else:
            rows = [_run_window(*a) for a in jobs]
        return sorted(rows, key=lambda r: r["start"])

    rows = run_all(None)
    base_rows, base_agg = [], {}
    if spec.baseline == "gbm":
        base_rows = run_all(1)
        base_agg = aggregate_metrics(base_rows)
    sc = spec.selection_criterion
    return BacktestReport(
        spec_summary={
            "estimation_window": spec.estimation_window,
            "investment_window": spec.investment_window,
            "roll_step": spec.roll_step,
            "target_active_risk": spec.target_active_risk,
            "selection_criterion": int(sc) if sc not in _CRITERIA else sc,
            "candidate_states": list(spec.candidate_states),
            "baseline": spec.baseline,
            "dt": spec.dt,
            "seed": spec.seed,
        },
        per_window=rows,
        aggregate=aggregate_metrics(rows),
        baseline_per_window=base_rows,
        baseline_aggregate=base_agg,
        n_skipped=sum(r["skipped"] for r in rows),
    )


# ---------------------------------------------------------------------------
# plot-ready exports
# ---------------------------------------------------------------------------

def op_histogram_csv(report: BacktestReport, path, n_bins: int = 20) -> None:
    """Outperformance histogram as (bin_left, bin_right, count) rows."""
    op = np.array([r["OP"] for r in report.per_window if not r["skipped"]])
    if op.size == 0:
        raise InputError("no completed windows to histogram")
    counts, edges = np.histogram(op, bins=n_bins)
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        for k in range(n_bins):
            fh.write("%.17g,%.17g,%d\n" % (edges[k], edges[k + 1], counts[k]))


def op_series_csv(report: BacktestReport, path) -> None:
    """Per-window OP / active-risk series, strategy next to baseline."""
    base = {r["window"]: r for r in report.baseline_per_window}
    with open(path, "w") as fh:
        fh.write("window,start,OP,active_risk,baseline_OP,baseline_active_risk\n")
        for r in report.per_window:
            b = base.get(r["window"], {})
            fh.write("%d,%d,%.17g,%.17g,%.17g,%.17g\n" % (
                r["window"], r["start"], r["OP"], r["active_risk"],
                b.get("OP", np.nan), b.get("active_risk", np.nan)))
