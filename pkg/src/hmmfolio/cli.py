"""Command-line front end.

Subcommands wire the library into reproducible, config-driven runs:

* ``simulate``  draw a price path from a model JSON, write CSV + metadata
* ``fit``       EM-fit a returns CSV, write model JSON + criteria table
* ``filter``    run the posterior filter along a returns CSV
* ``allocate``  single-shot optimal weights for a model and posterior
* ``backtest``  walk-forward harness, report JSON/CSV + plot-data CSVs

Each run is driven by one JSON config (``--config``); the ``--seed``,
``--threads`` and ``--out`` flags override the corresponding config
fields.  Exit codes: 0 success, 2 input/validation error, 3 numerical
failure.  All numeric output uses 17 significant digits.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import allocation, backtest, estimation, filtering, market
from .errors import (EstimationError, FilterDegenerateError, GeneratorFitError,
                     HmmfolioError, InputError, ModelError,
                     SingularPenaltyError)

log = logging.getLogger("hmmfolio")

_NUMERICAL_ERRORS = (EstimationError, FilterDegenerateError,
                     SingularPenaltyError, GeneratorFitError)


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    return cfg


def _require(cfg: dict, keys, context: str):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise InputError(f"{context} config missing fields: {missing}")


def _reject_unknown(cfg: dict, known, context: str):
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise InputError(f"unknown {context} config fields: {unknown}")


def _out_path(out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_model(spec) -> market.HmmModel:
    """Model from a JSON file path or an inline parameter object."""
    if isinstance(spec, str):
        try:
            return market.HmmModel.from_json(spec)
        except OSError as exc:
            raise InputError(f"cannot read model: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"model file is not valid JSON: {exc.msg}") from None
    if isinstance(spec, dict):
        for f in ("growth", "covariance", "generator", "prior"):
            if f not in spec:
                raise InputError(f"inline model missing field: {f!r}")
        return market.HmmModel(spec["growth"], spec["covariance"],
                               spec["generator"], spec["prior"])
    raise InputError("model must be a file path or an inline parameter object")


def read_returns_csv(path):
    """Per-step log returns from CSV, shape (T, n), plus carried-through
    date labels (never parsed for arithmetic).

    Two layouts are accepted: a log-price path CSV with ``t`` and
    ``asset_*`` columns (differenced to returns) or a plain returns table
    whose non-numeric leading column, if any, is treated as dates.
    """
    import pandas as pd

    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except OSError as exc:
        raise InputError(f"cannot read returns CSV: {exc}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"malformed returns CSV: {exc}") from None
    if "t" in df.columns and any(c.startswith("asset_") for c in df.columns):
        p = market.PricePath.from_csv(path)
        return p.increments(), None
    dates = None
    cols = list(df.columns)
    if cols and df[cols[0]].dtype == object:
        dates = df[cols[0]].astype(str).tolist()
        cols = cols[1:]
    if not cols:
        raise InputError("returns CSV carries no numeric columns")
    x = df[cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(x)):
        row = int(np.argwhere(~np.isfinite(x))[0, 0])
        raise InputError(f"returns CSV row {row + 2} is not numeric/finite")
    return x, dates


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out_dir: str) -> int:
    _reject_unknown(cfg, {"model", "horizon_steps", "dt", "seed", "x0", "prefix"},
                    "simulate")
    _require(cfg, ["model", "horizon_steps"], "simulate")
    model = _load_model(cfg["model"])
    dt = float(cfg.get("dt", market.TRADING_DT))
    seed = int(cfg.get("seed", 0))
    prefix = str(cfg.get("prefix", "sim"))
    path = market.simulate_path(model, int(cfg["horizon_steps"]), dt=dt,
                                seed=seed, x0=cfg.get("x0"))
    csv_path = _out_path(out_dir, f"{prefix}_path.csv")
    model_path = _out_path(out_dir, f"{prefix}_model.json")
    path.to_csv(csv_path)
    model.to_json(model_path)
    meta = {"seed": seed, "dt": dt, "horizon_steps": int(cfg["horizon_steps"]),
            "content_sha256": _sha256(csv_path)}
    with open(_out_path(out_dir, f"{prefix}_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s (%d steps)", csv_path, path.n_steps)
    return 0


def cmd_fit(cfg: dict, out_dir: str) -> int:
    _reject_unknown(cfg, {"returns", "candidates", "dt", "seed", "max_iters",
                          "n_restarts", "tol", "criterion", "prefix"}, "fit")
    _require(cfg, ["returns"], "fit")
    x, _ = read_returns_csv(cfg["returns"])
    candidates = [int(m) for m in cfg.get("candidates", [1, 2, 3])]
    criterion = str(cfg.get("criterion", "ICL"))
    if criterion not in ("AIC", "BIC", "ICL"):
        raise InputError("criterion must be one of AIC, BIC, ICL")
    prefix = str(cfg.get("prefix", "fit"))
    base = estimation.EmConfig(
        n_states=max(candidates),
        dt=float(cfg.get("dt", market.TRADING_DT)),
        max_iters=int(cfg.get("max_iters", 500)),
        tol=float(cfg.get("tol", 1e-8)),
        n_restarts=int(cfg.get("n_restarts", 5)),
        seed=int(cfg.get("seed", 0)),
    )
    try:
        chosen, table, fits = estimation.select_states(x, candidates, base)
    except EstimationError as exc:
        raise EstimationError(
            f"EM failed for every candidate ({base.n_restarts} restarts each, "
            f"seed {base.seed}): {exc}") from None
    m = chosen[criterion]
    best = fits[m]
    if best.model.n_states > 1:
        G, obj = estimation.nearest_generator(best.transition.T, base.dt)
        best.model = market.HmmModel(best.model.growth, best.model.covariance,
                                     G, best.model.prior)
        best.generator_objective = obj

    with open(_out_path(out_dir, f"{prefix}_model.json"), "w") as fh:
        json.dump({
            **best.model.to_dict(),
            "transition": best.transition.tolist(),
            "dt": base.dt,
            "log_likelihood": best.log_likelihood,
            "n_iters": best.n_iters,
            "selected_by": criterion,
            "generator_objective": best.generator_objective,
        }, fh, indent=2)
        fh.write("\n")
    with open(_out_path(out_dir, f"{prefix}_criteria.csv"), "w") as fh:
        fh.write("m,log_likelihood,AIC,BIC,ICL\n")
        for mm in sorted(table):
            t = table[mm]
            fh.write("%d,%s,%s,%s,%s\n" % (
                mm, _fmt(fits[mm].log_likelihood),
                _fmt(t["AIC"]), _fmt(t["BIC"]), _fmt(t["ICL"])))
    log.info("selected m=%d by %s", m, criterion)
    return 0


def cmd_filter(cfg: dict, out_dir: str) -> int:
    _reject_unknown(cfg, {"returns", "model", "dt", "prefix"}, "filter")
    _require(cfg, ["returns", "model"], "filter")
    x, _ = read_returns_csv(cfg["returns"])
    model = _load_model(cfg["model"])
    dt = float(cfg.get("dt", market.TRADING_DT))
    states, loglik = filtering.filter_path(model, x, dt)
    prefix = str(cfg.get("prefix", "filter"))
    filtering.filter_to_csv(_out_path(out_dir, f"{prefix}_posterior.csv"),
                            states, dt)
    with open(_out_path(out_dir, f"{prefix}_summary.json"), "w") as fh:
        json.dump({"log_likelihood": loglik, "n_steps": len(states),
                   "final_posterior": states[-1].posterior.tolist()},
                  fh, indent=2)
        fh.write("\n")
    return 0


def cmd_allocate(cfg: dict, out_dir: str) -> int:
    _reject_unknown(cfg, {"model", "posterior", "prefs", "prefix"}, "allocate")
    _require(cfg, ["model"], "allocate")
    model = _load_model(cfg["model"])
    prefs = allocation.PreferenceSpec.from_config(cfg.get("prefs", {"zeta1": 1.0}))
    posterior = np.asarray(cfg.get("posterior", model.prior), dtype=np.float64)
    if posterior.shape != (model.n_states,):
        raise InputError(f"posterior must have length {model.n_states}")
    if abs(posterior.sum() - 1.0) > 1e-10 or np.any(posterior < 0):
        raise InputError("posterior must lie on the probability simplex")
    gamma_hat = posterior @ model.growth
    eta = prefs.tracking_benchmark.evaluate(model.n_assets)
    pi = allocation.optimal_portfolio(gamma_hat, model.covariance, prefs, eta)
    out = {
        "weights": pi.tolist(),
        "projected_growth": gamma_hat.tolist(),
        "gop": allocation.gop(gamma_hat, model.covariance).tolist(),
        "mqp": allocation.mqp(model.covariance).tolist(),
        "tracking_benchmark": eta.tolist(),
    }
    prefix = str(cfg.get("prefix", "allocate"))
    with open(_out_path(out_dir, f"{prefix}_weights.json"), "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_backtest(cfg: dict, out_dir: str, threads: int = 1) -> int:
    known = {"returns", "dt", "prefix", "estimation_window", "investment_window",
             "roll_step", "target_active_risk", "selection_criterion",
             "candidate_states", "baseline", "prefs", "seed", "max_iters",
             "n_restarts", "tol"}
    _reject_unknown(cfg, known, "backtest")
    _require(cfg, ["returns"], "backtest")
    x, _ = read_returns_csv(cfg["returns"])
    prefix = str(cfg.get("prefix", "backtest"))
    spec = backtest.BacktestSpec.from_config(
        {k: v for k, v in cfg.items() if k not in ("returns", "prefix")})
    report = backtest.run_backtests(x, spec, threads=threads)
    report.to_json(_out_path(out_dir, f"{prefix}_report.json"))
    report.per_window_csv(_out_path(out_dir, f"{prefix}_windows.csv"))
    if report.baseline_per_window:
        report.per_window_csv(_out_path(out_dir, f"{prefix}_baseline_windows.csv"),
                              rows=report.baseline_per_window)
    if report.aggregate.get("n_windows", 0) > 0:
        backtest.op_histogram_csv(report, _out_path(out_dir, f"{prefix}_op_hist.csv"))
        backtest.op_series_csv(report, _out_path(out_dir, f"{prefix}_op_series.csv"))
    log.info("completed %d windows (%d skipped)",
             len(report.per_window), report.n_skipped)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmmfolio",
                                description="Regime-switching portfolio toolkit")
    p.add_argument("command",
                   choices=["simulate", "fit", "filter", "allocate", "backtest"])
    p.add_argument("--config", required=True, help="JSON config for the run")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap for backtest windows")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--log-level", default="INFO")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(cfg, args.out)
        if args.command == "filter":
            return cmd_filter(cfg, args.out)
        if args.command == "allocate":
            return cmd_allocate(cfg, args.out)
        return cmd_backtest(cfg, args.out, threads=args.threads)
    except (InputError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except HmmfolioError as exc:  # anything else from the package
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
