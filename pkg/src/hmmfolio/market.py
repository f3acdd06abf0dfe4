"""Regime-switching market model and path simulation.

The market consists of ``n`` assets whose log prices accumulate a growth
rate that depends on the state of an unobservable continuous-time Markov
chain, plus Gaussian noise with a shared (state-independent) covariance.
Regime switching is restricted to the observation grid, so a simulated
path is an exact draw from the discrete-time model the estimators assume.

Conventions used throughout the package:

* ``generator`` has columns summing to zero; ``generator[j, i]`` is the
  rate of jumping *into* state j *from* state i, so the un-normalized
  filter evolves as ``dP = G P dt + ...`` in matrix form.
* ``transition_matrix`` is consequently column-stochastic:
  ``Z[j, i] = P(next state = j | current state = i)``.
* A path with ``horizon_steps = T`` carries ``T + 1`` grid points and one
  state per grid point.  Increment k (between grid points k-1 and k) is
  emitted by the state at its *left* endpoint.
"""

from __future__ import annotations

import json

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, expm

from .errors import InputError, ModelError

TRADING_DT = 1.0 / 252.0


def _as_matrix(x, shape, name) -> NDArray[np.float64]:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise InputError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite entries")
    return a


class HmmModel:
    """Full parameter set of the hidden-Markov market.

    Parameters
    ----------
    growth : (m, n) array
        Per-year growth rate of each asset in each state.
    covariance : (n, n) array
        Per-year covariance of log-price increments, shared across states.
        Must be symmetric positive definite.
    generator : (m, m) array
        Rate matrix of the latent chain; off-diagonals nonnegative and
        columns summing to zero (see module docstring for orientation).
    prior : (m,) array
        Distribution of the initial state.

    Instances are immutable after construction and safe to share across
    threads; derived quantities (Cholesky factor, inverse-covariance
    products) are computed once here.
    """

    def __init__(self, growth, covariance, generator, prior):
        growth = np.atleast_2d(np.asarray(growth, dtype=np.float64))
        m, n = growth.shape
        covariance = _as_matrix(covariance, (n, n), "covariance")
        generator = _as_matrix(generator, (m, m), "generator")
        prior = _as_matrix(prior, (m,), "prior")
        if not np.all(np.isfinite(growth)):
            raise InputError("growth contains non-finite entries")

        if not np.allclose(covariance, covariance.T, atol=1e-10):
            raise ModelError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(covariance)
        except np.linalg.LinAlgError:
            raise ModelError("covariance must be positive definite") from None

        off = generator - np.diag(np.diag(generator))
        if np.any(off < -1e-12):
            raise ModelError("generator off-diagonal entries must be nonnegative")
        colsums = generator.sum(axis=0)
        if np.any(np.abs(colsums) > 1e-10):
            raise ModelError("generator columns must sum to zero")

        if np.any(prior < -1e-12):
            raise ModelError("prior entries must be nonnegative")
        if abs(prior.sum() - 1.0) > 1e-12:
            raise ModelError("prior must sum to one")

        self.n_assets = n
        self.n_states = m
        self.growth = growth
        self.covariance = covariance
        self.generator = generator
        self.prior = np.clip(prior, 0.0, None)
        self._chol = chol
        cf = cho_factor(covariance)
        # rows are gamma^(j)' Sigma^{-1}; quad[j] = gamma^(j)' Sigma^{-1} gamma^(j)
        self._growth_siginv = cho_solve(cf, growth.T).T
        self._growth_quad = np.einsum("ji,ji->j", self._growth_siginv, growth)
        self._logdet_cov = 2.0 * np.log(np.diag(chol)).sum()
        self._cho = cf
        self._trans_cache: dict[float, NDArray[np.float64]] = {}
        for a in (self.growth, self.covariance, self.generator, self.prior):
            a.setflags(write=False)

    def transition_matrix(self, dt: float) -> NDArray[np.float64]:
        """Column-stochastic one-step transition matrix exp(G * dt)."""
        if dt <= 0:
            raise InputError("dt must be positive")
        Z = self._trans_cache.get(dt)
        if Z is None:
            Z = expm(self.generator * dt)
            Z = np.clip(Z, 0.0, None)
            Z /= Z.sum(axis=0, keepdims=True)
            Z.setflags(write=False)
            self._trans_cache[dt] = Z
        return Z

    def stationary_distribution(self) -> NDArray[np.float64]:
        """Stationary distribution of the chain, solving G p = 0, sum p = 1."""
        m = self.n_states
        A = np.vstack([self.generator, np.ones(m)])
        b = np.zeros(m + 1)
        b[-1] = 1.0
        p, *_ = np.linalg.lstsq(A, b, rcond=None)
        p = np.clip(p, 0.0, None)
        return p / p.sum()

    def to_dict(self) -> dict:
        return {
            "n_assets": self.n_assets,
            "n_states": self.n_states,
            "growth": self.growth.tolist(),
            "covariance": self.covariance.tolist(),
            "generator": self.generator.tolist(),
            "prior": self.prior.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        required = {"n_assets", "n_states", "growth", "covariance", "generator", "prior"}
        missing = required - set(d)
        if missing:
            raise InputError(f"model document missing fields: {sorted(missing)}")
        model = cls(d["growth"], d["covariance"], d["generator"], d["prior"])
        if model.n_assets != d["n_assets"] or model.n_states != d["n_states"]:
            raise InputError("declared n_assets/n_states do not match array shapes")
        return model

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "HmmModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self):  # pragma: no cover
        return f"HmmModel(n_assets={self.n_assets}, n_states={self.n_states})"


class PricePath:
    """A simulated or observed grid of log prices.

    ``times`` and ``log_prices`` carry T+1 rows; ``states`` (simulated
    paths only) holds the realized chain, one state per grid point, with
    increment k emitted by ``states[k-1]``.
    """

    def __init__(self, times, log_prices, states=None):
        times = np.asarray(times, dtype=np.float64)
        log_prices = np.atleast_2d(np.asarray(log_prices, dtype=np.float64))
        if times.ndim != 1 or len(times) != log_prices.shape[0]:
            raise InputError("times and log_prices must have the same number of rows")
        if len(times) < 2:
            raise InputError("a path needs at least two grid points")
        dts = np.diff(times)
        if np.any(dts <= 0):
            raise InputError("times must be strictly increasing")
        if np.any(np.abs(dts - dts[0]) > 1e-12):
            raise InputError("times must be uniformly spaced")
        if not np.all(np.isfinite(log_prices)):
            raise InputError("log_prices contain non-finite entries")
        self.times = times
        self.log_prices = log_prices
        self.dt = float(dts[0])
        if states is not None:
            states = np.asarray(states, dtype=np.int64)
            if states.shape != (len(times),):
                raise InputError("states must carry one entry per grid point")
        self.states = states

    @property
    def n_assets(self) -> int:
        return self.log_prices.shape[1]

    @property
    def n_steps(self) -> int:
        return self.log_prices.shape[0] - 1

    def increments(self) -> NDArray[np.float64]:
        """Per-step log-price increments, shape (n_steps, n_assets)."""
        return np.diff(self.log_prices, axis=0)

    def to_csv(self, path) -> None:
        header = ["t"] + [f"asset_{i + 1}" for i in range(self.n_assets)]
        cols = [self.times[:, None], self.log_prices]
        fmt = ["%.17g"] * (1 + self.n_assets)
        if self.states is not None:
            header.append("state")
            cols.append(self.states[:, None].astype(np.float64))
            fmt.append("%d")
        data = np.hstack(cols)
        np.savetxt(path, data, delimiter=",", header=",".join(header),
                   comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path) -> "PricePath":
        import pandas as pd

        df = pd.read_csv(path, float_precision="round_trip")
        if "t" not in df.columns:
            raise InputError("path CSV must have a 't' column")
        asset_cols = [c for c in df.columns if c.startswith("asset_")]
        if not asset_cols:
            raise InputError("path CSV must have asset_1..asset_n columns")
        states = df["state"].to_numpy() if "state" in df.columns else None
        return cls(df["t"].to_numpy(), df[asset_cols].to_numpy(), states)


def simulate_states(model: HmmModel, horizon_steps: int, dt: float,
                    rng: np.random.Generator) -> NDArray[np.int64]:
    """Draw a chain path on the grid: one state per grid point, T+1 total."""
    Z = model.transition_matrix(dt)
    cum = np.cumsum(Z, axis=0)  # column i: CDF of next state given i
    u = rng.random(horizon_steps + 1)
    states = np.empty(horizon_steps + 1, dtype=np.int64)
    states[0] = np.searchsorted(np.cumsum(model.prior), u[0], side="right")
    states[0] = min(states[0], model.n_states - 1)
    for k in range(1, horizon_steps + 1):
        s = np.searchsorted(cum[:, states[k - 1]], u[k], side="right")
        states[k] = min(s, model.n_states - 1)
    return states


def simulate_path(model: HmmModel, horizon_steps: int, dt: float = TRADING_DT,
                  seed: int = 0, x0=None) -> PricePath:
    """Simulate a log-price path of ``horizon_steps`` increments.

    States switch only at grid points; the increment over (t_{k-1}, t_k]
    is Gaussian with mean ``dt * growth[states[k-1]]`` and covariance
    ``dt * covariance``.  Seeded runs are bit-reproducible.
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    if horizon_steps < 1:
        raise InputError("horizon_steps must be >= 1")
    rng = np.random.default_rng(seed)
    states = simulate_states(model, horizon_steps, dt, rng)
    noise = rng.standard_normal((horizon_steps, model.n_assets)) @ model._chol.T
    incs = dt * model.growth[states[:-1]] + np.sqrt(dt) * noise
    log_prices = np.empty((horizon_steps + 1, model.n_assets))
    log_prices[0] = 0.0 if x0 is None else np.asarray(x0, dtype=np.float64)
    np.cumsum(incs, axis=0, out=log_prices[1:])
    log_prices[1:] += log_prices[0]
    times = dt * np.arange(horizon_steps + 1)
    return PricePath(times, log_prices, states)
