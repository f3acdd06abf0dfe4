"""Online posterior inference for the latent market state.

Implements the stable discretization of the un-normalized state filter:
one step maps P(t) to ``exp(G dt) @ (P * Y)`` where ``Y_j`` collects the
state-dependent part of the Gaussian likelihood of the observed log
return.  Each step is computed in log space, renormalized to sum one, and
the divided-out factor is accumulated so that the running ``log_scale``
is exactly the log-likelihood of the observations seen so far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_solve

from .errors import FilterDegenerateError, InputError
from .market import HmmModel, PricePath

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FilterState:
    """Filter state after a number of observations.

    ``unnormalized`` holds the renormalized state variables P (their scale
    factor lives in ``log_scale``), ``posterior`` the normalized state
    probabilities, ``projected_growth`` the posterior-weighted per-year
    growth vector, and ``log_scale`` the accumulated log-likelihood of all
    increments consumed so far.
    """

    unnormalized: NDArray[np.float64]
    posterior: NDArray[np.float64]
    projected_growth: NDArray[np.float64]
    log_scale: float


def init_filter(model: HmmModel) -> FilterState:
    """Filter state at time zero: the prior, with zero accumulated scale."""
    p = model.prior.copy()
    return FilterState(
        unnormalized=p,
        posterior=p.copy(),
        projected_growth=p @ model.growth,
        log_scale=0.0,
    )


def _log_emission_weights(model: HmmModel, log_return: NDArray[np.float64],
                          dt: float) -> tuple[NDArray[np.float64], float]:
    """Per-state log Gaussian density of one increment, split as
    state-dependent log Y_j plus the state-independent constant."""
    log_y = model._growth_siginv @ log_return - 0.5 * dt * model._growth_quad
    n = model.n_assets
    quad = log_return @ cho_solve(model._cho, log_return)
    const = -0.5 * (n * _LOG2PI + n * np.log(dt) + model._logdet_cov + quad / dt)
    return log_y, const


def filter_step(state: FilterState, model: HmmModel,
                log_return, dt: float) -> FilterState:
    """Advance the filter by one observed log return.

    The emission weight uses the state at the beginning of the step (the
    state that generated the increment), after which the chain is
    propagated by exp(G dt); this is the exact Bayes update of the
    grid-switching model produced by :func:`hmmfolio.market.simulate_path`.
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    r = np.asarray(log_return, dtype=np.float64)
    if r.shape != (model.n_assets,):
        raise InputError(f"log_return must have shape ({model.n_assets},)")
    if not np.all(np.isfinite(r)):
        raise FilterDegenerateError("log_return contains non-finite entries")

    log_y, const = _log_emission_weights(model, r, dt)
    with np.errstate(divide="ignore"):
        logw = np.log(state.unnormalized) + log_y
    shift = np.max(logw)
    if not np.isfinite(shift):
        raise FilterDegenerateError(
            "all emission weights degenerate; observation inconsistent with model scale")
    w = np.exp(logw - shift)
    P = model.transition_matrix(dt) @ w
    total = P.sum()
    if not (np.isfinite(total) and total > 0):
        raise FilterDegenerateError("filter state degenerated to zero mass")
    posterior = P / total
    # the column-stochastic propagator preserves mass, so the divided-out
    # factor equals the one-step predictive likelihood up to `const`
    loglik_inc = shift + np.log(total) + const
    return FilterState(
        unnormalized=posterior,
        posterior=posterior.copy(),
        projected_growth=posterior @ model.growth,
        log_scale=state.log_scale + loglik_inc,
    )


def filter_path(model: HmmModel, path: PricePath | NDArray[np.float64],
                dt: float | None = None) -> tuple[list[FilterState], float]:
    """Run the filter along a whole path.

    Accepts a :class:`PricePath` or a (T, n) array of log-price increments
    (then ``dt`` is required).  Returns one :class:`FilterState` per
    increment plus the total log-likelihood.
    """
    if isinstance(path, PricePath):
        increments = path.increments()
        dt = path.dt
    else:
        increments = np.atleast_2d(np.asarray(path, dtype=np.float64))
        if dt is None:
            raise InputError("dt is required when passing raw increments")
    if increments.shape[0] < 1:
        raise InputError("path must contain at least one increment")
    state = init_filter(model)
    out = []
    for r in increments:
        state = filter_step(state, model, r, dt)
        out.append(state)
    return out, out[-1].log_scale


def posterior_path(model: HmmModel, increments, dt: float) -> NDArray[np.float64]:
    """Posterior trajectory as a (T, m) array; thin wrapper over filter_path."""
    states, _ = filter_path(model, np.asarray(increments, dtype=np.float64), dt)
    return np.array([s.posterior for s in states])


def filter_to_csv(path, states: list[FilterState], dt: float,
                  t0: float = 0.0) -> None:
    """Export a posterior trajectory as CSV:
    ``t, p_1..p_m, gamma_hat_1..gamma_hat_n, loglik_increment``."""
    m = len(states[0].posterior)
    n = len(states[0].projected_growth)
    header = (["t"] + [f"p_{j + 1}" for j in range(m)]
              + [f"gamma_hat_{i + 1}" for i in range(n)] + ["loglik_increment"])
    rows = np.empty((len(states), 1 + m + n + 1))
    prev = 0.0
    for k, s in enumerate(states):
        rows[k, 0] = t0 + (k + 1) * dt
        rows[k, 1:1 + m] = s.posterior
        rows[k, 1 + m:1 + m + n] = s.projected_growth
        rows[k, -1] = s.log_scale - prev
        prev = s.log_scale
    np.savetxt(path, rows, delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
