"""Maximum-likelihood estimation of the regime-switching market model.

Baum-Welch EM with Gaussian emissions sharing one covariance matrix
across states, multi-restart initialization from an independent mixture
fit, Viterbi decoding, AIC/BIC/ICL state-count selection and recovery of
the continuous-time generator nearest (in Frobenius norm) to a fitted
discrete transition matrix.

EM operates on per-step increments; a fitted model's growth rates and
covariance are converted to per-year units at the boundary via dt.
Inside this module the transition matrix ``Z`` is row-stochastic
(``Z[j, k] = P(j -> k)``); the column-stochastic convention of
:mod:`hmmfolio.market` is obtained by transposition.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm, logm, solve_triangular
from scipy.optimize import minimize

from .errors import EstimationError, GeneratorFitError, InputError
from .market import HmmModel

Array = NDArray[np.float64]

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class EmConfig:
    n_states: int
    dt: float = 1.0 / 252.0
    max_iters: int = 1000
    tol: float = 1e-8
    n_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.max_iters < 1 or self.n_restarts < 1:
            raise InputError("n_states, max_iters and n_restarts must be >= 1")
        if self.tol <= 0 or self.dt <= 0:
            raise InputError("tol and dt must be positive")


@dataclass
class EmResult:
    """Fitted parameter set plus E-step byproducts.

    ``transition`` is the row-stochastic discrete matrix estimated by EM;
    ``model.generator`` is recovered from it through
    :func:`nearest_generator`.  ``smoothed`` holds the per-step state
    posteriors a(theta) and ``loglik_trace`` the (non-decreasing)
    likelihood across iterations of the winning restart.
    """

    model: HmmModel
    transition: Array
    log_likelihood: float
    n_iters: int
    smoothed: Array
    viterbi_path: NDArray[np.int64]
    loglik_trace: list[float] = field(default_factory=list)
    generator_objective: float = 0.0


# ---------------------------------------------------------------------------
# E-step: scaled forward-backward
# ---------------------------------------------------------------------------

def _log_emissions(x: Array, means: Array, cov: Array) -> Array:
    """(T, m) log Gaussian densities of per-step increments."""
    n = x.shape[1]
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = np.empty((x.shape[0], means.shape[0]))
    for k, mu in enumerate(means):
        y = solve_triangular(chol, (x - mu).T, lower=True)
        out[:, k] = -0.5 * (n * _LOG2PI + logdet + np.einsum("it,it->t", y, y))
    return out


def forward_backward(log_phi: Array, Z: Array, pi: Array):
    """Scaled forward-backward pass.

    Returns (smoothed, xi_sum, loglik) where ``smoothed[n, k] = a(theta_nk)``
    and ``xi_sum[j, k]`` is the b-sum over transitions j -> k.
    """
    T, m = log_phi.shape
    shift = log_phi.max(axis=1)
    phi = np.exp(log_phi - shift[:, None])
    alpha = np.empty((T, m))
    C = np.empty(T)
    a = pi * phi[0]
    C[0] = a.sum()
    if not (np.isfinite(C[0]) and C[0] > 0):
        raise EstimationError("forward pass degenerated at the first step")
    alpha[0] = a / C[0]
    for t in range(1, T):
        a = phi[t] * (alpha[t - 1] @ Z)
        C[t] = a.sum()
        if not (np.isfinite(C[t]) and C[t] > 0):
            raise EstimationError(f"forward pass degenerated at step {t}")
        alpha[t] = a / C[t]
    beta = np.empty((T, m))
    beta[-1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[t] = (Z @ (phi[t + 1] * beta[t + 1])) / C[t + 1]
    loglik = float(np.log(C).sum() + shift.sum())
    smoothed = alpha * beta
    smoothed /= smoothed.sum(axis=1, keepdims=True)
    xi_sum = Z * (alpha[:-1].T @ (phi[1:] * beta[1:] / C[1:, None]))
    return smoothed, xi_sum, loglik


def forward_loglik(x: Array, means: Array, cov: Array, Z: Array, pi: Array) -> float:
    """Likelihood of per-step increments under a discrete HMM (forward pass only)."""
    log_phi = _log_emissions(x, means, cov)
    T, m = log_phi.shape
    shift = log_phi.max(axis=1)
    phi = np.exp(log_phi - shift[:, None])
    a = pi * phi[0]
    total = np.log(a.sum())
    a /= a.sum()
    for t in range(1, T):
        a = phi[t] * (a @ Z)
        s = a.sum()
        total += np.log(s)
        a /= s
    return float(total + shift.sum())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_strategy(returns, m: int, seed: int = 0, dt: float = 1.0 / 252.0):
    """Initial parameters from an independent mixture fit.

    Fits an m-component Gaussian mixture with shared covariance (no
    temporal coupling), seeds the per-state means and weights from it,
    takes the empirical covariance, and a sticky transition matrix with
    0.95 on the diagonal.  Returns per-step-scale (means, cov, Z, pi).
    """
    x = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    T, n = x.shape
    if T <= m:
        raise InputError("need more observations than states")
    cov = np.cov(x, rowvar=False, bias=True).reshape(n, n)
    cov = _regularize(cov)
    if m == 1:
        means = x.mean(axis=0)[None, :]
        return means, cov, np.ones((1, 1)), np.ones(1)

    from sklearn.mixture import GaussianMixture

    rng = np.random.default_rng(seed)
    data = x
    for attempt in range(5):
        gm = GaussianMixture(n_components=m, covariance_type="tied",
                             n_init=1, reg_covar=1e-10,
                             random_state=int(rng.integers(2**31 - 1)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            gm.fit(data)
        means = gm.means_
        weights = gm.weights_
        ok = (np.all(np.isfinite(means)) and np.all(weights > 1e-8)
              and np.all(np.isfinite(weights)))
        if ok:
            break
        # degenerate clustering: jitter the data slightly and retry
        scale = np.sqrt(np.diag(cov)) * 1e-3
        data = x + rng.standard_normal(x.shape) * scale
    else:
        raise EstimationError("mixture initialization degenerated after 5 retries")
    weights = np.clip(weights, 1e-8, None)
    weights /= weights.sum()
    Z = np.full((m, m), 0.05 / (m - 1))
    np.fill_diagonal(Z, 0.95)
    return means, cov, Z, weights


def _regularize(cov: Array) -> Array:
    """Nudge a covariance back to positive definiteness if Cholesky fails."""
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        pass
    n = cov.shape[0]
    bump = max(np.trace(cov), 1e-300) / n * 1e-10
    for _ in range(30):
        cov = cov + bump * np.eye(n)
        try:
            np.linalg.cholesky(cov)
            warnings.warn("covariance update lost positive definiteness; regularized")
            return cov
        except np.linalg.LinAlgError:
            bump *= 10.0
    raise EstimationError("covariance irreparably singular")


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------

def _em_single(x: Array, means, cov, Z, pi, max_iters: int, tol: float):
    """One EM run from given per-step-scale initial parameters."""
    trace: list[float] = []
    T = x.shape[0]
    prev = -np.inf
    for it in range(max_iters):
        log_phi = _log_emissions(x, means, cov)
        smoothed, xi_sum, loglik = forward_backward(log_phi, Z, pi)
        if not np.isfinite(loglik):
            raise EstimationError("non-finite likelihood in EM")
        trace.append(loglik)
        # M-step (Gaussian emissions, shared covariance)
        Nk = smoothed.sum(axis=0)
        means = (smoothed.T @ x) / Nk[:, None]
        cov_new = np.zeros_like(cov)
        for k in range(means.shape[0]):
            d = x - means[k]
            cov_new += (smoothed[:, k, None] * d).T @ d
        cov = _regularize(cov_new / T)
        denom = xi_sum.sum(axis=1, keepdims=True)
        if np.any(denom <= 0):
            raise EstimationError("a state received zero transition mass")
        Z = xi_sum / denom
        pi = smoothed[0] / smoothed[0].sum()
        if it > 0 and loglik - prev < tol * max(1.0, abs(loglik)):
            break
        prev = loglik
    smoothed, _, final_ll = forward_backward(_log_emissions(x, means, cov), Z, pi)
    trace.append(final_ll)
    return means, cov, Z, pi, smoothed, trace


def _canonical_order(means: Array):
    """Permutation sorting states ascending by average per-step growth."""
    return np.argsort(means.mean(axis=1), kind="stable")


def em_fit(returns, config: EmConfig, fit_generator: bool = True) -> EmResult:
    """Best-of-restarts EM fit of the hidden-Markov market model.

    ``returns`` are per-step log-price increments, shape (T, n).  States
    of the returned model are sorted ascending by average growth rate.
    """
    x = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise InputError("returns contain non-finite entries")
    T, n = x.shape
    m = config.n_states
    if T <= m:
        raise InputError("need more observations than states")

    best = None
    n_restarts = 1 if m == 1 else config.n_restarts
    for r in range(n_restarts):
        try:
            init = init_strategy(x, m, seed=config.seed + 1000 * r, dt=config.dt)
            fit = _em_single(x, *init, config.max_iters, config.tol)
        except EstimationError:
            continue
        if best is None or fit[5][-1] > best[5][-1]:
            best = fit
    if best is None:
        raise EstimationError("all EM restarts failed")
    means, cov, Z, pi, smoothed, trace = best

    order = _canonical_order(means)
    means = means[order]
    Z = Z[np.ix_(order, order)]
    pi = pi[order]
    smoothed = smoothed[:, order]

    vpath = viterbi_from_params(x, means, cov, Z, pi)

    dt = config.dt
    if fit_generator and m > 1:
        G, gen_obj = nearest_generator(Z.T, dt)
    else:
        G, gen_obj = np.zeros((m, m)), 0.0
    model = HmmModel(growth=means / dt, covariance=cov / dt, generator=G, prior=pi)
    return EmResult(
        model=model,
        transition=Z,
        log_likelihood=trace[-1],
        n_iters=len(trace) - 1,
        smoothed=smoothed,
        viterbi_path=vpath,
        loglik_trace=trace,
        generator_objective=gen_obj,
    )


# ---------------------------------------------------------------------------
# Viterbi decoding
# ---------------------------------------------------------------------------

def viterbi_from_params(x: Array, means: Array, cov: Array, Z: Array,
                        pi: Array) -> NDArray[np.int64]:
    """Most probable state path, log-space dynamic program.

    Ties in the backtracking argmax resolve to the lowest state index.
    """
    log_phi = _log_emissions(x, means, cov)
    T, m = log_phi.shape
    with np.errstate(divide="ignore"):
        logZ = np.log(Z)
        logpi = np.log(pi)
    delta = logpi + log_phi[0]
    back = np.zeros((T, m), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + logZ  # cand[j, k]: best-so-far ending j, then j->k
        back[t] = np.argmax(cand, axis=0)  # first max = lowest index
        delta = cand[back[t], np.arange(m)] + log_phi[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def viterbi(returns, fitted, dt: float | None = None) -> NDArray[np.int64]:
    """Viterbi path for per-step increments under an EmResult or HmmModel."""
    x = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    if isinstance(fitted, EmResult):
        if dt is None:
            raise InputError("dt is required (per-year rates must be rescaled)")
        model = fitted.model
        Z = fitted.transition
    elif isinstance(fitted, HmmModel):
        if dt is None:
            raise InputError("dt is required with a raw HmmModel")
        model = fitted
        Z = model.transition_matrix(dt).T
    else:
        raise InputError("fitted must be an EmResult or HmmModel")
    return viterbi_from_params(x, model.growth * dt, model.covariance * dt,
                               Z, model.prior)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

def n_free_parameters(m: int, n: int) -> int:
    """Free parameters: m*n growth entries, n(n+1)/2 covariance entries,
    m(m-1) transition entries and m-1 initial probabilities."""
    return m * n + n * (n + 1) // 2 + m * (m - 1) + (m - 1)


def information_criteria(result: EmResult, n_obs: int) -> dict[str, float]:
    m = result.model.n_states
    n = result.model.n_assets
    k = n_free_parameters(m, n)
    ll = result.log_likelihood
    aic = -2.0 * ll + 2.0 * k
    bic = -2.0 * ll + k * np.log(n_obs)
    a = result.smoothed
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(a > 0, a * np.log(a), 0.0).sum()
    return {"AIC": aic, "BIC": bic, "ICL": bic + 2.0 * ent}


def select_states(returns, candidate_m, config: EmConfig,
                  criteria=("AIC", "BIC", "ICL")):
    """Fit every candidate state count and score it.

    Returns ``(chosen, table, fits)``: the per-criterion minimizing m, a
    score table ``{m: {criterion: value}}`` and the EmResult per m.
    Candidates whose EM fails are excluded with a warning.
    """
    candidate_m = list(candidate_m)
    if not candidate_m:
        raise InputError("candidate_m must be non-empty")
    x = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    table: dict[int, dict[str, float]] = {}
    fits: dict[int, EmResult] = {}
    for m in candidate_m:
        cfg = EmConfig(n_states=m, dt=config.dt, max_iters=config.max_iters,
                       tol=config.tol, n_restarts=config.n_restarts,
                       seed=config.seed)
        try:
            res = em_fit(x, cfg, fit_generator=False)
        except EstimationError as exc:
            warnings.warn(f"EM failed for m={m}: {exc}; candidate excluded")
            continue
        fits[m] = res
        table[m] = information_criteria(res, x.shape[0])
    if not table:
        raise EstimationError("EM failed for every candidate state count")
    chosen = {c: min(table, key=lambda m: table[m][c]) for c in criteria}
    return chosen, table, fits


# ---------------------------------------------------------------------------
# nearest valid generator
# ---------------------------------------------------------------------------

def _build_generator(offdiag: Array, m: int) -> Array:
    G = np.zeros((m, m))
    mask = ~np.eye(m, dtype=bool)
    G[mask] = offdiag
    G[np.diag_indices(m)] = -G.sum(axis=0)
    return G


def _project_log_generator(Z: Array, dt: float) -> Array:
    """Constraint-projected real part of log(Z)/dt (nonneg off-diagonals,
    diagonal reset so columns sum to zero)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        L = np.real(logm(Z)) / dt
    mask = ~np.eye(Z.shape[0], dtype=bool)
    off = np.clip(L[mask], 0.0, None)
    return _build_generator(off, Z.shape[0])


def nearest_generator(Z, dt: float) -> tuple[Array, float]:
    """Valid generator G* minimizing ||Z - exp(G dt)||_F.

    ``Z`` is column-stochastic.  Off-diagonal rates are parameterized as
    exponentials of unconstrained variables and the Frobenius objective is
    minimized by L-BFGS with numerical gradients, starting from the
    constraint-projected matrix logarithm.  Returns (G*, objective).
    """
    Z = np.asarray(Z, dtype=np.float64)
    if dt <= 0:
        raise InputError("dt must be positive")
    m = Z.shape[0]
    if Z.shape != (m, m) or np.any(Z < -1e-10):
        raise InputError("Z must be a nonnegative square matrix")
    if np.any(np.abs(Z.sum(axis=0) - 1.0) > 1e-8):
        raise InputError("Z columns must sum to one (column-stochastic convention)")
    if m == 1:
        return np.zeros((1, 1)), 0.0

    G0 = _project_log_generator(Z, dt)
    obj0 = np.linalg.norm(Z - expm(G0 * dt))
    if obj0 < 1e-10:
        # the projected principal logarithm is already a valid exact solution
        return G0, float(obj0)

    mask = ~np.eye(m, dtype=bool)
    floor = 1e-12

    def objective(u):
        G = _build_generator(np.exp(u), m)
        return np.linalg.norm(Z - expm(G * dt)) ** 2

    u0 = np.log(np.clip(G0[mask], floor, None))
    res = minimize(objective, u0, method="L-BFGS-B",
                   options={"maxiter": 500, "ftol": 1e-16, "gtol": 1e-12})
    G = _build_generator(np.exp(res.x), m)
    obj = np.linalg.norm(Z - expm(G * dt))
    if obj0 < obj:  # optimizer wandered; keep the projection
        G, obj = G0, obj0
    if not np.isfinite(obj):
        raise GeneratorFitError("generator optimization diverged",
                                best_generator=G0, objective=float(obj0))
    return G, float(obj)
