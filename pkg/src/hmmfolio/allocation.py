"""Closed-form optimal portfolios under tracking and absolute-risk penalties.

The core object is the fully-invested portfolio maximizing the pointwise
linear-quadratic objective ``-1/2 pi' A pi + pi' B`` subject to
``1' pi = 1``, where

    A = zeta0 * Sigma + zeta1 * Omega + zeta2 * Q
    B = zeta0 * alpha + zeta1 * Omega @ eta

with ``alpha = gamma + diag(Sigma) / 2`` the instantaneous rate of return.
Special cases: the growth optimal portfolio (zeta1 = zeta2 = 0) and the
minimum quadratic variation portfolio (zeta0 = zeta1 = 0, Q = Sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .errors import DecompositionUnavailableError, InputError, SingularPenaltyError

Array = NDArray[np.float64]


# ---------------------------------------------------------------------------
# benchmark rules and preference specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PortfolioRule:
    """Benchmark portfolio rule: equal-weight, market-weight (price
    proportional) or a fixed weight vector summing to one."""

    kind: str = "equal_weight"
    weights: tuple[float, ...] | None = None

    _KINDS = ("equal_weight", "market_weight", "fixed")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InputError(f"unknown portfolio rule {self.kind!r}")
        if self.kind == "fixed":
            if self.weights is None:
                raise InputError("fixed rule requires weights")
            w = np.asarray(self.weights, dtype=np.float64)
            if abs(w.sum() - 1.0) > 1e-12:
                raise InputError("fixed weights must sum to one")

    def evaluate(self, n_assets: int, prices: Array | None = None) -> Array:
        """Weights for the current instant; market weights need prices."""
        if self.kind == "equal_weight":
            return np.full(n_assets, 1.0 / n_assets)
        if self.kind == "market_weight":
            if prices is None:
                raise InputError("market_weight rule requires current prices")
            p = np.asarray(prices, dtype=np.float64)
            return p / p.sum()
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != n_assets:
            raise InputError("fixed weights have wrong length")
        return w

    @classmethod
    def from_config(cls, spec) -> "PortfolioRule":
        if isinstance(spec, str):
            name = spec.replace("-", "_")
            if name in ("equal", "equal_weight"):
                return cls("equal_weight")
            if name in ("market", "market_weight"):
                return cls("market_weight")
            raise InputError(f"unknown benchmark rule {spec!r}")
        return cls("fixed", tuple(float(x) for x in spec))


EQUAL_WEIGHT = PortfolioRule("equal_weight")


@dataclass(frozen=True, eq=False)
class PreferenceSpec:
    """Subjective preference weights and penalty-matrix choices.

    ``omega`` is one of ``"covariance"``, ``"identity"`` or an SPD matrix;
    ``q`` additionally allows ``("diagonal", weights)``.  ``zeta1`` and
    ``zeta2`` may be scalars or per-step sequences (the closed form is
    pointwise in time).
    """

    zeta0: float = 1.0
    zeta1: float | Array = 0.0
    zeta2: float | Array = 0.0
    omega: object = "covariance"
    q: object = "covariance"
    tracking_benchmark: PortfolioRule = EQUAL_WEIGHT
    performance_benchmark: PortfolioRule = EQUAL_WEIGHT

    def __post_init__(self):
        zs = (self.zeta0, np.min(self.zeta1), np.min(self.zeta2))
        if any(np.asarray(z) < 0 for z in zs):
            raise InputError("preference weights must be nonnegative")
        if self.zeta0 == 0 and np.max(self.zeta1) == 0 and np.max(self.zeta2) == 0:
            raise InputError("at least one preference weight must be positive")

    def zetas_at(self, t: int) -> tuple[float, float, float]:
        z1 = self.zeta1 if np.isscalar(self.zeta1) else float(np.asarray(self.zeta1)[t])
        z2 = self.zeta2 if np.isscalar(self.zeta2) else float(np.asarray(self.zeta2)[t])
        return float(self.zeta0), float(z1), float(z2)

    def with_zetas(self, zeta0, zeta1, zeta2) -> "PreferenceSpec":
        return PreferenceSpec(zeta0, zeta1, zeta2, self.omega, self.q,
                              self.tracking_benchmark, self.performance_benchmark)

    @classmethod
    def from_config(cls, cfg: dict) -> "PreferenceSpec":
        known = {"zeta0", "zeta1", "zeta2", "omega", "q", "tracking", "performance"}
        unknown = set(cfg) - known
        if unknown:
            raise InputError(f"unknown preference fields: {sorted(unknown)}")

        def matrix_choice(v, allow_diagonal):
            if isinstance(v, str):
                if v not in ("covariance", "identity"):
                    raise InputError(f"unknown penalty matrix choice {v!r}")
                return v
            if isinstance(v, dict):
                if allow_diagonal and set(v) == {"diagonal"}:
                    return ("diagonal", np.asarray(v["diagonal"], dtype=np.float64))
                raise InputError(f"unknown penalty matrix choice {v!r}")
            return np.asarray(v, dtype=np.float64)

        return cls(
            zeta0=float(cfg.get("zeta0", 1.0)),
            zeta1=float(cfg.get("zeta1", 0.0)),
            zeta2=float(cfg.get("zeta2", 0.0)),
            omega=matrix_choice(cfg.get("omega", "covariance"), False),
            q=matrix_choice(cfg.get("q", "covariance"), True),
            tracking_benchmark=PortfolioRule.from_config(cfg.get("tracking", "equal_weight")),
            performance_benchmark=PortfolioRule.from_config(cfg.get("performance", "equal_weight")),
        )


def resolve_penalty(choice, sigma: Array) -> Array:
    """Materialize a penalty-matrix choice against the covariance estimate."""
    n = sigma.shape[0]
    if isinstance(choice, str):
        if choice == "covariance":
            return sigma
        if choice == "identity":
            return np.eye(n)
        raise InputError(f"unknown penalty matrix choice {choice!r}")
    if isinstance(choice, tuple) and choice[0] == "diagonal":
        w = np.asarray(choice[1], dtype=np.float64)
        if w.shape != (n,) or np.any(w <= 0):
            raise InputError("diagonal penalty weights must be positive, length n")
        return np.diag(w)
    mat = np.asarray(choice, dtype=np.float64)
    if mat.shape != (n, n):
        raise InputError(f"penalty matrix must be {n}x{n}")
    return mat


# ---------------------------------------------------------------------------
# closed-form solutions
# ---------------------------------------------------------------------------

def _constrained_solution(A: Array, B: Array) -> Array:
    """pi = A^{-1} [ (1 - 1'A^{-1}B) / (1'A^{-1}1) * 1 + B ] via Cholesky."""
    try:
        cf = cho_factor(A)
    except np.linalg.LinAlgError:
        raise SingularPenaltyError("penalty-weighted matrix A is not positive definite") from None
    ones = np.ones(len(B))
    x1 = cho_solve(cf, ones)
    xB = cho_solve(cf, B)
    lam = (1.0 - ones @ xB) / (ones @ x1)
    return lam * x1 + xB


def _rate(gamma_hat: Array, sigma_hat: Array, rate_convention: str) -> Array:
    if rate_convention == "alpha":
        return gamma_hat + 0.5 * np.diag(sigma_hat)
    if rate_convention == "gamma":
        return gamma_hat
    raise InputError("rate_convention must be 'alpha' or 'gamma'")


def build_ab(gamma_hat, sigma_hat, prefs: PreferenceSpec, eta,
             t: int = 0, rate_convention: str = "alpha") -> tuple[Array, Array]:
    """The (A, B) pair of the pointwise linear-quadratic objective."""
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64)
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    z0, z1, z2 = prefs.zetas_at(t)
    omega = resolve_penalty(prefs.omega, sigma_hat)
    q = resolve_penalty(prefs.q, sigma_hat)
    A = z0 * sigma_hat + z1 * omega + z2 * q
    B = z0 * _rate(gamma_hat, sigma_hat, rate_convention) + z1 * (omega @ eta)
    return A, B


def optimal_portfolio(gamma_hat, sigma_hat, prefs: PreferenceSpec, eta,
                      t: int = 0, rate_convention: str = "alpha") -> Array:
    """Optimal fully-invested weights for projected growth ``gamma_hat``,
    covariance estimate ``sigma_hat`` and tracking benchmark ``eta``."""
    A, B = build_ab(gamma_hat, sigma_hat, prefs, eta, t, rate_convention)
    return _constrained_solution(A, B)


def mqp(sigma_hat) -> Array:
    """Minimum quadratic variation portfolio Sigma^{-1} 1 / (1' Sigma^{-1} 1)."""
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    try:
        cf = cho_factor(sigma_hat)
    except np.linalg.LinAlgError:
        raise SingularPenaltyError("covariance is not positive definite") from None
    x1 = cho_solve(cf, np.ones(sigma_hat.shape[0]))
    return x1 / x1.sum()


def gop(gamma_hat, sigma_hat, rate_convention: str = "alpha") -> Array:
    """Growth optimal portfolio (1 - 1'S^{-1}a) * MQP + S^{-1}a.

    With ``rate_convention="gamma"`` the first argument is used as the
    rate of return directly (no diag(Sigma)/2 adjustment).
    """
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64)
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    alpha = _rate(gamma_hat, sigma_hat, rate_convention)
    try:
        cf = cho_factor(sigma_hat)
    except np.linalg.LinAlgError:
        raise SingularPenaltyError("covariance is not positive definite") from None
    xa = cho_solve(cf, alpha)
    return (1.0 - xa.sum()) * mqp(sigma_hat) + xa


def decompose(gamma_hat, sigma_hat, prefs: PreferenceSpec, eta, t: int = 0):
    """Split the optimal portfolio into GOP / benchmark / MQP components.

    Valid only when both penalty matrices equal the covariance.  Returns
    ``(c, components)`` where ``c = (c0, c1, c2)`` are the convex weights
    and ``components`` stacks the three sub-portfolios.
    """
    if not (prefs.omega == "covariance" and prefs.q == "covariance"):
        raise DecompositionUnavailableError(
            "decomposition requires omega and q set to the covariance")
    z0, z1, z2 = prefs.zetas_at(t)
    total = z0 + z1 + z2
    c = np.array([z0, z1, z2]) / total
    eta = np.asarray(eta, dtype=np.float64)
    comps = np.vstack([gop(gamma_hat, sigma_hat), eta, mqp(sigma_hat)])
    return c, comps


def posterior_average_portfolio(posterior, per_state_b, A) -> Array:
    """Posterior mean of per-state optimal portfolios.

    ``per_state_b`` stacks the m per-state B vectors; the result equals
    the closed form evaluated at the posterior-averaged B, by linearity.
    """
    posterior = np.asarray(posterior, dtype=np.float64)
    per_state_b = np.atleast_2d(np.asarray(per_state_b, dtype=np.float64))
    if abs(posterior.sum() - 1.0) > 1e-10 or np.any(posterior < -1e-12):
        raise InputError("posterior must lie on the probability simplex")
    A = np.asarray(A, dtype=np.float64)
    per_state = np.vstack([_constrained_solution(A, b) for b in per_state_b])
    return posterior @ per_state


def modified_market(gamma_hat, sigma, prefs: PreferenceSpec, eta,
                    t: int = 0) -> tuple[Array, Array]:
    """Rate/covariance pair (alpha*, Sigma*) whose growth optimal portfolio
    reproduces the penalized optimum: alpha* = B and Sigma* = A."""
    A, B = build_ab(gamma_hat, sigma, prefs, eta, t, "alpha")
    return B, A


# ---------------------------------------------------------------------------
# vectorized allocation along a posterior path
# ---------------------------------------------------------------------------

def optimal_portfolio_path(gamma_hat_path, sigma_hat, prefs: PreferenceSpec,
                           eta, rate_convention: str = "alpha") -> Array:
    """Closed-form weights for every row of a projected-growth path.

    With scalar preference weights the map gamma_hat -> pi is affine with
    fixed coefficient matrices, so the whole path is a couple of matrix
    products; per-step zetas fall back to the pointwise solver.
    """
    G = np.atleast_2d(np.asarray(gamma_hat_path, dtype=np.float64))
    if not (np.isscalar(prefs.zeta1) and np.isscalar(prefs.zeta2)):
        return np.vstack([
            optimal_portfolio(g, sigma_hat, prefs, eta, t, rate_convention)
            for t, g in enumerate(G)
        ])
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    z0, z1, z2 = prefs.zetas_at(0)
    omega = resolve_penalty(prefs.omega, sigma_hat)
    q = resolve_penalty(prefs.q, sigma_hat)
    A = z0 * sigma_hat + z1 * omega + z2 * q
    const = z1 * (omega @ eta)
    if rate_convention == "alpha":
        const = const + z0 * 0.5 * np.diag(sigma_hat)
    elif rate_convention != "gamma":
        raise InputError("rate_convention must be 'alpha' or 'gamma'")
    B = z0 * G + const  # (T, n)
    try:
        cf = cho_factor(A)
    except np.linalg.LinAlgError:
        raise SingularPenaltyError("penalty-weighted matrix A is not positive definite") from None
    ones = np.ones(G.shape[1])
    x1 = cho_solve(cf, ones)
    xB = cho_solve(cf, B.T).T  # (T, n)
    lam = (1.0 - xB @ ones) / (ones @ x1)  # (T,)
    return lam[:, None] * x1[None, :] + xB


# ---------------------------------------------------------------------------
# performance criterion
# ---------------------------------------------------------------------------

def portfolio_growth_rate(weights, gamma, sigma) -> Array:
    """Pointwise portfolio growth rate pi'gamma + (pi'diag(Sigma) - pi'Sigma pi)/2."""
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    excess = 0.5 * (W @ np.diag(sigma) - np.einsum("ti,ij,tj->t", W, sigma, W))
    return np.einsum("ti,ti->t", W, G) + excess


def performance_criterion(weights_path, rho_path, eta_path, gamma_hat_path,
                          sigma, prefs: PreferenceSpec, dt: float) -> float:
    """Discretized running objective of a weight path against its benchmarks.

    Riemann sum of ``zeta0 (growth(pi) - growth(rho))`` minus the tracking
    and absolute quadratic penalties, using the projected growth path.
    Used by tests and preference-calibration diagnostics only.
    """
    W = np.atleast_2d(np.asarray(weights_path, dtype=np.float64))
    R = np.atleast_2d(np.asarray(rho_path, dtype=np.float64))
    E = np.atleast_2d(np.asarray(eta_path, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gamma_hat_path, dtype=np.float64))
    if not (W.shape == R.shape == E.shape == G.shape):
        raise InputError("weight, benchmark and growth paths must share a shape")
    sigma = np.asarray(sigma, dtype=np.float64)
    omega = resolve_penalty(prefs.omega, sigma)
    q = resolve_penalty(prefs.q, sigma)
    T = W.shape[0]
    z0 = prefs.zeta0
    z1 = prefs.zeta1 if np.isscalar(prefs.zeta1) else np.asarray(prefs.zeta1)
    z2 = prefs.zeta2 if np.isscalar(prefs.zeta2) else np.asarray(prefs.zeta2)
    if not np.isscalar(z1) and len(z1) != T:
        raise InputError("per-step zeta1 must match the path length")
    if not np.isscalar(z2) and len(z2) != T:
        raise InputError("per-step zeta2 must match the path length")
    d = W - E
    track = np.einsum("ti,ij,tj->t", d, omega, d)
    absr = np.einsum("ti,ij,tj->t", W, q, W)
    growth_diff = portfolio_growth_rate(W, G, sigma) - portfolio_growth_rate(R, G, sigma)
    integrand = z0 * growth_diff - 0.5 * z1 * track - 0.5 * z2 * absr
    return float(np.sum(integrand) * dt)
