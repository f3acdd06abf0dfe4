"""Independent reference implementations used to pin expected values.

These are written for transparency, not speed: explicit loops, direct
density formulas and plain matrix inverses.  They deliberately share no
code with the package under test.
"""

import itertools

import numpy as np
from scipy.linalg import expm


def random_spd(rng, n, scale=1.0):
    """Well-conditioned random symmetric positive definite matrix."""
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + np.eye(n))


def random_generator(rng, m, max_rate=20.0):
    """Random valid generator: nonnegative off-diagonals, columns sum to zero."""
    G = rng.uniform(0.1, max_rate, size=(m, m))
    np.fill_diagonal(G, 0.0)
    G[np.diag_indices(m)] = -G.sum(axis=0)
    return G


def random_simplex(rng, m):
    p = rng.uniform(0.1, 1.0, size=m)
    return p / p.sum()


def brute_force_filter(growth, covariance, generator, prior, increments, dt):
    """Exact discrete Bayes filter, one explicit loop per quantity.

    The state generating increment k is the chain state at the left grid
    point; each step corrects the current state distribution with the full
    Gaussian density of the observed increment and then propagates it with
    exp(generator * dt).  Returns (T, m) posteriors and the total
    log-likelihood.
    """
    growth = np.asarray(growth, dtype=float)
    covariance = np.asarray(covariance, dtype=float)
    prior = np.asarray(prior, dtype=float)
    m, n = growth.shape
    Z = expm(np.asarray(generator, dtype=float) * dt)  # Z[j, i] = P(i -> j)
    inv = np.linalg.inv(covariance * dt)
    det = np.linalg.det(covariance * dt)
    const = 1.0 / np.sqrt((2.0 * np.pi) ** n * det)

    p = prior.copy()
    out = np.empty((len(increments), m))
    loglik = 0.0
    for k, r in enumerate(np.atleast_2d(increments)):
        w = np.empty(m)
        for j in range(m):
            d = r - dt * growth[j]
            w[j] = p[j] * const * np.exp(-0.5 * d @ inv @ d)
        total = w.sum()
        loglik += np.log(total)
        w = w / total
        pnew = np.zeros(m)
        for j in range(m):
            for i in range(m):
                pnew[j] += Z[j, i] * w[i]
        out[k] = pnew
        p = pnew
    return out, loglik


def gaussian_log_density(x, mean, cov):
    """Plain multivariate normal log density."""
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(mean, dtype=float)
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (len(d) * np.log(2.0 * np.pi) + logdet + d @ inv @ d)


def exhaustive_viterbi(increments, means, cov, Z_row, pi):
    """Most probable path by scoring every one of m^T candidates.

    ``Z_row`` is row-stochastic (Z[j, k] = P(j -> k)); ``means``/``cov``
    are per-step scale.  Ties resolve to the first (lexicographically
    smallest) path encountered.
    """
    x = np.atleast_2d(np.asarray(increments, dtype=float))
    T = x.shape[0]
    m = len(pi)
    log_phi = np.array([[gaussian_log_density(x[t], means[j], cov)
                         for j in range(m)] for t in range(T)])
    with np.errstate(divide="ignore"):
        logZ = np.log(np.asarray(Z_row, dtype=float))
        logpi = np.log(np.asarray(pi, dtype=float))
    best_path, best_score = None, -np.inf
    for path in itertools.product(range(m), repeat=T):
        score = logpi[path[0]] + log_phi[0, path[0]]
        for t in range(1, T):
            score += logZ[path[t - 1], path[t]] + log_phi[t, path[t]]
        if score > best_score:
            best_score, best_path = score, path
    return np.array(best_path, dtype=np.int64), best_score
