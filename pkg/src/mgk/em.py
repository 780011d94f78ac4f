"""E-step, M-step and likelihood of queries under a mixture of isotropic keys.

Keys are passed as a sequence of M arrays.  An array of shape ``(N, D)``
gives the component mean paired with each query (row ``i`` is ``k_ir``);
an array of shape ``(D,)`` is one mean shared by every query.  Component
indices are 0-based throughout.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DegenerateRowError, DimensionError, EmptyInputError
from .kernels import default_sigma2


@dataclass(frozen=True)
class Responsibilities:
    """Posterior component probabilities, one row per query."""

    gamma: np.ndarray

    @property
    def counts(self):
        """Soft counts ``N_r = sum_i gamma_ir``."""
        return self.gamma.sum(axis=0)


def _as_array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _prepare(q, keys, sigma2, pi=None):
    q = _as_array(q)
    if q.ndim != 2:
        raise DimensionError(f"queries must be 2-D (N, D), got shape {q.shape}")
    keys = [_as_array(k) for k in keys]
    if not keys:
        raise ConfigurationError("at least one key component is required")
    for k in keys:
        if k.shape not in (q.shape, q.shape[1:]):
            raise DimensionError(f"key shape {k.shape} incompatible with queries {q.shape}")
    sigma2 = np.asarray(sigma2, dtype=np.float64).reshape(-1)
    if sigma2.shape != (len(keys),):
        raise ConfigurationError(f"sigma2 needs {len(keys)} entries, got {sigma2.size}")
    if np.any(sigma2 <= 0):
        raise ConfigurationError(f"sigma2 entries must be positive, got {sigma2}")
    sq = np.stack([((q - k) ** 2).sum(axis=1) for k in keys], axis=1)
    if pi is None:
        return q, sq, sigma2, None
    pi = _as_array(pi).reshape(-1)
    if pi.shape != (len(keys),):
        raise ConfigurationError(f"pi needs {len(keys)} entries, got {pi.size}")
    if np.any(pi < 0) or not pi.sum() > 0:
        raise ConfigurationError(f"mixing weights must be non-negative with positive sum, got {pi}")
    return q, sq, sigma2, pi / pi.sum()


def _log_weights(sq, sigma2, pi):
    with np.errstate(divide="ignore"):
        return np.log(pi)[None, :] - sq / (2.0 * sigma2)[None, :]


def soft_responsibilities(q, keys, pi, sigma2, density=False):
    """Soft E-step: ``gamma_ir`` proportional to ``pi_r exp(-|q_i - k_ir|^2 / 2 sigma2_r)``.

    With ``density=True`` each term also carries the Gaussian normalizer
    ``(2 pi sigma2_r)^(-D/2)``, giving the exact posterior of the density
    that :func:`nll_queries` scores.  The two coincide when all variances
    are equal.
    """
    q, sq, sigma2, pi = _prepare(q, keys, sigma2, pi)
    logw = _log_weights(sq, sigma2, pi)
    if density:
        logw = logw - 0.5 * q.shape[1] * np.log(sigma2)[None, :]
    top = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateRowError("a query has zero mass under every component")
    w = np.exp(logw - top)
    return Responsibilities(w / w.sum(axis=1, keepdims=True))


def hard_assign(q, keys, sigma2):
    """Index of the best component per query, ignoring priors; ties go to the lowest index."""
    _, sq, sigma2, _ = _prepare(q, keys, sigma2)
    return np.argmax(-sq / (2.0 * sigma2)[None, :], axis=1)


def mstep_prior_update(resp):
    """Prior update ``pi_r = N_r / N``."""
    gamma = resp.gamma if isinstance(resp, Responsibilities) else np.asarray(resp, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] == 0:
        raise EmptyInputError("M-step needs at least one responsibility row")
    pi = gamma.sum(axis=0) / gamma.shape[0]
    return pi / pi.sum()


def log_density(q, keys, pi, sigma2):
    """Per-query log-likelihood under the isotropic Gaussian mixture."""
    q, sq, sigma2, pi = _prepare(q, keys, sigma2, pi)
    d = q.shape[1]
    logw = _log_weights(sq, sigma2, pi) - 0.5 * d * np.log(2.0 * np.pi * sigma2)[None, :]
    return logsumexp(logw, axis=1)


def nll_queries(q, keys, pi, sigma2):
    """Mean negative log-likelihood of the queries (per query, not summed)."""
    ll = log_density(q, keys, pi, sigma2)
    if ll.size == 0:
        raise EmptyInputError("NLL of an empty query set")
    return float(-ll.mean())


def em_prior_iterations(q, keys, pi, sigma2, n_iter):
    """Alternate soft E-step and prior M-step with keys held fixed.

    Returns the final priors and the NLL after each iteration (index 0 is
    the starting point).
    """
    pi = np.asarray(pi, dtype=np.float64)
    trace = [nll_queries(q, keys, pi, sigma2)]
    for _ in range(n_iter):
        pi = mstep_prior_update(soft_responsibilities(q, keys, pi, sigma2, density=True))
        trace.append(nll_queries(q, keys, pi, sigma2))
    return pi, np.array(trace)


def _em_fit(q, means, pi, sigma2, max_iter, tol):
    nll = nll_queries(q, list(means), pi, sigma2)
    for _ in range(max_iter):
        gamma = soft_responsibilities(q, list(means), pi, sigma2, density=True).gamma
        counts = gamma.sum(axis=0)
        pi = counts / counts.sum()
        live = counts > 0
        means = means.copy()
        means[live] = (gamma[:, live].T @ q) / counts[live, None]
        new = nll_queries(q, list(means), pi, sigma2)
        done = nll - new <= tol
        nll = new
        if done:
            break
    return means, pi, nll


class GaussianKeyMixture(DensityMixin, BaseEstimator):
    """Mixture of isotropic Gaussians with fixed variances, fitted by EM.

    Used to measure how well M key components explain a set of queries.
    One candidate start nests the ``n_components - 1`` solution (new
    component with zero prior), so the fitted likelihood never falls
    below that of the smaller mixture.

    Parameters
    ----------
    n_components : int, default=2
    sigma2 : sequence of float, optional
        Component variances; defaults to ``(2r + 1) sqrt(D)``.
    max_iter : int, default=200
    tol : float, default=1e-12
        Stop once an iteration improves the NLL by less than this.
    n_init : int, default=3
        Random starts (means drawn from the queries) besides the nested one.
    random_state : int or None, default=0
    """

    def __init__(self, n_components=2, sigma2=None, max_iter=200, tol=1e-12, n_init=3, random_state=0):
        self.n_components = n_components
        self.sigma2 = sigma2
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def _sigma2(self, d):
        s = default_sigma2(d, self.n_components) if self.sigma2 is None else tuple(self.sigma2)
        if len(s) != self.n_components:
            raise ConfigurationError(f"sigma2 needs {self.n_components} entries, got {len(s)}")
        return np.asarray(s, dtype=np.float64)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not isinstance(self.n_components, (int, np.integer)) or self.n_components < 1:
            raise ConfigurationError(f"n_components must be a positive integer, got {self.n_components}")
        n, d = X.shape
        sigma2 = self._sigma2(d)
        m = self.n_components
        starts = []
        if m == 1:
            starts.append((X.mean(axis=0, keepdims=True), np.ones(1)))
        else:
            smaller = GaussianKeyMixture(
                m - 1, tuple(sigma2[:-1]), self.max_iter, self.tol, self.n_init, self.random_state
            ).fit(X)
            nested_means = np.vstack([smaller.means_, smaller.means_[:1]])
            starts.append((nested_means, np.append(smaller.weights_, 0.0)))
            rng = check_random_state(self.random_state)
            for _ in range(self.n_init):
                idx = rng.choice(n, size=m, replace=n < m)
                starts.append((X[idx].copy(), np.full(m, 1.0 / m)))
        best = None
        for means, pi in starts:
            fitted = _em_fit(X, means, pi, sigma2, self.max_iter, self.tol)
            if best is None or fitted[2] < best[2]:
                best = fitted
        self.means_, self.weights_, self.nll_ = best
        self.sigma2_ = sigma2
        self.n_features_in_ = d
        return self

    def score_samples(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return log_density(X, list(self.means_), self.weights_, self.sigma2_)

    def score(self, X, y=None):
        """Mean log-likelihood (the negated NLL)."""
        return float(self.score_samples(X).mean())

    def nll(self, X):
        return -self.score(X)

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return soft_responsibilities(X, list(self.means_), self.weights_, self.sigma2_, density=True).gamma

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
