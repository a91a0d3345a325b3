"""Logistic regression core: link, variance and an IRLS fitter."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit as _expit
from scipy.special import logit as _logit

from .design import Design, build_design, design_info, parse_formula  # noqa: F401

SEPARATION_BOUND = 30.0


class SeparationError(ArithmeticError):
    """Coefficients diverge: the data are (quasi-)completely separated."""


class RankDeficientError(np.linalg.LinAlgError):
    pass


def expit(eta):
    """Inverse logit, saturating at the extremes."""
    return _expit(eta)


def logit(mu):
    return _logit(mu)


def bernoulli_variance(mu):
    """Bernoulli variance function ``mu (1 - mu)``."""
    mu = np.asarray(mu, dtype=float)
    return mu * (1.0 - mu)


@dataclass(frozen=True)
class LinkSpec:
    name: str
    forward: Callable
    inverse: Callable
    derivative: Callable   # d mu / d eta as a function of eta


LOGIT = LinkSpec("logit", logit, expit, lambda eta: bernoulli_variance(expit(eta)))


@dataclass(frozen=True)
class GlmFit:
    beta: np.ndarray
    covariance: np.ndarray
    deviance: float
    iterations: int
    converged: bool
    score: np.ndarray
    names: tuple = ()

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))

    @property
    def loglik(self):
        return -0.5 * self.deviance


def logistic_loglik(beta, X, y, w=None):
    """Weighted Bernoulli log-likelihood with a logit link."""
    eta = X @ beta
    w = np.ones(len(y)) if w is None else w
    # log(1 + e^eta) computed stably
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_score(beta, X, y, w=None):
    mu = expit(X @ beta)
    w = np.ones(len(y)) if w is None else w
    return X.T @ (w * (y - mu))


def fit_logistic(X, y, prior_weights=None, *, names=None, max_iter=100,
                 score_tol=1e-8, step_tol=1e-10) -> GlmFit:
    """Maximum-likelihood logistic regression by IRLS with step halving.

    Parameters
    ----------
    X : (m, p) array
    y : (m,) array of 0/1
    prior_weights : (m,) array, optional
        Nonnegative case weights.

    Returns
    -------
    GlmFit
        ``covariance`` is the inverse weighted Fisher information.

    Raises
    ------
    RankDeficientError
        If ``X`` restricted to positive-weight rows lacks full column rank.
    SeparationError
        If a coefficient leaves ``[-30, 30]`` while iterating.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, p = X.shape
    w = np.ones(m) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("prior weights must be finite and nonnegative")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("responses must be 0/1")
    names = tuple(names) if names is not None else tuple(f"x{k}" for k in range(p))
    support = w > 0
    if np.linalg.matrix_rank(X[support]) < p:
        raise RankDeficientError("design is rank deficient on the weighted support")

    beta = np.zeros(p)
    ll = logistic_loglik(beta, X, y, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        score = X.T @ (w * (y - mu))
        info = (X * (w * mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(info, score)
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = logistic_loglik(cand, X, y, w)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta)) / (1.0 + np.max(np.abs(beta)))
        beta, ll = cand, ll_new
        big = np.abs(beta) > SEPARATION_BOUND
        if big.any():
            col = names[int(np.argmax(np.abs(beta)))]
            raise SeparationError(f"separation detected: coefficient of {col!r} diverges")
        score = logistic_score(beta, X, y, w)
        if np.max(np.abs(score)) < score_tol and change < step_tol:
            converged = True
            break
        if np.max(np.abs(score)) < score_tol and t < 1.0:
            # step halving exhausted at a numerically stationary point
            converged = True
            break
    mu = expit(X @ beta)
    info = (X * (w * mu * (1 - mu))[:, None]).T @ X
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return GlmFit(beta, cov, -2.0 * ll, it, converged,
                  logistic_score(beta, X, y, w), names)
