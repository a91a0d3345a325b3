"""Generalized estimating equations for marginal logistic models.

Subjects contribute only their observed occasions: the rows and columns of
``V_i`` belonging to missing occasions are deleted. Occasion-level weights
``w_ij`` scale the working variances as ``v(mu_ij) / w_ij``, so a weight
that is constant within a subject multiplies that subject's whole
contribution.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import LongDataset
from .design import Design, build_design
from .glm import bernoulli_variance, expit, fit_logistic

log = logging.getLogger(__name__)

INDEPENDENCE = "independence"
EXCHANGEABLE = "exchangeable"
AR1 = "ar1"
UNSTRUCTURED = "unstructured"

_ALIASES = {
    "ind": INDEPENDENCE, "independence": INDEPENDENCE, "independent": INDEPENDENCE,
    "exch": EXCHANGEABLE, "exchangeable": EXCHANGEABLE, "cs": EXCHANGEABLE,
    "ar1": AR1, "ar(1)": AR1,
    "un": UNSTRUCTURED, "unstructured": UNSTRUCTURED,
}


class ConvergenceError(RuntimeError):
    pass


def canonical_structure(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown working correlation {name!r}") from None


def correlation_matrix(structure, alpha, occasions, n=None):
    """Working correlation among the given (0-based) design occasions.

    AR(1) uses the design lag, so occasions 0 and 2 get ``alpha**2`` whether
    or not occasion 1 was observed.
    """
    structure = canonical_structure(structure)
    occ = np.asarray(occasions, dtype=int)
    k = len(occ)
    if structure == INDEPENDENCE:
        return np.eye(k)
    if structure == EXCHANGEABLE:
        a = float(alpha)
        n = n if n is not None else max(k, 2)
        lower = -1.0 / (n - 1) if n > 1 else -np.inf
        if not (lower < a < 1.0):
            raise ValueError(f"exchangeable alpha={a} outside ({lower}, 1)")
        C = np.full((k, k), a)
        np.fill_diagonal(C, 1.0)
        return C
    if structure == AR1:
        a = float(alpha)
        if not abs(a) < 1.0:
            raise ValueError(f"AR(1) alpha={a} outside (-1, 1)")
        lags = np.abs(occ[:, None] - occ[None, :])
        return a ** lags
    R = np.asarray(alpha, dtype=float)
    C = R[np.ix_(occ, occ)].copy()
    np.fill_diagonal(C, 1.0)
    if np.any(np.abs(C) > 1.0) or not np.allclose(C, C.T):
        raise ValueError("unstructured alpha is not a correlation matrix")
    return C


@dataclass(frozen=True)
class WorkingCorrelation:
    structure: str
    alpha: object = None
    n: int = 2

    def __post_init__(self):
        object.__setattr__(self, "structure", canonical_structure(self.structure))

    def matrix(self, occasions):
        return correlation_matrix(self.structure, self.alpha, occasions, self.n)

    def alpha_vector(self):
        if self.structure == INDEPENDENCE:
            return np.zeros(0)
        if self.structure == UNSTRUCTURED:
            R = np.asarray(self.alpha)
            return R[np.triu_indices(len(R), 1)]
        return np.atleast_1d(float(self.alpha))


def pearson_residuals(y, mu):
    """``(y - mu) / sqrt(mu (1 - mu))``; undefined at ``mu`` in {0, 1}."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    v = bernoulli_variance(mu)
    with np.errstate(invalid="ignore"):
        if np.any(v[~np.isnan(v)] <= 0):
            raise FloatingPointError("degenerate fitted mean (mu at 0 or 1)")
        return (y - mu) / np.sqrt(v)


def estimate_alpha(residuals, structure, mask=None, weights=None):
    """Moment estimate of the working-correlation parameters.

    Parameters
    ----------
    residuals : (N, n) array
        Pearson residuals; NaN or ``mask == False`` marks unobserved slots.
    structure : str
    weights : (N, n) array, optional
        Occasion weights. Pair (j, k) is weighted by ``sqrt(w_ij w_ik)`` and
        every average becomes a weighted average.

    Returns
    -------
    float, (n, n) array or None for independence.
    """
    structure = canonical_structure(structure)
    e = np.asarray(residuals, dtype=float)
    if mask is None:
        mask = ~np.isnan(e)
    mask = np.asarray(mask, dtype=bool)
    N, n = e.shape
    if structure == INDEPENDENCE:
        return None
    w = np.ones_like(e) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=float).reshape(N, -1), e.shape)
    e0 = np.where(mask, e, 0.0)
    sw = np.where(mask, np.sqrt(np.where(mask, w, 0.0)), 0.0)
    n_i = mask.sum(axis=1)
    if not np.any(n_i >= 2):
        raise ValueError("no subject has two or more observed occasions")
    if structure == EXCHANGEABLE:
        contrib = n_i >= 2
        se = (sw * e0).sum(axis=1)
        num = se ** 2 - (sw ** 2 * e0 ** 2).sum(axis=1)
        den = sw.sum(axis=1) ** 2 - (sw ** 2).sum(axis=1)
        scale = np.where(contrib, n_i * (n_i - 1), 1)
        return float(np.sum(num[contrib] / scale[contrib]) / np.sum(den[contrib] / scale[contrib]))
    if structure == AR1:
        both = mask[:, :-1] & mask[:, 1:]
        if not both.any():
            raise ValueError("no pair of adjacent observed occasions")
        om = sw[:, :-1] * sw[:, 1:]
        num = np.sum(np.where(both, om * e0[:, :-1] * e0[:, 1:], 0.0))
        den = np.sum(np.where(both, om, 0.0))
        return float(num / den)
    num = np.einsum("ij,ik->jk", sw * e0, sw * e0)
    den = np.einsum("ij,ik->jk", sw, sw)
    R = np.zeros((n, n))
    ok = den > 0
    R[ok] = num[ok] / den[ok]
    off = ~ok & ~np.eye(n, dtype=bool)
    if off.any():
        warnings.warn("unstructured correlation cells without support set to 0",
                      RuntimeWarning, stacklevel=2)
    np.fill_diagonal(R, 1.0)
    return R


class _Groups:
    """Subjects grouped by their observed-occasion pattern."""

    def __init__(self, mask):
        keys = {}
        for i, row in enumerate(mask):
            if row.any():
                keys.setdefault(tuple(np.flatnonzero(row)), []).append(i)
        self.items = [(np.array(k), np.array(v)) for k, v in sorted(keys.items())]
        self.subjects = np.sort(np.concatenate([v for _, v in self.items])) \
            if self.items else np.zeros(0, int)


def gee_contributions(beta, design: Design, corr: WorkingCorrelation, weights=None,
                      groups=None):
    """Score, information and per-subject score contributions at ``beta``.

    Returns
    -------
    S : (p,) summed estimating function
    I0 : (p, p) ``sum D' V^-1 D``
    g : (N, p) per-subject contributions ``D_i' V_i^-1 (y_i - mu_i)`` (zero
        rows for subjects without observations)
    """
    groups = groups or _Groups(design.mask)
    N, n, p = design.X.shape
    w = _weights(weights, design)
    I0 = np.zeros((p, p))
    g = np.zeros((N, p))
    for occ, ids in groups.items:
        Xg = design.X[np.ix_(ids, occ)]
        yg = design.y[np.ix_(ids, occ)]
        wg = w[np.ix_(ids, occ)]
        mu = expit(Xg @ beta)
        v = mu * (1.0 - mu)
        if np.any(v <= 0):
            raise FloatingPointError("degenerate fitted mean in GEE")
        U = Xg * np.sqrt(v * wg)[..., None]
        e = np.sqrt(wg) * (yg - mu) / np.sqrt(v)
        C = corr.matrix(occ)
        try:
            Cinv = np.linalg.inv(C)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("singular working covariance") from None
        CU = np.einsum("kl,mlp->mkp", Cinv, U)
        I0 += np.einsum("mkp,mkq->pq", U, CU)
        g[ids] = np.einsum("mkp,mk->mp", CU, e)
    S = g.sum(axis=0)
    return S, 0.5 * (I0 + I0.T), g


def _weights(weights, design):
    N, n = design.mask.shape
    if weights is None:
        return np.ones((N, n))
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.repeat(w[:, None], n, axis=1)
    w = np.where(design.mask, w, 0.0)
    if np.any(~np.isfinite(w)) or np.any(w[design.mask] <= 0):
        raise ValueError("weights must be finite and positive on observed slots")
    return w


def sandwich_covariance(I0, I1, n_subjects=None, small_sample=False):
    """Model-based ``I0^-1`` and robust ``I0^-1 I1 I0^-1`` covariances."""
    try:
        inv = np.linalg.inv(I0)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular I0: model-based covariance undefined") from None
    inv = 0.5 * (inv + inv.T)
    sand = inv @ I1 @ inv
    sand = 0.5 * (sand + sand.T)
    if small_sample:
        if not n_subjects or n_subjects < 2:
            raise ValueError("small-sample correction needs at least two subjects")
        sand = sand * n_subjects / (n_subjects - 1)
    return inv, sand


@dataclass(frozen=True)
class GeeFit:
    beta: np.ndarray
    correlation: WorkingCorrelation
    model_based_cov: np.ndarray
    sandwich_cov: np.ndarray
    iterations: int
    converged: bool
    score: np.ndarray
    columns: tuple
    design: Design = field(repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    n_subjects: int = 0
    I0: np.ndarray | None = field(default=None, repr=False)
    I1: np.ndarray | None = field(default=None, repr=False)

    @property
    def alpha_hat(self):
        return self.correlation.alpha

    @property
    def se_model(self):
        return np.sqrt(np.diag(self.model_based_cov))

    @property
    def se_robust(self):
        return np.sqrt(np.diag(self.sandwich_cov))

    @property
    def info(self):
        return self.design.info

    def coef_table(self):
        """Rows of (name, estimate, model-based SE, robust SE)."""
        return [(c, float(b), float(s0), float(s1)) for c, b, s0, s1 in
                zip(self.columns, self.beta, self.se_model, self.se_robust)]


def _as_design(data, formula, references):
    if isinstance(data, Design):
        return data
    if not isinstance(data, LongDataset):
        raise TypeError("data must be a LongDataset or Design")
    if formula is None:
        raise ValueError("a formula is required with a LongDataset")
    return build_design(data, formula, references)


def fit_gee(data, formula=None, structure="exchangeable", *, weights=None,
            references=None, small_sample=False, max_iter=200, tol=1e-8,
            score_tol=1e-10) -> GeeFit:
    """Fit a marginal logistic model by GEE.

    Parameters
    ----------
    data : LongDataset or Design
    formula : str, optional
        Required when ``data`` is a LongDataset.
    structure : {"independence", "exchangeable", "ar1", "unstructured"}
    weights : (N,) or (N, n) array, optional
        Subject or occasion weights; all ones gives ordinary GEE.
    small_sample : bool
        Inflate the sandwich by ``N / (N - 1)``.

    Notes
    -----
    Starts from the independence logistic fit, then alternates moment
    estimation of ``alpha`` with Fisher-scoring updates of ``beta`` until
    both ``max|d beta| / (1 + max|beta|)`` and ``max|d alpha|`` drop below
    ``tol``. A final few scoring steps at the converged ``alpha`` drive the
    estimating function to round-off level.
    """
    structure = canonical_structure(structure)
    design = _as_design(data, formula, references)
    groups = _Groups(design.mask)
    if groups.subjects.size == 0:
        raise ValueError("no observed outcomes")
    w = _weights(weights, design)
    Xs, ys, ws = design.stacked(w)
    beta = fit_logistic(Xs, ys, ws, names=design.columns).beta
    n = design.n
    mask = design.mask

    def current_alpha(b):
        if structure == INDEPENDENCE:
            return None
        mu = expit(design.X @ b)
        e = np.where(mask, pearson_residuals(np.where(mask, design.y, 0.0), mu), np.nan)
        return estimate_alpha(e, structure, mask, w)

    alpha_prev = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        alpha = current_alpha(beta)
        corr = WorkingCorrelation(structure, alpha, n)
        S, I0, _ = gee_contributions(beta, design, corr, w, groups)
        step = np.linalg.solve(I0, S)
        new = beta + step
        db = np.max(np.abs(step)) / (1.0 + np.max(np.abs(beta)))
        da = 0.0 if alpha_prev is None or alpha is None else float(
            np.max(np.abs(np.asarray(alpha) - np.asarray(alpha_prev))))
        if alpha is not None and alpha_prev is None:
            da = np.inf
        beta, alpha_prev = new, alpha
        if db < tol and da < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"GEE did not converge in {max_iter} iterations")

    corr = WorkingCorrelation(structure, current_alpha(beta), n)
    for _ in range(20):
        S, I0, g = gee_contributions(beta, design, corr, w, groups)
        if np.max(np.abs(S)) < score_tol * max(1.0, len(groups.subjects)):
            break
        beta = beta + np.linalg.solve(I0, S)
    S, I0, g = gee_contributions(beta, design, corr, w, groups)
    I1 = g.T @ g
    I1 = 0.5 * (I1 + I1.T)
    N = len(groups.subjects)
    model, sand = sandwich_covariance(I0, I1, N, small_sample)
    return GeeFit(beta, corr, model, sand, it, converged, S, design.columns, design,
                  None if weights is None else w, N, I0, I1)
