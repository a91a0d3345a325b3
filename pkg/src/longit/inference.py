"""Wald tests of treatment contrasts and single-occasion contingency tests."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .dataset import DataError, LongDataset
from .prep import complete_case, locf_impute

FISHER_MAX_TOTAL = 500

JOINT_PER_ARM = "joint-per-arm"
JOINT_BOTH_ARMS = "joint-both-arms"
AVERAGE_PER_ARM = "average-per-arm"
AVERAGE_BOTH_ARMS = "average-both-arms"
LAST_OCCASION = "last-occasion"
CONTRAST_KINDS = (JOINT_PER_ARM, JOINT_BOTH_ARMS, AVERAGE_PER_ARM, AVERAGE_BOTH_ARMS,
                  LAST_OCCASION)


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    estimate: float | None = None
    se: float | None = None


def wald_test(L, beta, V) -> WaldResult:
    """Chi-squared test of ``L beta = 0``.

    Parameters
    ----------
    L : (r, p) or (p,) array
    beta : (p,) array
    V : (p, p) covariance of ``beta``

    Returns
    -------
    WaldResult
        ``(L b)' (L V L')^-1 (L b)`` on ``r`` degrees of freedom; for a single
        row also the estimate ``L b`` and its standard error.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    beta = np.asarray(beta, dtype=float)
    V = np.asarray(V, dtype=float)
    if L.shape[1] != beta.shape[0] or V.shape != (beta.shape[0],) * 2:
        raise ValueError("contrast, coefficient and covariance dimensions do not conform")
    Lb = L @ beta
    M = L @ V @ L.T
    M = 0.5 * (M + M.T)
    r = L.shape[0]
    if np.linalg.matrix_rank(M) < r:
        raise np.linalg.LinAlgError("L V L' is singular")
    stat = float(Lb @ np.linalg.solve(M, Lb))
    stat = max(stat, 0.0)
    p = float(chi2.sf(stat, r))
    if r == 1:
        return WaldResult(stat, 1, p, float(Lb[0]), math.sqrt(M[0, 0]))
    return WaldResult(stat, r, p)


def _effect_rows(info, arm, occasions):
    trt = info.treatment_name
    occ_f = info.occasion_factor
    if trt not in info.kinds or occ_f not in info.kinds and len(occasions) > 1:
        raise DataError("formula lacks the treatment-by-occasion terms needed for this contrast")
    ref = info.references[trt]
    m = len(occasions)
    base = {}
    for f, kind in info.kinds.items():
        if f in (trt, occ_f):
            continue
        # other factors are held at a common value, which cancels in a difference
        base[f] = np.zeros(m) if kind == "continuous" else np.array([info.references[f]] * m,
                                                                     dtype=object)
    vals = dict(base)
    if occ_f in info.kinds:
        vals[occ_f] = np.array(occasions, dtype=object)
    vals[trt] = np.array([arm] * m, dtype=object)
    rows_a = info.matrix(vals)
    vals[trt] = np.array([ref] * m, dtype=object)
    return rows_a - info.matrix(vals)


def build_contrasts(fit, kind: str, arm=None) -> np.ndarray:
    """Contrast matrix for a treatment-effect hypothesis.

    Each row is the difference between the design row of an active arm and
    that of the reference arm at one occasion, so the contrast works for any
    coding of the treatment-by-occasion terms.

    Parameters
    ----------
    fit : object with an ``info`` attribute (a fit or a Design)
    kind : {"joint-per-arm", "joint-both-arms", "average-per-arm",
            "average-both-arms", "last-occasion"}
    arm : str, optional
        Active arm for the per-arm kinds (default: first non-reference arm);
        for "last-occasion", restricts the rows to that arm.

    Raises
    ------
    DataError
        If the model cannot separate treatment effects at every occasion.
    """
    info = fit.info
    if kind not in CONTRAST_KINDS:
        raise ValueError(f"unknown contrast kind {kind!r}")
    trt = info.treatment_name
    if trt not in info.kinds:
        raise DataError("formula lacks the treatment terms needed for this contrast")
    arms = [a for a in info.levels[trt] if a != info.references[trt]]
    if arm is not None:
        if str(arm) not in arms:
            raise DataError(f"{arm!r} is not an active arm")
    per_arm = [str(arm)] if arm is not None else arms[:1]
    chosen = per_arm if kind in (JOINT_PER_ARM, AVERAGE_PER_ARM) else \
        ([str(arm)] if (kind == LAST_OCCASION and arm is not None) else arms)
    occ = list(info.levels.get(info.occasion_factor, ("",)))
    blocks = []
    for a in chosen:
        if kind == LAST_OCCASION:
            R = _effect_rows(info, a, occ[-1:])
        else:
            R = _effect_rows(info, a, occ)
            if kind in (AVERAGE_PER_ARM, AVERAGE_BOTH_ARMS):
                R = R.mean(axis=0, keepdims=True)
        blocks.append(R)
    L = np.vstack(blocks)
    if kind in (JOINT_PER_ARM, JOINT_BOTH_ARMS) and np.linalg.matrix_rank(L) < L.shape[0]:
        raise DataError("formula lacks the treatment-by-occasion terms needed for a joint test")
    if np.any(np.all(np.abs(L) < 1e-15, axis=1)):
        raise DataError("formula lacks the treatment terms needed for this contrast")
    return L


def _check_table(table):
    t = np.asarray(table)
    if t.ndim != 2 or t.shape[0] != 2 or t.shape[1] < 2:
        raise ValueError("expected a 2 x k table with k >= 2")
    if np.any(t < 0) or not np.all(np.equal(np.mod(t, 1), 0)):
        raise ValueError("table entries must be nonnegative integers")
    return t.astype(np.int64)


def pearson_chi2(table) -> WaldResult:
    """Pearson's chi-squared test of homogeneity for a 2 x k table."""
    t = _check_table(table).astype(float)
    rows, cols, n = t.sum(axis=1), t.sum(axis=0), t.sum()
    if np.any(rows == 0) or np.any(cols == 0):
        raise ValueError("table has a zero margin")
    E = np.outer(rows, cols) / n
    stat = float(np.sum((t - E) ** 2 / E))
    df = t.shape[1] - 1
    return WaldResult(stat, df, float(chi2.sf(stat, df)))


def enumerate_tables(row_sums, col_sums):
    """All 2 x k tables with the given margins and their null probabilities.

    Returns
    -------
    first_rows : (m, k) int array
        First row of each table (the second row is ``col_sums`` minus it).
    log_prob : (m,) array
        Multivariate hypergeometric log-probabilities.
    """
    r1, r2 = (int(v) for v in row_sums)
    c = np.asarray(col_sums, dtype=np.int64)
    if r1 + r2 != c.sum():
        raise ValueError("row and column totals disagree")
    k = len(c)
    # remaining capacity after column j, used to prune
    tail = np.concatenate([np.cumsum(c[::-1])[::-1][1:], [0]])
    partial = np.zeros((1, 0), dtype=np.int64)
    sums = np.zeros(1, dtype=np.int64)
    for j in range(k - 1):
        parts, psums = [], []
        for x in range(int(c[j]) + 1):
            s = sums + x
            ok = (s <= r1) & (s + tail[j] >= r1)
            if ok.any():
                parts.append(np.column_stack([partial[ok], np.full(ok.sum(), x)]))
                psums.append(s[ok])
        partial = np.vstack(parts)
        sums = np.concatenate(psums)
    last = r1 - sums
    ok = (last >= 0) & (last <= c[-1])
    first = np.column_stack([partial[ok], last[ok]])
    n = int(c.sum())
    log_choose = lambda a, b: gammaln(a + 1) - gammaln(b + 1) - gammaln(a - b + 1)
    lp = np.sum(log_choose(c[None, :], first), axis=1) - log_choose(n, r1)
    return first, lp


def _exact_weight(first, c):
    return math.prod(math.comb(int(cj), int(xj)) for cj, xj in zip(c, first))


def fisher_exact(table) -> float:
    """Two-sided Fisher (Freeman-Halton) exact p-value for a 2 x k table.

    Sums the null probabilities of every table with the observed margins
    that is no more probable than the observed one. Tables whose
    floating-point probability is within round-off of the observed one are
    compared in exact integer arithmetic.
    """
    t = _check_table(table)
    n = int(t.sum())
    if n > FISHER_MAX_TOTAL:
        raise ValueError(f"total {n} exceeds the exact enumeration bound {FISHER_MAX_TOTAL}")
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    first, lp = enumerate_tables(rows, cols)
    obs = t[0]
    lp_obs = float(np.sum(gammaln(cols + 1) - gammaln(obs + 1) - gammaln(cols - obs + 1))
                   - (gammaln(n + 1) - gammaln(rows[0] + 1) - gammaln(n - rows[0] + 1)))
    near = np.abs(lp - lp_obs) <= 1e-9 * max(1.0, abs(lp_obs))
    keep = lp < lp_obs
    if near.any():
        w_obs = _exact_weight(obs, cols)
        for idx in np.flatnonzero(near):
            keep[idx] = _exact_weight(first[idx], cols) <= w_obs
    p = math.fsum(np.exp(lp[keep]))
    return min(1.0, p)


@dataclass(frozen=True)
class EndpointResult:
    table: np.ndarray            # 2 x k: row 0 failures, row 1 successes
    arms: tuple
    pearson: WaldResult
    fisher_p: float
    view: str
    strategy: str
    n_used: int


def endpoint_table(dataset: LongDataset, view="last-planned", strategy="locf"):
    """Per-arm failure/success counts at a single endpoint.

    ``last-planned`` reads the final occasion after complete-case deletion
    or LOCF; ``last-observed`` reads each subject's last observed outcome,
    which coincides with the LOCF value at the final occasion. Complete
    cases are not defined for the last-observed endpoint.
    """
    strategy = strategy.lower()
    if view not in ("last-planned", "last-observed"):
        raise ValueError(f"unknown endpoint view {view!r}")
    if strategy not in ("cc", "locf"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if view == "last-observed" and strategy == "cc":
        raise ValueError("complete-case analysis is not an option for the last observed outcome")
    data = complete_case(dataset) if strategy == "cc" else locf_impute(dataset)
    y = data.outcome_matrix()[:, -1]
    trt = data.treatments()
    arms = tuple(dataset.arms)
    ok = ~np.isnan(y)
    table = np.zeros((2, len(arms)), dtype=np.int64)
    for k, a in enumerate(arms):
        sel = ok & (trt == a)
        table[1, k] = int(np.sum(y[sel] == 1))
        table[0, k] = int(np.sum(y[sel] == 0))
    return table, arms, int(ok.sum())


def endpoint_analysis(dataset: LongDataset, view="last-planned", strategy="locf") -> EndpointResult:
    """Pearson and Fisher tests comparing arms at one endpoint."""
    table, arms, used = endpoint_table(dataset, view, strategy)
    return EndpointResult(table, arms, pearson_chi2(table), fisher_exact(table), view,
                          strategy.lower(), used)


def contrast_test(fit, kind, arm=None, robust=True) -> WaldResult:
    """Wald test of a treatment contrast on a GEE or GLMM fit.

    GEE-type fits use the sandwich covariance unless ``robust`` is false;
    GLMM fits use the inverse observed information of the fixed effects.
    """
    L = build_contrasts(fit, kind, arm)
    if hasattr(fit, "sandwich_cov"):
        V = fit.sandwich_cov if robust else fit.model_based_cov
    else:
        V = fit.cov_beta
    return wald_test(L, fit.beta, V)
