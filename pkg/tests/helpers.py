"""Test helpers."""
import numpy as np

from longit.dataset import LongDataset, SubjectRecord


def make_dataset(outcomes, arms=None, occasions=None, covariates=None, schema=None):
    """Small LongDataset from a list of outcome rows (None = missing)."""
    Y = np.array([[np.nan if v is None else v for v in row] for row in outcomes], float)
    N, n = Y.shape
    arms = arms if arms is not None else ["0"] * N
    occasions = occasions or [str(j + 1) for j in range(n)]
    covariates = covariates or [{} for _ in range(N)]
    subjects = [SubjectRecord(f"s{i:03d}", Y[i], covariates[i], str(arms[i])) for i in range(N)]
    return LongDataset(subjects, occasions, schema or {})


def working_correlation(structure, alpha):
    """Correlation builder for ``loop_score``, written out case by case."""
    def R(occ):
        k = len(occ)
        if structure == "independence":
            return np.eye(k)
        C = np.eye(k)
        for a in range(k):
            for b in range(k):
                if a == b:
                    continue
                if structure == "exchangeable":
                    C[a, b] = alpha
                elif structure == "ar1":
                    C[a, b] = alpha ** abs(occ[a] - occ[b])
                else:
                    C[a, b] = alpha[occ[a], occ[b]]
        return C
    return R


def fit_score_residual(fit):
    """Max-norm of the loop-assembled score at a GEE or WGEE fit's estimate."""
    d = fit.design
    R = working_correlation(fit.correlation.structure, fit.correlation.alpha)
    W = None if fit.weights is None else np.where(d.mask, fit.weights, 1.0)
    S, _, _ = loop_score(fit.beta, d.X, d.y, d.mask, R, W)
    return float(np.max(np.abs(S)))


def loop_score(beta, X, y, mask, R, weights=None):
    """Weighted GEE score assembled subject by subject with explicit matrices.

    ``R`` is a callable giving the working correlation for a list of
    0-based occasion indices. Occasion weights scale the variance as v / w.
    """
    N, n, p = X.shape
    S = np.zeros(p)
    I0 = np.zeros((p, p))
    g = []
    for i in range(N):
        occ = [j for j in range(n) if mask[i, j]]
        if not occ:
            g.append(np.zeros(p))
            continue
        Xi = X[i, occ]
        mu = 1.0 / (1.0 + np.exp(-(Xi @ beta)))
        v = mu * (1.0 - mu)
        w = np.ones(len(occ)) if weights is None else np.asarray(weights)[i, occ]
        A_half = np.diag(np.sqrt(v / w))
        V = A_half @ R(occ) @ A_half
        D = np.diag(v) @ Xi
        Vinv = np.linalg.inv(V)
        gi = D.T @ Vinv @ (y[i, occ] - mu)
        g.append(gi)
        S += gi
        I0 += D.T @ Vinv @ D
    g = np.array(g)
    return S, I0, g


def trapezoid_loglik(y, X, beta, sigma, points=200_000, width=10.0):
    """Subject log marginal likelihood by the trapezoid rule on +-width*sigma."""
    y = np.asarray(y, float)
    m = ~np.isnan(y)
    eta = np.asarray(X, float)[m] @ np.asarray(beta, float)
    b = np.linspace(-width * sigma, width * sigma, points)
    u = eta[None, :] + b[:, None]
    logf = np.sum(y[m][None, :] * u - np.logaddexp(0.0, u), axis=1)
    logf += -0.5 * (b / sigma) ** 2 - np.log(sigma * np.sqrt(2 * np.pi))
    h = b[1] - b[0]
    wts = np.full(points, h)
    wts[[0, -1]] = h / 2
    top = logf.max()
    return float(top + np.log(np.sum(wts * np.exp(logf - top))))
