"""Random-intercept logistic GLMM fitted by Gauss-Hermite quadrature.

The model is ``logit P(y_ij = 1 | b_i) = x_ij' beta + b_i`` with
``b_i ~ N(0, sigma^2)``. Each subject's marginal likelihood integrates the
product of its observed Bernoulli terms against the normal density; missing
occasions simply drop out of the product, which is the ignorable
(direct-likelihood) analysis under MAR.

Nonadaptive quadrature places the nodes at ``b = sqrt(2) sigma x_q``.
Adaptive quadrature recentres them at the mode of each subject's integrand
and rescales by ``(-g''(mode))^(-1/2)``. The optimizer works on
``theta = (beta, log sigma)`` with the exact gradient of the quadrature
approximation, including the movement of the adaptive mode and scale.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.special import logsumexp

from .dataset import LongDataset
from .design import Design, build_design
from .glm import expit, logistic_loglik

ATTENUATION_C = 16.0 * math.sqrt(3.0) / (15.0 * math.pi)
_LOG_SQRT_PI = 0.5 * math.log(math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

QUASI_NEWTON = "quasi-newton"
NEWTON_RAPHSON = "newton-raphson"
ADAPTIVE = "adaptive"
NONADAPTIVE = "nonadaptive"


class QuadratureError(ArithmeticError):
    pass


class GlmmConvergenceError(RuntimeError):
    pass


def gauss_hermite(Q: int):
    """Physicists' Gauss-Hermite rule for weight ``exp(-x^2)``."""
    if not isinstance(Q, (int, np.integer)) or not 1 <= Q <= 100:
        raise ValueError(f"number of quadrature points must be in 1..100, got {Q!r}")
    return np.polynomial.hermite.hermgauss(int(Q))


def _bern(y, m, u):
    return m * (y * u - np.logaddexp(0.0, u))


def _find_modes(eta, Y, M, sigma, max_iter=50, tol=1e-10):
    """Mode of ``sum_j log f(y_ij | b) + log phi(b; 0, sigma^2)`` per subject."""
    s2 = sigma * sigma
    b = np.zeros(eta.shape[0])

    def g(bb):
        return _bern(Y, M, eta + bb[:, None]).sum(axis=1) - 0.5 * bb * bb / s2

    gb = g(b)
    for _ in range(max_iter):
        mu = expit(eta + b[:, None])
        g1 = (M * (Y - mu)).sum(axis=1) - b / s2
        H = -(M * mu * (1 - mu)).sum(axis=1) - 1.0 / s2
        step = -g1 / H
        t = np.ones_like(b)
        for _ in range(40):
            cand = b + t * step
            gc = g(cand)
            bad = gc < gb - 1e-12 * (1 + np.abs(gb))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        b, gb = cand, gc
        if np.max(np.abs(t * step)) < tol:
            return b
    raise QuadratureError("adaptive quadrature: mode search did not converge")


def _loglik_terms(theta, X, Y, M, x, w, adaptive, grad=True, fixed_sigma=None):
    """Per-subject quadrature log-likelihood and gradient in (beta, log sigma)."""
    N, n, p = X.shape
    beta = theta[:p]
    if fixed_sigma is None:
        sigma = math.exp(theta[p])
    else:
        sigma = float(fixed_sigma)
    eta = X @ beta
    if sigma == 0.0:
        ll = _bern(Y, M, eta).sum(axis=1)
        if not grad:
            return ll, None
        r = M * (Y - expit(eta))
        gb = np.einsum("ij,ijp->ip", r, X)
        return ll, np.column_stack([gb, np.zeros(N)])
    logw = np.log(w)
    s2 = sigma * sigma
    if not adaptive:
        bq = math.sqrt(2.0) * sigma * x
        u = eta[:, None, :] + bq[None, :, None]
        a = logw[None, :] - _LOG_SQRT_PI + _bern(Y[:, None, :], M[:, None, :], u).sum(axis=2)
        ll = logsumexp(a, axis=1)
        if not grad:
            return ll, None
        pi = np.exp(a - ll[:, None])
        r = M[:, None, :] * (Y[:, None, :] - expit(u))
        gb = np.einsum("iq,iqj,ijp->ip", pi, r, X)
        gt = np.einsum("iq,q,iqj->i", pi, bq, r)
        return ll, np.column_stack([gb, gt])

    bhat = _find_modes(eta, Y, M, sigma)
    mu0 = expit(eta + bhat[:, None])
    v0 = M * mu0 * (1 - mu0)
    H = -v0.sum(axis=1) - 1.0 / s2
    shat = 1.0 / np.sqrt(-H)
    bq = bhat[:, None] + math.sqrt(2.0) * shat[:, None] * x[None, :]
    u = eta[:, None, :] + bq[:, :, None]
    gq = (_bern(Y[:, None, :], M[:, None, :], u).sum(axis=2)
          - 0.5 * bq * bq / s2 - _LOG_SQRT_2PI - math.log(sigma))
    a = logw[None, :] + x[None, :] ** 2 + gq
    lse = logsumexp(a, axis=1)
    ll = 0.5 * math.log(2.0) + np.log(shat) + lse
    if not grad:
        return ll, None
    pi = np.exp(a - lse[:, None])
    r = M[:, None, :] * (Y[:, None, :] - expit(u))
    g1q = r.sum(axis=2) - bq / s2
    # implicit derivatives of the mode and curvature
    dG_db = -np.einsum("ij,ijp->ip", v0, X)
    dG_dt = 2.0 * bhat / s2
    db_db = -dG_db / H[:, None]
    db_dt = -dG_dt / H
    v1 = v0 * (1 - 2 * mu0)
    dH_dbeta = -np.einsum("ij,ijp->ip", v1, X)
    dH_dmode = -v1.sum(axis=1)
    dHtot_b = dH_dbeta + dH_dmode[:, None] * db_db
    dHtot_t = 2.0 / s2 + dH_dmode * db_dt
    ds_b = 0.5 * shat[:, None] ** 3 * dHtot_b
    ds_t = 0.5 * shat ** 3 * dHtot_t
    Eg1 = (pi * g1q).sum(axis=1)
    Eg1x = math.sqrt(2.0) * (pi * g1q * x[None, :]).sum(axis=1)
    part_b = np.einsum("iq,iqj,ijp->ip", pi, r, X)
    part_t = (pi * (bq * bq / s2 - 1.0)).sum(axis=1)
    gb = (ds_b / shat[:, None] + part_b + Eg1[:, None] * db_db + Eg1x[:, None] * ds_b)
    gt = ds_t / shat + part_t + Eg1 * db_dt + Eg1x * ds_t
    return ll, np.column_stack([gb, gt])


def subject_loglik(y, X, beta, sigma, n_points=20, adaptive=True):
    """Quadrature log marginal likelihood of one subject.

    Parameters
    ----------
    y : (n,) array with NaN for missing occasions
    X : (n, p) design rows
    beta : (p,) fixed effects
    sigma : float
        Random-intercept standard deviation (0 gives the plain logistic
        log-likelihood of the observed outcomes).
    n_points : int
    adaptive : bool
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    m = ~np.isnan(y)
    if sigma == 0:
        return logistic_loglik(beta, X[m], y[m])
    x, w = gauss_hermite(n_points)
    theta = np.append(beta, math.log(sigma))
    ll, _ = _loglik_terms(theta, X[None], np.where(m, y, 0.0)[None], m[None].astype(float),
                          x, w, adaptive, grad=False)
    return float(ll[0])


@dataclass(frozen=True)
class GlmmSpec:
    """Model and numerical settings for :func:`fit_glmm`.

    ``start`` is ``"half"`` (every beta and sigma set to 0.5), ``"zero"``
    (beta = 0 and log sigma = 0) or an explicit ``(beta..., sigma)`` vector.
    """

    formula: str = "y ~ 0 + visit + visit:trt"
    quadrature: str = ADAPTIVE
    n_points: int | None = None
    optimizer: str = QUASI_NEWTON
    start: object = "half"
    sigma_fixed: float | None = None
    references: dict | None = None
    max_iter: int = 500
    grad_tol: float = 1e-6

    @property
    def Q(self) -> int:
        if self.n_points is not None:
            return int(self.n_points)
        return 20 if self.quadrature == ADAPTIVE else 50


@dataclass(frozen=True)
class GlmmFit:
    beta: np.ndarray
    sigma: float
    loglik: float
    covariance: np.ndarray         # over (beta, log sigma), or beta only
    columns: tuple
    converged: bool
    seemingly_converged: bool
    at_boundary: bool
    iterations: int
    grad_norm: float
    quadrature: str
    n_points: int
    optimizer: str
    design: Design = field(repr=False)
    gradient: np.ndarray = field(default=None, repr=False)
    notes: tuple = ()

    @property
    def cov_beta(self):
        p = len(self.beta)
        return self.covariance[:p, :p]

    @property
    def se(self):
        return np.sqrt(np.abs(np.diag(self.cov_beta)))

    @property
    def _se_log_sigma(self):
        p = len(self.beta)
        if self.covariance.shape[0] <= p:
            return float("nan")
        return math.sqrt(abs(self.covariance[p, p]))

    @property
    def sigma_se(self):
        return self.sigma * self._se_log_sigma

    @property
    def sigma2(self):
        return self.sigma ** 2

    @property
    def sigma2_se(self):
        return 2.0 * self.sigma ** 2 * self._se_log_sigma

    @property
    def info(self):
        return self.design.info

    def coef_table(self):
        rows = [(c, float(b), float(s)) for c, b, s in zip(self.columns, self.beta, self.se)]
        rows.append(("sigma", self.sigma, self.sigma_se))
        rows.append(("sigma2", self.sigma2, self.sigma2_se))
        return rows


class _Objective:
    def __init__(self, design: Design, Q, adaptive, fixed_sigma=None):
        keep = design.mask.any(axis=1)
        self.X = design.X[keep]
        self.M = design.mask[keep].astype(float)
        self.Y = np.where(design.mask[keep], design.y[keep], 0.0)
        self.x, self.w = gauss_hermite(Q)
        self.adaptive = adaptive
        self.fixed_sigma = fixed_sigma
        self.p = design.p
        self.n_subjects = int(keep.sum())

    def full(self, theta):
        if self.fixed_sigma is not None:
            th = np.append(theta, 0.0)
        else:
            th = theta
        ll, g = _loglik_terms(th, self.X, self.Y, self.M, self.x, self.w, self.adaptive,
                              fixed_sigma=self.fixed_sigma)
        g = g.sum(axis=0)
        if self.fixed_sigma is not None:
            g = g[:self.p]
        return float(ll.sum()), g

    def value(self, theta):
        th = np.append(theta, 0.0) if self.fixed_sigma is not None else theta
        ll, _ = _loglik_terms(th, self.X, self.Y, self.M, self.x, self.w, self.adaptive,
                              grad=False, fixed_sigma=self.fixed_sigma)
        return float(ll.sum())

    def hessian(self, theta):
        """Central differences of the analytic gradient."""
        k = len(theta)
        H = np.empty((k, k))
        for j in range(k):
            h = 1e-5 * max(1.0, abs(theta[j]))
            e = np.zeros(k)
            e[j] = h
            H[:, j] = (self.full(theta + e)[1] - self.full(theta - e)[1]) / (2 * h)
        return 0.5 * (H + H.T)


def _newton(obj: _Objective, theta, max_iter, tol):
    ll, g = obj.full(theta)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            return theta, ll, g, it - 1
        H = obj.hessian(theta)
        vals, vecs = np.linalg.eigh(-H)
        floor = 1e-8 * max(1.0, np.max(np.abs(vals)))
        vals = np.maximum(np.abs(vals), floor)
        step = vecs @ ((vecs.T @ g) / vals)
        t = 1.0
        for _ in range(50):
            cand = theta + t * step
            ll_new, g_new = obj.full(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-10 * abs(ll):
                break
            t *= 0.5
        else:
            return theta, ll, g, it
        theta, ll, g = cand, ll_new, g_new
    return theta, ll, g, it


def _start(spec: GlmmSpec, p, fixed):
    if isinstance(spec.start, str):
        if spec.start == "half":
            th = np.full(p + 1, 0.5)
            th[p] = math.log(0.5)
        elif spec.start == "zero":
            th = np.zeros(p + 1)
        else:
            raise ValueError(f"unknown start {spec.start!r}")
    else:
        s = np.asarray(spec.start, dtype=float)
        if len(s) != p + 1 or s[p] <= 0:
            raise ValueError("explicit start needs p coefficients and a positive sigma")
        th = s.copy()
        th[p] = math.log(s[p])
    return th[:p] if fixed else th


def fit_glmm(data, spec: GlmmSpec = GlmmSpec()) -> GlmmFit:
    """Maximize the quadrature marginal likelihood.

    Parameters
    ----------
    data : LongDataset or Design
    spec : GlmmSpec

    Returns
    -------
    GlmmFit
        ``converged`` requires the gradient max-norm to fall below
        ``spec.grad_tol``; ``seemingly_converged`` flags a converged point
        whose finite-difference Hessian is not negative definite.
    """
    if spec.quadrature not in (ADAPTIVE, NONADAPTIVE):
        raise ValueError(f"unknown quadrature mode {spec.quadrature!r}")
    if spec.optimizer not in (QUASI_NEWTON, NEWTON_RAPHSON):
        raise ValueError(f"unknown optimizer {spec.optimizer!r}")
    if spec.sigma_fixed is not None and spec.sigma_fixed < 0:
        raise ValueError("sigma must be nonnegative")
    design = data if isinstance(data, Design) else build_design(data, spec.formula,
                                                                spec.references)
    fixed = spec.sigma_fixed
    obj = _Objective(design, spec.Q, spec.quadrature == ADAPTIVE, fixed)
    theta = _start(spec, design.p, fixed is not None)
    scale = max(obj.n_subjects, 1)
    notes = []
    tol = spec.grad_tol
    if spec.optimizer == QUASI_NEWTON:
        def f(th):
            ll, g = obj.full(th)
            if not np.isfinite(ll):
                return np.inf, np.zeros_like(th)
            return -ll / scale, -g / scale
        res = optimize.minimize(f, theta, jac=True, method="BFGS",
                                options={"gtol": 0.1 * tol / scale, "maxiter": spec.max_iter})
        theta = res.x
        iterations = int(res.nit)
        ll, g = obj.full(theta)
        if np.max(np.abs(g)) >= tol:
            theta, ll, g, extra = _newton(obj, theta, 20, 0.1 * tol)
            iterations += extra
            notes.append("quasi-Newton polished with Newton steps")
    else:
        theta, ll, g, iterations = _newton(obj, theta, spec.max_iter, 0.1 * tol)
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm < tol
    H = obj.hessian(theta)
    try:
        np.linalg.cholesky(-H)
        definite = True
    except np.linalg.LinAlgError:
        definite = False
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.full_like(H, np.nan)
    cov = 0.5 * (cov + cov.T)
    p = design.p
    sigma = float(fixed) if fixed is not None else math.exp(theta[p])
    at_boundary = fixed is None and sigma < 1e-2
    if at_boundary:
        notes.append("random-intercept SD at the boundary")
    return GlmmFit(theta[:p].copy(), sigma, ll, cov, design.columns, converged,
                   converged and not definite, at_boundary, iterations, gnorm,
                   spec.quadrature, spec.Q, spec.optimizer, design, g, tuple(notes))


def marginalize_mean(beta, sigma, x):
    """Population-averaged success probability ``E[expit(x'beta + b)]``.

    ``x`` may be a single design row or a 2-D array of rows.
    """
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    eta = np.atleast_1d(x @ beta)
    if sigma == 0:
        out = expit(eta)
    else:
        out = np.empty_like(eta)
        for k, e in enumerate(eta):
            fz = lambda z, e=e: expit(e + sigma * z) * math.exp(-0.5 * z * z)
            val, _ = integrate.quad(fz, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)
            out[k] = val / math.sqrt(2 * math.pi)
    return out if x.ndim > 1 else float(out[0])


def attenuation_ratio(sigma):
    """Approximate ratio of random-effects to marginal logistic coefficients,
    ``sqrt(c^2 sigma^2 + 1)`` with ``c = 16 sqrt(3) / (15 pi)``."""
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be nonnegative")
    return np.sqrt(ATTENUATION_C ** 2 * np.asarray(sigma, dtype=float) ** 2 + 1.0)


@dataclass
class ScanResult:
    rows: list
    stable: dict

    def to_csv(self, stream=None):
        own = stream is None
        stream = stream or io.StringIO()
        wr = csv.writer(stream, lineterminator="\n")
        wr.writerow(["mode", "optimizer", "Q", "param", "estimate", "loglik", "status"])
        for r in self.rows:
            wr.writerow([r["mode"], r["optimizer"], r["Q"], r["param"],
                         _fmt(r["estimate"]), _fmt(r["loglik"]), r["status"]])
        if own:
            return stream.getvalue()

    def estimates(self, mode, optimizer, param):
        return {r["Q"]: r["estimate"] for r in self.rows
                if r["mode"] == mode and r["optimizer"] == optimizer and r["param"] == param}


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


def quadrature_scan(data, spec: GlmmSpec, q_list=(2, 3, 5, 10, 20, 50),
                    modes=(NONADAPTIVE, ADAPTIVE), optimizers=(QUASI_NEWTON, NEWTON_RAPHSON),
                    params=None, executor=None) -> ScanResult:
    """Refit over quadrature modes, optimizers and point counts.

    A (mode, optimizer, param) cell is *stable* when its estimate at the
    largest Q differs by less than 1e-3 from the estimate at the largest
    listed Q not exceeding half of it. Failed fits are kept as rows with a
    failure status.
    """
    design = data if isinstance(data, Design) else build_design(data, spec.formula,
                                                                spec.references)
    q_list = list(q_list)
    combos = [(m, o, q) for m in modes for o in optimizers for q in q_list]
    names = list(design.columns) + ["sigma"]
    wanted = names if params is None else list(params)

    def run(combo):
        m, o, q = combo
        s = GlmmSpec(spec.formula, m, q, o, spec.start, spec.sigma_fixed, spec.references,
                     spec.max_iter, spec.grad_tol)
        try:
            fit = fit_glmm(design, s)
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            return [dict(mode=m, optimizer=o, Q=q, param=pn, estimate=float("nan"),
                         loglik=float("nan"), status=f"failed: {exc}") for pn in wanted]
        vals = dict(zip(design.columns, fit.beta))
        vals["sigma"] = fit.sigma
        status = "ok" if fit.converged else "not converged"
        if fit.seemingly_converged:
            status = "seemingly converged"
        return [dict(mode=m, optimizer=o, Q=q, param=pn, estimate=float(vals[pn]),
                     loglik=fit.loglik, status=status) for pn in wanted]

    mapper = executor.map if executor is not None else map
    rows = [r for chunk in mapper(run, combos) for r in chunk]
    stable = {}
    if len(q_list) > 1:
        qmax = max(q_list)
        lower = [q for q in q_list if q <= qmax / 2]
        if lower:
            qref = max(lower)
            for m in modes:
                for o in optimizers:
                    for pn in wanted:
                        est = {r["Q"]: r["estimate"] for r in rows
                               if (r["mode"], r["optimizer"], r["param"]) == (m, o, pn)}
                        diff = abs(est[qmax] - est[qref])
                        stable[(m, o, pn)] = bool(diff < 1e-3)
    return ScanResult(rows, stable)
