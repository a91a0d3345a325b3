"""Synthetic longitudinal binary data from a random-intercept logistic model,
with logistic dropout that can be MCAR, MAR or MNAR.

Complete data are drawn with ``numpy.random.default_rng(seed)`` and dropout
with ``default_rng([seed, 1])``, so the complete data of a spec do not
depend on its dropout settings. Replicate ``r`` of a study uses
``seed + r``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .dataset import LongDataset, SubjectRecord
from .glm import expit, logit

MCAR = "MCAR"
MAR = "MAR"
MNAR = "MNAR"


@dataclass(frozen=True)
class SimSpec:
    """Parameters of one simulated trial.

    Parameters
    ----------
    N, n : int
        Subjects and occasions.
    arms : tuple of str
        Arm labels; the first one is the reference.
    allocation : tuple of float, optional
        Arm proportions (equal by default); counts are rounded and the
        assignment is randomly permuted.
    intercepts : sequence of float
        Occasion-specific intercepts of the reference arm (length n).
    effects : sequence of sequences
        Occasion-specific effects of each non-reference arm (length n each).
    sigma : float
        Random-intercept standard deviation.
    psi_intercept, psi_prev : float
        Dropout intercept and previous-outcome coefficient.
    psi_trt : sequence of float
        Dropout shift for each non-reference arm.
    psi_time : sequence of float
        Dropout shift at occasions 2..n-1 (the last occasion is reference).
    omega : float
        Coefficient of the current, possibly unobserved, outcome.
    dropout : bool
        Whether :func:`apply_dropout` removes anything at all.
    """

    N: int = 300
    n: int = 4
    arms: tuple = ("0", "1")
    allocation: tuple | None = None
    intercepts: tuple = (0.0, 0.0, 0.0, 0.0)
    effects: tuple = ((0.0, 0.0, 0.0, 0.0),)
    sigma: float = 0.0
    psi_intercept: float = -30.0
    psi_prev: float = 0.0
    psi_trt: tuple = (0.0,)
    psi_time: tuple = (0.0, 0.0)
    omega: float = 0.0
    seed: int = 0
    occasions: tuple | None = None
    dropout: bool = True

    def __post_init__(self):
        for name in ("arms", "intercepts", "psi_trt", "psi_time"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "arms", tuple(str(a) for a in self.arms))
        object.__setattr__(self, "effects", tuple(tuple(map(float, e)) for e in self.effects))
        k = len(self.arms)
        if self.N < 1 or self.n < 1:
            raise ValueError("N and n must be positive")
        if len(self.intercepts) != self.n:
            raise ValueError("need one intercept per occasion")
        if len(self.effects) != k - 1 or any(len(e) != self.n for e in self.effects):
            raise ValueError("need one length-n effect vector per non-reference arm")
        if len(self.psi_trt) != k - 1:
            raise ValueError("need one dropout shift per non-reference arm")
        if len(self.psi_time) != max(self.n - 2, 0):
            raise ValueError("need dropout shifts for occasions 2..n-1")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.allocation is not None and (len(self.allocation) != k
                                            or abs(sum(self.allocation) - 1) > 1e-9):
            raise ValueError("allocation must give one proportion per arm, summing to 1")

    @property
    def occasion_labels(self):
        return tuple(str(o) for o in self.occasions) if self.occasions else \
            tuple(str(j + 1) for j in range(self.n))

    @property
    def mechanism(self) -> str:
        if self.omega != 0:
            return MNAR
        if self.psi_prev != 0:
            return MAR
        return MCAR

    def linear_predictor(self, arm) -> np.ndarray:
        """Conditional linear predictor (random intercept 0) per occasion."""
        a = self.arms.index(str(arm))
        eta = np.array(self.intercepts, dtype=float)
        if a > 0:
            eta = eta + np.array(self.effects[a - 1])
        return eta

    def conditional_beta(self) -> dict:
        """True coefficients of ``y ~ 0 + visit + visit:trt`` on the subject scale."""
        occ = self.occasion_labels
        out = {f"visit[{o}]": float(b) for o, b in zip(occ, self.intercepts)}
        for a, eff in zip(self.arms[1:], self.effects):
            for o, e in zip(occ, eff):
                out[f"visit[{o}]:trt[{a}]"] = float(e)
        return out

    def marginal_beta(self) -> dict:
        """Population-averaged counterparts of :meth:`conditional_beta`."""
        from .glmm import marginalize_mean
        occ = self.occasion_labels
        ref = np.atleast_1d(marginalize_mean(np.ones(1), self.sigma,
                                             np.array(self.intercepts)[:, None]))
        out = {f"visit[{o}]": float(logit(p)) for o, p in zip(occ, ref)}
        for a in self.arms[1:]:
            pa = np.atleast_1d(marginalize_mean(np.ones(1), self.sigma,
                                                self.linear_predictor(a)[:, None]))
            for o, p, p0 in zip(occ, pa, ref):
                out[f"visit[{o}]:trt[{a}]"] = float(logit(p) - logit(p0))
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation fields: {sorted(unknown)}")
        return cls(**d)


def _assign_arms(spec: SimSpec, rng):
    k = len(spec.arms)
    props = spec.allocation or (1.0 / k,) * k
    counts = [int(round(p * spec.N)) for p in props]
    counts[-1] = spec.N - sum(counts[:-1])
    labels = np.repeat(np.arange(k), counts)
    return rng.permutation(labels)


def simulate_complete(spec: SimSpec) -> LongDataset:
    """Draw complete outcomes ``Y_ij ~ Bernoulli(expit(x_ij' beta + b_i))``."""
    rng = np.random.default_rng(spec.seed)
    arm = _assign_arms(spec, rng)
    b = rng.normal(0.0, 1.0, spec.N) * spec.sigma
    eta = np.vstack([spec.linear_predictor(spec.arms[a]) for a in range(len(spec.arms))])[arm]
    y = (rng.random((spec.N, spec.n)) < expit(eta + b[:, None])).astype(float)
    width = len(str(spec.N))
    subjects = [SubjectRecord(f"s{i + 1:0{width}d}", y[i], {}, spec.arms[arm[i]])
                for i in range(spec.N)]
    return LongDataset(subjects, spec.occasion_labels, {}, arms=spec.arms)


def dropout_logits(spec: SimSpec, prev, current, arm_index, j):
    """Dropout logit at 0-based occasion ``j >= 1``."""
    lin = spec.psi_intercept + spec.psi_prev * prev + spec.omega * current
    lin = lin + np.where(arm_index > 0,
                         np.array((0.0,) + spec.psi_trt)[arm_index], 0.0)
    if 1 <= j <= spec.n - 2:
        lin = lin + spec.psi_time[j - 1]
    return lin


def apply_dropout(dataset: LongDataset, spec: SimSpec) -> LongDataset:
    """Impose monotone dropout on complete data, occasion by occasion.

    A subject still in the study at occasion ``j >= 2`` drops out there with
    probability ``expit(psi_0 + psi_prev y_{j-1} + psi_trt + psi_time_j +
    omega y_j)``; it then misses every later occasion as well.
    """
    if not spec.dropout:
        return dataset
    Y = dataset.outcome_matrix()
    if np.isnan(Y).any():
        raise ValueError("apply_dropout expects complete data")
    rng = np.random.default_rng([spec.seed, 1])
    arm_index = np.array([dataset.arms.index(t) for t in dataset.treatments()], dtype=int)
    N, n = Y.shape
    U = rng.random((N, n))
    at_risk = np.ones(N, dtype=bool)
    out = Y.copy()
    for j in range(1, n):
        p = expit(dropout_logits(spec, Y[:, j - 1], Y[:, j], arm_index, j))
        drop = at_risk & (U[:, j] < p)
        out[drop, j:] = np.nan
        at_risk &= ~drop
    subjects = [s.with_outcomes(out[i]) for i, s in enumerate(dataset.subjects)]
    return dataset.with_subjects(subjects)


def simulate(spec: SimSpec) -> LongDataset:
    return apply_dropout(simulate_complete(spec), spec)


@dataclass(frozen=True)
class Estimator:
    """A named analysis applied to every replicate.

    ``fit(dataset, spec)`` returns ``{param: (estimate, se)}``; ``scale`` is
    ``"marginal"`` or ``"conditional"`` and selects the truth compared with.
    """

    name: str
    fit: Callable
    scale: str = "marginal"

    def truth(self, spec: SimSpec) -> dict:
        return spec.marginal_beta() if self.scale == "marginal" else spec.conditional_beta()


def _gee_estimator(name, strategy, structure="exchangeable"):
    from .gee import fit_gee
    from .prep import complete_case, drop_all_missing, locf_impute

    def fit(ds, spec):
        if strategy == "cc":
            ds = complete_case(ds)
        elif strategy == "locf":
            ds = locf_impute(ds)
        else:
            ds = drop_all_missing(ds)[0]
        g = fit_gee(ds, "y ~ 0 + visit + visit:trt", structure)
        return {c: (b, s) for c, b, s in zip(g.columns, g.beta, g.se_robust)}
    return Estimator(name, fit, "marginal")


def _wgee_estimator(name, mode="occasion", structure="exchangeable"):
    from .wgee import fit_wgee

    def fit(ds, spec):
        g = fit_wgee(ds, "y ~ 0 + visit + visit:trt", structure, mode=mode)
        return {c: (b, s) for c, b, s in zip(g.columns, g.beta, g.se_robust)}
    return Estimator(name, fit, "marginal")


def _glmm_estimator(name, strategy, Q=20):
    from .glmm import GlmmSpec, fit_glmm
    from .prep import complete_case, drop_all_missing, locf_impute

    def fit(ds, spec):
        if strategy == "cc":
            ds = complete_case(ds)
        elif strategy == "locf":
            ds = locf_impute(ds)
        else:
            ds = drop_all_missing(ds)[0]
        g = fit_glmm(ds, GlmmSpec(n_points=Q))
        if not g.converged:
            raise RuntimeError("GLMM did not converge")
        out = {c: (b, s) for c, b, s in zip(g.columns, g.beta, g.se)}
        out["sigma"] = (g.sigma, g.sigma_se)
        return out
    return Estimator(name, fit, "conditional")


def _oracle(ds, spec):
    return {k: (v, 0.0) for k, v in spec.conditional_beta().items()}


def builtin_estimators() -> dict:
    """Estimators addressable by name from the command line."""
    est = {"oracle": Estimator("oracle", _oracle, "conditional")}
    for s in ("cc", "locf", "observed"):
        est[f"gee-{s}"] = _gee_estimator(f"gee-{s}", s)
        est[f"glmm-{s}"] = _glmm_estimator(f"glmm-{s}", s)
    est["wgee"] = _wgee_estimator("wgee")
    est["wgee-subject"] = _wgee_estimator("wgee-subject", "subject")
    return est


@dataclass
class StudyResult:
    """Per-estimator, per-parameter operating characteristics."""

    rows: list
    failures: dict
    replicates: int
    estimates: dict = field(default_factory=dict, repr=False)

    def row(self, estimator, param):
        for r in self.rows:
            if r["estimator"] == estimator and r["param"] == param:
                return r
        raise KeyError((estimator, param))

    def to_csv(self, stream=None):
        import csv
        import io
        own = stream is None
        stream = stream or io.StringIO()
        cols = ["estimator", "param", "truth", "mean_estimate", "bias", "mc_se",
                "empirical_se", "mean_se", "coverage", "n_ok", "n_failed"]
        wr = csv.writer(stream, lineterminator="\n")
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.10g}" for c in cols])
        if own:
            return stream.getvalue()


def replicate_study(spec: SimSpec, estimators, R: int, params=None, executor=None,
                    level=0.95) -> StudyResult:
    """Run every estimator on ``R`` independent replicates of ``spec``.

    Parameters
    ----------
    estimators : sequence of Estimator or names from :func:`builtin_estimators`
    params : sequence of str, optional
        Parameters to summarize; all parameters with a known truth otherwise.
    executor : concurrent.futures.Executor, optional
        Replicates are mapped over it; results are keyed by replicate index
        so the summary does not depend on completion order.

    Returns
    -------
    StudyResult
        Bias is the mean estimate minus truth, ``mc_se`` its Monte Carlo
        standard error, coverage the share of Wald intervals containing the
        truth. Failed fits are counted and left out of the averages.
    """
    from scipy.stats import norm

    if R < 1:
        raise ValueError("need at least one replicate")
    lib = None
    ests = []
    for e in estimators:
        if isinstance(e, str):
            lib = lib or builtin_estimators()
            if e not in lib:
                raise ValueError(f"unknown estimator {e!r}")
            e = lib[e]
        ests.append(e)
    truths = {e.name: e.truth(spec) for e in ests}

    def one(r):
        ds = simulate(replace(spec, seed=spec.seed + r))
        res = {}
        for e in ests:
            try:
                res[e.name] = e.fit(ds, spec)
            except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError):
                res[e.name] = None
        return r, res

    mapper = executor.map if executor is not None else map
    results = dict(mapper(one, range(R)))
    z = norm.ppf(0.5 + level / 2)
    rows, failures, store = [], {}, {}
    for e in ests:
        fits = [results[r][e.name] for r in range(R)]
        ok = [f for f in fits if f is not None]
        failures[e.name] = len(fits) - len(ok)
        truth = truths[e.name]
        names = params if params is not None else [k for k in truth if ok and k in ok[0]]
        for pn in names:
            if pn not in truth:
                raise ValueError(f"no true value for parameter {pn!r}")
            est = np.array([f[pn][0] for f in ok])
            se = np.array([f[pn][1] for f in ok])
            store[(e.name, pn)] = (est, se)
            k = len(est)
            nan = float("nan")
            mean = float(est.mean()) if k else nan
            emp = float(est.std(ddof=1)) if k > 1 else nan
            rows.append(dict(
                estimator=e.name, param=pn, truth=truth[pn], mean_estimate=mean,
                bias=mean - truth[pn] if k else nan,
                mc_se=emp / math.sqrt(k) if k > 1 else nan,
                empirical_se=emp, mean_se=float(se.mean()) if k else nan,
                coverage=float(np.mean(np.abs(est - truth[pn]) <= z * se)) if k else nan,
                n_ok=k, n_failed=failures[e.name]))
    return StudyResult(rows, failures, R, store)
