"""Inverse-probability weighted GEE for monotone dropout under MAR.

A logistic model for the discrete dropout hazard,
``logit P(D_i = j | D_i >= j, history) = h_ij' psi``, is fitted on a
person-period expansion of the monotone data. Its fitted hazards are turned
into either one weight per subject, the inverse probability of the observed
dropout time, or a weight per observed occasion built by the cumulative
recursion used with weighted GENMOD runs.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import CATEGORICAL, CONTINUOUS, INTERMITTENT, DataError, LongDataset, \
    missingness_profile, natural_sort
from .design import build_design
from .gee import GeeFit, fit_gee
from .glm import GlmFit, SeparationError, expit, fit_logistic
from .prep import drop_all_missing, first_observed_only, monotonize

log = logging.getLogger(__name__)

EXTREME_WEIGHT = 50.0


@dataclass(frozen=True)
class DropoutCoding:
    """How history rows ``h_ij`` are laid out."""

    arms: tuple
    arm_reference: str
    covariates: tuple            # (name, kind, levels-with-columns)
    time_occasions: tuple        # occasion labels with a dummy
    treatment_name: str = "trt"

    @property
    def columns(self):
        cols = ["intercept", "prev"]
        cols += [f"{self.treatment_name}[{a}]" for a in self.arms if a != self.arm_reference]
        for name, kind, levels in self.covariates:
            if kind == CONTINUOUS:
                cols.append(name)
            else:
                cols += [f"{name}[{l}]" for l in levels]
        cols += [f"time[{o}]" for o in self.time_occasions]
        return tuple(cols)

    def rows(self, dataset: LongDataset, subj, occ, prev):
        """History rows for subject indices ``subj`` at 0-based occasions ``occ``."""
        subj = np.asarray(subj, dtype=int)
        occ = np.asarray(occ, dtype=int)
        m = len(subj)
        cols = [np.ones(m), np.asarray(prev, dtype=float)]
        trt = dataset.treatments()[subj].astype(str)
        cols += [(trt == a).astype(float) for a in self.arms if a != self.arm_reference]
        for name, kind, levels in self.covariates:
            vals = dataset.covariate_values(name)[subj, occ]
            if kind == CONTINUOUS:
                cols.append(vals.astype(float))
            else:
                vals = vals.astype(str)
                cols += [(vals == l).astype(float) for l in levels]
        labels = np.array(dataset.occasions, dtype=object)[occ]
        cols += [(labels == o).astype(float) for o in self.time_occasions]
        return np.column_stack(cols)


def dropout_coding(dataset: LongDataset, covariates=(), references=None) -> DropoutCoding:
    """Default layout: intercept, previous outcome, arm dummies, extra
    covariates, and occasion dummies for occasions 2..n-1 (the last
    occasion is the reference)."""
    references = dict(references or {})
    arm_ref = str(references.get(dataset.treatment_name, dataset.arms[0]))
    covs = []
    for name in covariates:
        kind = dataset.covariate_schema.get(name)
        if kind is None:
            raise DataError(f"unknown dropout covariate {name!r}")
        if kind == CONTINUOUS:
            covs.append((name, kind, ()))
        else:
            levels = natural_sort({str(v) for v in dataset.covariate_values(name).ravel()})
            ref = str(references.get(name, levels[0]))
            if ref not in levels:
                raise DataError(f"reference {ref!r} not a level of {name!r}")
            covs.append((name, kind, tuple(l for l in levels if l != ref)))
    time_occ = tuple(dataset.occasions[1:-1])
    return DropoutCoding(tuple(dataset.arms), arm_ref, tuple(covs), time_occ,
                         dataset.treatment_name)


@dataclass(frozen=True)
class PersonPeriod:
    subject: np.ndarray
    occasion: np.ndarray        # 0-based index j >= 1
    drop: np.ndarray
    X: np.ndarray
    columns: tuple
    coding: DropoutCoding


def _dropout_index(dataset):
    d = np.empty(dataset.N, dtype=int)
    for i, s in enumerate(dataset.subjects):
        prof = missingness_profile(s)
        if prof.pattern == INTERMITTENT:
            raise DataError(f"subject {s.id} has intermittent missingness; monotonize first")
        if not s.observed[0]:
            raise DataError(f"subject {s.id} misses occasion 1; history undefined")
        d[i] = prof.d
    return d


def person_period_expand(dataset: LongDataset, covariates=(), references=None,
                         coding: DropoutCoding | None = None) -> PersonPeriod:
    """One row per subject per occasion ``j = 2..n`` at which it is at risk.

    ``drop`` is 1 exactly at the subject's dropout occasion. Occasions are
    1-based in this description; the returned ``occasion`` array is 0-based.
    """
    d = _dropout_index(dataset)
    coding = coding or dropout_coding(dataset, covariates, references)
    Y = dataset.outcome_matrix()
    subj, occ, drop = [], [], []
    for i, di in enumerate(d):
        for j in range(2, min(di, dataset.n) + 1):
            subj.append(i)
            occ.append(j - 1)
            drop.append(1.0 if di == j else 0.0)
    subj = np.array(subj, dtype=int)
    occ = np.array(occ, dtype=int)
    prev = Y[subj, occ - 1] if len(subj) else np.zeros(0)
    X = coding.rows(dataset, subj, occ, prev) if len(subj) else np.zeros((0, len(coding.columns)))
    return PersonPeriod(subj, occ, np.array(drop), X, coding.columns, coding)


@dataclass(frozen=True)
class DropoutModel:
    psi: np.ndarray
    covariance: np.ndarray
    columns: tuple
    coding: DropoutCoding
    fit: GlmFit = field(repr=False)

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))

    def table(self):
        """(name, estimate, standard error) per coefficient."""
        return [(c, float(b), float(s)) for c, b, s in zip(self.columns, self.psi, self.se)]

    def hazards(self, dataset: LongDataset) -> np.ndarray:
        """Fitted dropout probability ``p_ij`` for every slot with an observed
        previous outcome (NaN elsewhere and at occasion 1)."""
        Y = dataset.outcome_matrix()
        N, n = Y.shape
        P = np.full((N, n), np.nan)
        subj, occ = np.nonzero(~np.isnan(Y[:, :-1]))
        occ = occ + 1
        if len(subj):
            H = self.coding.rows(dataset, subj, occ, Y[subj, occ - 1])
            P[subj, occ] = expit(H @ self.psi)
        return P


def fit_dropout_model(table: PersonPeriod) -> DropoutModel:
    """Logistic regression of the dropout indicator on the history rows."""
    if table.drop.size == 0 or not table.drop.any():
        raise SeparationError("no dropout events: dropout model not estimable")
    if table.drop.all():
        raise SeparationError("every at-risk row drops: dropout model not estimable")
    fit = fit_logistic(table.X, table.drop, names=table.columns)
    return DropoutModel(fit.beta, fit.covariance, table.columns, table.coding, fit)


def dropout_time_distribution(hazards) -> np.ndarray:
    """``P[D = d]`` for ``d = 2, ..., n+1`` from hazards at occasions 2..n."""
    p = np.asarray(hazards, dtype=float)
    surv = np.concatenate([[1.0], np.cumprod(1.0 - p)])
    return np.concatenate([surv[:-1] * p, surv[-1:]])


@dataclass(frozen=True)
class WeightSet:
    """Inverse-probability weights on the (N, n) grid (NaN where unobserved).

    ``nu`` holds each subject's probability of its observed dropout time and
    ``cumulative`` the pre-inversion occasion-level products.
    """

    mode: str
    values: np.ndarray
    nu: np.ndarray
    cumulative: np.ndarray


def _check_hazards(P, mask):
    vals = P[mask]
    if np.any((vals <= 0) | (vals >= 1)):
        raise FloatingPointError("fitted dropout probability of exactly 0 or 1")


def _weights_from_hazards(P, d, n, mode):
    N = len(d)
    cum = np.full((N, n), np.nan)
    nu = np.empty(N)
    for i in range(N):
        last = min(d[i], n + 1) - 1          # number of observed occasions
        c = 1.0
        cum[i, 0] = c
        for j in range(2, last + 1):         # occasions 2..d-1 (1-based)
            c *= 1.0 - P[i, j - 1]
            cum[i, j - 1] = c
        if d[i] <= n:
            c *= P[i, d[i] - 1]
            cum[i, last - 1] = c
        nu[i] = c
    if mode == "occasion":
        values = 1.0 / cum
    else:
        values = np.where(np.isnan(cum), np.nan, 1.0 / nu[:, None])
    return WeightSet(mode, values, nu, cum)


def _prepare(model: DropoutModel, dataset: LongDataset):
    d = _dropout_index(dataset)
    P = model.hazards(dataset)
    need = np.zeros_like(P, dtype=bool)
    for i, di in enumerate(d):
        need[i, 1:min(di, dataset.n)] = True
    _check_hazards(P, need)
    return d, P


def subject_weights(model: DropoutModel, dataset: LongDataset) -> WeightSet:
    """One weight per subject: ``1 / P[D_i = d_i]`` with
    ``P[D_i = d_i] = prod_{k=2}^{d_i-1} (1 - p_ik) * p_{i d_i}^{I(d_i <= n)}``."""
    d, P = _prepare(model, dataset)
    return _weights_from_hazards(P, d, dataset.n, "subject")


def occasion_weights(model: DropoutModel, dataset: LongDataset) -> WeightSet:
    """Per-occasion weights from the cumulative recursion.

    The running product starts at 1 on occasion 1, picks up ``1 - p_ij`` at
    each later observed occasion, and, for a dropout, ``p_{i d_i}`` at the
    last observed occasion; weights are its inverse. A subject seen only at
    occasion 1 therefore gets ``1 / p_i2`` there.
    """
    d, P = _prepare(model, dataset)
    return _weights_from_hazards(P, d, dataset.n, "occasion")


@dataclass(frozen=True)
class WgeeFit(GeeFit):
    dropout: DropoutModel | None = field(default=None, repr=False)
    weight_set: WeightSet | None = field(default=None, repr=False)
    excluded: dict = field(default_factory=dict)


def fit_wgee(dataset: LongDataset, formula, structure="exchangeable", *,
             mode="occasion", dropout_covariates=(), references=None,
             dropout_references=None, truncate=None, small_sample=False,
             dropout_model: DropoutModel | None = None) -> WgeeFit:
    """Weighted GEE under MAR dropout.

    Intermittent profiles are truncated at their first gap, subjects without
    an observed first occasion are excluded (their dropout history is
    undefined), the dropout model is fitted unless given, and the weighted
    estimating equations are solved.

    Parameters
    ----------
    mode : {"occasion", "subject"}
    dropout_covariates : sequence of str
        Extra covariates in the dropout model besides previous outcome, arm
        and occasion dummies.
    truncate : float, optional
        Cap weights at this quantile of the observed-slot weights.
    """
    if mode not in ("occasion", "subject"):
        raise ValueError(f"unknown weight mode {mode!r}")
    data, n_allmiss = drop_all_missing(dataset)
    data, n_discarded = monotonize(data, return_discarded=True)
    data, n_nofirst = first_observed_only(data)
    excluded = {"all_missing": n_allmiss, "first_missing": n_nofirst,
                "discarded_observations": n_discarded}
    if n_nofirst:
        log.info("WGEE excludes %d subject(s) missing occasion 1", n_nofirst)
    if dropout_model is None:
        table = person_period_expand(data, dropout_covariates, dropout_references)
        dropout_model = fit_dropout_model(table)
    ws = occasion_weights(dropout_model, data) if mode == "occasion" \
        else subject_weights(dropout_model, data)
    W = ws.values
    if truncate is not None:
        cap = np.nanquantile(W, truncate)
        W = np.minimum(W, cap)
    wmax = np.nanmax(W)
    if wmax > EXTREME_WEIGHT:
        warnings.warn(f"extreme inverse-probability weight {wmax:.1f} > {EXTREME_WEIGHT}",
                      RuntimeWarning, stacklevel=2)
    design = build_design(data, formula, references)
    g = fit_gee(design, structure=structure, weights=np.where(design.mask, W, 1.0),
                small_sample=small_sample)
    base = {f.name: getattr(g, f.name) for f in fields(GeeFit)}
    return WgeeFit(**base, dropout=dropout_model, weight_set=ws, excluded=excluded)
