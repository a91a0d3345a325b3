"""Formula mini-language and per-subject design matrices.

Formulas read ``y ~ trt*visit + baseline*visit``: ``*`` expands to main
effects plus interaction, ``:`` is a bare interaction, ``0`` or ``-1`` drops
the intercept. ``visit`` (alias ``occasion``) always names the categorical
occasion factor; the dataset's treatment name addresses the arm label.

Categorical factors inside a term are dummy coded against their reference
level when the term with that factor removed is already in the model, and
fully indicator coded otherwise, so ``0 + visit + visit:trt`` yields the
occasion-specific intercepts and treatment effects.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dataset import CATEGORICAL, CONTINUOUS, DataError, LongDataset, natural_sort

OCCASION_NAMES = ("visit", "occasion")


@dataclass(frozen=True)
class Formula:
    response: str
    terms: tuple
    intercept: bool = True

    def __str__(self):
        rhs = ["1" if self.intercept else "0"] + [":".join(t) for t in self.terms]
        return f"{self.response} ~ " + " + ".join(rhs)


def parse_formula(text: str | Formula) -> Formula:
    if isinstance(text, Formula):
        return text
    if "~" not in text:
        raise ValueError(f"formula {text!r} lacks '~'")
    lhs, rhs = text.split("~", 1)
    response = lhs.strip() or "y"
    intercept = True
    terms, seen = [], set()
    for piece in rhs.replace("-", "+-").split("+"):
        piece = piece.strip()
        if not piece:
            continue
        if piece in ("0", "-1"):
            intercept = False
            continue
        if piece == "1":
            intercept = True
            continue
        if piece.startswith("-"):
            raise ValueError(f"term removal {piece!r} is not supported")
        if "*" in piece:
            factors = [f.strip() for f in piece.split("*")]
            expanded = [c for k in range(1, len(factors) + 1)
                        for c in itertools.combinations(factors, k)]
        else:
            expanded = [tuple(f.strip() for f in piece.split(":"))]
        for t in expanded:
            if any(not f or not f.replace("_", "").replace(".", "").isalnum() for f in t):
                raise ValueError(f"malformed term {piece!r}")
            key = frozenset(t)
            if key not in seen:
                seen.add(key)
                terms.append(tuple(t))
    terms.sort(key=len)
    return Formula(response, tuple(terms), intercept)


@dataclass(frozen=True)
class FactorCoding:
    name: str
    kind: str
    levels: tuple = ()       # levels that receive a column (categorical)


@dataclass(frozen=True)
class DesignInfo:
    """Column layout of a built design; rebuilds rows for arbitrary values."""

    formula: Formula
    columns: tuple
    terms: tuple                      # tuple of tuples of FactorCoding
    levels: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    occasion_factor: str = "visit"
    treatment_name: str = "trt"

    @property
    def p(self) -> int:
        return len(self.columns)

    def matrix(self, values: dict, m: int | None = None) -> np.ndarray:
        """Design rows for factor values given as equal-length 1-D arrays.

        ``m`` gives the row count when no factor values are needed, as for
        an intercept-only model.
        """
        for v in values.values():
            m = len(v)
            break
        if m is None:
            raise ValueError("no factor values supplied")
        cols = []
        if self.formula.intercept:
            cols.append(np.ones(m))
        for term in self.terms:
            parts = []
            for fc in term:
                v = np.asarray(values[fc.name])
                if fc.kind == CONTINUOUS:
                    parts.append([v.astype(float)])
                else:
                    vs = v.astype(str)
                    parts.append([(vs == lev).astype(float) for lev in fc.levels])
            for combo in itertools.product(*parts):
                col = np.ones(m)
                for c in combo:
                    col = col * c
                cols.append(col)
        return np.column_stack(cols) if cols else np.empty((m, 0))

    def names_factors(self):
        return {fc.name for t in self.terms for fc in t}


@dataclass(frozen=True)
class Design:
    """Balanced (subjects, occasions, columns) layout of a model matrix.

    ``X[i, j]`` is the design row of subject ``i`` at occasion ``j``; rows at
    unobserved slots are present but zero-filled where covariates are
    undefined. ``mask`` marks the slots that enter estimation.
    """

    X: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    info: DesignInfo
    subject_ids: tuple
    occasions: tuple

    @property
    def columns(self):
        return self.info.columns

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def p(self):
        return self.X.shape[2]

    def stacked(self, weights=None):
        """Observed rows stacked subject-major: (X, y[, w])."""
        m = self.mask
        if weights is None:
            return self.X[m], self.y[m]
        return self.X[m], self.y[m], np.asarray(weights)[m]

    def subset(self, keep) -> "Design":
        keep = np.asarray(keep)
        return Design(self.X[keep], self.y[keep], self.mask[keep], self.info,
                      tuple(np.asarray(self.subject_ids, dtype=object)[keep]), self.occasions)


def _factor_levels(dataset: LongDataset, name: str):
    if name in OCCASION_NAMES:
        return CATEGORICAL, tuple(dataset.occasions)
    if name == dataset.treatment_name:
        return CATEGORICAL, tuple(dataset.arms)
    if name not in dataset.covariate_schema:
        raise DataError(f"unknown term {name!r}")
    kind = dataset.covariate_schema[name]
    if kind == CONTINUOUS:
        return CONTINUOUS, ()
    vals = dataset.covariate_values(name).ravel()
    return CATEGORICAL, tuple(natural_sort({str(v) for v in vals if str(v) != "NA"}))


def design_info(dataset: LongDataset, formula, references=None) -> DesignInfo:
    formula = parse_formula(formula)
    references = dict(references or {})
    kinds, levels = {}, {}
    for t in formula.terms:
        for f in t:
            if f not in kinds:
                kinds[f], levels[f] = _factor_levels(dataset, f)
    refs = {}
    for f, k in kinds.items():
        if k != CATEGORICAL:
            continue
        ref = str(references.get(f, levels[f][0] if levels[f] else ""))
        if ref not in levels[f]:
            raise DataError(f"reference level {ref!r} not a level of {f!r}")
        refs[f] = ref
    included = {frozenset()} if formula.intercept else set()
    coded_terms, columns = [], []
    if formula.intercept:
        columns.append("intercept")
    for t in formula.terms:
        codings, names = [], []
        for f in t:
            if kinds[f] == CONTINUOUS:
                codings.append(FactorCoding(f, CONTINUOUS))
                names.append([f])
                continue
            reduced = frozenset(t) - {f} in included
            levs = tuple(l for l in levels[f] if not (reduced and l == refs[f]))
            codings.append(FactorCoding(f, CATEGORICAL, levs))
            names.append([f"{f}[{l}]" for l in levs])
        included.add(frozenset(t))
        coded_terms.append(tuple(codings))
        columns.extend(":".join(c) for c in itertools.product(*names))
    occ = next((f for f in kinds if f in OCCASION_NAMES), "visit")
    return DesignInfo(formula, tuple(columns), tuple(coded_terms), levels, refs, kinds,
                      occ, dataset.treatment_name)


def build_design(dataset: LongDataset, formula, references=None,
                 check_rank: bool = True) -> Design:
    """Expand a formula over every subject-occasion slot.

    Parameters
    ----------
    dataset : LongDataset
    formula : str or Formula
    references : dict, optional
        Reference level per categorical factor; the first level in natural
        order (occasion order for visits) otherwise.
    check_rank : bool
        Raise if the observed rows do not have full column rank.
    """
    info = design_info(dataset, formula, references)
    N, n = dataset.N, dataset.n
    values = {}
    for f in info.kinds:
        if f in OCCASION_NAMES:
            values[f] = np.tile(np.array(dataset.occasions, dtype=object), N)
        else:
            values[f] = dataset.covariate_values(f).reshape(-1)
    if N == 0:
        X = np.empty((0, n, info.p))
    else:
        X = info.matrix(values, N * n).reshape(N, n, info.p)
    y = dataset.outcome_matrix()
    mask = ~np.isnan(y)
    if (np.isnan(X).any(axis=2) & mask).any():
        raise DataError("missing covariate on an observed row")
    X = np.where(np.isnan(X), 0.0, X)
    if check_rank and mask.any():
        rows = X[mask]
        if np.linalg.matrix_rank(rows) < info.p:
            raise DataError(f"collinear expansion: design of rank "
                            f"{np.linalg.matrix_rank(rows)} < {info.p} columns")
    return Design(X, y, mask, info, tuple(s.id for s in dataset.subjects), dataset.occasions)
