"""Long-format longitudinal binary data and missingness bookkeeping."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter, namedtuple
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

MISSING = "NA"

COMPLETE = "Complete"
MONOTONE = "MonotoneDropout"
INTERMITTENT = "Intermittent"
ALL_MISSING = "AllMissing"

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

PatternRow = namedtuple("PatternRow", ["pattern", "count", "percent"])


class DataError(ValueError):
    """Raised for malformed longitudinal input."""


def natural_sort(values: Iterable[str]) -> list[str]:
    """Sort labels numerically when they all parse as numbers, else lexically."""
    values = list(values)
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: outcome slots (NaN = missing), covariates and arm."""

    id: str
    outcomes: np.ndarray
    covariates: Mapping[str, object] = field(default_factory=dict)
    treatment: str = ""

    def __post_init__(self):
        y = _readonly(self.outcomes)
        obs = y[~np.isnan(y)]
        if not np.all((obs == 0) | (obs == 1)):
            raise DataError(f"subject {self.id}: outcomes must be 0, 1 or missing")
        object.__setattr__(self, "outcomes", y)

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.outcomes)

    def with_outcomes(self, outcomes) -> "SubjectRecord":
        return replace(self, outcomes=outcomes)


@dataclass(frozen=True)
class MissingnessProfile:
    r: tuple
    d: int
    pattern: str

    @property
    def string(self) -> str:
        return "".join("O" if x else "M" for x in self.r)


@dataclass(frozen=True)
class LongDataset:
    """Subjects-by-occasions grid of binary outcomes.

    Parameters
    ----------
    subjects : tuple of SubjectRecord
    occasions : tuple of str
        Ordered occasion labels; every subject carries one outcome slot each.
    covariate_schema : mapping
        Covariate name to ``"categorical"`` or ``"continuous"``.
    arms : tuple of str
        Declared treatment arms.
    time_varying : frozenset
        Covariates stored per occasion rather than per subject.
    treatment_name : str
        Name under which the arm label is addressed in formulas.
    """

    subjects: tuple
    occasions: tuple
    covariate_schema: Mapping[str, str] = field(default_factory=dict)
    arms: tuple = ()
    time_varying: frozenset = frozenset()
    treatment_name: str = "trt"

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "occasions", tuple(str(o) for o in self.occasions))
        object.__setattr__(self, "time_varying", frozenset(self.time_varying))
        if len(set(self.occasions)) != len(self.occasions):
            raise DataError("occasion labels must be distinct")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject identifiers must be unique")
        n = len(self.occasions)
        arms = tuple(self.arms) or tuple(natural_sort({s.treatment for s in self.subjects}))
        object.__setattr__(self, "arms", arms)
        for s in self.subjects:
            if len(s.outcomes) != n:
                raise DataError(f"subject {s.id} has {len(s.outcomes)} slots, expected {n}")
            if s.treatment not in arms:
                raise DataError(f"subject {s.id}: undeclared arm {s.treatment!r}")

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.occasions)

    def outcome_matrix(self) -> np.ndarray:
        """(N, n) float array with NaN for missing outcomes."""
        if not self.subjects:
            return np.empty((0, self.n))
        return np.vstack([s.outcomes for s in self.subjects])

    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.outcome_matrix())

    def treatments(self) -> np.ndarray:
        return np.array([s.treatment for s in self.subjects], dtype=object)

    def with_subjects(self, subjects) -> "LongDataset":
        return replace(self, subjects=tuple(subjects))

    def covariate_values(self, name: str) -> np.ndarray:
        """Values of a covariate as an (N, n) object/float array."""
        if name == self.treatment_name:
            col = self.treatments()
            return np.repeat(col[:, None], self.n, axis=1)
        if name not in self.covariate_schema:
            raise KeyError(name)
        cont = self.covariate_schema[name] == CONTINUOUS
        out = np.empty((self.N, self.n), dtype=float if cont else object)
        for i, s in enumerate(self.subjects):
            out[i, :] = s.covariates[name]
        return out

    def to_csv(self, stream=None, outcome="y", id_name="id", occasion_name="occasion"):
        """Write in the long CSV layout accepted by :func:`load_long_csv`."""
        own = stream is None
        if own:
            stream = io.StringIO()
        covs = list(self.covariate_schema)
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([id_name, occasion_name, outcome, self.treatment_name] + covs)
        for s in self.subjects:
            for j, occ in enumerate(self.occasions):
                y = s.outcomes[j]
                row = [s.id, occ, MISSING if np.isnan(y) else str(int(y)), s.treatment]
                for c in covs:
                    v = s.covariates[c]
                    if c in self.time_varying:
                        v = v[j]
                    row.append(_format_value(v))
                w.writerow(row)
        if own:
            return stream.getvalue()


def _format_value(v):
    if isinstance(v, (float, np.floating)):
        if np.isnan(v):
            return MISSING
        return repr(float(v))
    return str(v)


def _parse_outcome(cell, where):
    cell = cell.strip()
    if cell == MISSING or cell == "":
        return math.nan
    if cell in ("0", "1"):
        return float(cell)
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"{where}: outcome {cell!r} not in {{0, 1, NA}}") from None
    if val in (0.0, 1.0):
        return val
    raise DataError(f"{where}: outcome {cell!r} not in {{0, 1, NA}}")


def load_long_csv(source, schema: Mapping[str, str] | None = None, *,
                  treatment="trt", id_name="id", occasion_name="occasion",
                  outcome="y", occasions=None, arms=None,
                  time_varying=()) -> LongDataset:
    """Read a long-format CSV (one row per subject-occasion).

    Parameters
    ----------
    source : text stream, str path or os.PathLike
    schema : mapping, optional
        Covariate kinds. Undeclared columns are continuous when every cell
        parses as a number and categorical otherwise.
    treatment : str
        Column holding the arm label.
    outcome : str
        Outcome column; falls back to ``"outcome"`` when absent.
    occasions : sequence of str, optional
        Declared occasion order. Labels outside it raise. Inferred from the
        data (numeric order when possible) if omitted.
    time_varying : iterable of str
        Covariates allowed to change across a subject's rows.

    Returns
    -------
    LongDataset
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_long_csv(fh, schema, treatment=treatment, id_name=id_name,
                                 occasion_name=occasion_name, outcome=outcome,
                                 occasions=occasions, arms=arms,
                                 time_varying=time_varying)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input: no header row") from None
    if outcome not in header and "outcome" in header:
        outcome = "outcome"
    for req in (id_name, occasion_name, outcome):
        if req not in header:
            raise DataError(f"header lacks required column {req!r}")
    col = {h: k for k, h in enumerate(header)}
    cov_names = [h for h in header if h not in (id_name, occasion_name, outcome, treatment)]
    time_varying = frozenset(time_varying)

    rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise DataError("no data rows")
    if occasions is None:
        occasions = natural_sort({r[col[occasion_name]].strip() for r in rows})
    occasions = [str(o) for o in occasions]
    occ_index = {o: j for j, o in enumerate(occasions)}
    n = len(occasions)

    schema = dict(schema or {})
    for c in cov_names:
        if c not in schema:
            cells = [r[col[c]].strip() for r in rows if r[col[c]].strip() not in (MISSING, "")]
            try:
                [float(x) for x in cells]
                schema[c] = CONTINUOUS
            except ValueError:
                schema[c] = CATEGORICAL
    unknown = set(schema) - set(cov_names)
    if unknown:
        raise DataError(f"schema names columns absent from the header: {sorted(unknown)}")

    order, outcomes, covs, trts, seen = [], {}, {}, {}, set()
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} cells, got {len(r)}")
        sid = r[col[id_name]].strip()
        occ = r[col[occasion_name]].strip()
        if occ not in occ_index:
            raise DataError(f"line {lineno}: unknown occasion label {occ!r}")
        if (sid, occ) in seen:
            raise DataError(f"line {lineno}: duplicate row for subject {sid!r}, occasion {occ!r}")
        seen.add((sid, occ))
        j = occ_index[occ]
        if sid not in outcomes:
            order.append(sid)
            outcomes[sid] = np.full(n, np.nan)
            covs[sid] = {}
        outcomes[sid][j] = _parse_outcome(r[col[outcome]], f"line {lineno}")
        if treatment in col:
            t = r[col[treatment]].strip()
            if trts.setdefault(sid, t) != t:
                raise DataError(f"line {lineno}: treatment changes within subject {sid!r}")
        for c in cov_names:
            cell = r[col[c]].strip()
            if schema[c] == CONTINUOUS:
                val = math.nan if cell in (MISSING, "") else float(cell)
            else:
                val = cell
            if c in time_varying:
                store = covs[sid].setdefault(c, np.full(n, np.nan) if schema[c] == CONTINUOUS
                                             else np.full(n, MISSING, dtype=object))
                store[j] = val
            else:
                prev = covs[sid].setdefault(c, val)
                same = (prev == val) or (isinstance(prev, float) and math.isnan(prev)
                                         and math.isnan(val))
                if not same:
                    raise DataError(f"line {lineno}: covariate {c!r} varies within "
                                    f"subject {sid!r} but is not declared time-varying")
    subjects = [SubjectRecord(sid, outcomes[sid], covs[sid], trts.get(sid, ""))
                for sid in order]
    return LongDataset(subjects, occasions, schema, arms=tuple(arms) if arms else (),
                       time_varying=time_varying & set(cov_names),
                       treatment_name=treatment)


def missingness_profile(subject: SubjectRecord) -> MissingnessProfile:
    """Observation indicators, dropout index and pattern class of a subject.

    The dropout index follows the convention ``d = n + 1`` for completers and
    ``d = 1 + (last index of the leading run of observed slots)`` otherwise
    (1-based occasions), so an all-missing profile gets ``d = 1`` through the
    formula but is assigned ``d = 2`` for estimation purposes.
    """
    r = tuple(int(x) for x in subject.observed)
    n = len(r)
    lead = 0
    while lead < n and r[lead]:
        lead += 1
    total = sum(r)
    if total == n:
        return MissingnessProfile(r, n + 1, COMPLETE)
    if total == 0:
        return MissingnessProfile(r, 2, ALL_MISSING)
    if total == lead:
        return MissingnessProfile(r, lead + 1, MONOTONE)
    return MissingnessProfile(r, max(lead, 1) + 1, INTERMITTENT)


def pattern_table(dataset: LongDataset) -> list[PatternRow]:
    """Frequency of each observed/missing pattern string.

    Rows are ordered completers first, then monotone dropouts by decreasing
    number of observed occasions, the all-missing pattern, and finally
    intermittent patterns; ties break on the pattern string (``O`` first).
    """
    if dataset.N == 0:
        raise DataError("pattern table of an empty dataset")
    profiles = [missingness_profile(s) for s in dataset.subjects]
    counts = Counter(p.string for p in profiles)
    kind = {p.string: p.pattern for p in profiles}
    rank = {COMPLETE: 0, MONOTONE: 1, ALL_MISSING: 2, INTERMITTENT: 3}
    keys = sorted(counts, key=lambda s: (rank[kind[s]], -s.count("O") if kind[s] == MONOTONE else 0,
                                         s.replace("O", "0").replace("M", "1")))
    return [PatternRow(k, counts[k], 100.0 * counts[k] / dataset.N) for k in keys]


def pattern_kinds(dataset: LongDataset) -> dict:
    """Map each pattern string present in the data to its class."""
    return {missingness_profile(s).string: missingness_profile(s).pattern
            for s in dataset.subjects}


def armd_fixture_path():
    """Path to the bundled 240-subject fixture with the macular-degeneration
    trial's missingness pattern counts (outcomes are synthetic)."""
    return resources.files("longit") / "data" / "armd_patterns.csv"


def load_armd_fixture() -> LongDataset:
    with resources.as_file(armd_fixture_path()) as p:
        return load_long_csv(p, {"lesion": CATEGORICAL}, treatment="trt")
