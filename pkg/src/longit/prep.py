"""Data-handling strategies: complete cases, LOCF and observed-data views."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import (ALL_MISSING, COMPLETE, DataError, LongDataset, SubjectRecord,
                      missingness_profile)

log = logging.getLogger(__name__)


class NoCompletersError(DataError):
    pass


def complete_case(dataset: LongDataset) -> LongDataset:
    """Keep only subjects observed at every occasion."""
    keep = [s for s in dataset.subjects if missingness_profile(s).pattern == COMPLETE]
    if not keep:
        raise NoCompletersError("no completers: complete-case analysis is empty")
    return dataset.with_subjects(keep)


def locf_fill(y: np.ndarray) -> np.ndarray:
    """Forward-fill a single outcome vector; leading gaps stay missing."""
    out = np.array(y, dtype=float)
    last = np.nan
    for j, v in enumerate(out):
        if np.isnan(v):
            out[j] = last
        else:
            last = v
    return out


def locf_impute(dataset: LongDataset, return_dropped: bool = False):
    """Carry the last observed outcome forward into later missing slots.

    Subjects without any observed outcome are dropped (logged, and returned
    as a count when ``return_dropped`` is true).
    """
    keep, dropped = [], 0
    for s in dataset.subjects:
        if not s.observed.any():
            dropped += 1
            continue
        keep.append(s.with_outcomes(locf_fill(s.outcomes)))
    if dropped:
        log.warning("LOCF dropped %d subject(s) with no observed outcome", dropped)
    out = dataset.with_subjects(keep)
    return (out, dropped) if return_dropped else out


@dataclass(frozen=True)
class SplitOutcome:
    indices: np.ndarray
    values: np.ndarray


def observed_split(subject: SubjectRecord):
    """Partition a subject's outcome slots into observed and missing parts.

    Returns
    -------
    observed, missing : SplitOutcome
        0-based occasion indices with their values (NaN for the missing part).
    """
    obs = subject.observed
    idx = np.arange(len(obs))
    return (SplitOutcome(idx[obs], subject.outcomes[obs]),
            SplitOutcome(idx[~obs], subject.outcomes[~obs]))


def monotonize(dataset: LongDataset, return_discarded: bool = False):
    """Truncate every profile at its first missing occasion.

    Intermittent gaps are thereby turned into dropout; observations after
    the first gap are discarded. Subjects missing occasion 1 lose everything.
    """
    keep, discarded = [], 0
    for s in dataset.subjects:
        y = np.array(s.outcomes)
        gaps = np.flatnonzero(np.isnan(y))
        if gaps.size:
            tail = y[gaps[0]:]
            discarded += int(np.count_nonzero(~np.isnan(tail)))
            y[gaps[0]:] = np.nan
            s = s.with_outcomes(y)
        keep.append(s)
    out = dataset.with_subjects(keep)
    return (out, discarded) if return_discarded else out


def drop_all_missing(dataset: LongDataset) -> tuple[LongDataset, int]:
    """Remove subjects with no observed outcome; they carry no information."""
    keep = [s for s in dataset.subjects if missingness_profile(s).pattern != ALL_MISSING]
    return dataset.with_subjects(keep), dataset.N - len(keep)


def first_observed_only(dataset: LongDataset) -> tuple[LongDataset, int]:
    """Remove subjects whose first occasion is missing."""
    keep = [s for s in dataset.subjects if s.observed[0]]
    return dataset.with_subjects(keep), dataset.N - len(keep)
