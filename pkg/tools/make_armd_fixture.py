"""Regenerate src/longit/data/armd_patterns.csv.

The fixture has the missingness-pattern counts of the macular-degeneration
trial (240 subjects, visits at weeks 4, 12, 24 and 52) with synthetic
outcomes: a random-intercept logistic model with a worsening trend, a small
benefit of active treatment and a lesion-severity gradient. Run from the
repository root:

    python3 tools/make_armd_fixture.py
"""
from pathlib import Path

import numpy as np

from longit.dataset import CATEGORICAL, LongDataset, SubjectRecord
from longit.glm import expit

PATTERNS = [("OOOO", 188), ("OOOM", 24), ("OOMM", 8), ("OMMM", 6), ("MMMM", 6),
            ("OOMO", 4), ("OMMO", 1), ("MOOO", 2), ("MOMM", 1)]
OCCASIONS = ("4", "12", "24", "52")
OUT = Path(__file__).resolve().parents[1] / "src" / "longit" / "data" / "armd_patterns.csv"


def build(seed=20240601):
    rng = np.random.default_rng(seed)
    strings = [p for p, k in PATTERNS for _ in range(k)]
    strings = [strings[i] for i in rng.permutation(len(strings))]
    N = len(strings)
    trt = rng.permutation(np.repeat(["0", "1"], N // 2))
    lesion = rng.integers(1, 5, N)
    b = rng.normal(0.0, 1.5, N)
    trend = np.array([-1.2, -0.8, -0.4, 0.0])
    eta = trend[None, :] - 0.4 * (trt == "1")[:, None] + 0.25 * (lesion - 2.5)[:, None] + b[:, None]
    y = (rng.random((N, 4)) < expit(eta)).astype(float)
    subjects = []
    for i, s in enumerate(strings):
        yi = np.where(np.array(list(s)) == "O", y[i], np.nan)
        subjects.append(SubjectRecord(f"p{i + 1:03d}", yi, {"lesion": str(lesion[i])}, trt[i]))
    return LongDataset(subjects, OCCASIONS, {"lesion": CATEGORICAL}, arms=("0", "1"))


if __name__ == "__main__":
    OUT.parent.mkdir(parents=True, exist_ok=True)
    with open(OUT, "w", encoding="utf-8", newline="") as fh:
        build().to_csv(fh)
    print(f"wrote {OUT}")
