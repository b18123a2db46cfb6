from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    std_error: float
    samples: int

    def agrees_with(self, target: float, sigmas: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - target) <= sigmas * self.std_error + slack


def mean_estimate(samples: Sequence[float]) -> MeanEstimate:
    values = np.asarray(samples, dtype=float)
    n = values.size
    if n == 0:
        return MeanEstimate(float("nan"), float("inf"), 0)
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return MeanEstimate(float(values.mean()), se, n)


def proportion_estimate(hits: int, total: int) -> MeanEstimate:
    if total == 0:
        return MeanEstimate(float("nan"), float("inf"), 0)
    p = hits / total
    return MeanEstimate(p, float(np.sqrt(max(p * (1.0 - p), 1.0 / total) / total)), total)


def combined_se(*errors: float) -> float:
    return float(np.sqrt(np.sum(np.square(errors))))


def is_nonincreasing_within(values: Sequence[float], errors: Sequence[float], sigmas: float = 3.0) -> bool:
    v = np.asarray(values, dtype=float)
    e = np.asarray(errors, dtype=float)
    slack = sigmas * np.sqrt(e[1:] ** 2 + e[:-1] ** 2)
    return bool(np.all(np.diff(v) <= slack))


def is_nondecreasing_within(values: Sequence[float], errors: Sequence[float], sigmas: float = 3.0) -> bool:
    return is_nonincreasing_within(-np.asarray(values, dtype=float), errors, sigmas)


@dataclass(frozen=True)
class TwoSampleTest:
    statistic: float
    p_value: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.p_value >= self.alpha

    def as_measured(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value}


def ks_two_sample(a: Sequence[float], b: Sequence[float], alpha: float = 0.01) -> TwoSampleTest:
    result = stats.ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return TwoSampleTest(float(result.statistic), float(result.pvalue), alpha)


def pooled_count_table(a: Sequence[int], b: Sequence[int], min_cell: int = 5) -> np.ndarray:
    """2 x k table of integer outcomes; adjacent values are pooled until each column holds 2*min_cell draws."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    top = int(max(a.max(initial=0), b.max(initial=0)))
    table = np.vstack([np.bincount(a, minlength=top + 1), np.bincount(b, minlength=top + 1)])
    columns = []
    current = np.zeros(2, dtype=np.int64)
    for column in table.T:
        current = current + column
        if current.sum() >= 2 * min_cell:
            columns.append(current)
            current = np.zeros(2, dtype=np.int64)
    if current.sum():
        if columns:
            columns[-1] = columns[-1] + current
        else:
            columns.append(current)
    return np.array(columns).T


def count_law_test(a: Sequence[int], b: Sequence[int], alpha: float = 0.01, min_cell: int = 5) -> TwoSampleTest:
    """Chi-square homogeneity test of two samples of counts."""
    table = pooled_count_table(a, b, min_cell)
    if table.shape[1] < 2:
        return TwoSampleTest(0.0, 1.0, alpha)
    chi2, p_value, _, _ = stats.chi2_contingency(table)
    return TwoSampleTest(float(chi2), float(p_value), alpha)
