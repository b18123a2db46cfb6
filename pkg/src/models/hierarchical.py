"""Hierarchically interacting catalytic Wright-Fisher diffusions on N^K sites.

Sites are integers 0 .. N^K - 1 whose base-N digits (least significant first) are the
coordinates of the hierarchical group. Two sites are within distance k iff they agree in
every digit above k, so k-blocks are runs of N^k consecutive site ids.

    dx_xi = sum_{k<K} c_k / N^k (x^{k+1}_xi - x_xi) dt + sqrt(2 w(x_xi)) dB_xi
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from src.models.renorm import CatalyticDiffusionMatrix
from src.utils.error_handler import DomainError, ErrorHandler, ParameterError
from src.utils.logger import LoggerFactory

logger = LoggerFactory.get_logger("hierarchical")


@dataclass(frozen=True)
class HierarchicalIndex:
    digits: Tuple[int, ...]
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ParameterError(f"freedom N must be at least 2, got {self.n}")
        if any(not 0 <= d < self.n for d in self.digits):
            raise ParameterError(f"digits {self.digits} outside 0..{self.n - 1}")

    @classmethod
    def from_site(cls, site: int, n: int, k: int) -> HierarchicalIndex:
        digits = []
        for _ in range(k):
            site, d = divmod(site, n)
            digits.append(d)
        return cls(tuple(digits), n)

    def to_site(self) -> int:
        return sum(d * self.n ** j for j, d in enumerate(self.digits))

    def __add__(self, other: HierarchicalIndex) -> HierarchicalIndex:
        if other.n != self.n or len(other.digits) != len(self.digits):
            raise ParameterError("indices must share N and truncation level")
        return HierarchicalIndex(tuple((a + b) % self.n for a, b in zip(self.digits, other.digits)), self.n)

    def __neg__(self) -> HierarchicalIndex:
        return HierarchicalIndex(tuple((-d) % self.n for d in self.digits), self.n)

    def norm(self) -> int:
        """Largest (1-based) position of a nonzero digit, 0 for the origin."""
        nonzero = [j + 1 for j, d in enumerate(self.digits) if d]
        return max(nonzero) if nonzero else 0

    def distance(self, other: HierarchicalIndex) -> int:
        return (self + (-other)).norm()


@dataclass(frozen=True, eq=False)
class HierarchicalTrajectory:
    n: int
    k: int
    times: np.ndarray
    states: np.ndarray

    @property
    def sites(self) -> int:
        return self.states.shape[1]

    def state_at(self, t: float) -> np.ndarray:
        return self.states[int(np.argmin(np.abs(self.times - t)))]

    def global_average(self) -> np.ndarray:
        return self.states.mean(axis=1)

    def to_frame(self) -> pd.DataFrame:
        T, S, _ = self.states.shape
        return pd.DataFrame({"t": np.repeat(self.times, S), "site_id": np.tile(np.arange(S), T),
                             "x1": self.states[:, :, 0].ravel(), "x2": self.states[:, :, 1].ravel()})


def block_means(state: np.ndarray, n: int, k: int) -> np.ndarray:
    """k-block average at every site, same shape as ``state``."""
    sites = state.shape[0]
    size = n ** k
    if sites % size:
        raise DomainError(f"block size {size} does not divide {sites} sites")
    grouped = state.reshape(sites // size, size, *state.shape[1:]).mean(axis=1)
    return np.repeat(grouped, size, axis=0)


def block_average(state: np.ndarray, xi: int, k: int, n: int) -> np.ndarray:
    sites = state.shape[0]
    levels = int(round(np.log(sites) / np.log(n)))
    if not 0 <= k <= levels:
        raise DomainError(f"block level {k} outside 0..{levels}")
    size = n ** k
    start = (xi // size) * size
    return state[start:start + size].mean(axis=0)


def migration_drift(state: np.ndarray, n: int, c: Sequence[float]) -> np.ndarray:
    drift = np.zeros_like(state)
    for k, ck in enumerate(c):
        if ck:
            drift += ck / n ** k * (block_means(state, n, k + 1) - state)
    return drift


@ErrorHandler.handle_errors("hierarchical")
def simulate_hierarchical(n: int, k: int, w: CatalyticDiffusionMatrix, c: Sequence[float], theta: Sequence[float],
                          horizon: float, dt: float, rng: np.random.Generator, record_every: int = 100,
                          noise: bool = True, initial_state: Optional[np.ndarray] = None) -> HierarchicalTrajectory:
    """Euler scheme for the site system; every site starts at ``theta`` unless ``initial_state`` is given."""
    if n < 2 or k < 1:
        raise ParameterError(f"need N >= 2 and K >= 1, got N={n}, K={k}")
    c = list(c)[:k]
    if any(ck < 0 for ck in c):
        raise ParameterError("migration constants must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,) or np.any((theta <= 0) | (theta >= 1)):
        raise ParameterError(f"theta must lie in (0,1)^2, got {theta}")
    rate = sum(ck / n ** j for j, ck in enumerate(c))
    if dt * rate >= 1.0:
        raise ParameterError(f"dt={dt} too large for total migration rate {rate:g}")
    sites = n ** k
    if initial_state is None:
        x = np.tile(theta, (sites, 1))
    else:
        x = np.array(initial_state, dtype=float)
        if x.shape != (sites, 2) or np.any((x < 0) | (x > 1)):
            raise ParameterError(f"initial state must be a ({sites}, 2) array in [0,1], got shape {x.shape}")
    steps = int(np.ceil(horizon / dt))
    times, frames = [0.0], [x.copy()]
    sq = np.sqrt(2.0 * dt)
    for step in range(1, steps + 1):
        drift = migration_drift(x, n, c)
        x = x + drift * dt
        if noise:
            w11, w22 = w.diagonal(np.clip(x[:, 0], 0, 1), np.clip(x[:, 1], 0, 1))
            z = rng.standard_normal(x.shape)
            x[:, 0] += sq * np.sqrt(np.clip(w11, 0.0, None)) * z[:, 0]
            x[:, 1] += sq * np.sqrt(np.clip(w22, 0.0, None)) * z[:, 1]
            x = np.clip(x, 0.0, 1.0)
        if step % record_every == 0 or step == steps:
            times.append(step * dt)
            frames.append(x.copy())
    return HierarchicalTrajectory(n, k, np.array(times), np.stack(frames))


def interaction_chain_extract(trajectory: HierarchicalTrajectory, levels: int, t: float) -> np.ndarray:
    """Block averages around the origin, outermost (level ``levels``) first."""
    if not 0 <= levels <= trajectory.k:
        raise DomainError(f"chain length {levels} outside 0..{trajectory.k}")
    state = trajectory.state_at(t)
    return np.array([block_average(state, 0, j, trajectory.n) for j in range(levels, -1, -1)])


def interaction_chain_frame(chain: np.ndarray) -> pd.DataFrame:
    levels = np.arange(chain.shape[0] - 1, -1, -1)
    return pd.DataFrame({"level": levels, "x1": chain[:, 0], "x2": chain[:, 1]})


@dataclass(frozen=True)
class ChainRegression:
    slope: float
    std_error: float
    pairs: int

    def consistent_with_martingale(self, sigmas: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.slope - 1.0) <= sigmas * self.std_error + slack


def chain_regression(chains: Sequence[np.ndarray], component: int = 0) -> ChainRegression:
    """Least-squares slope of each block average on the next coarser one, pooled over chains and levels."""
    outer = np.concatenate([np.asarray(ch)[:-1, component] for ch in chains])
    inner = np.concatenate([np.asarray(ch)[1:, component] for ch in chains])
    if outer.size < 3 or np.ptp(outer) == 0:
        raise DomainError("interaction chains carry no spread to regress on")
    fit = stats.linregress(outer, inner)
    return ChainRegression(float(fit.slope), float(fit.stderr), int(outer.size))


class Recurrence(Enum):
    RECURRENT = "recurrent"
    TRANSIENT = "transient"
    UNDETERMINED = "undetermined"


@dataclass
class MigrationKernel:
    """Rates a(eta - xi) = sum_{j >= |eta - xi|} c_{j-1} / N^{2j-1} and d_k = sum_m c_{k+m} / N^m."""

    c: Callable[[int], float]
    n: int
    tol: float = 1e-14
    max_terms: int = 4000

    def rate(self, distance: int) -> float:
        if distance < 1:
            return 0.0
        total, j = 0.0, distance
        while j - distance < self.max_terms:
            term = self.c(j - 1) / self.n ** (2 * j - 1)
            total += term
            if term < self.tol * max(total, 1e-300):
                break
            j += 1
        return total

    def d(self, k: int) -> float:
        total = 0.0
        for m in range(self.max_terms):
            term = self.c(k + m) / self.n ** m
            total += term
            if m > 3 and term < self.tol * total:
                return total
        return total


@dataclass
class RecurrenceReport:
    verdict: Recurrence
    partial_sums: List[float]
    method: str
    diagnostics: Dict[str, float] = field(default_factory=dict)


def _as_callable(c: Union[Sequence[float], Callable[[int], float]]) -> Callable[[int], float]:
    if callable(c):
        return c
    values = list(c)
    return lambda k: values[k] if k < len(values) else 0.0


@ErrorHandler.handle_errors("hierarchical")
def recurrence_test(c: Union[Sequence[float], Callable[[int], float], None], n: int, tolerance: float = 0.02,
                    r: Optional[float] = None, terms: int = 60) -> RecurrenceReport:
    """Classify the migration walk by divergence of sum_k 1/d_k.

    With ``r`` given (c_k = r^k) the closed form applies: recurrent iff r <= 1, and the
    sum of c_k / N^k converges iff r < N. Otherwise the terms 1/d_k are examined with a
    ratio test and Raabe's test; inconclusive tails are reported as undetermined.
    """
    if r is not None:
        if r >= n:
            raise ParameterError(f"sum of c_k/N^k diverges for r={r:g} >= N={n}")
        d = [r ** k / (1.0 - r / n) for k in range(terms)]
        partial = list(np.cumsum(1.0 / np.array(d)))
        verdict = Recurrence.RECURRENT if r <= 1.0 else Recurrence.TRANSIENT
        return RecurrenceReport(verdict, partial, "closed form", {"r": r})
    kernel = MigrationKernel(_as_callable(c), n)
    head = [kernel.c(j) / n ** j for j in range(terms)]
    if head[-1] > 0 and head[-1] / max(head[-2], 1e-300) >= 1.0 - tolerance:
        raise ParameterError("sum of c_k/N^k does not converge numerically")
    d = np.array([kernel.d(k) for k in range(terms)])
    if np.any(d <= 0):
        return RecurrenceReport(Recurrence.UNDETERMINED, [], "numeric", {"zero_d_at": float(np.argmax(d <= 0))})
    a = 1.0 / d
    partial = list(np.cumsum(a))
    tail = slice(terms // 2, None)
    ratio = float(np.median(a[1:][tail] / a[:-1][tail]))
    kk = np.arange(terms)[1:][tail]
    raabe = float(np.median(kk * (a[:-1][tail] / a[1:][tail] - 1.0)))
    diag = {"ratio": ratio, "raabe": raabe}
    if ratio >= 1.0 + tolerance or (ratio >= 1.0 - tolerance and raabe < 1.0 - tolerance):
        verdict = Recurrence.RECURRENT
    elif ratio <= 1.0 - tolerance or raabe > 1.0 + tolerance:
        verdict = Recurrence.TRANSIENT
    else:
        verdict = Recurrence.UNDETERMINED
    logger.info(f"Recurrence test N={n}: {verdict.value} (ratio {ratio:.4f}, Raabe {raabe:.3f})")
    return RecurrenceReport(verdict, partial, "numeric", diag)


def heterozygosity_decay(theta: float, alpha: float, t: float) -> float:
    """E[y(1-y)](t) for a migration-free WF diffusion with rate alpha started at theta."""
    return theta * (1.0 - theta) * np.exp(-2.0 * alpha * t)
