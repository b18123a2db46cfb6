"""Renormalization transformations on catalytic Wright-Fisher diffusion matrices.

A matrix w^{alpha,p}(x) = diag(alpha x1(1-x1), p(x1) x2(1-x2)) is carried as
``CatalyticDiffusionMatrix(alpha, p)``. F_c reduces to the log-Laplace operator:

    F_c w^{alpha,p} = w^{alpha', alpha' U_{alpha/c}(p/alpha)},   1/alpha' = 1/alpha + 1/c.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.features.catalyzing_function import CatalyzingFunction
from src.models.loglaplace import UIteration, apply_U, iterate_U
from src.models.wf_core import sample_beta
from src.utils.error_handler import ErrorHandler, ParameterError
from src.utils.logger import LoggerFactory

logger = LoggerFactory.get_logger("renorm")


@dataclass(frozen=True)
class MonteCarloConfig:
    replicas: int = 10000
    dt: float = 1e-3
    jobs: int = 1
    control_variate: bool = True
    burn_in_multiple: float = 10.0
    averaging_time: float = 50.0
    nu_replicas: int = 200


@dataclass(frozen=True, eq=False)
class CatalyticDiffusionMatrix:
    alpha: float
    p: CatalyzingFunction
    p_std_error: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")

    def diagonal(self, x1, x2) -> Tuple[np.ndarray, np.ndarray]:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return self.alpha * x1 * (1.0 - x1), self.p(x1) * x2 * (1.0 - x2)

    def matrix(self, x: Sequence[float]) -> np.ndarray:
        w11, w22 = self.diagonal(x[0], x[1])
        return np.diag([float(w11), float(w22)])

    def trace(self, x1, x2) -> np.ndarray:
        w11, w22 = self.diagonal(x1, x2)
        return w11 + w22

    @property
    def boundary_class(self) -> Tuple[int, int]:
        return self.p.boundary_class

    def scaled(self, lam: float) -> CatalyticDiffusionMatrix:
        return CatalyticDiffusionMatrix(lam * self.alpha, self.p.scaled(lam))

    def sup_distance(self, other: CatalyticDiffusionMatrix) -> float:
        """Sup over [0,1]^2 of the entrywise difference; x(1-x) peaks at 1/4."""
        return 0.25 * max(abs(self.alpha - other.alpha), self.p.sup_distance(other.p))

    def to_json(self, p_csv_path: str) -> Dict[str, Any]:
        return {"alpha": self.alpha, "p_csv_path": p_csv_path, "boundary_class": list(self.boundary_class)}


@dataclass(frozen=True, eq=False)
class MigrationSchedule:
    c: np.ndarray
    beta: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ParameterError("migration schedule needs at least one constant")
        if np.any(c <= 0):
            raise ParameterError("migration constants must be positive")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "c", c)

    @classmethod
    def geometric(cls, gamma_star: float, n: int) -> MigrationSchedule:
        """c_k = (1+gamma*)^(-k), beta = 1/gamma*, for which gamma_n = gamma* exactly."""
        return cls((1.0 + gamma_star) ** -np.arange(n, dtype=float), 1.0 / gamma_star)

    @classmethod
    def constant(cls, n: int, c: float = 1.0, beta: float = 1.0) -> MigrationSchedule:
        return cls(np.full(n, float(c)), beta)

    def __len__(self) -> int:
        return self.c.size

    def with_beta(self, beta: float) -> MigrationSchedule:
        return replace(self, beta=beta)

    @property
    def s(self) -> np.ndarray:
        """s_0 .. s_len, with s_0 = 0."""
        return np.concatenate([[0.0], np.cumsum(1.0 / self.c)])

    @property
    def s_bar(self) -> np.ndarray:
        return self.beta + self.s

    @property
    def gammas(self) -> np.ndarray:
        return 1.0 / (self.s_bar[:-1] * self.c)

    def gamma_sum_diverges(self) -> bool:
        """Heuristic: n * gamma_n bounded away from 0 over the last half of the schedule."""
        g = self.gammas
        n = np.arange(g.size) + 1.0
        tail = slice(g.size // 2, None)
        return bool(np.min(n[tail] * g[tail]) >= 0.5)

    def gamma_limit(self, tol: float = 1e-6) -> Optional[float]:
        g = self.gammas
        if g.size < 2:
            return None
        tail = g[g.size // 2:]
        if np.max(tail) - np.min(tail) <= tol * max(1.0, abs(tail[-1])):
            return float(tail[-1])
        return None

    def flags(self) -> Dict[str, Any]:
        return {"sum_gamma_diverges": self.gamma_sum_diverges(), "gamma_star": self.gamma_limit()}


def schedule_from_ck(c: Sequence[float], beta: float) -> MigrationSchedule:
    schedule = MigrationSchedule(np.asarray(c, dtype=float), beta)
    logger.debug(f"Schedule with {len(schedule)} constants, flags {schedule.flags()}")
    return schedule


def alpha_recursion(alpha: float, c: Sequence[float]) -> np.ndarray:
    """Catalyst coefficients alpha_0..alpha_n under F_{c_0}, F_{c_1}, ..."""
    out = [float(alpha)]
    for ck in c:
        out.append(1.0 / (1.0 / out[-1] + 1.0 / ck))
    return np.array(out)


@ErrorHandler.handle_errors("renorm")
def rescaled_F(gamma: float, w: CatalyticDiffusionMatrix, mc: MonteCarloConfig,
               rng: np.random.Generator) -> CatalyticDiffusionMatrix:
    if not np.isclose(w.alpha, 1.0):
        raise ParameterError(f"rescaled_F needs alpha = 1, got {w.alpha}; use F_c")
    est = apply_U(gamma, w.p, mc.replicas, mc.dt, rng, jobs=mc.jobs, control_variate=mc.control_variate)
    return CatalyticDiffusionMatrix(1.0, est.to_function(name=f"U_{gamma:g} {w.p.name}"), est.std_error)


@ErrorHandler.handle_errors("renorm")
def F_c(w: CatalyticDiffusionMatrix, c: float, mc: MonteCarloConfig,
        rng: np.random.Generator) -> CatalyticDiffusionMatrix:
    if not c > 0:
        raise ParameterError(f"migration constant must be positive, got {c}")
    alpha_new = 1.0 / (1.0 / w.alpha + 1.0 / c)
    gamma = w.alpha / c
    est = apply_U(gamma, w.p.scaled(1.0 / w.alpha), mc.replicas, mc.dt, rng, jobs=mc.jobs,
                  control_variate=mc.control_variate)
    p_new = CatalyzingFunction(est.grid_x, np.clip(alpha_new * est.value, 0.0, None), name=f"F_{c:g} {w.p.name}")
    return CatalyticDiffusionMatrix(alpha_new, p_new, alpha_new * est.std_error)


@dataclass
class RenormIteration:
    """Rescaled iterates s_bar_k F^(k) w = w^{1, U^(k)(p/alpha)}."""

    schedule: MigrationSchedule
    rescaled: List[CatalyticDiffusionMatrix]
    u_iteration: UIteration

    def unscaled(self, k: int) -> CatalyticDiffusionMatrix:
        s_bar = self.schedule.s_bar[k]
        r = self.rescaled[k]
        return CatalyticDiffusionMatrix(1.0 / s_bar, r.p.scaled(1.0 / s_bar))

    def sup_increments(self) -> List[float]:
        return self.u_iteration.sup_increments()


@ErrorHandler.handle_errors("renorm")
def iterate_renorm(w: CatalyticDiffusionMatrix, schedule: MigrationSchedule, n: int, mc: MonteCarloConfig,
                   rng: np.random.Generator) -> RenormIteration:
    if n > len(schedule):
        raise ParameterError(f"schedule has {len(schedule)} constants, {n} iterations requested")
    if not np.isclose(schedule.beta, 1.0 / w.alpha):
        logger.warning(f"Schedule beta {schedule.beta:g} replaced by 1/alpha = {1.0 / w.alpha:g}")
        schedule = schedule.with_beta(1.0 / w.alpha)
    gammas = schedule.gammas[:n]
    it = iterate_U(list(gammas), w.p.scaled(1.0 / w.alpha), mc.replicas, mc.dt, rng, jobs=mc.jobs,
                   control_variate=mc.control_variate)
    rescaled = [CatalyticDiffusionMatrix(1.0, stage, se) for stage, se in zip(it.stages, it.propagated_errors)]
    return RenormIteration(schedule, rescaled, it)


@dataclass(frozen=True, eq=False)
class StationaryPairSample:
    """A batch of (catalyst, reactant) draws, one row per starting point."""
    y1: np.ndarray
    y2: np.ndarray

    def __post_init__(self):
        if self.y1.shape != self.y2.shape:
            raise ParameterError(f"pair components differ in shape: {self.y1.shape} vs {self.y2.shape}")
        for y in (self.y1, self.y2):
            if y.size and (y.min() < 0.0 or y.max() > 1.0):
                raise ParameterError("stationary pair sample outside [0,1]^2")

    def __len__(self) -> int:
        return int(self.y1.size)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.y1, self.y2])


def _pair_step(y1, y2, x1, x2, w: CatalyticDiffusionMatrix, c: float, dt: float, rng):
    sq = np.sqrt(2.0 * dt)
    n1 = rng.standard_normal(y1.shape)
    n2 = rng.standard_normal(y2.shape)
    rate2 = w.p(y1)
    y1_new = y1 + c * (x1 - y1) * dt + sq * np.sqrt(np.clip(w.alpha * y1 * (1.0 - y1), 0.0, None)) * n1
    y2_new = y2 + c * (x2 - y2) * dt + sq * np.sqrt(np.clip(rate2 * y2 * (1.0 - y2), 0.0, None)) * n2
    return np.clip(y1_new, 0.0, 1.0), np.clip(y2_new, 0.0, 1.0)


def sample_stationary_pairs(c: float, w: CatalyticDiffusionMatrix, x: np.ndarray, dt: float, burn_in: float,
                            rng: np.random.Generator) -> StationaryPairSample:
    """Approximate draws from nu^{c,w}_x for each row x of ``x`` (shape (n, 2)).

    The catalyst starts from its exact Beta(x1/g, (1-x1)/g) law with g = alpha/c; the
    reactant starts at x2 and runs ``burn_in`` time units.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y1 = sample_beta(x[:, 0], w.alpha / c, rng)
    y2 = x[:, 1].copy()
    for _ in range(int(np.ceil(burn_in / dt))):
        y1, y2 = _pair_step(y1, y2, x[:, 0], x[:, 1], w, c, dt, rng)
    return StationaryPairSample(y1, y2)


@dataclass(frozen=True, eq=False)
class NuMoments:
    mean_offset: np.ndarray
    mean_offset_se: np.ndarray
    covariance: np.ndarray
    covariance_se: np.ndarray
    burn_in: float
    burn_in_shift: Optional[float] = None

    @property
    def mean(self) -> np.ndarray:
        return self.mean_offset


@ErrorHandler.handle_errors("renorm")
def estimate_nu_moments(c: float, w: CatalyticDiffusionMatrix, x: Sequence[float], mc: MonteCarloConfig,
                        rng: np.random.Generator, compare_burn_in: bool = False) -> NuMoments:
    """Time-averaged first and second centred moments of nu^{c,w}_x.

    Returns estimates of int nu(dy)(y - x) and int nu(dy)(y - x)(y - x)^T with standard
    errors taken across independent replicas.
    """
    if not c > 0:
        raise ParameterError(f"migration constant must be positive, got {c}")
    x = np.asarray(x, dtype=float)
    burn_in = mc.burn_in_multiple / c
    moments = _time_averaged_moments(c, w, x, mc, burn_in, rng)
    shift = None
    if compare_burn_in:
        alt = _time_averaged_moments(c, w, x, mc, 2.0 * burn_in, rng)
        shift = float(np.max(np.abs(alt[2] - moments[2])))
        logger.info(f"Burn-in comparison: covariance shift {shift:.3e} between {burn_in:g} and {2 * burn_in:g}")
    return NuMoments(moments[0], moments[1], moments[2], moments[3], burn_in, shift)


def _time_averaged_moments(c, w, x, mc: MonteCarloConfig, burn_in: float, rng):
    reps = mc.nu_replicas
    start = np.tile(x, (reps, 1))
    pairs = sample_stationary_pairs(c, w, start, mc.dt, burn_in, rng)
    y1, y2 = pairs.y1, pairs.y2
    steps = int(np.ceil(mc.averaging_time / mc.dt))
    first = np.zeros((reps, 2))
    second = np.zeros((reps, 2, 2))
    for _ in range(steps):
        y1, y2 = _pair_step(y1, y2, x[0], x[1], w, c, mc.dt, rng)
        d = np.column_stack([y1 - x[0], y2 - x[1]])
        first += d
        second += d[:, :, None] * d[:, None, :]
    first /= steps
    second /= steps
    sqrt_n = np.sqrt(reps)
    return (first.mean(axis=0), first.std(axis=0, ddof=1) / sqrt_n,
            second.mean(axis=0), second.std(axis=0, ddof=1) / sqrt_n)


class EffectiveBoundary(Enum):
    CORNERS = "four corner points"
    LEFT_EDGE_AND_CORNERS = "left edge plus corners"
    RIGHT_EDGE_AND_CORNERS = "right edge plus corners"
    VERTICAL_EDGES = "both vertical edges"

    def contains(self, x1: float, x2: float) -> bool:
        corner = x1 in (0.0, 1.0) and x2 in (0.0, 1.0)
        left = x1 == 0.0 and self in (EffectiveBoundary.LEFT_EDGE_AND_CORNERS, EffectiveBoundary.VERTICAL_EDGES)
        right = x1 == 1.0 and self in (EffectiveBoundary.RIGHT_EDGE_AND_CORNERS, EffectiveBoundary.VERTICAL_EDGES)
        return corner or left or right


def effective_boundary(w: CatalyticDiffusionMatrix) -> EffectiveBoundary:
    return {
        (1, 1): EffectiveBoundary.CORNERS,
        (0, 1): EffectiveBoundary.LEFT_EDGE_AND_CORNERS,
        (1, 0): EffectiveBoundary.RIGHT_EDGE_AND_CORNERS,
        (0, 0): EffectiveBoundary.VERTICAL_EDGES,
    }[w.boundary_class]


@ErrorHandler.handle_errors("renorm")
def iterated_kernel_sample(w: CatalyticDiffusionMatrix, schedule: MigrationSchedule, n: int, x: Sequence[float],
                           rng: np.random.Generator, mc: Optional[MonteCarloConfig] = None, n_samples: int = 1,
                           iteration: Optional[RenormIteration] = None) -> np.ndarray:
    """Draws from K^(n)_x, shape (n_samples, 2); the outermost kernel is sampled first."""
    if n < 0:
        raise ParameterError(f"n must be nonnegative, got {n}")
    y = np.tile(np.asarray(x, dtype=float), (n_samples, 1))
    if n == 0:
        return y
    mc = mc or MonteCarloConfig()
    if iteration is None:
        iteration = iterate_renorm(w, schedule, n - 1, mc, rng)
    sched = iteration.schedule
    for k in range(n - 1, -1, -1):
        wk = iteration.unscaled(k)
        ck = float(sched.c[k])
        y = sample_stationary_pairs(ck, wk, y, mc.dt, mc.burn_in_multiple / ck, rng).as_array()
    return y
