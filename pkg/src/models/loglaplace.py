"""Log-Laplace operator U_gamma of the Poisson-cluster branching step.

    U_gamma p(x) = q_gamma * E[1 - exp(-<Z_x, p>)],    q_gamma = 1/gamma + 1

where the cluster Z_x has total mass tau ~ Exp(mean gamma) spread along a stationary
Wright-Fisher segment of duration tau/2 with weight 2 ds. Monte Carlo estimates use the
exact mean E<Z_x, p> = gamma <Gamma_x, p> as a control variate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from src.features.catalyzing_function import CatalyzingFunction
from src.models.wf_core import (AtomRecorder, IntegralObserver, dual_chain_psi_batch,
                                run_segments)
from src.utils.error_handler import ErrorHandler, ParameterError
from src.utils.logger import LoggerFactory
from src.utils.parallel import parallel_map
from src.utils.statistics import MeanEstimate, mean_estimate

logger = LoggerFactory.get_logger("loglaplace")


def q_gamma(gamma: float) -> float:
    return 1.0 / gamma + 1.0


@dataclass(frozen=True, eq=False)
class ClusterSample:
    positions: np.ndarray
    weights: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f) -> float:
        return float(np.sum(f(self.positions) * self.weights))


@dataclass(frozen=True, eq=False)
class LogLaplaceEstimate:
    grid_x: np.ndarray
    value: np.ndarray
    std_error: np.ndarray
    replicas: int
    gamma: float

    def to_function(self, name: str = "U p") -> CatalyzingFunction:
        return CatalyzingFunction(self.grid_x, np.clip(self.value, 0.0, None), name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.grid_x, "value": self.value, "std_error": self.std_error})


def _check_gamma(gamma: float) -> None:
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")


def sample_cluster(gamma: float, x: float, dt: float, rng: np.random.Generator) -> ClusterSample:
    _check_gamma(gamma)
    if not 0.0 <= x <= 1.0:
        raise ParameterError(f"x must lie in [0,1], got {x}")
    tau = rng.exponential(gamma)
    recorder = AtomRecorder()
    run_segments(x, gamma, np.array([tau / 2.0]), dt, rng, recorder)
    _, pos, w = recorder.arrays()
    return ClusterSample(pos, 2.0 * w)


def cluster_integrals(gamma: float, x: float, f, replicas: int, dt: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draws of (<Z_x, f>, <Z_x, 1>) over ``replicas`` clusters."""
    _check_gamma(gamma)
    tau = rng.exponential(gamma, size=replicas)
    obs = IntegralObserver(f, replicas)
    run_segments(x, gamma, tau / 2.0, dt, rng, obs)
    return 2.0 * obs.totals, tau


def stationary_expectation(gamma: float, x: float, p: CatalyzingFunction) -> float:
    """Exact <Gamma^gamma_x, p> for the piecewise-linear interpolant of p."""
    a1, a2 = x / gamma, (1.0 - x) / gamma
    if a1 < 1e-12 or a2 < 1e-12:
        return float(p(x))
    g = p.grid_x
    v = p.values
    slope = np.diff(v) / np.diff(g)
    intercept = v[:-1] - slope * g[:-1]
    cdf = stats.beta.cdf(g, a1, a2)
    cdf_shift = stats.beta.cdf(g, a1 + 1.0, a2)
    mean = a1 / (a1 + a2)
    return float(np.sum(intercept * np.diff(cdf) + slope * mean * np.diff(cdf_shift)))


def linear_bound(gamma: float, p: CatalyzingFunction) -> np.ndarray:
    """(1+gamma) <Gamma_x, p> per grid node, an upper bound for U_gamma p."""
    return np.array([(1.0 + gamma) * stationary_expectation(gamma, x, p) for x in p.grid_x])


def _estimate_node(task) -> tuple[float, float]:
    gamma, grid_x, values, x, replicas, dt, rng, control_variate = task
    p = CatalyzingFunction(grid_x, values)
    if not np.any(values > 0):
        return 0.0, 0.0
    integral, _ = cluster_integrals(gamma, x, p, replicas, dt, rng)
    samples = -np.expm1(-integral)
    if control_variate:
        samples = samples - (integral - gamma * stationary_expectation(gamma, x, p))
    q = q_gamma(gamma)
    est = mean_estimate(samples)
    return max(q * est.mean, 0.0), q * est.std_error


@ErrorHandler.handle_errors("loglaplace")
def apply_U(gamma: float, p: CatalyzingFunction, replicas: int, dt: float, rng: np.random.Generator,
            jobs: int = 1, control_variate: bool = True,
            nodes: Optional[np.ndarray] = None) -> LogLaplaceEstimate:
    """Monte Carlo U_gamma p on the grid of p, or at ``nodes`` if given."""
    _check_gamma(gamma)
    xs = p.grid_x if nodes is None else np.asarray(nodes, dtype=float)
    children = rng.spawn(xs.size)
    tasks = [(gamma, p.grid_x, p.values, float(x), replicas, dt, child, control_variate)
             for x, child in zip(xs, children)]
    results = parallel_map(_estimate_node, tasks, jobs)
    value = np.array([r[0] for r in results])
    se = np.array([r[1] for r in results])
    logger.debug(f"U_{gamma:g} {p.name}: max value {value.max():.4f}, max SE {se.max():.2e}")
    return LogLaplaceEstimate(xs, value, se, replicas, gamma)


def injected_psi_samples(gamma: float, m: int, runs: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ParameterError(f"h_m needs m >= 1, got {m}")
    _check_gamma(gamma)
    return dual_chain_psi_batch(m, gamma, True, runs, rng)


def apply_U_dual_hm(gamma: float, m: int, x: float, replicas: int, rng: np.random.Generator) -> MeanEstimate:
    """U_gamma h_m(x) as E[1 - (1-x)^psi'] over the injected dual chain."""
    psi = injected_psi_samples(gamma, m, replicas, rng)
    return mean_estimate(1.0 - (1.0 - x) ** psi)


def jensen_bound_hm(gamma: float, m: int, x: float, replicas: int, rng: np.random.Generator) -> float:
    psi = injected_psi_samples(gamma, m, replicas, rng)
    return float(1.0 - (1.0 - x) ** psi.mean())


@dataclass
class UIteration:
    gammas: List[float]
    stages: List[CatalyzingFunction]
    std_errors: List[np.ndarray] = field(default_factory=list)
    propagated_errors: List[np.ndarray] = field(default_factory=list)

    def __getitem__(self, k: int) -> CatalyzingFunction:
        return self.stages[k]

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self) -> Iterator[CatalyzingFunction]:
        return iter(self.stages)

    @property
    def final(self) -> CatalyzingFunction:
        return self.stages[-1]

    def sup_increments(self) -> List[float]:
        return [b.sup_distance(a) for a, b in zip(self.stages, self.stages[1:])]


@ErrorHandler.handle_errors("loglaplace")
def iterate_U(gammas: Sequence[float], p: CatalyzingFunction, replicas: int, dt: float,
              rng: np.random.Generator, jobs: int = 1, control_variate: bool = True) -> UIteration:
    """Stages p, U_{g0} p, U_{g1} U_{g0} p, ... (one stage per schedule entry)."""
    for g in gammas:
        _check_gamma(g)
    stages = [p]
    zero = np.zeros_like(p.values)
    errors, propagated = [zero], [zero]
    current = p
    n = len(gammas)
    for k, (g, child) in enumerate(zip(gammas, rng.spawn(n))):
        est = apply_U(g, current, replicas, dt, child, jobs=jobs, control_variate=control_variate)
        current = est.to_function(name=f"U^({k + 1}) {p.name}")
        stages.append(current)
        errors.append(est.std_error)
        propagated.append(np.sqrt(est.std_error ** 2 + propagated[-1] ** 2))
        logger.info(f"Stage {k + 1}/{n} gamma={g:.4g} sup|step|={current.sup_distance(stages[-2]):.4g} "
                    f"max SE={est.std_error.max():.2e}")
    return UIteration(list(gammas), stages, errors, propagated)


def iterate_constant_exact(gammas: Sequence[float], lam: float) -> float:
    """Closed form of U^(n) applied to the constant lam."""
    prod = float(np.prod(1.0 + np.asarray(gammas, dtype=float)))
    if lam == 0:
        return 0.0
    return prod / (prod - 1.0 + 1.0 / lam)


def constant_closed_form(gamma: float, r: float) -> float:
    return 0.0 if r == 0 else (1.0 + gamma) / (1.0 / r + gamma)


def chi_m(gamma: float, m: int) -> float:
    if m < 1:
        raise ParameterError(f"m must be at least 1, got {m}")
    i = np.arange(m)
    return float(np.mean((1.0 + gamma) / (1.0 + i * gamma)))


def large_gamma_bound(gamma: float, m: int) -> float:
    if m < 1:
        raise ParameterError(f"m must be at least 1, got {m}")
    return (1.0 / gamma + 1.0) * float(np.sum(1.0 / np.arange(1, m + 1))) + 1.5


@dataclass(frozen=True)
class ShapeReport:
    gamma: float
    nondecreasing: bool
    concave: Optional[bool]
    min_first_difference: float
    max_second_difference: float
    max_deviation_from_mean: float
    estimate: LogLaplaceEstimate


@ErrorHandler.handle_errors("loglaplace")
def check_shape_preservation(gamma: float, p: CatalyzingFunction, replicas: int, dt: float,
                             rng: np.random.Generator, concave: bool = False, jobs: int = 1,
                             sigmas: float = 3.0) -> ShapeReport:
    if not p.is_nondecreasing(1e-12):
        raise ParameterError(f"{p.name} is not nondecreasing")
    if concave and not p.is_concave(1e-12):
        raise ParameterError(f"{p.name} is not concave")
    est = apply_U(gamma, p, replicas, dt, rng, jobs=jobs)
    se = est.std_error
    d1 = np.diff(est.value)
    eps1 = sigmas * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    d2 = np.diff(est.value, n=2)
    eps2 = sigmas * np.sqrt(se[:-2] ** 2 + 4.0 * se[1:-1] ** 2 + se[2:] ** 2)
    report = ShapeReport(
        gamma=gamma,
        nondecreasing=bool(np.all(d1 >= -eps1)),
        concave=bool(np.all(d2 <= eps2)) if concave else None,
        min_first_difference=float(d1.min()),
        max_second_difference=float(d2.max()) if d2.size else 0.0,
        max_deviation_from_mean=float(np.max(np.abs(est.value - est.value.mean()))),
        estimate=est,
    )
    logger.info(f"Shape check gamma={gamma:g} {p.name}: nondecreasing={report.nondecreasing} concave={report.concave}")
    return report
