"""Poisson-cluster branching on [0,1].

One step replaces every atom (x, m) by Poisson(q_gamma m) independent clusters Z_x.
Replicas are advanced together: all clusters of a step, whatever replica they belong to,
are simulated in a single batched Wright-Fisher run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from src.features.catalyzing_function import CatalyzingFunction
from src.models.loglaplace import apply_U, q_gamma
from src.models.wf_core import AtomRecorder, run_segments
from src.utils.error_handler import CeilingExceededError, ErrorHandler, ParameterError
from src.utils.logger import LoggerFactory
from src.utils.statistics import MeanEstimate, combined_se, mean_estimate

logger = LoggerFactory.get_logger("branching")


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if pos.shape != w.shape:
            raise ParameterError("positions and weights must have equal length")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ParameterError("atom weights must be positive and finite")
        if np.any((pos < 0) | (pos > 1)):
            raise ParameterError("atoms must lie in [0,1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls) -> AtomicMeasure:
        return cls(np.empty(0), np.empty(0))

    @classmethod
    def dirac(cls, x: float, mass: float = 1.0) -> AtomicMeasure:
        return cls(np.array([x]), np.array([mass]))

    @classmethod
    def from_grid_mass(cls, grid_m: int, mass: np.ndarray) -> AtomicMeasure:
        keep = mass > 0
        return cls(np.linspace(0.0, 1.0, grid_m + 1)[keep], mass[keep])

    def __len__(self) -> int:
        return self.positions.size

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(f(self.positions) * self.weights)) if len(self) else 0.0

    def weighted(self, h: Callable[[np.ndarray], np.ndarray]) -> AtomicMeasure:
        """h X: atoms keep their positions, weights are multiplied by h; atoms where h vanishes drop out."""
        if not len(self):
            return self
        w = np.asarray(h(self.positions), dtype=float) * self.weights
        if np.any(w < 0):
            raise ParameterError("h must be nonnegative")
        keep = w > 0
        return AtomicMeasure(self.positions[keep], w[keep])


@dataclass(frozen=True, eq=False)
class ParticleConfiguration:
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).ravel())

    @classmethod
    def single(cls, x: float) -> ParticleConfiguration:
        return cls(np.array([x]))

    @property
    def count(self) -> int:
        return self.positions.size

    def __len__(self) -> int:
        return self.count

    def weighted_mass(self, h: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(h(self.positions))) if self.count else 0.0


class _OwnerBinnedMass:
    """Grid-binned cluster mass per owning replica."""

    def __init__(self, owners: np.ndarray, n_owners: int, grid_m: int):
        self.owners = owners
        self.grid_m = grid_m
        self.mass = np.zeros((n_owners, grid_m + 1))

    def __call__(self, idx, y, w):
        bins = np.rint(y * self.grid_m).astype(np.int64)
        np.add.at(self.mass, (self.owners[idx], bins), 2.0 * w)


def step_poisson_cluster_batch(measures: Sequence[AtomicMeasure], gamma: float, dt: float,
                               rng: np.random.Generator, bin_grid: Optional[int] = None,
                               max_clusters: Optional[int] = None) -> List[AtomicMeasure]:
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    q = q_gamma(gamma)
    owners_list, starts_list = [], []
    for r, X in enumerate(measures):
        counts = rng.poisson(q * X.weights) if len(X) else np.empty(0, dtype=np.int64)
        starts_list.append(np.repeat(X.positions, counts))
        owners_list.append(np.full(int(counts.sum()), r, dtype=np.int64))
    starts = np.concatenate(starts_list) if starts_list else np.empty(0)
    owners = np.concatenate(owners_list) if owners_list else np.empty(0, dtype=np.int64)
    if max_clusters is not None and starts.size > max_clusters:
        raise CeilingExceededError(f"{starts.size} clusters exceed the ceiling {max_clusters}",
                                   {"clusters": int(starts.size), "ceiling": max_clusters})
    if starts.size == 0:
        return [AtomicMeasure.empty() for _ in measures]
    tau = rng.exponential(gamma, size=starts.size)
    if bin_grid is not None:
        obs = _OwnerBinnedMass(owners, len(measures), bin_grid)
        run_segments(starts, gamma, tau / 2.0, dt, rng, obs)
        return [AtomicMeasure.from_grid_mass(bin_grid, obs.mass[r]) for r in range(len(measures))]
    recorder = AtomRecorder()
    run_segments(starts, gamma, tau / 2.0, dt, rng, recorder)
    idx, pos, w = recorder.arrays()
    atom_owner = owners[idx]
    out = []
    for r in range(len(measures)):
        sel = atom_owner == r
        out.append(AtomicMeasure(pos[sel], 2.0 * w[sel]) if np.any(sel) else AtomicMeasure.empty())
    return out


def step_poisson_cluster(X: AtomicMeasure, gamma: float, dt: float, rng: np.random.Generator,
                         bin_grid: Optional[int] = None, max_clusters: Optional[int] = None) -> AtomicMeasure:
    return step_poisson_cluster_batch([X], gamma, dt, rng, bin_grid, max_clusters)[0]


@ErrorHandler.handle_errors("branching")
def run_renorm_branching(gammas: Sequence[float], X_start: AtomicMeasure, rng: np.random.Generator,
                         dt: float = 1e-3, bin_grid: Optional[int] = 100,
                         mass_ceiling: float = 1e5) -> List[AtomicMeasure]:
    """Trajectory X_{-n}, ..., X_0 for gammas = (gamma_0, ..., gamma_{n-1}).

    The process starting at time -n uses gamma_{n-1} first and gamma_0 last, so that its
    Laplace functional at time 0 is exp(-<X_start, U_{gamma_{n-1}} o ... o U_{gamma_0} f>).
    """
    return run_renorm_branching_batch(gammas, X_start, 1, rng, dt, bin_grid, mass_ceiling)[0]


def run_renorm_branching_batch(gammas: Sequence[float], X_start: AtomicMeasure, replicas: int,
                               rng: np.random.Generator, dt: float = 1e-3, bin_grid: Optional[int] = 100,
                               mass_ceiling: float = 1e5) -> List[List[AtomicMeasure]]:
    trajectories = [[X_start] for _ in range(replicas)]
    current = [X_start] * replicas
    for gamma in reversed(list(gammas)):
        total = sum(X.total_mass for X in current)
        if total > mass_ceiling * replicas:
            raise CeilingExceededError(f"population mass {total:.3g} exceeds the ceiling",
                                       {"mass": total, "ceiling": mass_ceiling, "replicas": replicas})
        max_clusters = int(10 * q_gamma(gamma) * mass_ceiling * replicas)
        current = step_poisson_cluster_batch(current, gamma, dt, rng, bin_grid, max_clusters)
        for traj, X in zip(trajectories, current):
            traj.append(X)
    return trajectories


def poissonize(X: AtomicMeasure, h: Callable[[np.ndarray], np.ndarray], rng: np.random.Generator) -> ParticleConfiguration:
    if not len(X):
        return ParticleConfiguration(np.empty(0))
    rates = np.asarray(h(X.positions), dtype=float) * X.weights
    if np.any(rates < 0):
        raise ParameterError("h must be nonnegative")
    counts = rng.poisson(rates)
    return ParticleConfiguration(np.repeat(X.positions, counts))


def thin(config: ParticleConfiguration, f: Callable[[np.ndarray], np.ndarray],
         rng: np.random.Generator) -> ParticleConfiguration:
    """Keep each particle at x independently with probability f(x)."""
    keep = rng.random(config.count) < np.clip(f(config.positions), 0.0, 1.0)
    return ParticleConfiguration(config.positions[keep])


def laplace_functional(measures: Sequence[AtomicMeasure], f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """exp(-<X, f>) per replica."""
    return np.exp(-np.array([X.integrate(f) for X in measures]))


@dataclass(frozen=True)
class IdentityCheck:
    """A simulated expectation set against an independently estimated prediction."""

    simulated: MeanEstimate
    predicted: float
    predicted_se: float

    @property
    def z(self) -> float:
        se = combined_se(self.simulated.std_error, self.predicted_se)
        return abs(self.simulated.mean - self.predicted) / max(se, 1e-300)

    def agrees(self, sigmas: float = 3.0) -> bool:
        return self.z <= sigmas


@ErrorHandler.handle_errors("branching")
def weighting_identity(x: float, mass: float, gamma: float, h: CatalyzingFunction, f: Callable[[np.ndarray], np.ndarray],
                       replicas: int, dt: float, rng: np.random.Generator, u_replicas: int = 20000) -> IdentityCheck:
    """E exp(-<h X_1, f>) over simulated steps from mass * delta_x, against exp(-mass U_gamma(h f)(x))."""
    start = AtomicMeasure.dirac(x, mass)
    after = step_poisson_cluster_batch([start] * replicas, gamma, dt, rng, bin_grid=None)
    simulated = mean_estimate(laplace_functional([X.weighted(h) for X in after], f))
    hf = CatalyzingFunction(h.grid_x, h.values * np.asarray(f(h.grid_x), dtype=float), f"h*f ({h.name})")
    u = apply_U(gamma, hf, u_replicas, dt, rng, nodes=np.array([x]))
    predicted = float(np.exp(-mass * u.value[0]))
    check = IdentityCheck(simulated, predicted, predicted * mass * float(u.std_error[0]))
    logger.info(f"Weighting identity at x={x:g}: simulated {simulated.mean:.4f}, predicted {predicted:.4f} (z={check.z:.2f})")
    return check
