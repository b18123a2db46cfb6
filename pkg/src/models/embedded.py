"""Embedded particle systems X^h extracted from Poisson-cluster branching.

A particle at x leaves no offspring with probability 1 - U_gamma h(x)/h(x); otherwise its
offspring are Pois(h Z_x) conditioned to be nonzero. For h = h11 the offspring law is
sampled directly: the stationary start of the cluster path plus Pois(Z_x), never empty.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.features.catalyzing_function import CatalyzingFunction
from src.models.branching import AtomicMeasure, poissonize, run_renorm_branching_batch, step_poisson_cluster_batch
from src.models.loglaplace import LogLaplaceEstimate, apply_U, q_gamma
from src.models.wf_core import PoissonPointObserver, run_segments, sample_beta
from src.utils.error_handler import (DomainError, ErrorHandler, NumericalGuardError,
                                     ParameterError)
from src.utils.logger import LoggerFactory
from src.utils.statistics import MeanEstimate, mean_estimate, proportion_estimate

logger = LoggerFactory.get_logger("embedded")

H_KINDS = ("h11", "h00", "h01")


def catalyzing_for(kind: str, grid_m: int = 100, power: int = 7) -> CatalyzingFunction:
    if kind == "h11":
        return CatalyzingFunction.h11(grid_m)
    if kind == "h00":
        return CatalyzingFunction.h00(grid_m)
    if kind == "h01":
        return CatalyzingFunction.h01(grid_m, power)
    raise ParameterError(f"unknown catalyzing function kind '{kind}', expected one of {H_KINDS}")


@dataclass(frozen=True, eq=False)
class OffspringContext:
    h: CatalyzingFunction
    gamma: float
    u_h: LogLaplaceEstimate

    @classmethod
    def build(cls, h: CatalyzingFunction, gamma: float, replicas: int, dt: float, rng: np.random.Generator,
              grid_m: Optional[int] = None, jobs: int = 1, sigmas: float = 3.0) -> OffspringContext:
        nodes = None if grid_m is None else np.linspace(0.0, 1.0, grid_m + 1)
        est = apply_U(gamma, h, replicas, dt, rng, jobs=jobs, nodes=nodes)
        return cls.from_estimate(h, gamma, est, sigmas)

    @classmethod
    def from_estimate(cls, h: CatalyzingFunction, gamma: float, est: LogLaplaceEstimate,
                      sigmas: float = 3.0) -> OffspringContext:
        excess = est.value - h(est.grid_x) - sigmas * est.std_error
        if np.any(excess > 1e-12):
            worst = float(est.grid_x[np.argmax(excess)])
            raise ParameterError(f"{h.name} is not superharmonic for gamma={gamma:g} (violated near x={worst:.3f})")
        return cls(h, gamma, est)

    def u(self, x) -> np.ndarray:
        return np.interp(x, self.u_h.grid_x, self.u_h.value)

    def acceptance(self, x) -> np.ndarray:
        hx = np.asarray(self.h(x), dtype=float)
        if np.any(hx <= 0):
            raise DomainError(f"{self.h.name} vanishes at a particle position")
        return np.clip(self.u(x) / hx, 0.0, 1.0)

    def nonzero_probability(self, x) -> np.ndarray:
        """P[Pois(h Z_x) != 0] = U_gamma h(x) / q_gamma."""
        return np.clip(self.u(x) / q_gamma(self.gamma), 1e-6, 1.0)


def build_contexts(h: CatalyzingFunction, gammas: Sequence[float], replicas: int, dt: float,
                   rng: np.random.Generator, grid_m: Optional[int] = None, jobs: int = 1) -> Dict[float, OffspringContext]:
    contexts: Dict[float, OffspringContext] = {}
    for g in gammas:
        if g not in contexts:
            contexts[g] = OffspringContext.build(h, g, replicas, dt, rng, grid_m=grid_m, jobs=jobs)
            logger.info(f"Offspring context for {h.name} at gamma={g:g} built on {contexts[g].u_h.grid_x.size} nodes")
    return contexts


def sample_nonzero_poisson_clusters(xs: np.ndarray, context: OffspringContext, dt: float, rng: np.random.Generator,
                                    cap: int = 10000) -> Tuple[np.ndarray, np.ndarray]:
    """Pois(h Z_x) conditioned nonzero for each parent position; returns (parent, position)."""
    n = xs.size
    pending = np.arange(n)
    attempts = np.zeros(n, dtype=np.int64)
    parents, positions = [], []
    while pending.size:
        p = context.nonzero_probability(xs[pending])
        per_parent = np.clip(np.ceil(np.log(0.05) / np.log1p(-np.minimum(p, 0.999))), 1, 64).astype(np.int64)
        per_parent = np.minimum(per_parent, cap - attempts[pending])
        launch_owner = np.repeat(pending, per_parent)
        tau = rng.exponential(context.gamma, size=launch_owner.size)
        obs = PoissonPointObserver(context.h, launch_owner.size, rng, rate=2.0)
        run_segments(xs[launch_owner], context.gamma, tau / 2.0, dt, rng, obs)
        # first successful attempt per parent, in launch order
        first_slot = np.concatenate([[0], np.cumsum(per_parent)[:-1]])
        n_launched = launch_owner.size
        candidate = np.where(obs.counts > 0, np.arange(n_launched), n_launched)
        first_hit = np.minimum.reduceat(candidate, first_slot)
        chosen = np.where(first_hit < n_launched, first_hit, -1)
        owners, pts = obs.points()
        keep_paths = chosen[chosen >= 0]
        mask = np.isin(owners, keep_paths)
        parents.append(launch_owner[owners[mask]])
        positions.append(pts[mask])
        attempts[pending] += per_parent
        pending = pending[chosen < 0]
        if pending.size and np.any(attempts[pending] >= cap):
            raise NumericalGuardError(f"conditioned cluster not obtained within {cap} attempts",
                                      {"cap": cap, "pending": int(pending.size)})
    if not parents:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(parents), np.concatenate(positions)


def h11_offspring(xs: np.ndarray, gamma: float, dt: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Stationary start of the cluster path plus Pois(Z_x): renewal points before tau_{gamma/2}."""
    n = xs.size
    y0 = sample_beta(xs, gamma, rng)
    tau = rng.exponential(gamma, size=n)
    obs = PoissonPointObserver(np.ones_like, n, rng, rate=2.0)
    run_segments(xs, gamma, tau / 2.0, dt, rng, obs, y0=y0)
    owners, pts = obs.points()
    return np.concatenate([np.arange(n), owners]), np.concatenate([y0, pts])


class Outcome(Enum):
    EXTINCT = "extinct"
    GREW_PAST_CEILING = "grew past ceiling"
    UNDECIDED = "undecided"


@dataclass
class EmbeddedRun:
    kind: str
    counts: np.ndarray
    outcomes: List[Outcome]
    history: np.ndarray
    final_positions: List[np.ndarray] = field(default_factory=list)

    @property
    def replicas(self) -> int:
        return self.counts.size

    def fraction(self, outcome: Outcome) -> MeanEstimate:
        return proportion_estimate(sum(o is outcome for o in self.outcomes), self.replicas)

    def survival(self) -> MeanEstimate:
        return proportion_estimate(int(np.sum(self.counts > 0)), self.replicas)

    def summary_frame(self) -> pd.DataFrame:
        steps = np.arange(self.history.shape[1])
        return pd.DataFrame({"step": steps, "particle_count": self.history.mean(axis=0),
                             "extinct_fraction": (self.history == 0).mean(axis=0)})


def _one_generation(kind: str, pos: np.ndarray, owner: np.ndarray, gamma: float,
                    context: Optional[OffspringContext], dt: float, rng: np.random.Generator,
                    cap: int) -> Tuple[np.ndarray, np.ndarray]:
    if pos.size == 0:
        return pos, owner
    if kind == "h11":
        parent, new_pos = h11_offspring(pos, gamma, dt, rng)
        return new_pos, owner[parent]
    return _contextual_generation(pos, owner, context, dt, rng, cap)


def _contextual_generation(pos: np.ndarray, owner: np.ndarray, context: OffspringContext, dt: float,
                           rng: np.random.Generator, cap: int) -> Tuple[np.ndarray, np.ndarray]:
    accept = rng.random(pos.size) < context.acceptance(pos)
    idx = np.flatnonzero(accept)
    if idx.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    parent, new_pos = sample_nonzero_poisson_clusters(pos[idx], context, dt, rng, cap)
    return new_pos, owner[idx[parent]]


@ErrorHandler.handle_errors("embedded")
def run_embedded_batch(kind: str, gammas: Sequence[float], start_positions: Sequence[np.ndarray],
                       rng: np.random.Generator, contexts: Optional[Dict[float, OffspringContext]] = None,
                       dt: float = 2e-3, ceiling: int = 10000, rejection_cap: int = 10000,
                       keep_positions: bool = False) -> EmbeddedRun:
    """Advance independent embedded systems (one per start configuration) over the schedule.

    ``gammas`` = (gamma_0, ..., gamma_{n-1}); the run applies gamma_{n-1} first. Replicas
    whose count exceeds ``ceiling`` are frozen and classified as grown.
    """
    if kind not in H_KINDS:
        raise ParameterError(f"unknown embedded system '{kind}'")
    if kind != "h11":
        missing = set(gammas) - set(contexts or {})
        if missing:
            raise ParameterError(f"offspring contexts missing for gamma in {sorted(missing)}")
    replicas = len(start_positions)
    pos = np.concatenate([np.asarray(s, dtype=float) for s in start_positions]) if replicas else np.empty(0)
    owner = np.repeat(np.arange(replicas), [len(s) for s in start_positions])
    if kind == "h00" and np.any((pos <= 0) | (pos >= 1)):
        raise DomainError("h00 vanishes at 0 and 1; start points must be interior")
    frozen = np.zeros(replicas, dtype=bool)
    frozen_counts = np.zeros(replicas, dtype=np.int64)
    history = [np.bincount(owner, minlength=replicas)]
    for gamma in reversed(list(gammas)):
        live = ~frozen[owner]
        new_pos, new_owner = _one_generation(kind, pos[live], owner[live], gamma,
                                             None if contexts is None else contexts.get(gamma), dt, rng, rejection_cap)
        counts = np.bincount(new_owner, minlength=replicas)
        over = (counts > ceiling) & ~frozen
        frozen_counts[over] = counts[over]
        frozen |= over
        keep = ~frozen[new_owner]
        pos, owner = new_pos[keep], new_owner[keep]
        history.append(np.where(frozen, frozen_counts, np.bincount(owner, minlength=replicas)))
    counts = np.where(frozen, frozen_counts, np.bincount(owner, minlength=replicas))
    outcomes = [Outcome.GREW_PAST_CEILING if f else (Outcome.EXTINCT if c == 0 else Outcome.UNDECIDED)
                for f, c in zip(frozen, counts)]
    finals = [pos[owner == r] for r in range(replicas)] if keep_positions else []
    return EmbeddedRun(kind, counts, outcomes, np.column_stack(history), finals)


def run_embedded_h11(gammas: Sequence[float], x: float, rng: np.random.Generator, dt: float = 2e-3,
                     ceiling: int = 10000) -> int:
    if not 0.0 <= x <= 1.0:
        raise ParameterError(f"x must lie in [0,1], got {x}")
    return int(run_embedded_batch("h11", gammas, [np.array([x])], rng, dt=dt, ceiling=ceiling).counts[0])


def run_embedded_h00(gammas: Sequence[float], x: float, rng: np.random.Generator,
                     contexts: Dict[float, OffspringContext], dt: float = 2e-3,
                     ceiling: int = 10000) -> Tuple[bool, int]:
    if not 0.0 < x < 1.0:
        raise DomainError(f"h00 vanishes at x={x}")
    run = run_embedded_batch("h00", gammas, [np.array([x])], rng, contexts, dt=dt, ceiling=ceiling)
    return run.outcomes[0] is Outcome.EXTINCT, int(run.counts[0])


def run_embedded_h01(gammas: Sequence[float], x: float, rng: np.random.Generator,
                     contexts: Dict[float, OffspringContext], dt: float = 2e-3, ceiling: int = 10000) -> Outcome:
    if not 0.0 < x <= 1.0:
        raise DomainError(f"h01 vanishes at x={x}")
    return run_embedded_batch("h01", gammas, [np.array([x])], rng, contexts, dt=dt, ceiling=ceiling).outcomes[0]


def offspring_mean(context: OffspringContext, x: float, replicas: int, dt: float,
                   rng: np.random.Generator, kind: str = "h00") -> MeanEstimate:
    """Mean number of children of one particle at x (equal to 1 for h00)."""
    run = run_embedded_batch(kind, [context.gamma], [np.array([x])] * replicas, rng,
                             {context.gamma: context}, dt=dt)
    return mean_estimate(run.counts)


def predicted_survival_h01(p_star: CatalyzingFunction, x: float, power: int = 7) -> Dict[str, float]:
    h = 1.0 - (1.0 - x) ** power
    return {"rho": float(p_star(x) / h), "mass_survival": float(1.0 - np.exp(-p_star(x))),
            "lower_bound": float(x / h)}


@dataclass
class WeightedMassReport:
    kind: str
    mode: str
    samples: np.ndarray
    middle: MeanEstimate
    low: float
    high: float

    def histogram(self, bins: int = 30) -> pd.DataFrame:
        finite = self.samples[np.isfinite(self.samples)]
        upper = max(float(finite.max()) if finite.size else 1.0, self.high)
        counts, edges = np.histogram(np.clip(self.samples, 0.0, upper), bins=bins, range=(0.0, upper))
        return pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})


@ErrorHandler.handle_errors("embedded")
def weighted_mass_statistics(gammas: Sequence[float], x: float, kind: str, rng: np.random.Generator,
                             replicas: int, contexts: Optional[Dict[float, OffspringContext]] = None,
                             low: float = 0.1, high: float = 10.0, mode: str = "particles",
                             dt: float = 2e-3, ceiling: int = 10000, bin_grid: int = 50) -> WeightedMassReport:
    """Empirical law of the weighted mass at time 0 and P[low < mass < high].

    ``mode="particles"`` starts the embedded system from Pois(h(x)) particles at x and reports
    the final count, a Poissonized proxy of <X_0, h>; runs that hit the ceiling count as +inf.
    ``mode="measure"`` runs the measure-valued process with grid-binned atoms and integrates h.
    """
    h = catalyzing_for(kind)
    if mode == "measure":
        trajectories = run_renorm_branching_batch(gammas, AtomicMeasure.dirac(x), replicas, rng, dt=dt,
                                                  bin_grid=bin_grid, mass_ceiling=float(ceiling))
        samples = np.array([traj[-1].integrate(h) for traj in trajectories])
    elif mode == "particles":
        starts = [np.full(k, x) for k in rng.poisson(float(h(x)), size=replicas)]
        if kind == "h00":
            starts = [s[(s > 0) & (s < 1)] for s in starts]
        run = run_embedded_batch(kind, gammas, starts, rng, contexts, dt=dt, ceiling=ceiling)
        samples = np.where([o is Outcome.GREW_PAST_CEILING for o in run.outcomes], np.inf,
                           run.counts.astype(float))
    else:
        raise ParameterError(f"unknown mode '{mode}'")
    middle = proportion_estimate(int(np.sum((samples > low) & (samples < high))), replicas)
    logger.info(f"Weighted mass {kind} ({mode}, n={len(gammas)}): P[{low:g} < mass < {high:g}] = {middle.mean:.3f}")
    return WeightedMassReport(kind, mode, samples, middle, low, high)


@ErrorHandler.handle_errors("embedded")
def poissonization_counts(context: OffspringContext, x: float, mass: float, replicas: int, dt: float,
                          rng: np.random.Generator, cap: int = 10000) -> Tuple[np.ndarray, np.ndarray]:
    """Particle counts of Pois(h X_1) with X_0 = mass * delta_x, and of one embedded step
    started from Pois(h(x) mass) particles at x. Both laws coincide."""
    if float(context.h(x)) <= 0:
        raise DomainError(f"{context.h.name} vanishes at x={x:g}")
    after = step_poisson_cluster_batch([AtomicMeasure.dirac(x, mass)] * replicas, context.gamma, dt, rng, bin_grid=None)
    direct = np.array([poissonize(X, context.h, rng).count for X in after])
    initial = rng.poisson(float(context.h(x)) * mass, size=replicas)
    owner = np.repeat(np.arange(replicas), initial)
    _, new_owner = _contextual_generation(np.full(owner.size, x), owner, context, dt, rng, cap)
    return direct, np.bincount(new_owner, minlength=replicas)
