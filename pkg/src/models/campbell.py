"""Size-biased (Campbell) view of the h00-embedded particle system.

Biasing a family by its size and marking a uniformly chosen member gives an immortal
spine (v_k) plus side families. Given the parent at v_k, one step of the biased offspring
law is:

* cluster length tau' ~ Gamma(2, gamma) and spine time u ~ Uniform(0, tau'/2);
* the spine child v_{k+1} has density (1+gamma) y(1-y) / (v_k(1-v_k)) against
  Gamma^gamma_{v_k};
* the cluster path through v_{k+1} is two independent WF segments started at v_{k+1}
  (attraction v_k) of lengths u and tau'/2 - u;
* side offspring are Pois(h Z') along these segments, then evolve by the ordinary
  embedded dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from src.models.branching import ParticleConfiguration
from src.models.embedded import OffspringContext, run_embedded_batch
from src.models.wf_core import PoissonPointObserver, run_segments, sample_beta
from src.utils.error_handler import ErrorHandler, ParameterError
from src.utils.logger import LoggerFactory
from src.utils.statistics import MeanEstimate

logger = LoggerFactory.get_logger("campbell")


@dataclass
class ImmortalChainState:
    v: float
    step: int = 0

    def __post_init__(self):
        if not 0.0 < self.v < 1.0:
            raise ParameterError(f"immortal particle must be strictly interior, got {self.v}")

    def advance(self, gamma_star: float, rng: np.random.Generator) -> ImmortalChainState:
        return ImmortalChainState(float(immortal_chain_step(self.v, gamma_star, rng)), self.step + 1)


def immortal_chain_step(v, gamma_star: float, rng: np.random.Generator):
    """Rejection sampler: propose Beta(v/g, (1-v)/g), accept with probability 4y(1-y)."""
    v_arr = np.atleast_1d(np.asarray(v, dtype=float))
    if np.any((v_arr <= 0) | (v_arr >= 1)):
        raise ParameterError("immortal chain positions must lie in (0,1)")
    if not gamma_star > 0:
        raise ParameterError(f"gamma* must be positive, got {gamma_star}")
    out = np.empty_like(v_arr)
    pending = np.arange(v_arr.size)
    while pending.size:
        y = sample_beta(v_arr[pending], gamma_star, rng)
        accept = rng.random(pending.size) < 4.0 * y * (1.0 - y)
        out[pending[accept]] = y[accept]
        pending = pending[~accept]
    return float(out[0]) if np.ndim(v) == 0 else out


def immortal_chain_path(v0: float, gamma_star: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    path = [ImmortalChainState(v0)]
    for _ in range(steps):
        path.append(path[-1].advance(gamma_star, rng))
    return np.array([s.v for s in path])


def campbell_side_offspring(parent: np.ndarray, child: np.ndarray, context: OffspringContext, dt: float,
                            rng: np.random.Generator):
    """Side offspring of size-biased clusters; returns (family index, position)."""
    n = parent.size
    tau = rng.gamma(2.0, context.gamma, size=n)
    u = rng.uniform(0.0, tau / 2.0)
    durations = np.concatenate([u, tau / 2.0 - u])
    obs = PoissonPointObserver(context.h, 2 * n, rng, rate=2.0)
    run_segments(np.tile(parent, 2), context.gamma, durations, dt, rng, obs, y0=np.tile(child, 2))
    owners, pts = obs.points()
    return owners % n, pts


@dataclass
class CampbellSample:
    spine: np.ndarray
    configuration: ParticleConfiguration

    @property
    def count(self) -> int:
        return self.configuration.count


@ErrorHandler.handle_errors("campbell")
def simulate_campbell_batch(n: int, x: float, gamma_star: float, context: OffspringContext, replicas: int,
                            rng: np.random.Generator, dt: float = 2e-3, ceiling: int = 10000) -> List[CampbellSample]:
    if not 0 <= n <= 5:
        raise ParameterError(f"Campbell trees are built for n <= 5, got {n}")
    if not 0.0 < x < 1.0:
        raise ParameterError(f"start must be interior, got {x}")
    if not np.isclose(context.gamma, gamma_star):
        raise ParameterError(f"context built for gamma={context.gamma:g}, not gamma*={gamma_star:g}")
    spines = np.full((replicas, n + 1), x)
    side_pos = np.empty(0)
    side_owner = np.empty(0, dtype=np.int64)
    contexts: Dict[float, OffspringContext] = {gamma_star: context}
    for k in range(n):
        if side_pos.size:
            starts = [side_pos[side_owner == r] for r in range(replicas)]
            run = run_embedded_batch("h00", [gamma_star], starts, rng, contexts, dt=dt, ceiling=ceiling,
                                     keep_positions=True)
            side_pos = np.concatenate(run.final_positions)
            side_owner = np.repeat(np.arange(replicas), [len(p) for p in run.final_positions])
        parent = spines[:, k]
        child = immortal_chain_step(parent, gamma_star, rng)
        spines[:, k + 1] = child
        fam, pts = campbell_side_offspring(parent, child, context, dt, rng)
        side_pos = np.concatenate([side_pos, pts])
        side_owner = np.concatenate([side_owner, fam])
    samples = []
    for r in range(replicas):
        config = np.concatenate([[spines[r, -1]], side_pos[side_owner == r]]) if n else np.array([x])
        samples.append(CampbellSample(spines[r], ParticleConfiguration(config)))
    logger.info(f"Built {replicas} Campbell trees of depth {n} from x={x:g}")
    return samples


def simulate_campbell_tree(n: int, x: float, gamma_star: float, rng: np.random.Generator,
                           context: OffspringContext, dt: float = 2e-3) -> ParticleConfiguration:
    return simulate_campbell_batch(n, x, gamma_star, context, 1, rng, dt)[0].configuration


def size_biased_mean(counts: np.ndarray) -> MeanEstimate:
    """E[C^2]/E[C] with a delta-method standard error."""
    c = np.asarray(counts, dtype=float)
    n = c.size
    m1, m2 = c.mean(), (c ** 2).mean()
    if m1 == 0:
        return MeanEstimate(float("nan"), float("inf"), n)
    cov = np.cov(np.vstack([c, c ** 2]), ddof=1) / n
    grad = np.array([-m2 / m1 ** 2, 1.0 / m1])
    return MeanEstimate(float(m2 / m1), float(np.sqrt(grad @ cov @ grad)), n)


def size_biased_law(counts: np.ndarray) -> Dict[int, float]:
    c = np.asarray(counts, dtype=np.int64)
    values, freq = np.unique(c[c > 0], return_counts=True)
    weights = values * freq
    return {int(v): float(w / weights.sum()) for v, w in zip(values, weights)}


def size_biased_resample(counts: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` outcomes from the forward sample with weights proportional to the count."""
    c = np.asarray(counts, dtype=np.int64)
    total = c.sum()
    if total == 0:
        raise ParameterError("every forward replica died out; the size-biased law is undefined")
    return rng.choice(c, size=size, replace=True, p=c / total)


def return_fraction(start: float, gamma_star: float, runs: int, steps: int, rng: np.random.Generator,
                    band: tuple = (0.2, 0.8)) -> float:
    """Fraction of immortal chains from ``start`` that visit ``band`` within ``steps`` steps."""
    v = np.full(runs, start)
    hit = np.zeros(runs, dtype=bool)
    for _ in range(steps):
        v = immortal_chain_step(v, gamma_star, rng)
        hit |= (v >= band[0]) & (v <= band[1])
        if hit.all():
            break
    return float(hit.mean())
