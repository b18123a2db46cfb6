"""Wright-Fisher diffusions with linear drift toward an attraction point.

    dy = (1/gamma) (x - y) dt + sqrt(2 y (1 - y)) dB

The stationary law is Beta(x/gamma, (1-x)/gamma). Paths are integrated with explicit
Euler-Maruyama and clamped to [0,1] after every step. ``run_segments`` is the batched
engine behind cluster sampling and the particle systems: it advances many independent
segments of different durations at once and reports every visited position to an
observer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.utils.error_handler import ParameterError
from src.utils.logger import LoggerFactory

logger = LoggerFactory.get_logger("wf_core")

BETA_SHAPE_FLOOR = 1e-12

Observer = Callable[[np.ndarray, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class WfParams:
    attract_x: float
    gamma: float
    dt: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.attract_x <= 1.0:
            raise ParameterError(f"attraction point must lie in [0,1], got {self.attract_x}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")

    @property
    def c(self) -> float:
        return 1.0 / self.gamma


@dataclass(frozen=True, eq=False)
class WfPath:
    times: np.ndarray
    values: np.ndarray

    def time_average(self, f: Callable[[np.ndarray], np.ndarray] = lambda y: y) -> float:
        return float(np.mean(f(self.values)))


@dataclass(frozen=True)
class BetaInvariantLaw:
    gamma: float
    x: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.x <= 1.0:
            raise ParameterError(f"x must lie in [0,1], got {self.x}")

    @property
    def alpha1(self) -> float:
        return self.x / self.gamma

    @property
    def alpha2(self) -> float:
        return (1.0 - self.x) / self.gamma

    @property
    def is_point_mass(self) -> bool:
        return self.alpha1 < BETA_SHAPE_FLOOR or self.alpha2 < BETA_SHAPE_FLOOR

    def moment(self, n: int) -> float:
        return invariant_moment(self.gamma, self.x, n)

    def heterozygosity(self) -> float:
        """Mean of y(1-y), equal to x(1-x)/(1+gamma)."""
        return self.moment(1) - self.moment(2)


@dataclass
class DualChainState:
    phi: int
    psi: int = 0

    def __post_init__(self):
        if self.phi < 0 or self.psi < 0:
            raise ParameterError(f"dual chain state must be nonnegative, got ({self.phi}, {self.psi})")


def _euler_step(y: np.ndarray, attract, gamma: float, dt: float, noise: np.ndarray) -> np.ndarray:
    drift = (attract - y) / gamma * dt
    diffusion = np.sqrt(2.0 * np.clip(y * (1.0 - y), 0.0, None) * dt) * noise
    return np.clip(y + drift + diffusion, 0.0, 1.0)


def simulate_wf_path(params: WfParams, y0: float, horizon: float, rng: np.random.Generator) -> WfPath:
    if not 0.0 <= y0 <= 1.0:
        raise ParameterError(f"initial point must lie in [0,1], got {y0}")
    if horizon < 0:
        raise ParameterError(f"horizon must be nonnegative, got {horizon}")
    n_steps = int(round(horizon / params.dt))
    noise = rng.standard_normal(n_steps)
    values = np.empty(n_steps + 1)
    values[0] = y = float(y0)
    x, gamma, dt = params.attract_x, params.gamma, params.dt
    sq = np.sqrt(2.0 * dt)
    for j in range(n_steps):
        y = y + (x - y) / gamma * dt + sq * np.sqrt(max(y * (1.0 - y), 0.0)) * noise[j]
        y = min(max(y, 0.0), 1.0)
        values[j + 1] = y
    return WfPath(params.dt * np.arange(n_steps + 1), values)


def sample_beta(x, gamma: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Vectorized draws from Beta(x/gamma, (1-x)/gamma) with endpoint masses."""
    x = np.asarray(x, dtype=float)
    if size is not None:
        x = np.broadcast_to(x, size)
    a1 = x / gamma
    a2 = (1.0 - x) / gamma
    low = a1 < BETA_SHAPE_FLOOR
    high = a2 < BETA_SHAPE_FLOOR
    draws = rng.beta(np.where(low | high, 1.0, a1), np.where(low | high, 1.0, a2))
    return np.where(low, 0.0, np.where(high, 1.0, draws))


def sample_invariant(law: BetaInvariantLaw, rng: np.random.Generator, size=None):
    draws = sample_beta(law.x, law.gamma, rng, size=size)
    return float(draws) if size is None else draws


def invariant_moment(gamma: float, x: float, n: int) -> float:
    if n < 0:
        raise ParameterError(f"moment order must be nonnegative, got {n}")
    k = np.arange(n)
    return float(np.prod((x + k * gamma) / (1.0 + k * gamma)))


def couple_wf_ensemble(params_low: WfParams, params_high: WfParams, y0_low: float, y0_high: float,
                       horizon: float, n_paths: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Synchronously coupled paths, arrays of shape (steps + 1, n_paths)."""
    if params_low.gamma != params_high.gamma or params_low.dt != params_high.dt:
        raise ParameterError("coupled diffusions must share gamma and dt")
    if params_low.attract_x > params_high.attract_x or y0_low > y0_high:
        raise ParameterError("coupling needs ordered attraction points and initial values")
    dt, gamma = params_low.dt, params_low.gamma
    n_steps = int(round(horizon / dt))
    low = np.empty((n_steps + 1, n_paths))
    high = np.empty((n_steps + 1, n_paths))
    low[0], high[0] = y0_low, y0_high
    for j in range(n_steps):
        noise = rng.standard_normal(n_paths)
        low[j + 1] = _euler_step(low[j], params_low.attract_x, gamma, dt, noise)
        high[j + 1] = _euler_step(high[j], params_high.attract_x, gamma, dt, noise)
    return low, high


def couple_wf_pair(params_low: WfParams, params_high: WfParams, y0_low: float, y0_high: float,
                   horizon: float, rng: np.random.Generator) -> Tuple[WfPath, WfPath]:
    low, high = couple_wf_ensemble(params_low, params_high, y0_low, y0_high, horizon, 1, rng)
    times = params_low.dt * np.arange(low.shape[0])
    return WfPath(times, low[:, 0]), WfPath(times, high[:, 0])


def ordering_violation_fraction(low: np.ndarray, high: np.ndarray) -> float:
    """Fraction of (time, path) grid entries where the coupled order is broken."""
    low = np.asarray(low.values if isinstance(low, WfPath) else low)
    high = np.asarray(high.values if isinstance(high, WfPath) else high)
    return float(np.mean(low > high + 1e-15))


def dual_chain_psi_batch(m: int, gamma: float, injection: bool, runs: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Terminal reservoir counts of ``runs`` independent dual chains started in (m, 0).

    Jumps: coalescence phi -> phi-1 at rate phi(phi-1), reservoir phi -> phi-1, psi -> psi+1
    at rate phi/gamma. With injection, phi -> phi+m at rate 2 while the renewal window is
    open, and the window closes at rate 2/gamma. Chains are advanced in lockstep on their
    embedded jump chains.
    """
    if m < 0:
        raise ParameterError(f"initial ancestor count must be nonnegative, got {m}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    phi = np.full(runs, m, dtype=np.int64)
    psi = np.zeros(runs, dtype=np.int64)
    window = np.full(runs, bool(injection) and m > 0)
    active = (phi > 0) | window
    while np.any(active):
        idx = np.flatnonzero(active)
        f = phi[idx].astype(float)
        open_ = window[idx].astype(float)
        rates = np.stack([f * (f - 1.0), f / gamma, 2.0 * open_, 2.0 / gamma * open_], axis=1)
        cum = np.cumsum(rates, axis=1)
        u = rng.random(idx.size) * cum[:, -1]
        event = (u[:, None] >= cum).sum(axis=1)
        phi[idx] -= (event <= 1)
        psi[idx] += (event == 1)
        phi[idx] += m * (event == 2)
        window[idx] &= (event != 3)
        active = (phi > 0) | window
    return psi


def dual_chain_psi_infinity(m: int, gamma: float, injection: bool, rng: np.random.Generator) -> int:
    state = DualChainState(m)
    window = bool(injection) and m > 0
    while state.phi > 0 or window:
        f = state.phi
        rates = np.array([f * (f - 1.0), f / gamma, 2.0 if window else 0.0, 2.0 / gamma if window else 0.0])
        event = int(np.searchsorted(np.cumsum(rates), rng.random() * rates.sum(), side="right"))
        if event == 0:
            state.phi -= 1
        elif event == 1:
            state.phi -= 1
            state.psi += 1
        elif event == 2:
            state.phi += m
        else:
            window = False
    return state.psi


def run_segments(attract, gamma: float, durations: np.ndarray, dt: float, rng: np.random.Generator,
                 observer: Optional[Observer] = None, y0: Optional[np.ndarray] = None) -> np.ndarray:
    """Advance independent WF segments and report each visited position.

    Path ``i`` runs for ``durations[i]`` time units split into ``ceil(duration/dt)`` steps;
    the observer is called once per step with ``(path_indices, positions, time_weights)``,
    where the time weights of a path sum to its duration. Paths start from the stationary
    Beta law unless ``y0`` is given. Returns the final positions.
    """
    if not gamma > 0 or not dt > 0:
        raise ParameterError(f"gamma and dt must be positive, got gamma={gamma}, dt={dt}")
    durations = np.asarray(durations, dtype=float)
    n = durations.size
    attract = np.broadcast_to(np.asarray(attract, dtype=float), durations.shape)
    steps = np.ceil(durations / dt - 1e-12).astype(np.int64)
    order = np.argsort(-steps, kind="stable")
    steps_s = steps[order]
    x_s = attract[order]
    last_w = durations[order] - (steps_s - 1) * dt
    if y0 is None:
        y = sample_beta(x_s, gamma, rng)
    else:
        y = np.broadcast_to(np.asarray(y0, dtype=float), durations.shape)[order].copy()
    final = y.copy()
    k = n
    max_steps = int(steps_s[0]) if n else 0
    sq = np.sqrt(2.0 * dt)
    for j in range(max_steps):
        while k > 0 and steps_s[k - 1] <= j:
            k -= 1
        ya = y[:k]
        if observer is not None:
            w = np.where(steps_s[:k] == j + 1, last_w[:k], dt)
            observer(order[:k], ya, w)
        ending = steps_s[:k] == j + 1
        final[:k] = np.where(ending, ya, final[:k])
        noise = rng.standard_normal(k)
        y[:k] = np.clip(ya + (x_s[:k] - ya) / gamma * dt
                        + sq * np.sqrt(np.clip(ya * (1.0 - ya), 0.0, None)) * noise, 0.0, 1.0)
    out = np.empty(n)
    out[order] = final
    return out


class IntegralObserver:
    """Accumulates integral f(y(s)) ds per path."""

    def __init__(self, f: Callable[[np.ndarray], np.ndarray], n_paths: int):
        self.f = f
        self.totals = np.zeros(n_paths)

    def __call__(self, idx, y, w):
        self.totals[idx] += self.f(y) * w


class AtomRecorder:
    """Keeps every (path, position, time weight) triple."""

    def __init__(self):
        self._chunks: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def __call__(self, idx, y, w):
        self._chunks.append((idx.copy(), y.copy(), w.copy()))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._chunks:
            return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
        idx, y, w = (np.concatenate(parts) for parts in zip(*self._chunks))
        return idx, y, w


class PoissonPointObserver:
    """Poisson points of intensity ``rate * h(y(s)) ds`` along each path."""

    def __init__(self, h: Callable[[np.ndarray], np.ndarray], n_paths: int, rng: np.random.Generator,
                 rate: float = 2.0):
        self.h = h
        self.rate = rate
        self.rng = rng
        self.counts = np.zeros(n_paths, dtype=np.int64)
        self._points: List[Tuple[np.ndarray, np.ndarray]] = []

    def __call__(self, idx, y, w):
        hits = self.rng.poisson(self.rate * self.h(y) * w)
        mask = hits > 0
        if np.any(mask):
            owners = np.repeat(idx[mask], hits[mask])
            self.counts[idx[mask]] += hits[mask]
            self._points.append((owners, np.repeat(y[mask], hits[mask])))

    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self._points:
            return np.empty(0, dtype=np.int64), np.empty(0)
        owners, pos = (np.concatenate(parts) for parts in zip(*self._points))
        return owners, pos
