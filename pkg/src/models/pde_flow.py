"""Deterministic fixed-point analysis.

* ``run_flow_2d``: explicit stepping of d/dt w = 1/2 sum_ij w_ij d_i d_j w + w for a
  symmetric 2x2 matrix field on [0,1]^2.
* ``run_cauchy_1d``: d/dt u = 1/2 x(1-x) u'' + u(1-u), endpoints stepped by the exact
  logistic flow.
* ``solve_p_star``: 1/2 x(1-x) p'' + p(1-p) = 0, p(0) = 0, p(1) = 1, by damped Newton on
  the tridiagonal finite-difference system.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from src.features.catalyzing_function import CatalyzingFunction, uniform_grid
from src.models.renorm import CatalyticDiffusionMatrix, F_c, MonteCarloConfig
from src.utils.error_handler import (ConvergenceError, DivergenceError, ErrorHandler,
                                     ParameterError)
from src.utils.logger import LoggerFactory

logger = LoggerFactory.get_logger("pde_flow")


@dataclass(frozen=True, eq=False)
class GridField2D:
    w11: np.ndarray
    w12: np.ndarray
    w22: np.ndarray

    def __post_init__(self):
        shapes = {self.w11.shape, self.w12.shape, self.w22.shape}
        if len(shapes) != 1 or self.w11.ndim != 2 or self.w11.shape[0] != self.w11.shape[1]:
            raise ParameterError(f"matrix entries must share a square grid, got {shapes}")

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]],
                      m: int) -> GridField2D:
        g = uniform_grid(m)
        x1, x2 = np.meshgrid(g, g, indexing="ij")
        w11, w12, w22 = (np.broadcast_to(np.asarray(v, dtype=float), x1.shape).copy() for v in f(x1, x2))
        return cls(w11, w12, w22)

    @classmethod
    def zeros(cls, m: int) -> GridField2D:
        z = np.zeros((m + 1, m + 1))
        return cls(z.copy(), z.copy(), z.copy())

    @property
    def m(self) -> int:
        return self.w11.shape[0] - 1

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.m)

    def eigenvalues(self) -> Tuple[np.ndarray, np.ndarray]:
        half_trace = 0.5 * (self.w11 + self.w22)
        radius = np.sqrt((0.5 * (self.w11 - self.w22)) ** 2 + self.w12 ** 2)
        return half_trace - radius, half_trace + radius

    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues()[0].min())

    def spectral_sup(self) -> float:
        return float(np.max(np.abs(np.stack(self.eigenvalues()))))

    def sup_norm(self) -> float:
        return float(max(np.abs(self.w11).max(), np.abs(self.w12).max(), np.abs(self.w22).max()))

    def sup_distance(self, other: GridField2D) -> float:
        return float(max(np.abs(self.w11 - other.w11).max(), np.abs(self.w12 - other.w12).max(),
                         np.abs(self.w22 - other.w22).max()))

    def to_frame(self) -> pd.DataFrame:
        g = self.grid
        x1, x2 = np.meshgrid(g, g, indexing="ij")
        return pd.DataFrame({"x1": x1.ravel(), "x2": x2.ravel(), "w11": self.w11.ravel(),
                             "w12": self.w12.ravel(), "w22": self.w22.ravel()})


@dataclass(frozen=True, eq=False)
class GridField1D:
    grid_x: np.ndarray
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("field has non-finite values")

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], m: int) -> GridField1D:
        g = uniform_grid(m)
        return cls(g, np.broadcast_to(np.asarray(f(g), dtype=float), g.shape).copy())

    @classmethod
    def from_catalyzing(cls, p: CatalyzingFunction) -> GridField1D:
        return cls(p.grid_x.copy(), p.values.copy())

    @property
    def m(self) -> int:
        return self.grid_x.size - 1

    def __call__(self, x):
        return np.interp(x, self.grid_x, self.values)

    def sup_distance(self, other: GridField1D) -> float:
        return float(np.max(np.abs(self.values - other(self.grid_x))))

    def to_catalyzing_function(self, name: str = "p_star") -> CatalyzingFunction:
        return CatalyzingFunction(self.grid_x, np.clip(self.values, 0.0, None), name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.grid_x, "value": self.values})


@dataclass(frozen=True)
class FlowConfig:
    m: int = 50
    dt: Optional[float] = None
    max_steps: int = 400000
    residual_tol: float = 1e-7
    cfl: float = 0.25
    ceiling: float = 1e3
    record_every: int = 500

    @property
    def eigenvalue_floor(self) -> float:
        return -10.0 * self.residual_tol

    def stable_dt(self, coefficient_sup: float) -> float:
        dx = 1.0 / self.m
        return self.cfl * dx * dx / max(coefficient_sup, 1e-12)


class BoundaryPattern(Enum):
    CORNERS = 1
    ONE_EDGE = 2
    ADJACENT_EDGES = 3
    OPPOSITE_EDGES = 4
    THREE_EDGES = 5
    WHOLE_BOUNDARY = 6


def zero_edges(w: GridField2D, tol: float = 1e-8) -> Dict[str, bool]:
    scale = max(w.spectral_sup(), 1e-300)
    edges = {"left": (0, slice(None)), "right": (-1, slice(None)),
             "bottom": (slice(None), 0), "top": (slice(None), -1)}
    out = {}
    for name, sl in edges.items():
        mag = max(np.abs(w.w11[sl]).max(), np.abs(w.w12[sl]).max(), np.abs(w.w22[sl]).max())
        out[name] = bool(mag <= tol * scale)
    return out


def classify_fixed_point(w: GridField2D, tol: float = 1e-8) -> BoundaryPattern:
    edges = zero_edges(w, tol)
    count = sum(edges.values())
    if count == 2:
        opposite = (edges["left"] and edges["right"]) or (edges["bottom"] and edges["top"])
        return BoundaryPattern.OPPOSITE_EDGES if opposite else BoundaryPattern.ADJACENT_EDGES
    return {0: BoundaryPattern.CORNERS, 1: BoundaryPattern.ONE_EDGE, 3: BoundaryPattern.THREE_EDGES,
            4: BoundaryPattern.WHOLE_BOUNDARY}[count]


def initial_field_for_case(case: int, m: int) -> GridField2D:
    """Perturbed starting fields whose effective boundary matches each boundary case."""
    starts = {
        1: lambda a, b: (2.0 * a * (1 - a), 0.0 * a, (1.0 + a) * b * (1 - b)),
        2: lambda a, b: (a * (1 - a) * (1.0 + b) / 2.0, 0.0 * a, a * b * (1 - b)),
        3: lambda a, b: (a * (1 - a) * b, 0.0 * a, a * b * (1 - b)),
        4: lambda a, b: (1.2 * a * (1 - a), 0.0 * a, 4.0 * a * (1 - a) * b * (1 - b)),
        5: lambda a, b: (a * (1 - a) * b, 0.0 * a, a * (1 - a) * b * (1 - b)),
        6: lambda a, b: (2.0 * a * (1 - a) * b * (1 - b), 0.5 * a * (1 - a) * b * (1 - b),
                         2.0 * a * (1 - a) * b * (1 - b)),
    }
    if case not in starts:
        raise ParameterError(f"boundary case must be 1..6, got {case}")
    return GridField2D.from_function(starts[case], m)


def known_fixed_point(case: int, m: int, p_star: Optional[GridField1D] = None) -> Optional[GridField2D]:
    if case == 1:
        return GridField2D.from_function(lambda a, b: (a * (1 - a), 0.0 * a, b * (1 - b)), m)
    if case == 2 and p_star is not None:
        return GridField2D.from_function(lambda a, b: (a * (1 - a), 0.0 * a, p_star(a) * b * (1 - b)), m)
    if case == 4:
        return GridField2D.from_function(lambda a, b: (a * (1 - a), 0.0 * a, 0.0 * a), m)
    return None


def second_difference(u: np.ndarray, dx: float, axis: int) -> np.ndarray:
    """Centered in the interior, one-sided (same three-point stencil shifted) on edges."""
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = u[:-2] - 2.0 * u[1:-1] + u[2:]
    out[0] = u[0] - 2.0 * u[1] + u[2]
    out[-1] = u[-1] - 2.0 * u[-2] + u[-3]
    return np.moveaxis(out / (dx * dx), 0, axis)


def mixed_difference(u: np.ndarray, dx: float) -> np.ndarray:
    return np.gradient(np.gradient(u, dx, axis=0, edge_order=2), dx, axis=1, edge_order=2)


def flow_rhs(w: GridField2D) -> GridField2D:
    dx = 1.0 / w.m

    def rhs(u):
        return 0.5 * (w.w11 * second_difference(u, dx, 0) + 2.0 * w.w12 * mixed_difference(u, dx)
                      + w.w22 * second_difference(u, dx, 1)) + u

    return GridField2D(rhs(w.w11), rhs(w.w12), rhs(w.w22))


@dataclass(frozen=True, eq=False)
class FlowResult:
    field: GridField2D
    residual_history: pd.DataFrame
    steps: int
    time: float
    converged: bool
    pattern: BoundaryPattern
    min_eigenvalue: float

    @property
    def eigenvalue_floor(self) -> float:
        return float(self.residual_history["min_eigenvalue"].min())

    def reactant_decay(self) -> Dict[str, Any]:
        """sup|w22| along the recorded history: first and last values and whether it never grew."""
        sup = self.residual_history["sup_w22"].to_numpy()
        return {"sup_w22_start": float(sup[0]), "sup_w22_end": float(sup[-1]),
                "nonincreasing": bool(np.all(np.diff(sup) <= 1e-12))}


def check_eigenvalue_floor(w: GridField2D, floor: float, step: int, t: float) -> float:
    """Raise ``DivergenceError`` once the smallest eigenvalue on the grid drops below ``floor``."""
    lowest = w.min_eigenvalue()
    if lowest < floor:
        raise DivergenceError(f"min eigenvalue {lowest:.3e} fell below the floor {floor:.1e} at t={t:.4g}",
                              {"step": step, "time": t, "min_eigenvalue": lowest, "floor": floor})
    return lowest


@ErrorHandler.handle_errors("pde_flow")
def run_flow_2d(w0: GridField2D, config: FlowConfig, target: Optional[GridField2D] = None,
                target_tol: float = 1e-3, max_time: Optional[float] = None) -> FlowResult:
    """Integrate the matrix flow until the time derivative is below ``residual_tol``.

    With ``target`` the run also stops once the field is within ``target_tol`` of it. The
    eigenvalue floor ``-10 residual_tol`` is enforced at every recorded step and at the end.
    """
    if w0.m != config.m:
        raise ParameterError(f"field grid M={w0.m} does not match config M={config.m}")
    if w0.min_eigenvalue() < -1e-12:
        raise ParameterError(f"initial field is not nonnegative definite (min eigenvalue {w0.min_eigenvalue():.3e})")
    bound = config.stable_dt(max(w0.spectral_sup(), 0.25))
    if config.dt is not None and config.dt > bound:
        raise ParameterError(f"dt={config.dt} exceeds the explicit stability bound {bound:.3e}")
    dt = config.dt or bound
    floor = config.eigenvalue_floor
    w = w0
    history: List[Tuple[int, float, float, float, float]] = []
    converged = False
    step = 0
    t = 0.0
    while step < config.max_steps and (max_time is None or t < max_time):
        r = flow_rhs(w)
        residual = r.sup_norm()
        if step % config.record_every == 0:
            lowest = check_eigenvalue_floor(w, floor, step, t)
            history.append((step, t, residual, lowest, float(np.abs(w.w22).max())))
        if residual < config.residual_tol or (target is not None and w.sup_distance(target) < target_tol):
            converged = True
            break
        w = GridField2D(w.w11 + dt * r.w11, w.w12 + dt * r.w12, w.w22 + dt * r.w22)
        step += 1
        t += dt
        sup = w.sup_norm()
        if not np.isfinite(sup) or sup > config.ceiling:
            raise DivergenceError(f"flow exceeded ceiling {config.ceiling:g} at t={t:.4g}",
                                  {"step": step, "time": t, "sup_norm": float(sup), "dt": dt})
        if step % config.record_every == 0 and w.spectral_sup() > 0 and config.stable_dt(w.spectral_sup()) < dt:
            dt = 0.5 * dt
            logger.warning(f"Halving dt to {dt:.3e} at t={t:.4g} to stay below the stability bound")
    lowest = check_eigenvalue_floor(w, floor, step, t)
    history.append((step, t, flow_rhs(w).sup_norm(), lowest, float(np.abs(w.w22).max())))
    pattern = classify_fixed_point(w)
    logger.info(f"Flow finished after {step} steps (t={t:.4g}), converged={converged}, pattern={pattern.name}")
    frame = pd.DataFrame(history, columns=["step", "time", "residual", "min_eigenvalue", "sup_w22"])
    return FlowResult(w, frame, step, t, converged, pattern, lowest)


@dataclass(frozen=True)
class CauchyConfig:
    cfl: float = 0.25
    ceiling: float = 1e3


def _logistic(u: float, dt: float) -> float:
    e = np.exp(dt)
    return u * e / (1.0 - u + u * e)


@ErrorHandler.handle_errors("pde_flow")
def run_cauchy_1d(f: GridField1D, horizon: float, config: CauchyConfig = CauchyConfig()) -> GridField1D:
    if np.any(f.values < 0):
        raise ParameterError("initial condition must be nonnegative")
    x = f.grid_x
    dx = 1.0 / f.m
    coef = 0.5 * x * (1.0 - x)
    dt_max = config.cfl * dx * dx / coef.max()
    n_steps = max(int(np.ceil(horizon / dt_max)), 1) if horizon > 0 else 0
    dt = horizon / n_steps if n_steps else 0.0
    u = f.values.astype(float).copy()
    inner = coef[1:-1] / (dx * dx)
    for _ in range(n_steps):
        lap = u[:-2] - 2.0 * u[1:-1] + u[2:]
        interior = u[1:-1] + dt * (inner * lap + u[1:-1] * (1.0 - u[1:-1]))
        u[0] = _logistic(u[0], dt)
        u[-1] = _logistic(u[-1], dt)
        u[1:-1] = interior
        if not np.all(np.isfinite(u)) or np.abs(u).max() > config.ceiling:
            raise DivergenceError(f"Cauchy solution exceeded ceiling {config.ceiling:g}",
                                  {"sup_norm": float(np.abs(u).max()), "dt": dt})
    return GridField1D(x.copy(), u, {"horizon": horizon, "steps": n_steps, "dt": dt})


@dataclass(frozen=True)
class PStarConfig:
    m: int = 200
    tol: float = 1e-8
    max_iter: int = 60
    fallback_horizon: float = 40.0


def _pstar_residual(p: np.ndarray, coef: np.ndarray, dx: float) -> np.ndarray:
    lap = (p[:-2] - 2.0 * p[1:-1] + p[2:]) / (dx * dx)
    return coef[1:-1] * lap + p[1:-1] * (1.0 - p[1:-1])


def _newton_pstar(config: PStarConfig) -> GridField1D:
    x = uniform_grid(config.m)
    dx = 1.0 / config.m
    coef = 0.5 * x * (1.0 - x)
    p = x.copy()
    off = coef[1:-1] / (dx * dx)
    res = _pstar_residual(p, coef, dx)
    norm = np.abs(res).max()
    for it in range(1, config.max_iter + 1):
        jac = sp.diags([off[1:], -2.0 * off + 1.0 - 2.0 * p[1:-1], off[:-1]], offsets=[-1, 0, 1], format="csc")
        step = spsolve(jac, -res)
        lam = 1.0
        while lam > 1e-6:
            trial = p.copy()
            trial[1:-1] += lam * step
            trial_res = _pstar_residual(trial, coef, dx)
            trial_norm = np.abs(trial_res).max()
            if trial_norm < norm:
                break
            lam *= 0.5
        p, res, norm = trial, trial_res, trial_norm
        logger.debug(f"Newton iteration {it}: residual {norm:.3e}, damping {lam:g}")
        if norm < config.tol:
            return GridField1D(x, p, {"method": "newton", "iterations": it, "residual": float(norm)})
    raise ConvergenceError(f"Newton did not reach residual {config.tol:g} (last {norm:.3e})")


@ErrorHandler.handle_errors("pde_flow")
def solve_p_star(config: PStarConfig = PStarConfig()) -> GridField1D:
    try:
        result = _newton_pstar(config)
        logger.info(f"p* solved by Newton on M={config.m} in {result.meta['iterations']} iterations")
        return result
    except ConvergenceError as e:
        logger.warning(f"{e}; falling back to the Cauchy semigroup for T={config.fallback_horizon:g}")
        start = GridField1D.from_function(lambda x: 1.0 - (1.0 - x) ** 7, config.m)
        out = run_cauchy_1d(start, config.fallback_horizon)
        res = float(np.abs(_pstar_residual(out.values, 0.5 * out.grid_x * (1 - out.grid_x), 1.0 / config.m)).max())
        return GridField1D(out.grid_x, out.values, {"method": "cauchy-fallback", "residual": res})


def mesh_convergence_ratio(m: int = 50) -> Tuple[float, float, float]:
    """Richardson ratio of successive p* differences on meshes M, 2M, 4M."""
    coarse, mid, fine = (solve_p_star(PStarConfig(m=k)) for k in (m, 2 * m, 4 * m))
    nodes = coarse.grid_x
    e1 = float(np.max(np.abs(coarse.values - mid(nodes))))
    e2 = float(np.max(np.abs(mid(nodes) - fine(nodes))))
    return e1 / e2, e1, e2


@dataclass(frozen=True, eq=False)
class FixedPointReport:
    gamma_star: float
    catalyst_residual: float
    reactant_residual: float
    propagated_se: float
    image: CatalyticDiffusionMatrix

    @property
    def residual(self) -> float:
        return max(self.catalyst_residual, self.reactant_residual)

    def consistent(self, sigmas: float = 3.0, slack: float = 1e-12) -> bool:
        return self.residual <= sigmas * self.propagated_se + slack


@ErrorHandler.handle_errors("pde_flow")
def verify_fixed_point(w_star: CatalyticDiffusionMatrix, gamma_star: float, mc: MonteCarloConfig,
                       rng: np.random.Generator) -> FixedPointReport:
    """Compare (1+gamma*) F_{1/gamma*} w* with w* on the grid of its catalyzing function."""
    if not gamma_star > 0:
        raise ParameterError(f"gamma* must be positive, got {gamma_star}")
    raw = F_c(w_star, 1.0 / gamma_star, mc, rng)
    image = raw.scaled(1.0 + gamma_star)
    se = 0.0 if raw.p_std_error is None else (1.0 + gamma_star) * float(np.max(raw.p_std_error))
    cat = abs(image.alpha - w_star.alpha)
    react = image.p.sup_distance(w_star.p)
    logger.info(f"Fixed-point residual at gamma*={gamma_star:g}: catalyst {cat:.2e}, reactant {react:.3e} (SE {se:.2e})")
    return FixedPointReport(gamma_star, cat, react, se, image)
