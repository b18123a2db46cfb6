from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import pandas as pd
import sympy
from sympy.parsing.sympy_parser import parse_expr

from src.utils.error_handler import ParameterError
from src.utils.logger import LoggerFactory

logger = LoggerFactory.get_logger("catalyzing_function")

_X = sympy.Symbol("x", real=True)


def uniform_grid(m: int) -> np.ndarray:
    if m < 1:
        raise ParameterError(f"grid needs at least one cell, got M={m}")
    return np.linspace(0.0, 1.0, m + 1)


@dataclass(frozen=True, eq=False)
class CatalyzingFunction:
    """Nonnegative function on [0,1] sampled on a uniform grid, linear in between."""

    grid_x: np.ndarray
    values: np.ndarray
    name: str = "p"

    def __post_init__(self):
        grid = np.asarray(self.grid_x, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ParameterError(f"grid and values must be 1-d of equal length, got {grid.shape} and {values.shape}")
        if grid.size < 2 or grid[0] != 0.0 or not np.isclose(grid[-1], 1.0):
            raise ParameterError("grid must run from 0 to 1")
        if not np.allclose(np.diff(grid), grid[1] - grid[0], rtol=1e-9, atol=1e-12):
            raise ParameterError("grid must be uniform")
        if not np.all(np.isfinite(values)):
            raise ParameterError(f"{self.name} has non-finite values")
        if np.any(values < 0):
            raise ParameterError(f"{self.name} must be nonnegative, min value {values.min():.3g}")
        object.__setattr__(self, "grid_x", grid)
        object.__setattr__(self, "values", values)

    # constructors

    @classmethod
    def from_callable(cls, f: Callable[[np.ndarray], np.ndarray], m: int, name: str = "p") -> CatalyzingFunction:
        grid = uniform_grid(m)
        values = np.broadcast_to(np.asarray(f(grid), dtype=float), grid.shape).copy()
        return cls(grid, values, name)

    @classmethod
    def from_expression(cls, expression: str, m: int) -> CatalyzingFunction:
        try:
            expr = parse_expr(expression, local_dict={"x": _X})
        except (SyntaxError, TypeError, sympy.SympifyError) as e:
            raise ParameterError(f"cannot parse catalyzing function '{expression}': {e}") from e
        extra = expr.free_symbols - {_X}
        if extra:
            raise ParameterError(f"expression '{expression}' has unknown symbols {sorted(map(str, extra))}")
        f = sympy.lambdify(_X, expr, modules="numpy")
        return cls.from_callable(f, m, name=expression)

    @classmethod
    def constant(cls, r: float, m: int) -> CatalyzingFunction:
        return cls.from_callable(lambda x: np.full_like(x, float(r)), m, name=f"const({r:g})")

    @classmethod
    def h11(cls, m: int) -> CatalyzingFunction:
        return cls.from_callable(np.ones_like, m, name="h11")

    @classmethod
    def h00(cls, m: int) -> CatalyzingFunction:
        return cls.from_callable(lambda x: x * (1.0 - x), m, name="h00")

    @classmethod
    def h1(cls, m: int) -> CatalyzingFunction:
        return cls.from_callable(lambda x: x, m, name="h1")

    @classmethod
    def hm(cls, power: int, m: int) -> CatalyzingFunction:
        if power < 1:
            raise ParameterError(f"h_m needs m >= 1, got {power}")
        return cls.from_callable(lambda x: 1.0 - (1.0 - x) ** power, m, name=f"h{power}")

    @classmethod
    def h01(cls, m: int, power: int = 7) -> CatalyzingFunction:
        return cls.hm(power, m)

    @classmethod
    def from_csv(cls, path: str) -> CatalyzingFunction:
        df = pd.read_csv(path)
        if list(df.columns[:2]) != ["x", "p"]:
            raise ParameterError(f"{path}: expected columns (x, p), got {list(df.columns)}")
        logger.info(f"Loaded catalyzing function from {path} ({len(df)} nodes)")
        return cls(df["x"].to_numpy(), df["p"].to_numpy(), name=str(path))

    # serialization

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.grid_x, "p": self.values})

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    # evaluation and diagnostics

    @property
    def m(self) -> int:
        return self.grid_x.size - 1

    @property
    def dx(self) -> float:
        return 1.0 / self.m

    @property
    def boundary_class(self) -> Tuple[int, int]:
        return int(self.values[0] > 0), int(self.values[-1] > 0)

    def __call__(self, x):
        return np.interp(x, self.grid_x, self.values)

    def with_values(self, values: np.ndarray, name: str | None = None) -> CatalyzingFunction:
        return CatalyzingFunction(self.grid_x, np.clip(values, 0.0, None), name or self.name)

    def scaled(self, r: float) -> CatalyzingFunction:
        return self.with_values(r * self.values, name=f"{r:g}*{self.name}")

    def first_differences(self) -> np.ndarray:
        return np.diff(self.values)

    def second_differences(self) -> np.ndarray:
        return np.diff(self.values, n=2)

    def lipschitz_constant(self) -> float:
        return float(np.max(np.abs(self.first_differences())) / self.dx)

    def is_nondecreasing(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.first_differences() >= -tol))

    def is_concave(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.second_differences() <= tol))

    def sup_distance(self, other: CatalyzingFunction) -> float:
        if other.m == self.m:
            return float(np.max(np.abs(self.values - other.values)))
        return float(np.max(np.abs(self.values - other(self.grid_x))))

    def sup_norm(self) -> float:
        return float(np.max(self.values))

    def __repr__(self) -> str:
        return f"CatalyzingFunction({self.name}, M={self.m}, class={self.boundary_class})"
