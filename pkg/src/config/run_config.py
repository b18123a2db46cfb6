from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

from src.config.config_manager import ConfigManager
from src.utils.error_handler import ParameterError
from src.utils.parallel import available_jobs


@dataclass(frozen=True)
class RunConfig:
    seed: int
    replicas: int
    dt: float
    grid_m: int
    output_dir: str
    jobs: int = 1
    tolerances: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.replicas <= 0:
            raise ParameterError(f"replicas must be positive, got {self.replicas}")
        if self.dt <= 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if self.grid_m < 2:
            raise ParameterError(f"grid M must be at least 2, got {self.grid_m}")
        if self.jobs < 1:
            raise ParameterError(f"jobs must be at least 1 once resolved, got {self.jobs}")
        if not 0 <= self.seed < 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def tolerance(self, name: str, default: float) -> float:
        return float(self.tolerances.get(name, default))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class RunConfigFactory:
    @staticmethod
    def create(config: ConfigManager, seed: Optional[int] = None, jobs: Optional[int] = None,
               output_dir: Optional[str] = None) -> RunConfig:
        resolved_seed = seed
        if resolved_seed is None:
            resolved_seed = config.get('run.seed')
        if resolved_seed is None:
            resolved_seed = config.get('run.default_seed', 0)
        try:
            resolved_seed = int(resolved_seed)
        except (TypeError, ValueError) as e:
            raise ParameterError(f"seed is not an integer: {resolved_seed!r}") from e
        return RunConfig(
            seed=resolved_seed,
            replicas=int(config.get('loglaplace.replicas', 10000)),
            dt=float(config.get('loglaplace.dt', 1e-3)),
            grid_m=int(config.get('loglaplace.grid_m', 100)),
            output_dir=output_dir or config.get('output.directory') or config.get('output.default_directory', 'output'),
            jobs=_resolve_jobs(jobs if jobs is not None else config.get('run.jobs', 0)),
            tolerances={k: float(v) for k, v in (config.get('tolerances', {}) or {}).items()},
        )


def _resolve_jobs(raw: Any) -> int:
    # 0 selects every available core.
    try:
        jobs = int(raw)
    except (TypeError, ValueError) as e:
        raise ParameterError(f"jobs is not an integer: {raw!r}") from e
    if jobs < 0:
        raise ParameterError(f"jobs must be non-negative, got {jobs}")
    return jobs or available_jobs()
