import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src import __version__
from src.features.catalyzing_function import CatalyzingFunction
from src.utils.error_handler import ErrorHandler
from src.utils.logger import LoggerFactory


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: Any
    tolerance: Any
    tag: str = "PRIMARY"
    detail: str = ""
    skipped: bool = False


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    version: str = __version__
    started_at: float = field(default_factory=time.time)
    wall_clock_seconds: Optional[float] = None
    checks: List[CheckResult] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    exploratory: bool = False
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def add_check(self, check: CheckResult) -> None:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"Check '{check.name}' recorded twice")
        self.checks.append(check)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.skipped)

    def finish(self) -> None:
        self.wall_clock_seconds = time.time() - self.started_at

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable({
            "command": self.command,
            "config": self.config,
            "version": self.version,
            "wall_clock_seconds": self.wall_clock_seconds,
            "exploratory": self.exploratory,
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
            "artifacts": self.artifacts,
            "diagnostics": self.diagnostics,
        })


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else str(v)
    return value


class ArtifactWriter:
    """Owns one output directory; every file it writes is listed in the manifest."""

    def __init__(self, output_dir: str, manifest: RunManifest):
        self.logger = LoggerFactory.get_logger(self.__class__.__name__)
        self.output_dir = output_dir
        self.manifest = manifest
        os.makedirs(output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _record(self, name: str) -> str:
        full = self.path(name)
        if name not in self.manifest.artifacts:
            self.manifest.artifacts.append(name)
        self.logger.debug(f"Wrote {full}")
        return full

    @ErrorHandler.handle_errors("ArtifactWriter")
    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        full = self.path(name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        frame.to_csv(full, index=False)
        return self._record(name)

    def write_function(self, name: str, p: CatalyzingFunction) -> str:
        return self.write_frame(name, p.to_frame())

    def write_diffusion_matrix(self, name: str, w) -> str:
        """JSON {alpha, p_csv_path, boundary_class} next to the CSV of p."""
        csv_name = os.path.splitext(name)[0] + "_p.csv"
        self.write_function(csv_name, w.p)
        return self.write_json(name, w.to_json(csv_name))

    @ErrorHandler.handle_errors("ArtifactWriter")
    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        full = self.path(name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        with open(full, "w", encoding="utf-8") as f:
            json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        return self._record(name)

    def write_manifest(self, name: str = "manifest.json") -> str:
        self.manifest.finish()
        full = self.path(name)
        with open(full, "w", encoding="utf-8") as f:
            json.dump(self.manifest.to_dict(), f, indent=2, sort_keys=True)
        self.logger.info(f"Manifest written to {full} ({len(self.manifest.checks)} checks, "
                         f"{len(self.manifest.artifacts)} artifacts)")
        return full
