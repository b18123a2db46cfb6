import argparse
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config.config_manager import ConfigManager
from src.config.run_config import RunConfig
from src.data.artifact_writer import ArtifactWriter, CheckResult
from src.features.catalyzing_function import CatalyzingFunction
from src.models.renorm import MonteCarloConfig
from src.utils.logger import LoggerFactory
from src.utils.rng import StreamFactory


@dataclass
class ExperimentContext:
    config: ConfigManager
    run: RunConfig
    streams: StreamFactory
    writer: ArtifactWriter

    def rng(self, label: str, index: int = 0) -> np.random.Generator:
        return self.streams.stream(label, index)

    def monte_carlo(self, replicas: Optional[int] = None, dt: Optional[float] = None) -> MonteCarloConfig:
        return MonteCarloConfig(
            replicas=replicas or self.run.replicas,
            dt=dt or self.run.dt,
            jobs=self.run.jobs,
            control_variate=bool(self.config.get('loglaplace.control_variate', True)),
            burn_in_multiple=float(self.config.get('renorm.burn_in_multiple', 10.0)),
            averaging_time=float(self.config.get('renorm.averaging_time', 50.0)),
            nu_replicas=int(self.config.get('renorm.nu_replicas', 200)),
        )

    def catalyzing(self, expression: str, m: Optional[int] = None) -> CatalyzingFunction:
        return CatalyzingFunction.from_expression(expression, m or self.run.grid_m)

    def check(self, check: CheckResult) -> CheckResult:
        self.writer.manifest.add_check(check)
        return check


class Experiment(ABC):
    """One CLI subcommand. ``operations`` names the model operations it drives."""

    name: str = ""
    help: str = ""
    operations: Tuple[str, ...] = ()

    def __init__(self, context: ExperimentContext, args: argparse.Namespace):
        self.logger = LoggerFactory.get_logger(self.__class__.__name__)
        self.ctx = context
        self.args = args

    @staticmethod
    def add_arguments(parser: argparse.ArgumentParser) -> None:
        pass

    @abstractmethod
    def run(self) -> int:
        pass

    def mark_exploratory(self, reason: str) -> None:
        self.ctx.writer.manifest.exploratory = True
        self.ctx.writer.manifest.diagnostics.setdefault("exploratory", []).append(reason)
        self.logger.info(f"Exploratory output: {reason}")


def float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(',') if v.strip()]


def constant_gammas(n: int, gamma: float = 1.0) -> List[float]:
    return [float(gamma)] * n


def first_index_with_sum(gammas: Sequence[float], target: float) -> int:
    total = 0.0
    for k, g in enumerate(gammas):
        total += g
        if total >= target:
            return k + 1
    return len(gammas)
