import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

from src.config.config_manager import DEFAULT_CONFIG_PATH, ConfigManager, ConfigManagerFactory
from src.config.run_config import RunConfigFactory
from src.data.artifact_writer import ArtifactWriter, RunManifest
from src.experiments import SUBCOMMANDS
from src.experiments.base import Experiment, ExperimentContext
from src.utils.error_handler import DomainError, NumericalGuardError, ParameterError
from src.utils.logger import LoggerFactory
from src.utils.rng import StreamFactory

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL_GUARD = 3


def common_arguments() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', default=DEFAULT_CONFIG_PATH, help="YAML configuration file")
    parent.add_argument('--seed', type=int, default=None, help="root seed (falls back to WFREN_SEED)")
    parent.add_argument('--jobs', type=int, default=None, help="worker processes; 0 means all cores")
    parent.add_argument('--out', default=None, help="output directory")
    parent.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help="override a configuration key, may be repeated")
    parent.add_argument('--log-level', default=None)
    parent.add_argument('--M', type=int, default=None, help="grid size")
    parent.add_argument('--dt', type=float, default=None, help="Euler step")
    parent.add_argument('--replicas', type=int, default=None, help="Monte Carlo replicas")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wfrenorm",
                                     description="Renormalization experiments for catalytic Wright-Fisher diffusions")
    subparsers = parser.add_subparsers(dest='command', required=True)
    parent = common_arguments()
    for name, cls in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, parents=[parent], help=cls.help)
        cls.add_arguments(sub)
    return parser


class Application:
    def __init__(self, config: ConfigManager, logger, experiment: Experiment):
        self.config = config
        self.logger = logger
        self.experiment = experiment

    @property
    def manifest(self) -> RunManifest:
        return self.experiment.ctx.writer.manifest

    def run(self) -> int:
        writer = self.experiment.ctx.writer
        try:
            self.logger.info(f"Running '{self.experiment.name}' with seed {self.experiment.ctx.run.seed}")
            code = self.experiment.run()
        except NumericalGuardError as e:
            self.manifest.diagnostics["numerical_guard"] = {"error": str(e), **e.diagnostics}
            code = EXIT_NUMERICAL_GUARD
        except (ParameterError, DomainError) as e:
            self.manifest.diagnostics["usage_error"] = str(e)
            code = EXIT_USAGE
        self.manifest.diagnostics["exit_code"] = code
        writer.write_manifest()
        return code


class ApplicationFactory:
    @staticmethod
    def create(args: argparse.Namespace) -> Application:
        load_dotenv()

        config = ConfigManagerFactory.create(args.config)
        config.apply_overrides(args.set)
        if args.M is not None:
            config.set('loglaplace.grid_m', args.M)
        if args.dt is not None:
            config.set('loglaplace.dt', args.dt)
        if args.replicas is not None:
            config.set('loglaplace.replicas', args.replicas)
        LoggerFactory.set_level(args.log_level or config.get('run.log_level', 'INFO'))
        logger = LoggerFactory.get_logger("Application")

        run = RunConfigFactory.create(config, seed=args.seed, jobs=args.jobs, output_dir=args.out)
        manifest = RunManifest(command=args.command, config={"run": run.to_dict(), "settings": config.to_dict(),
                                                             "arguments": {k: v for k, v in vars(args).items()
                                                                           if k != 'set'}})
        writer = ArtifactWriter(run.output_dir, manifest)
        context = ExperimentContext(config, run, StreamFactory(run.seed), writer)
        experiment = SUBCOMMANDS[args.command](context, args)

        logger.info("Application components initialized successfully.")
        return Application(config, logger, experiment)


def main(argv: Optional[List[str]] = None) -> int:
    logger = LoggerFactory.get_logger("Main")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        app = ApplicationFactory.create(args)
    except (ParameterError, DomainError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    return app.run()


if __name__ == "__main__":
    sys.exit(main())
