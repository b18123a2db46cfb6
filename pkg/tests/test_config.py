import os
import tempfile
import unittest
from unittest.mock import patch

import yaml

from src.config.config_manager import ConfigManager, ConfigManagerFactory
from src.config.run_config import RunConfigFactory
from src.utils.error_handler import ParameterError

SETTINGS = {
    "run": {"seed": "${WFREN_SEED}", "default_seed": 7, "jobs": 1},
    "output": {"directory": "${WFREN_OUTPUT_DIR}", "default_directory": "results"},
    "loglaplace": {"replicas": 500, "dt": 0.01, "grid_m": 20},
    "tolerances": {"sigmas": 3},
}


class TestConfigManager(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "config.yaml")
        with open(self.path, "w") as f:
            yaml.safe_dump(SETTINGS, f)

    def tearDown(self):
        self.tmp.cleanup()

    @patch.dict(os.environ, {"WFREN_SEED": "123"})
    def test_environment_values_are_parsed(self):
        config = ConfigManagerFactory.create(self.path)
        self.assertEqual(config.get("run.seed"), 123)

    @patch.dict(os.environ, {}, clear=True)
    def test_missing_environment_falls_back_to_default(self):
        config = ConfigManager(self.path)
        self.assertIsNone(config.get("run.seed"))
        self.assertEqual(config.get("run.seed", 5), 5)
        self.assertEqual(config.get("run.default_seed"), 7)

    def test_overrides(self):
        config = ConfigManager(self.path)
        config.apply_overrides(["loglaplace.replicas=42", "renorm.schedule=constant", "wf.gamma=0.5"])
        self.assertEqual(config.get("loglaplace.replicas"), 42)
        self.assertEqual(config.get("renorm.schedule"), "constant")
        self.assertEqual(config.get("wf.gamma"), 0.5)

    def test_malformed_override(self):
        config = ConfigManager(self.path)
        with self.assertRaises(ParameterError):
            config.apply_overrides(["replicas"])
        with self.assertRaises(ParameterError):
            config.apply_overrides(["=3"])

    def test_to_dict_is_a_copy(self):
        config = ConfigManager(self.path)
        snapshot = config.to_dict()
        snapshot["loglaplace"]["replicas"] = 1
        self.assertEqual(config.get("loglaplace.replicas"), 500)

    @patch.dict(os.environ, {"WFREN_GAMMA": "0.25"})
    def test_placeholders_inside_lists(self):
        with open(self.path, "w") as f:
            yaml.safe_dump({"renorm": {"gammas": [1.0, "${WFREN_GAMMA}"]}}, f)
        self.assertEqual(ConfigManager(self.path).get("renorm.gammas"), [1.0, 0.25])

    def test_set_below_a_value_is_rejected(self):
        config = ConfigManager(self.path)
        with self.assertRaises(ParameterError):
            config.apply_overrides(["loglaplace.replicas.count=3"])


class TestRunConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "config.yaml")
        with open(self.path, "w") as f:
            yaml.safe_dump(SETTINGS, f)

    def tearDown(self):
        self.tmp.cleanup()

    @patch.dict(os.environ, {"WFREN_SEED": "99"})
    def test_seed_precedence(self):
        config = ConfigManager(self.path)
        self.assertEqual(RunConfigFactory.create(config, seed=5).seed, 5)
        self.assertEqual(RunConfigFactory.create(config).seed, 99)

    @patch.dict(os.environ, {}, clear=True)
    def test_default_seed_and_output(self):
        run = RunConfigFactory.create(ConfigManager(self.path))
        self.assertEqual(run.seed, 7)
        self.assertEqual(run.output_dir, "results")
        self.assertEqual(run.replicas, 500)
        self.assertEqual(run.tolerance("sigmas", 4.0), 3.0)
        self.assertEqual(run.tolerance("relative", 0.05), 0.05)

    @patch.dict(os.environ, {"WFREN_OUTPUT_DIR": "/tmp/elsewhere"})
    def test_output_directory_from_environment(self):
        run = RunConfigFactory.create(ConfigManager(self.path), output_dir=None)
        self.assertEqual(run.output_dir, "/tmp/elsewhere")
        self.assertEqual(RunConfigFactory.create(ConfigManager(self.path), output_dir="mine").output_dir, "mine")

    def test_invalid_values(self):
        config = ConfigManager(self.path)
        with self.assertRaises(ParameterError):
            RunConfigFactory.create(config, seed=-1)
        config.set("loglaplace.replicas", 0)
        with self.assertRaises(ParameterError):
            RunConfigFactory.create(config, seed=1)

    def test_jobs_default_to_available_cores(self):
        config = ConfigManager(self.path)
        config.set("run.jobs", 0)
        self.assertEqual(RunConfigFactory.create(config).jobs, os.cpu_count() or 1)
        self.assertEqual(RunConfigFactory.create(config, jobs=3).jobs, 3)
        with self.assertRaises(ParameterError):
            RunConfigFactory.create(config, jobs=-2)

    def test_shipped_config_uses_every_core(self):
        shipped = ConfigManager(os.path.join(os.path.dirname(__file__), "..", "config", "config.yaml"))
        self.assertEqual(shipped.get("run.jobs"), 0)
        self.assertEqual(RunConfigFactory.create(shipped, seed=1).jobs, os.cpu_count() or 1)


if __name__ == '__main__':
    unittest.main()
