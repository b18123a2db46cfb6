import json
import os
import tempfile
import unittest
from importlib import import_module

import pandas as pd

from main import EXIT_OK, EXIT_USAGE, build_parser, main
from src.experiments import SUBCOMMANDS

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG = os.path.join(ROOT, "config", "config.yaml")
MODEL_MODULES = ("wf_core", "loglaplace", "renorm", "pde_flow", "branching", "embedded", "campbell", "hierarchical")
OPERATIONS = (
    "simulate_wf_path", "sample_invariant", "invariant_moment", "couple_wf_pair", "dual_chain_psi_infinity",
    "sample_cluster", "apply_U", "apply_U_dual_hm", "iterate_U", "chi_m", "large_gamma_bound", "check_shape_preservation",
    "schedule_from_ck", "rescaled_F", "F_c", "iterate_renorm", "estimate_nu_moments", "effective_boundary",
    "iterated_kernel_sample",
    "run_flow_2d", "run_cauchy_1d", "solve_p_star", "verify_fixed_point",
    "step_poisson_cluster", "run_renorm_branching", "poissonize", "run_embedded_h11", "run_embedded_h00",
    "run_embedded_h01", "weighted_mass_statistics", "weighting_identity", "poissonization_counts",
    "immortal_chain_step", "simulate_campbell_tree", "return_fraction", "size_biased_resample",
    "simulate_hierarchical", "block_average", "recurrence_test", "interaction_chain_extract", "chain_regression",
)


class TestParser(unittest.TestCase):

    def test_subcommands(self):
        self.assertEqual(set(SUBCOMMANDS), {"invariant-law", "loglaplace", "renorm-iterate", "pde-flow", "solve-pstar",
                                            "branching", "campbell", "hierarchical", "verify"})

    def test_operations_resolve_to_model_functions(self):
        modules = [import_module(f"src.models.{name}") for name in MODEL_MODULES]
        for cls in SUBCOMMANDS.values():
            for op in cls.operations:
                self.assertTrue(any(hasattr(m, op) for m in modules), msg=f"{cls.name}: {op}")

    def test_every_operation_has_a_subcommand(self):
        driven = set().union(*(cls.operations for cls in SUBCOMMANDS.values()))
        self.assertEqual(set(OPERATIONS) - driven, set())
        self.assertEqual(driven - set(OPERATIONS), set())

    def test_common_arguments(self):
        args = build_parser().parse_args(["loglaplace", "--seed", "3", "--M", "20", "--set", "wf.gamma=2",
                                          "--set", "run.jobs=2"])
        self.assertEqual(args.seed, 3)
        self.assertEqual(args.M, 20)
        self.assertEqual(args.set, ["wf.gamma=2", "run.jobs=2"])


class TestMain(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _manifest(self):
        with open(os.path.join(self.tmp.name, "manifest.json")) as f:
            return json.load(f)

    def test_usage_errors(self):
        self.assertEqual(main(["no-such-command"]), EXIT_USAGE)
        self.assertEqual(main(["pde-flow", "--case", "9"]), EXIT_USAGE)
        self.assertEqual(main(["solve-pstar", "--config", CONFIG, "--out", self.tmp.name,
                               "--set", "not-an-assignment"]), EXIT_USAGE)

    def test_invalid_parameter_is_a_usage_error(self):
        code = main(["hierarchical", "--config", CONFIG, "--out", self.tmp.name, "--theta", "0,0.5", "--N", "2", "--K", "2",
                     "--horizon", "0.01", "--replicas", "1"])
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("usage_error", self._manifest()["diagnostics"])

    def test_solve_pstar(self):
        code = main(["solve-pstar", "--config", CONFIG, "--out", self.tmp.name, "--M", "50", "--seed", "1",
                     "--horizon", "5"])
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(os.path.join(self.tmp.name, "p_star.csv"))
        self.assertEqual(list(frame.columns), ["x", "p"])
        self.assertEqual(frame["p"].iloc[0], 0.0)
        self.assertEqual(frame["p"].iloc[-1], 1.0)
        manifest = self._manifest()
        self.assertEqual(manifest["command"], "solve-pstar")
        self.assertEqual(manifest["config"]["run"]["seed"], 1)
        self.assertIn("p_star.csv", manifest["artifacts"])
        self.assertTrue(manifest["diagnostics"]["sandwich"])

    def test_invariant_law(self):
        code = main(["invariant-law", "--config", CONFIG, "--out", self.tmp.name, "--seed", "2", "--gamma", "1",
                     "--x", "0.5", "--draws", "2000", "--horizon", "0.2", "--coupling-paths", "5",
                     "--dual-runs", "20", "--dt", "1e-3"])
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(os.path.join(self.tmp.name, "invariant_law.csv"))
        het = frame[frame["statistic"] == "heterozygosity"].iloc[0]
        self.assertAlmostEqual(het["exact"], 0.125)
        self.assertLessEqual(abs(het["empirical"] - het["exact"]), 4.0 * het["std_error"])
        dual = pd.read_csv(os.path.join(self.tmp.name, "dual_chain.csv"))
        self.assertEqual(len(dual), 5)

    def test_same_seed_gives_identical_artifacts(self):
        runs = [tempfile.TemporaryDirectory() for _ in range(2)]
        try:
            for out in runs:
                code = main(["invariant-law", "--config", CONFIG, "--out", out.name, "--seed", "9", "--gamma", "1",
                             "--x", "0.3", "--draws", "500", "--horizon", "0.05", "--coupling-paths", "3",
                             "--dual-runs", "10", "--dt", "1e-3"])
                self.assertEqual(code, EXIT_OK)
            names = sorted(n for n in os.listdir(runs[0].name) if n.endswith(".csv"))
            self.assertIn("invariant_law.csv", names)
            self.assertEqual(names, sorted(n for n in os.listdir(runs[1].name) if n.endswith(".csv")))
            for name in names:
                with open(os.path.join(runs[0].name, name), "rb") as a, open(os.path.join(runs[1].name, name), "rb") as b:
                    self.assertEqual(a.read(), b.read(), msg=name)
        finally:
            for out in runs:
                out.cleanup()


if __name__ == '__main__':
    unittest.main()
