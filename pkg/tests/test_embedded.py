import unittest
from dataclasses import replace

import numpy as np
import pytest

from src.features.catalyzing_function import CatalyzingFunction
from src.models.embedded import (Outcome, OffspringContext, catalyzing_for, h11_offspring, offspring_mean,
                                 poissonization_counts, predicted_survival_h01, run_embedded_batch, run_embedded_h00,
                                 run_embedded_h11, weighted_mass_statistics)
from src.utils.error_handler import DomainError, ParameterError
from src.utils.statistics import count_law_test, mean_estimate


class TestH11(unittest.TestCase):

    def test_offspring_never_empty(self):
        xs = np.full(500, 0.4)
        parent, _ = h11_offspring(xs, 1.0, 1e-2, np.random.default_rng(1))
        self.assertTrue(np.all(np.bincount(parent, minlength=xs.size) >= 1))

    def test_mean_offspring_is_one_plus_gamma(self):
        # stationary start plus the renewal points of a cluster path: 1 + gamma on average
        for gamma in (0.5, 1.0):
            xs = np.full(4000, 0.3)
            parent, _ = h11_offspring(xs, gamma, 1e-2, np.random.default_rng(7))
            est = mean_estimate(np.bincount(parent, minlength=xs.size))
            self.assertLessEqual(abs(est.mean - (1.0 + gamma)), 4.0 * est.std_error)

    def test_never_extinct(self):
        run = run_embedded_batch("h11", [1.0, 1.0], [np.array([0.5])] * 50, np.random.default_rng(2), dt=1e-2)
        self.assertTrue(np.all(run.counts >= 1))
        self.assertEqual(run.fraction(Outcome.EXTINCT).mean, 0.0)
        frame = run.summary_frame()
        self.assertEqual(list(frame.columns), ["step", "particle_count", "extinct_fraction"])
        self.assertEqual(len(frame), 3)
        self.assertEqual(frame["particle_count"].iloc[0], 1.0)
        self.assertTrue((frame["extinct_fraction"] == 0.0).all())

    def test_single_run(self):
        self.assertGreaterEqual(run_embedded_h11([0.5], 0.3, np.random.default_rng(3), dt=1e-2), 1)
        with self.assertRaises(ParameterError):
            run_embedded_h11([0.5], 1.3, np.random.default_rng(3))


class TestH00(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.context = OffspringContext.build(CatalyzingFunction.h00(20), 1.0, 2000, 1e-2,
                                             np.random.default_rng(4), grid_m=10, sigmas=4.0)

    def test_boundary_start_is_domain_error(self):
        with self.assertRaises(DomainError):
            run_embedded_h00([1.0], 0.0, np.random.default_rng(0), {1.0: self.context})

    def test_acceptance_is_probability(self):
        a = self.context.acceptance(np.array([0.1, 0.5, 0.9]))
        self.assertTrue(np.all((a >= 0) & (a <= 1)))

    @pytest.mark.slow
    def test_offspring_mean_is_one(self):
        est = offspring_mean(self.context, 0.5, 2000, 1e-2, np.random.default_rng(5))
        self.assertLessEqual(abs(est.mean - 1.0), 4.0 * est.std_error + 0.05)

    def test_missing_context_rejected(self):
        with self.assertRaises(ParameterError):
            run_embedded_batch("h00", [0.5], [np.array([0.5])], np.random.default_rng(0), {1.0: self.context})

    def test_not_superharmonic_rejected(self):
        est = self.context.u_h
        inflated = replace(est, value=est.value + 1.0)
        with self.assertRaises(ParameterError):
            OffspringContext.from_estimate(CatalyzingFunction.h00(20), 1.0, inflated)

    def test_poissonization_commutes_with_one_step(self):
        direct, embedded = poissonization_counts(self.context, 0.5, 8.0, 600, 1e-2, np.random.default_rng(8))
        self.assertEqual(direct.shape, embedded.shape)
        self.assertTrue(count_law_test(direct, embedded).passed)
        a, b = mean_estimate(direct), mean_estimate(embedded)
        self.assertLessEqual(abs(a.mean - b.mean), 4.0 * np.hypot(a.std_error, b.std_error))

    def test_poissonization_needs_positive_h(self):
        with self.assertRaises(DomainError):
            poissonization_counts(self.context, 0.0, 1.0, 5, 1e-2, np.random.default_rng(0))


class TestHelpers(unittest.TestCase):

    def test_catalyzing_for(self):
        self.assertEqual(catalyzing_for("h01", 10).boundary_class, (0, 1))
        with self.assertRaises(ParameterError):
            catalyzing_for("h22")

    def test_predicted_survival(self):
        p = CatalyzingFunction.h1(10)
        pred = predicted_survival_h01(p, 0.5)
        self.assertAlmostEqual(pred["rho"], 0.5 / (1.0 - 0.5 ** 7))
        self.assertAlmostEqual(pred["lower_bound"], pred["rho"])
        self.assertAlmostEqual(pred["mass_survival"], 1.0 - np.exp(-0.5))

    def test_weighted_mass_measure_mode(self):
        report = weighted_mass_statistics([1.0], 0.5, "h11", np.random.default_rng(6), 100, mode="measure",
                                          dt=1e-2, bin_grid=10)
        self.assertEqual(report.samples.size, 100)
        self.assertEqual(int(report.histogram(bins=5)["count"].sum()), 100)

    def test_unknown_mode(self):
        with self.assertRaises(ParameterError):
            weighted_mass_statistics([1.0], 0.5, "h11", np.random.default_rng(0), 10, mode="other")


if __name__ == '__main__':
    unittest.main()
