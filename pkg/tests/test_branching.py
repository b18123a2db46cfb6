import unittest

import numpy as np

from src.features.catalyzing_function import CatalyzingFunction
from src.models.branching import (AtomicMeasure, ParticleConfiguration, laplace_functional, poissonize,
                                  run_renorm_branching, run_renorm_branching_batch, step_poisson_cluster,
                                  step_poisson_cluster_batch, thin, weighting_identity)
from src.utils.error_handler import CeilingExceededError, ParameterError
from src.utils.statistics import mean_estimate


class TestAtomicMeasure(unittest.TestCase):

    def test_validation(self):
        with self.assertRaises(ParameterError):
            AtomicMeasure(np.array([0.5]), np.array([0.0]))
        with self.assertRaises(ParameterError):
            AtomicMeasure(np.array([1.5]), np.array([1.0]))
        with self.assertRaises(ParameterError):
            AtomicMeasure(np.array([0.1, 0.2]), np.array([1.0]))

    def test_integrate_and_mass(self):
        X = AtomicMeasure(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0]))
        self.assertEqual(X.total_mass, 6.0)
        self.assertAlmostEqual(X.integrate(lambda x: x), 4.0)
        self.assertEqual(AtomicMeasure.empty().integrate(lambda x: x), 0.0)

    def test_from_grid_mass_drops_empty_nodes(self):
        X = AtomicMeasure.from_grid_mass(4, np.array([0.0, 1.0, 0.0, 2.0, 0.0]))
        np.testing.assert_allclose(X.positions, [0.25, 0.75])


class TestClusterStep(unittest.TestCase):

    def test_mean_mass_is_one_plus_gamma(self):
        gamma = 1.0
        out = step_poisson_cluster_batch([AtomicMeasure.dirac(0.5)] * 2000, gamma, 1e-2,
                                         np.random.default_rng(3), bin_grid=20)
        est = mean_estimate([X.total_mass for X in out])
        self.assertLessEqual(abs(est.mean - (1.0 + gamma)), 4.0 * est.std_error)

    def test_binned_and_raw_atoms_carry_same_mass(self):
        raw = step_poisson_cluster(AtomicMeasure.dirac(0.3, 2.0), 0.5, 1e-2, np.random.default_rng(8))
        binned = step_poisson_cluster(AtomicMeasure.dirac(0.3, 2.0), 0.5, 1e-2, np.random.default_rng(8),
                                      bin_grid=10)
        self.assertAlmostEqual(raw.total_mass, binned.total_mass)

    def test_empty_measure_stays_empty(self):
        out = step_poisson_cluster(AtomicMeasure.empty(), 1.0, 1e-2, np.random.default_rng(0))
        self.assertEqual(len(out), 0)

    def test_cluster_ceiling(self):
        with self.assertRaises(CeilingExceededError) as ctx:
            step_poisson_cluster(AtomicMeasure.dirac(0.5, 100.0), 1.0, 1e-2, np.random.default_rng(0),
                                 max_clusters=5)
        self.assertEqual(ctx.exception.diagnostics["ceiling"], 5)

    def test_gamma_must_be_positive(self):
        with self.assertRaises(ParameterError):
            step_poisson_cluster(AtomicMeasure.dirac(0.5), 0.0, 1e-2, np.random.default_rng(0))


class TestRenormBranching(unittest.TestCase):

    def test_trajectory_length(self):
        traj = run_renorm_branching([1.0, 0.5, 0.5], AtomicMeasure.dirac(0.5), np.random.default_rng(2), dt=1e-2,
                                    bin_grid=10)
        self.assertEqual(len(traj), 4)
        self.assertEqual(traj[0].total_mass, 1.0)

    def test_mass_ceiling(self):
        with self.assertRaises(CeilingExceededError):
            run_renorm_branching_batch([1.0] * 5, AtomicMeasure.dirac(0.5, 50.0), 2, np.random.default_rng(0),
                                       dt=1e-2, mass_ceiling=1.0)

    def test_laplace_functional(self):
        X = AtomicMeasure(np.array([0.2, 0.8]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(laplace_functional([X, AtomicMeasure.empty()], lambda x: x), [np.exp(-1.0), 1.0])


class TestPoissonization(unittest.TestCase):

    def test_mean_count_is_weighted_mass(self):
        X = AtomicMeasure(np.array([0.25, 0.5]), np.array([2.0, 4.0]))
        rng = np.random.default_rng(12)
        counts = [poissonize(X, lambda x: x * (1 - x), rng).count for _ in range(4000)]
        est = mean_estimate(counts)
        self.assertLessEqual(abs(est.mean - X.integrate(lambda x: x * (1 - x))), 4.0 * est.std_error)

    def test_vanishing_h_gives_no_particles(self):
        X = AtomicMeasure(np.array([0.0, 1.0]), np.array([3.0, 3.0]))
        self.assertEqual(poissonize(X, lambda x: x * (1 - x), np.random.default_rng(0)).count, 0)

    def test_negative_h_rejected(self):
        with self.assertRaises(ParameterError):
            poissonize(AtomicMeasure.dirac(0.5), lambda x: x - 1.0, np.random.default_rng(0))

    def test_thin(self):
        config = ParticleConfiguration(np.array([0.0, 0.5, 1.0]))
        kept = thin(config, lambda x: (x > 0.25).astype(float), np.random.default_rng(0))
        np.testing.assert_array_equal(kept.positions, [0.5, 1.0])
        self.assertEqual(config.weighted_mass(lambda x: x), 1.5)


class TestWeighting(unittest.TestCase):

    def test_weighted_measure(self):
        X = AtomicMeasure(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0]))
        hX = X.weighted(lambda x: x * (1 - x))
        np.testing.assert_allclose(hX.positions, [0.5])
        np.testing.assert_allclose(hX.weights, [0.5])
        self.assertAlmostEqual(hX.integrate(lambda x: x), X.integrate(lambda x: x * x * (1 - x)))

    def test_laplace_functional_of_weighted_step(self):
        check = weighting_identity(0.5, 1.0, 1.0, CatalyzingFunction.h00(20), lambda y: y, 1000, 1e-2,
                                   np.random.default_rng(21), u_replicas=5000)
        self.assertTrue(0.0 < check.predicted < 1.0)
        self.assertTrue(check.agrees(4.0), f"z = {check.z:.2f}")


if __name__ == '__main__':
    unittest.main()
