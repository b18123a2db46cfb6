import unittest
from dataclasses import replace

import numpy as np

from src.features.catalyzing_function import CatalyzingFunction
from src.models.renorm import (CatalyticDiffusionMatrix, EffectiveBoundary, F_c, MigrationSchedule,
                               MonteCarloConfig, StationaryPairSample, alpha_recursion, effective_boundary,
                               estimate_nu_moments, iterate_renorm, iterated_kernel_sample, rescaled_F,
                               sample_stationary_pairs, schedule_from_ck)
from src.utils.error_handler import ParameterError

SMALL_MC = MonteCarloConfig(replicas=2000, dt=1e-3, nu_replicas=50, averaging_time=10.0, burn_in_multiple=5.0)


class TestSchedules(unittest.TestCase):

    def test_geometric_schedule_has_constant_gamma(self):
        schedule = MigrationSchedule.geometric(1.0, 10)
        np.testing.assert_allclose(schedule.gammas, 1.0)
        self.assertAlmostEqual(schedule.gamma_limit(), 1.0)

    def test_constant_schedule_gives_harmonic_gammas(self):
        schedule = MigrationSchedule.constant(20)
        np.testing.assert_allclose(schedule.gammas, 1.0 / (np.arange(20) + 1.0))
        self.assertTrue(schedule.gamma_sum_diverges())

    def test_alpha_recursion_matches_s_bar(self):
        c = np.array([1.0, 0.5, 0.25, 2.0])
        schedule = schedule_from_ck(c, beta=1.0)
        alphas = alpha_recursion(1.0, c)
        np.testing.assert_allclose(schedule.s_bar * alphas, 1.0)

    def test_nonpositive_constants_rejected(self):
        with self.assertRaises(ParameterError):
            schedule_from_ck([1.0, 0.0], 1.0)
        with self.assertRaises(ParameterError):
            MigrationSchedule(np.ones(3), 0.0)


class TestDiffusionMatrix(unittest.TestCase):

    def test_diagonal_entries(self):
        w = CatalyticDiffusionMatrix(2.0, CatalyzingFunction.h1(10))
        w11, w22 = w.diagonal(0.5, 0.5)
        self.assertAlmostEqual(float(w11), 0.5)
        self.assertAlmostEqual(float(w22), 0.125)
        np.testing.assert_allclose(w.matrix([0.5, 0.5]), np.diag([0.5, 0.125]))

    def test_effective_boundary(self):
        m = 10
        cases = {
            "h11": EffectiveBoundary.CORNERS,
            "h00": EffectiveBoundary.VERTICAL_EDGES,
            "h1": EffectiveBoundary.LEFT_EDGE_AND_CORNERS,
        }
        for name, expected in cases.items():
            p = getattr(CatalyzingFunction, name)(m)
            self.assertIs(effective_boundary(CatalyticDiffusionMatrix(1.0, p)), expected)
        right = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.from_expression("1 - x", m))
        self.assertIs(effective_boundary(right), EffectiveBoundary.RIGHT_EDGE_AND_CORNERS)
        self.assertTrue(EffectiveBoundary.LEFT_EDGE_AND_CORNERS.contains(0.0, 0.3))
        self.assertFalse(EffectiveBoundary.CORNERS.contains(0.0, 0.3))

    def test_alpha_must_be_positive(self):
        with self.assertRaises(ParameterError):
            CatalyticDiffusionMatrix(0.0, CatalyzingFunction.h1(4))


class TestTransformations(unittest.TestCase):

    def test_F_c_on_constant_reactant(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.constant(1.0, 4))
        out = F_c(w, 1.0, SMALL_MC, np.random.default_rng(1))
        self.assertAlmostEqual(out.alpha, 0.5)
        # 1/2 * U_1(1) = 1/2
        np.testing.assert_allclose(out.p.values, 0.5, atol=4.0 * out.p_std_error.max() + 1e-12)

    def test_scaling_ladder(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.constant(1.0, 4))
        direct = F_c(w, 1.0, SMALL_MC, np.random.default_rng(2))
        rescaled = rescaled_F(1.0, w, SMALL_MC, np.random.default_rng(2))
        np.testing.assert_allclose(rescaled.scaled(direct.alpha).p.values, direct.p.values, atol=1e-12)

    def test_rescaled_F_needs_unit_alpha(self):
        w = CatalyticDiffusionMatrix(2.0, CatalyzingFunction.h1(4))
        with self.assertRaises(ParameterError):
            rescaled_F(1.0, w, SMALL_MC, np.random.default_rng(0))

    def test_iterate_renorm_stages(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(4))
        it = iterate_renorm(w, MigrationSchedule.geometric(1.0, 3), 3, SMALL_MC, np.random.default_rng(3))
        self.assertEqual(len(it.rescaled), 4)
        self.assertEqual(len(it.sup_increments()), 3)
        self.assertAlmostEqual(it.unscaled(2).alpha, 1.0 / it.schedule.s_bar[2])

    def test_iterate_renorm_replaces_beta(self):
        w = CatalyticDiffusionMatrix(2.0, CatalyzingFunction.h1(4))
        it = iterate_renorm(w, MigrationSchedule.constant(2), 1, SMALL_MC, np.random.default_rng(4))
        self.assertAlmostEqual(it.schedule.beta, 0.5)

    def test_too_many_iterations(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(4))
        with self.assertRaises(ParameterError):
            iterate_renorm(w, MigrationSchedule.constant(2), 3, SMALL_MC, np.random.default_rng(0))


class TestStationaryLaw(unittest.TestCase):

    def test_catalyst_variance(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(20))
        mc = replace(SMALL_MC, nu_replicas=200)
        nu = estimate_nu_moments(1.0, w, [0.5, 0.5], mc, np.random.default_rng(5))
        # F_1 w^{1,p} has catalyst entry x(1-x)/2
        self.assertAlmostEqual(nu.covariance[0, 0], 0.125, delta=0.02)
        self.assertEqual(nu.covariance.shape, (2, 2))
        self.assertLess(np.max(np.abs(nu.mean_offset)), 0.05)

    def test_kernel_sample_depth_zero_is_identity(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(4))
        y = iterated_kernel_sample(w, MigrationSchedule.constant(1), 0, [0.3, 0.6], np.random.default_rng(0),
                                   n_samples=5)
        np.testing.assert_array_equal(y, np.tile([0.3, 0.6], (5, 1)))

    def test_kernel_samples_in_unit_square(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(4))
        y = iterated_kernel_sample(w, MigrationSchedule.constant(2), 2, [0.5, 0.5], np.random.default_rng(6),
                                   mc=SMALL_MC, n_samples=20)
        self.assertEqual(y.shape, (20, 2))
        self.assertTrue(np.all((y >= 0) & (y <= 1)))

    def test_stationary_pairs(self):
        w = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.h1(20))
        pairs = sample_stationary_pairs(1.0, w, np.tile([0.3, 0.6], (2000, 1)), 1e-3, 1.0, np.random.default_rng(8))
        self.assertIsInstance(pairs, StationaryPairSample)
        self.assertEqual(len(pairs), 2000)
        self.assertEqual(pairs.as_array().shape, (2000, 2))
        # catalyst mean is preserved by the migration drift
        self.assertAlmostEqual(float(pairs.y1.mean()), 0.3, delta=0.03)
        self.assertTrue(np.all((pairs.as_array() >= 0) & (pairs.as_array() <= 1)))

    def test_stationary_pairs_stay_in_unit_square(self):
        with self.assertRaises(ParameterError):
            StationaryPairSample(np.array([0.2, 1.2]), np.array([0.5, 0.5]))
        with self.assertRaises(ParameterError):
            StationaryPairSample(np.array([0.2]), np.array([0.5, 0.5]))


if __name__ == '__main__':
    unittest.main()
