import unittest

import numpy as np
from scipy import stats

from src.features.catalyzing_function import CatalyzingFunction
from src.models.campbell import (ImmortalChainState, immortal_chain_path, immortal_chain_step, return_fraction,
                                 simulate_campbell_batch, simulate_campbell_tree, size_biased_law, size_biased_mean,
                                 size_biased_resample)
from src.models.embedded import OffspringContext, run_embedded_batch
from src.utils.error_handler import ParameterError
from src.utils.statistics import count_law_test, ks_two_sample, mean_estimate


class TestImmortalChain(unittest.TestCase):

    def test_heterozygosity_moment(self):
        # (x(1-x) + g(1+g)) / ((1+2g)(1+3g)) at x = 1/2, g = 1
        y = immortal_chain_step(np.full(20000, 0.5), 1.0, np.random.default_rng(1))
        est = mean_estimate(y * (1.0 - y))
        self.assertLessEqual(abs(est.mean - 0.1875), 4.0 * est.std_error)

    def test_scalar_in_scalar_out(self):
        y = immortal_chain_step(0.3, 0.5, np.random.default_rng(2))
        self.assertIsInstance(y, float)
        self.assertTrue(0.0 < y < 1.0)

    def test_path(self):
        path = immortal_chain_path(0.4, 1.0, 10, np.random.default_rng(3))
        self.assertEqual(path.shape, (11,))
        self.assertEqual(path[0], 0.4)
        self.assertTrue(np.all((path > 0) & (path < 1)))

    def test_boundary_rejected(self):
        with self.assertRaises(ParameterError):
            ImmortalChainState(0.0)
        with self.assertRaises(ParameterError):
            immortal_chain_step(0.5, 0.0, np.random.default_rng(0))

    def test_transition_law_is_beta(self):
        # y(1-y) times the Beta(v/g, (1-v)/g) density is the Beta(v/g + 1, (1-v)/g + 1) density
        v, g = 0.3, 0.5
        y = immortal_chain_step(np.full(5000, v), g, np.random.default_rng(11))
        result = stats.kstest(y, stats.beta(v / g + 1.0, (1.0 - v) / g + 1.0).cdf)
        self.assertGreater(result.pvalue, 0.01)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(12)
        left = immortal_chain_step(np.full(5000, 0.3), 1.0, rng)
        right = immortal_chain_step(np.full(5000, 0.7), 1.0, rng)
        self.assertTrue(ks_two_sample(left, 1.0 - right).passed)
        self.assertFalse(ks_two_sample(left, right).passed)

    def test_returns_to_interior(self):
        fraction = return_fraction(0.01, 1.0, 500, 200, np.random.default_rng(13))
        self.assertGreater(fraction, 0.95)


class TestSizeBiasing(unittest.TestCase):

    def test_law(self):
        law = size_biased_law(np.array([0, 1, 1, 2]))
        self.assertEqual(law, {1: 0.5, 2: 0.5})

    def test_mean(self):
        est = size_biased_mean(np.array([1, 1, 2, 4]))
        self.assertAlmostEqual(est.mean, 22.0 / 8.0)

    def test_all_zero_counts(self):
        self.assertTrue(np.isnan(size_biased_mean(np.zeros(5)).mean))

    def test_resample_weights_by_count(self):
        draws = size_biased_resample(np.array([0, 1, 3]), 20000, np.random.default_rng(14))
        self.assertNotIn(0, draws)
        self.assertAlmostEqual(float(np.mean(draws == 3)), 0.75, delta=0.02)

    def test_resample_needs_survivors(self):
        with self.assertRaises(ParameterError):
            size_biased_resample(np.zeros(4, dtype=int), 5, np.random.default_rng(0))


class TestCampbellTree(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.context = OffspringContext.build(CatalyzingFunction.h00(20), 1.0, 500, 1e-2,
                                             np.random.default_rng(4), grid_m=10, sigmas=4.0)

    def test_spine_is_always_present(self):
        samples = simulate_campbell_batch(2, 0.5, 1.0, self.context, 20, np.random.default_rng(5), dt=1e-2)
        self.assertEqual(len(samples), 20)
        for s in samples:
            self.assertEqual(s.spine.shape, (3,))
            self.assertGreaterEqual(s.count, 1)
            self.assertEqual(s.configuration.positions[0], s.spine[-1])

    def test_depth_zero_is_the_start(self):
        config = simulate_campbell_tree(0, 0.3, 1.0, np.random.default_rng(6), self.context)
        np.testing.assert_array_equal(config.positions, [0.3])

    def test_spine_first_step_matches_immortal_chain(self):
        samples = simulate_campbell_batch(1, 0.4, 1.0, self.context, 400, np.random.default_rng(15), dt=1e-2)
        direct = immortal_chain_step(np.full(400, 0.4), 1.0, np.random.default_rng(16))
        self.assertTrue(ks_two_sample([s.spine[1] for s in samples], direct).passed)

    def test_count_law_is_size_biased_forward_law(self):
        samples = simulate_campbell_batch(1, 0.5, 1.0, self.context, 400, np.random.default_rng(17), dt=1e-2)
        forward = run_embedded_batch("h00", [1.0], [np.array([0.5])] * 1600, np.random.default_rng(18),
                                     {1.0: self.context}, dt=1e-2)
        resampled = size_biased_resample(forward.counts, 400, np.random.default_rng(19))
        self.assertTrue(count_law_test([s.count for s in samples], resampled).passed)

    def test_context_must_match_gamma(self):
        with self.assertRaises(ParameterError):
            simulate_campbell_batch(1, 0.5, 2.0, self.context, 2, np.random.default_rng(0))

    def test_depth_limit(self):
        with self.assertRaises(ParameterError):
            simulate_campbell_batch(6, 0.5, 1.0, self.context, 2, np.random.default_rng(0))


if __name__ == '__main__':
    unittest.main()
