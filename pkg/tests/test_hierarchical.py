import unittest

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.features.catalyzing_function import CatalyzingFunction
from src.models.hierarchical import (HierarchicalIndex, Recurrence, block_average, block_means, chain_regression,
                                     heterozygosity_decay, interaction_chain_extract, recurrence_test,
                                     simulate_hierarchical)
from src.models.renorm import CatalyticDiffusionMatrix
from src.utils.error_handler import DomainError, ParameterError
from src.utils.statistics import mean_estimate

W = CatalyticDiffusionMatrix(1.0, CatalyzingFunction.constant(1.0, 10))


class TestHierarchicalIndex(unittest.TestCase):

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=2, max_value=5), st.data())
    def test_group_and_ultrametric(self, n, data):
        k = 4
        site = st.integers(min_value=0, max_value=n ** k - 1)
        a, b, c = (HierarchicalIndex.from_site(data.draw(site), n, k) for _ in range(3))
        self.assertEqual(HierarchicalIndex.from_site(a.to_site(), n, k), a)
        self.assertEqual((a + (-a)).norm(), 0)
        self.assertEqual(a.distance(b), b.distance(a))
        self.assertLessEqual(a.distance(c), max(a.distance(b), b.distance(c)))

    def test_distance_matches_block_runs(self):
        a = HierarchicalIndex.from_site(0, 2, 3)
        self.assertEqual(a.distance(HierarchicalIndex.from_site(1, 2, 3)), 1)
        self.assertEqual(a.distance(HierarchicalIndex.from_site(3, 2, 3)), 2)
        self.assertEqual(a.distance(HierarchicalIndex.from_site(4, 2, 3)), 3)

    def test_validation(self):
        with self.assertRaises(ParameterError):
            HierarchicalIndex((0, 1), 1)
        with self.assertRaises(ParameterError):
            HierarchicalIndex((0, 3), 2)


class TestBlocks(unittest.TestCase):

    def test_block_average(self):
        state = np.arange(8, dtype=float).reshape(8, 1)
        self.assertEqual(block_average(state, 5, 1, 2)[0], 4.5)
        self.assertEqual(block_average(state, 5, 2, 2)[0], 5.5)
        self.assertEqual(block_average(state, 5, 3, 2)[0], 3.5)
        self.assertEqual(block_average(state, 5, 0, 2)[0], 5.0)
        with self.assertRaises(DomainError):
            block_average(state, 0, 4, 2)

    def test_block_means_shape(self):
        state = np.arange(9, dtype=float).reshape(9, 1)
        np.testing.assert_allclose(block_means(state, 3, 1).ravel(), np.repeat([1.0, 4.0, 7.0], 3))
        with self.assertRaises(DomainError):
            block_means(state, 2, 1)


class TestSimulation(unittest.TestCase):

    def test_noise_free_run_relaxes_to_theta(self):
        traj = simulate_hierarchical(2, 3, W, [1.0, 1.0, 1.0], [0.3, 0.6], 1.0, 1e-2, np.random.default_rng(0),
                                     record_every=10, noise=False)
        np.testing.assert_allclose(traj.states[-1], np.tile([0.3, 0.6], (8, 1)))
        self.assertEqual(traj.times[0], 0.0)
        self.assertAlmostEqual(traj.times[-1], 1.0)

    @pytest.mark.slow
    def test_heterozygosity_decay_without_migration(self):
        traj = simulate_hierarchical(2, 10, W, [0.0] * 10, [0.5, 0.5], 0.5, 1e-3, np.random.default_rng(1),
                                     record_every=50)
        x1 = traj.states[-1][:, 0]
        est = mean_estimate(x1 * (1.0 - x1))
        self.assertLessEqual(abs(est.mean - heterozygosity_decay(0.5, 1.0, 0.5)), 4.0 * est.std_error + 0.01)

    def test_interaction_chain(self):
        traj = simulate_hierarchical(2, 3, W, [1.0, 1.0, 1.0], [0.5, 0.5], 0.2, 1e-2, np.random.default_rng(2),
                                     record_every=5)
        chain = interaction_chain_extract(traj, 3, 0.2)
        self.assertEqual(chain.shape, (4, 2))
        np.testing.assert_allclose(chain[0], traj.state_at(0.2).mean(axis=0))
        np.testing.assert_allclose(chain[-1], traj.state_at(0.2)[0])
        with self.assertRaises(DomainError):
            interaction_chain_extract(traj, 4, 0.2)

    def test_invalid_inputs(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ParameterError):
            simulate_hierarchical(1, 3, W, [1.0], [0.5, 0.5], 1.0, 1e-2, rng)
        with self.assertRaises(ParameterError):
            simulate_hierarchical(2, 3, W, [1.0], [0.0, 0.5], 1.0, 1e-2, rng)
        with self.assertRaises(ParameterError):
            simulate_hierarchical(2, 3, W, [200.0], [0.5, 0.5], 1.0, 1e-2, rng)

    def test_migration_conserves_site_sum(self):
        start = np.random.default_rng(5).uniform(0.05, 0.95, size=(8, 2))
        traj = simulate_hierarchical(2, 3, W, [1.0, 2.0, 0.5], [0.5, 0.5], 2.0, 1e-2, np.random.default_rng(6),
                                     record_every=10, noise=False, initial_state=start)
        np.testing.assert_allclose(traj.states.sum(axis=1), np.broadcast_to(start.sum(axis=0), (traj.times.size, 2)),
                                   rtol=0, atol=1e-10)
        self.assertGreater(np.abs(traj.states[-1] - start).max(), 0.05)

    def test_initial_state_is_validated(self):
        with self.assertRaises(ParameterError):
            simulate_hierarchical(2, 3, W, [1.0], [0.5, 0.5], 1.0, 1e-2, np.random.default_rng(0),
                                  initial_state=np.full((4, 2), 0.5))
        with self.assertRaises(ParameterError):
            simulate_hierarchical(2, 3, W, [1.0], [0.5, 0.5], 1.0, 1e-2, np.random.default_rng(0),
                                  initial_state=np.full((8, 2), 1.5))

    def test_chain_regression_slope_is_one(self):
        chains = []
        for i in range(150):
            traj = simulate_hierarchical(2, 4, W, [1.0] * 4, [0.5, 0.5], 1.0, 1e-2, np.random.default_rng(100 + i),
                                         record_every=1000)
            chains.append(interaction_chain_extract(traj, 4, 1.0))
        fit = chain_regression(chains)
        self.assertEqual(fit.pairs, 150 * 4)
        self.assertTrue(fit.consistent_with_martingale(4.0, slack=0.05), f"slope {fit.slope:.3f} +- {fit.std_error:.3f}")

    def test_chain_regression_needs_spread(self):
        with self.assertRaises(DomainError):
            chain_regression([np.full((3, 2), 0.5)] * 4)


class TestRecurrence(unittest.TestCase):

    def test_closed_form(self):
        self.assertIs(recurrence_test(None, 3, r=1.0).verdict, Recurrence.RECURRENT)
        self.assertIs(recurrence_test(None, 3, r=0.5).verdict, Recurrence.RECURRENT)
        self.assertIs(recurrence_test(None, 3, r=2.0).verdict, Recurrence.TRANSIENT)

    def test_numeric_agrees_with_closed_form(self):
        for r in (0.5, 1.0, 2.0):
            numeric = recurrence_test(lambda k, r=r: r ** k, 3)
            self.assertIs(numeric.verdict, recurrence_test(None, 3, r=r).verdict, msg=f"r={r}")
            self.assertEqual(numeric.method, "numeric")

    def test_divergent_migration_rejected(self):
        with self.assertRaises(ParameterError):
            recurrence_test(None, 3, r=3.0)
        with self.assertRaises(ParameterError):
            recurrence_test(lambda k: 3.0 ** k, 3)


if __name__ == '__main__':
    unittest.main()
