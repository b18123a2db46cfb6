import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from src.features.catalyzing_function import CatalyzingFunction, uniform_grid
from src.utils.error_handler import ParameterError


class TestCatalyzingFunction(unittest.TestCase):

    def test_boundary_classes(self):
        self.assertEqual(CatalyzingFunction.h11(10).boundary_class, (1, 1))
        self.assertEqual(CatalyzingFunction.h00(10).boundary_class, (0, 0))
        self.assertEqual(CatalyzingFunction.h01(10).boundary_class, (0, 1))
        self.assertEqual(CatalyzingFunction.from_expression("1 - x", 10).boundary_class, (1, 0))

    def test_expression_matches_callable(self):
        p = CatalyzingFunction.from_expression("1 - (1 - x)**3", 20)
        np.testing.assert_allclose(p.values, CatalyzingFunction.hm(3, 20).values)

    def test_unknown_symbol_rejected(self):
        with self.assertRaises(ParameterError):
            CatalyzingFunction.from_expression("x + y", 10)

    def test_negative_values_rejected(self):
        with self.assertRaises(ParameterError):
            CatalyzingFunction.from_expression("x - 0.5", 10)

    def test_non_uniform_grid_rejected(self):
        with self.assertRaises(ParameterError):
            CatalyzingFunction(np.array([0.0, 0.2, 1.0]), np.ones(3))

    def test_shape_diagnostics(self):
        h7 = CatalyzingFunction.hm(7, 50)
        self.assertTrue(h7.is_nondecreasing())
        self.assertTrue(h7.is_concave(1e-12))
        self.assertFalse(CatalyzingFunction.h00(50).is_nondecreasing())
        self.assertAlmostEqual(CatalyzingFunction.h1(50).lipschitz_constant(), 1.0)

    def test_csv_round_trip_keeps_columns(self):
        p = CatalyzingFunction.h00(8)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "p.csv")
            p.to_csv(path)
            q = CatalyzingFunction.from_csv(path)
        self.assertEqual(q.sup_distance(p), 0.0)

    def test_sup_distance_across_grids(self):
        a = CatalyzingFunction.h1(10)
        b = CatalyzingFunction.h1(40)
        self.assertAlmostEqual(a.sup_distance(b), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=200), st.floats(min_value=0.0, max_value=1.0))
    def test_linear_interpolation_is_exact_for_linear_functions(self, m, x):
        p = CatalyzingFunction.from_callable(lambda g: 2.0 * g + 1.0, m)
        self.assertAlmostEqual(float(p(x)), 2.0 * x + 1.0, places=9)
        self.assertEqual(uniform_grid(m).size, m + 1)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0.01, max_value=10.0))
    def test_scaling_is_linear(self, r):
        p = CatalyzingFunction.hm(3, 20)
        np.testing.assert_allclose(p.scaled(r).values, r * p.values)


if __name__ == '__main__':
    unittest.main()
