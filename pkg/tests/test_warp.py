import math
import unittest

import numpy as np

from src.warp import InvalidWarpError, warp_model


class TestWarpModel(unittest.TestCase):
    def test_builtin_selections(self):
        for selection, fpp0 in (
            ("cos", -1.0),
            ("gaussian", -1.0),
            ("sech", -1.0),
            ("quadratic:1/2", -0.5),
            ("expr:cos(2*t)", -4.0),
        ):
            model = warp_model(selection, 2)
            self.assertEqual(model.selection, selection)
            self.assertEqual(model.n, 2)
            self.assertAlmostEqual(model.f0, 1.0)
            self.assertAlmostEqual(model.fpp0, fpp0)

    def test_scaled_derivatives(self):
        model = warp_model("cos", 1)
        t = np.array([0.0, 0.1, 0.4])
        np.testing.assert_allclose(model.f_lambda(t, 2.0), np.cos(2.0 * t))
        np.testing.assert_allclose(model.df_lambda(t, 2.0), -2.0 * np.sin(2.0 * t))
        np.testing.assert_allclose(model.d2f_lambda(t, 2.0), -4.0 * np.cos(2.0 * t))

    def test_kernels_keep_the_input_shape(self):
        model = warp_model("quadratic:2", 1)
        t = np.zeros((3, 4))
        self.assertEqual(model.d2f_lambda(t, 1.0).shape, (3, 4))
        np.testing.assert_allclose(model.d2f_lambda(t, 1.0), -2.0)

    def test_gaussian_values(self):
        model = warp_model("gaussian", 1)
        self.assertAlmostEqual(float(model.f_lambda(np.array(1.0), 1.0)), math.exp(-0.5))

    def test_rejected_selections(self):
        for selection in (
            "unknown",
            "expr:sin(t) + 1",
            "expr:1 + t**2",
            "expr:cos(x*t)",
            "expr:-1 - t**2",
            "expr:(",
            "expr:1",
        ):
            with self.assertRaises(InvalidWarpError, msg=selection):
                warp_model(selection, 1)

    def test_dimension(self):
        with self.assertRaises(InvalidWarpError):
            warp_model("cos", 0)
