import math
import os
import unittest

import numpy as np

from src.branch import (
    FrequencySample,
    IllConditionedFitError,
    NonVanishingTraceError,
    NotConeFieldError,
    RadiusOutOfRangeError,
    TilingMismatchError,
    TrivialFieldError,
    TwoValuedField,
    extend_two_valued,
    face_gradient_jump,
    frequency,
    frequency_drop,
    leading_coefficient_fit,
    odd_cycle_signs,
    regular_grid,
    sample_sheets,
)
from src.discretize import hemisphere, mesh_cone, mesh_spherical_polytope, refine, tetra_face
from src.harmonic import VolumeField
from src.mse import edge_polar, eigen_boundary_data, solve_mse
from src.spectral import dirichlet_eigs, indicial_exponents
from src.tiling import build_simplex_tiling, build_tiling

_slow = os.environ.get("BRANCHLAB_SLOW") == "1"


class TestHemisphereExtension(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        p = hemisphere()
        cls.cone = mesh_cone(p, 0.3)
        cls.tiling = build_tiling(p, strict=False)
        z = VolumeField(mesh=cls.cone, values=cls.cone.nodes[:, 2].copy(), origin="test")
        cls.field = extend_two_valued(z, cls.tiling)

    def test_odd_reflection_of_height_is_height(self):
        points = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, -0.3], [-0.4, 0.1, -0.5]])
        values, on_branch = self.field.evaluate(points)
        np.testing.assert_allclose(values, points[:, 2], atol=1e-12)
        self.assertFalse(on_branch.any())
        np.testing.assert_allclose(self.field.gradient(points), np.tile([0.0, 0.0, 1.0], (3, 1)), atol=1e-12)

    def test_origin_is_on_the_branch_locus(self):
        values, on_branch = self.field.evaluate(np.zeros(3))
        self.assertTrue(on_branch[0])
        self.assertEqual(values[0], 0.0)

    def test_frequency_of_linear_field(self):
        radii = [0.3, 0.5, 0.7]
        sample = frequency(self.field, np.zeros(3), radii)
        np.testing.assert_allclose(sample.values, 1.0, atol=0.05)
        # ∫_{B_r} |∇z|² = 4πr³/3
        np.testing.assert_allclose(sample.dirichlet, 4.0 * math.pi * np.array(radii) ** 3 / 3.0, rtol=0.05)
        threaded = frequency(self.field, np.zeros(3), radii, workers=2)
        np.testing.assert_allclose(threaded.values, sample.values)

    def test_frequency_errors(self):
        with self.assertRaises(RadiusOutOfRangeError):
            frequency(self.field, np.zeros(3), [1.2])
        with self.assertRaises(RadiusOutOfRangeError):
            frequency(self.field, np.array([0.5, 0.0, 0.0]), [0.6])
        zero = VolumeField(mesh=self.cone, values=np.zeros(self.cone.n_nodes), origin="test")
        with self.assertRaises(TrivialFieldError):
            frequency(TwoValuedField(zero, self.tiling), np.zeros(3), [0.5])

    def test_frequency_of_growing_field(self):
        # ũ = z(1 + r²) has N(r) = (1 + 3r²) / (1 + r²) about the origin
        cone = mesh_cone(hemisphere(), 0.15)
        r2 = np.sum(cone.nodes**2, axis=1)
        u = VolumeField(mesh=cone, values=cone.nodes[:, 2] * (1.0 + r2), origin="test")
        radii = np.array([0.4, 0.6, 0.9])
        sample = frequency(TwoValuedField(u, self.tiling), np.zeros(3), radii)
        np.testing.assert_allclose(sample.values, (1.0 + 3.0 * radii**2) / (1.0 + radii**2), rtol=0.05)
        self.assertEqual(frequency_drop(sample), 0.0)

    def test_face_gradient_jump_vanishes(self):
        self.assertLess(face_gradient_jump(self.field), 1e-12)

    def test_negated(self):
        points = np.array([[0.1, 0.2, 0.3]])
        values, _ = self.field.negated().evaluate(points)
        np.testing.assert_allclose(values, [-0.3], atol=1e-12)

    def test_extension_errors(self):
        x = VolumeField(mesh=self.cone, values=self.cone.nodes[:, 0].copy(), origin="test")
        with self.assertRaises(NonVanishingTraceError):
            extend_two_valued(x, self.tiling)
        z = VolumeField(mesh=self.cone, values=self.cone.nodes[:, 2].copy(), origin="test")
        with self.assertRaises(TilingMismatchError):
            extend_two_valued(z, build_simplex_tiling(3))
        surface = mesh_spherical_polytope(hemisphere(), 0.3)
        flat = VolumeField(mesh=surface, values=np.zeros(surface.n_nodes), origin="test")
        with self.assertRaises(NotConeFieldError):
            extend_two_valued(flat, self.tiling)


class TestTetrahedralExtension(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.p = tetra_face()
        cls.tiling = build_simplex_tiling(3)
        cls.cone = mesh_cone(cls.p, 0.3)
        normals = cls.p.facet_normals()
        values = np.prod(cls.cone.nodes @ normals.T, axis=1)
        cls.base = VolumeField(mesh=cls.cone, values=values, origin="test")
        cls.field = extend_two_valued(cls.base, cls.tiling)

    def test_odd_skeleton_is_branch_locus(self):
        points = 0.5 * self.tiling.vertices
        values, on_branch = self.field.evaluate(points)
        self.assertTrue(on_branch.all())
        np.testing.assert_array_equal(values, 0.0)

    def test_transported_values(self):
        interior = self.tiling.cells[0].interior
        base_values, _ = self.field.evaluate(0.5 * interior[None, :])
        for j in range(1, len(self.tiling.cells)):
            g = self.tiling.transport(j)
            values, on_branch = self.field.evaluate(0.5 * self.tiling.cells[j].interior[None, :])
            self.assertFalse(on_branch[0])
            self.assertAlmostEqual(values[0], g.parity * base_values[0], places=12)

    def test_sheets(self):
        points = regular_grid(5, 1.0)
        self.assertEqual(len(points), 27)
        sheets = sample_sheets(self.field, points)
        np.testing.assert_array_equal(sheets.lower, -sheets.upper)
        self.assertTrue(sheets.on_branch[np.flatnonzero(np.all(points == 0.0, axis=1))].all())

    def test_cycle_signs(self):
        signs = odd_cycle_signs(self.tiling)
        self.assertEqual(len(signs), 4)
        self.assertTrue(all(sign == -1 for _, sign in signs))


class TestLeadingCoefficient(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        p = tetra_face()
        cls.cone = mesh_cone(p, 0.15)
        cls.tiling = build_simplex_tiling(3)

    def test_exact_power_law(self):
        rho, theta, _, _ = edge_polar(self.cone, 0)
        values = 2.0 * rho**1.5 * np.sin(1.5 * theta)
        f = TwoValuedField(VolumeField(mesh=self.cone, values=values, origin="test"), self.tiling)
        fit = leading_coefficient_fit(f, 0, window=(0.05, 0.3), n_stations=3)
        self.assertEqual(fit.ray, 0)
        self.assertAlmostEqual(fit.exponent, 1.5, places=8)
        np.testing.assert_allclose(fit.coefficients, 2.0, rtol=1e-8)
        self.assertAlmostEqual(fit.correlation, 1.0, places=10)
        self.assertGreaterEqual(fit.samples, 5)

    def test_empty_window(self):
        values = np.zeros(self.cone.n_nodes)
        f = TwoValuedField(VolumeField(mesh=self.cone, values=values, origin="test"), self.tiling)
        with self.assertRaises(IllConditionedFitError):
            leading_coefficient_fit(f, 0, window=(0.05, 0.3), n_stations=3)


class TestFrequencyDrop(unittest.TestCase):
    def _sample(self, radii, values):
        zeros = np.zeros(len(radii))
        return FrequencySample(
            center=np.zeros(3),
            radii=np.array(radii),
            values=np.array(values),
            dirichlet=zeros,
            height=zeros + 1.0,
        )

    def test_nondecreasing(self):
        self.assertEqual(frequency_drop(self._sample([0.1, 0.2, 0.3], [1.0, 1.0, 1.5])), 0.0)
        self.assertEqual(frequency_drop(self._sample([0.1], [1.0])), 0.0)

    def test_worst_step(self):
        sample = self._sample([0.1, 0.2, 0.3, 0.4], [1.0, 1.2, 1.15, 1.3])
        self.assertAlmostEqual(frequency_drop(sample), 0.05)

    def test_radii_are_sorted_first(self):
        sample = self._sample([0.3, 0.1, 0.2], [1.5, 1.0, 1.2])
        self.assertEqual(frequency_drop(sample), 0.0)


def _solved_field(cone, surface, tiling):
    (pair,) = dirichlet_eigs(surface, 1)
    u, _ = solve_mse(cone, eigen_boundary_data(cone, pair, 0.1))
    return extend_two_valued(u, tiling), pair.lam


@unittest.skipUnless(_slow, "set BRANCHLAB_SLOW=1")
class TestSolvedTetrahedralBranch(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.p = tetra_face()
        cls.tiling = build_simplex_tiling(3)
        cls.cone = mesh_cone(cls.p, 0.15)
        cls.surface = mesh_spherical_polytope(cls.p, 0.15)
        cls.field, cls.lam = _solved_field(cls.cone, cls.surface, cls.tiling)
        cls.radii = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3]

    def test_frequency_is_nondecreasing(self):
        for center in (np.zeros(3), 0.5 * self.p.vertices[0]):
            sample = frequency(self.field, center, self.radii)
            self.assertLessEqual(frequency_drop(sample), 1e-4, msg=str(sample.values))

    def test_frequency_at_the_origin(self):
        gamma = indicial_exponents(self.lam, 3, 0).gamma_plus
        sample = frequency(self.field, np.zeros(3), self.radii)
        self.assertGreater(sample.values[0], 1.5)
        self.assertLess(abs(sample.values[0] - gamma) / gamma, 0.05)

    def test_leading_exponent_on_a_ray(self):
        fit = leading_coefficient_fit(self.field, 0, window=(0.05, 0.3))
        self.assertAlmostEqual(fit.exponent, 1.5, delta=0.1)
        self.assertGreaterEqual(fit.correlation, 0.99)

    def test_face_gradient_jump_decreases_under_refinement(self):
        fine, _ = _solved_field(refine(self.cone), refine(self.surface), self.tiling)
        coarse_jump = face_gradient_jump(self.field)
        self.assertLessEqual(face_gradient_jump(fine) / coarse_jump, 0.6)
