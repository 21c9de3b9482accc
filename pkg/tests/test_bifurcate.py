import math
import os
import unittest

import numpy as np

from src.bifurcate import (
    BranchPoint,
    ContinuationError,
    DomainViolationError,
    InsufficientPointsError,
    NoCrossingError,
    UnsupportedDomainError,
    amplitude_exponent,
    continue_branch,
    dirichlet_modes,
    dirichlet_spectrum,
    discrete_area,
    jacobi_matrix,
    jacobi_spectrum,
    predicted_crossings,
    solve_warped,
    stability_index,
    toy_domain,
    transversality,
    warped_residual,
)
from src.discretize import mesh_cone, mesh_spherical_polytope, tetra_face
from src.fem import assemble_mass
from src.harmonic import VolumeField
from src.warp import warp_model

_slow = os.environ.get("BRANCHLAB_SLOW") == "1"

# first Dirichlet eigenvalue of the spherical triangle with angles 2π/3
_tetra_face_lambda = 5.159


class TestToyDomain(unittest.TestCase):
    def setUp(self):
        self.m = toy_domain(0.02)
        self.model = warp_model("cos", 1)

    def test_spectrum(self):
        self.assertAlmostEqual(float(self.m.nodes[-1, 0]), 2.0 * math.pi / 3.0)
        np.testing.assert_allclose(dirichlet_spectrum(self.m, 2), [2.25, 9.0], rtol=1e-3)

    def test_modes_are_mass_normalised(self):
        values, vectors = dirichlet_modes(self.m, 2)
        self.assertEqual(vectors.shape, (self.m.n_nodes, 2))
        mass = assemble_mass(self.m.nodes, self.m.elements)
        np.testing.assert_allclose(vectors.T @ (mass @ vectors), np.eye(2), atol=1e-10)
        np.testing.assert_array_equal(vectors[self.m.dirichlet_nodes()], 0.0)

    def test_predicted_crossings(self):
        np.testing.assert_allclose(predicted_crossings([2.25, 9.0], self.model), [1.5, 3.0])
        quadratic = warp_model("quadratic:1/2", 1)
        self.assertAlmostEqual(predicted_crossings([2.25], quadratic)[0], math.sqrt(4.5))
        self.assertEqual(len(predicted_crossings([9.0, 2.25], self.model, count=1)), 1)
        self.assertAlmostEqual(predicted_crossings([9.0, 2.25], self.model, count=1)[0], 1.5)

    def test_trivial_branch(self):
        zero = np.zeros(self.m.n_nodes)
        self.assertAlmostEqual(discrete_area(self.model, 1.5, self.m, zero), 2.0 * math.pi / 3.0)
        np.testing.assert_allclose(warped_residual(self.model, 1.5, self.m, zero), 0.0, atol=1e-14)

    def test_jacobi_matrix_at_zero(self):
        zero = np.zeros(self.m.n_nodes)
        values, _ = jacobi_spectrum(self.model, 1.5, self.m, zero, 2)
        mu = dirichlet_spectrum(self.m, 2)
        np.testing.assert_allclose(values, mu - 2.25, atol=1e-8)

    def test_stability_index(self):
        zero = np.zeros(self.m.n_nodes)
        self.assertEqual(stability_index(self.model, 1.4, self.m, zero), 0)
        self.assertEqual(stability_index(self.model, 1.6, self.m, zero), 1)
        self.assertEqual(stability_index(self.model, 3.1, self.m, zero), 2)

    def test_jacobi_matrix_matches_finite_difference(self):
        x = self.m.nodes[:, 0]
        u = 0.3 * np.sin(1.5 * x)
        rng = np.random.default_rng(20240601)
        d = rng.normal(size=self.m.n_nodes)
        d[self.m.dirichlet_nodes()] = 0.0
        eps = 1e-6
        difference = (
            warped_residual(self.model, 1.5, self.m, u + eps * d)
            - warped_residual(self.model, 1.5, self.m, u - eps * d)
        ) / (2.0 * eps)
        free = self.m.free_mask()
        product = jacobi_matrix(self.model, 1.5, self.m, u) @ d
        np.testing.assert_allclose(product[free], difference[free], rtol=1e-5, atol=1e-8)

    def test_transversality(self):
        values, vectors = dirichlet_modes(self.m, 1)
        report = transversality(self.model, (float(values[0]), vectors[:, 0], self.m))
        self.assertAlmostEqual(report.lam, math.sqrt(values[0]))
        self.assertAlmostEqual(report.closed_form, 2.0 * report.lam)
        self.assertAlmostEqual(report.fd_slope, report.closed_form, places=6)

    def test_trivial_solve(self):
        point = solve_warped(self.model, 1.4, self.m, np.zeros(self.m.n_nodes))
        self.assertEqual(point.amplitude, 0.0)
        self.assertEqual(point.iterations, 0)
        self.assertEqual(point.stability_index, 0)

    def test_slab(self):
        u = np.full(self.m.n_nodes, 1.5)
        with self.assertRaises(DomainViolationError):
            warped_residual(self.model, 1.5, self.m, u)

    def test_no_crossing(self):
        m = toy_domain(0.05)
        with self.assertRaises(NoCrossingError):
            continue_branch(self.model, m, (1.0, 1.4))
        with self.assertRaises(ContinuationError):
            continue_branch(self.model, m, (1.8, 1.3))

    def test_residual_is_area_derivative(self):
        x = self.m.nodes[:, 0]
        u = 0.3 * np.sin(1.5 * x)
        residual = warped_residual(self.model, 1.5, self.m, u)
        rng = np.random.default_rng(20240601)
        eps = 1e-6
        for _ in range(20):
            d = rng.normal(size=self.m.n_nodes)
            d[self.m.dirichlet_nodes()] = 0.0
            difference = (
                discrete_area(self.model, 1.5, self.m, u + eps * d)
                - discrete_area(self.model, 1.5, self.m, u - eps * d)
            ) / (2.0 * eps)
            self.assertLess(abs(float(residual @ d) - difference), 1e-6 * max(1.0, abs(difference)))

    def test_point_budget_is_reported(self):
        m = toy_domain(0.05)
        result = continue_branch(warp_model("gaussian", 1), m, (1.3, 1.8), max_points=2)
        self.assertEqual(len(result.points), 2)
        self.assertEqual(result.warnings, ["branch stopped after 2 points"])

    def test_slab_limit_is_reported(self):
        m = toy_domain(0.05)
        result = continue_branch(self.model, m, (1.3, 1.8), slab_limit=0.1)
        self.assertEqual(len(result.warnings), 1)
        self.assertTrue(result.warnings[0].startswith("branch stopped at slab limit 0.1 "))
        self.assertGreater(max(float(np.max(np.abs(p.field.values))) for p in result.points), 0.1)
        # the round-sphere warp gives a vertical branch
        for point in result.points:
            self.assertAlmostEqual(point.lam, result.crossing, delta=1e-3)

    def test_paths_agree(self):
        m = toy_domain(0.05)
        model = warp_model("gaussian", 1)
        first = continue_branch(model, m, (1.3, 1.8), max_points=3)
        second = continue_branch(model, m, (1.3, 1.8), scan_step=0.03, max_points=3, workers=2)
        self.assertAlmostEqual(first.crossing, second.crossing, delta=1e-8)
        for a, b in zip(first.points, second.points):
            self.assertAlmostEqual(a.lam, b.lam, delta=1e-8)
            np.testing.assert_allclose(a.field.values, b.field.values, atol=1e-8)

    @unittest.skipUnless(_slow, "set BRANCHLAB_SLOW=1")
    def test_supercritical_branch(self):
        m = toy_domain(0.05)
        model = warp_model("gaussian", 1)
        lam1 = predicted_crossings(dirichlet_spectrum(m, 1), model)[0]
        result = continue_branch(model, m, (1.3, 1.8))
        self.assertAlmostEqual(result.crossing, lam1, places=7)
        self.assertGreater(len(result.points), 3)
        self.assertTrue(all(point.lam >= lam1 - 1e-6 for point in result.points))
        for point in result.points:
            self.assertLess(point.residual, 1e-10)
        self.assertEqual(result.trivial[0].stability_index, 0)


class TestSurfaceDomain(unittest.TestCase):
    def test_jacobi_matrix_matches_finite_difference(self):
        m = mesh_spherical_polytope(tetra_face(), 0.4)
        model = warp_model("cos", 2)
        normals = m.polytope.facet_normals()
        u = 2.0 * np.prod(m.nodes @ normals.T, axis=1)
        u[m.dirichlet_nodes()] = 0.0
        rng = np.random.default_rng(20240601)
        d = rng.normal(size=m.n_nodes)
        d[m.dirichlet_nodes()] = 0.0
        eps = 1e-6
        difference = (
            warped_residual(model, 1.0, m, u + eps * d) - warped_residual(model, 1.0, m, u - eps * d)
        ) / (2.0 * eps)
        free = m.free_mask()
        product = jacobi_matrix(model, 1.0, m, u) @ d
        np.testing.assert_allclose(product[free], difference[free], rtol=1e-5, atol=1e-8)

    def test_residual_is_area_derivative(self):
        m = mesh_spherical_polytope(tetra_face(), 0.4)
        model = warp_model("cos", 2)
        u = 2.0 * np.prod(m.nodes @ m.polytope.facet_normals().T, axis=1)
        u[m.dirichlet_nodes()] = 0.0
        residual = warped_residual(model, 1.0, m, u)
        rng = np.random.default_rng(20240601)
        eps = 1e-6
        for _ in range(20):
            d = rng.normal(size=m.n_nodes)
            d[m.dirichlet_nodes()] = 0.0
            difference = (
                discrete_area(model, 1.0, m, u + eps * d) - discrete_area(model, 1.0, m, u - eps * d)
            ) / (2.0 * eps)
            self.assertLess(abs(float(residual @ d) - difference), 1e-6 * max(1.0, abs(difference)))

    @unittest.skipUnless(_slow, "set BRANCHLAB_SLOW=1")
    def test_crossing_on_the_tetrahedral_face(self):
        m = mesh_spherical_polytope(tetra_face(), 0.1)
        model = warp_model("cos", 2)
        values, vectors = dirichlet_modes(m, 1)
        mu = float(values[0])
        slope = transversality(model, (mu, vectors[:, 0], m))
        self.assertLess(abs(slope.fd_slope - slope.closed_form) / slope.closed_form, 0.01)
        result = continue_branch(model, m, (1.5, 1.7), max_points=2)
        self.assertAlmostEqual(result.crossing, math.sqrt(mu / 2.0), delta=1e-6)
        self.assertLess(abs(result.crossing - math.sqrt(_tetra_face_lambda / 2.0)), 0.01 * result.crossing)

    def test_cone_is_rejected(self):
        m = mesh_cone(tetra_face(), 0.5)
        with self.assertRaises(UnsupportedDomainError):
            discrete_area(warp_model("cos", 2), 1.0, m, np.zeros(m.n_nodes))


class TestAmplitudeExponent(unittest.TestCase):
    def setUp(self):
        self.m = toy_domain(0.1)

    def _points(self, distances):
        zero = VolumeField(mesh=self.m, values=np.zeros(self.m.n_nodes), origin="test")
        return [
            BranchPoint(lam=1.5 + d, amplitude=math.sqrt(d), field=zero, stability_index=0, residual=0.0)
            for d in distances
        ]

    def test_square_root(self):
        points = self._points(np.geomspace(1e-3, 3e-2, 6))
        self.assertAlmostEqual(amplitude_exponent(points, 1.5), 0.5, places=8)

    def test_too_few_points(self):
        with self.assertRaises(InsufficientPointsError):
            amplitude_exponent(self._points([1e-2, 2e-2]), 1.5)
