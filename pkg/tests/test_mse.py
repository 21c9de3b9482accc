import math
import unittest

import numpy as np

from src.discretize import hemisphere, mesh_cone, mesh_cube, mesh_spherical_polytope, refine, tetra_face
from src.harmonic import VolumeField, direct_harmonic_solve
from src.mse import (
    BoundaryData,
    InsufficientSamplesError,
    InvalidBarrierExponentError,
    InvalidBoundaryDataError,
    NewtonDivergenceError,
    SolveOptions,
    UnknownStratumError,
    UnsupportedMeshError,
    affine_boundary_data,
    area_functional,
    area_gradient,
    barrier_check,
    cap_gradient,
    check_boundary_data,
    edge_polar,
    eigen_boundary_data,
    gradient_decay_fit,
    jacobian,
    mse_residual,
    solve_mse,
    tune_barrier_constant,
    value_decay_fit,
)
from src.spectral import dirichlet_eigs


class TestAreaFunctional(unittest.TestCase):
    def setUp(self):
        self.m = mesh_cube(2)
        rng = np.random.default_rng(20240601)
        self.u = rng.normal(size=self.m.n_nodes)
        self.d = rng.normal(size=self.m.n_nodes)

    def test_flat_and_affine(self):
        self.assertAlmostEqual(area_functional(self.m, np.zeros(self.m.n_nodes)), 1.0)
        a = np.array([0.3, -0.2, 0.1])
        self.assertAlmostEqual(area_functional(self.m, self.m.nodes @ a), math.sqrt(1.0 + a @ a))

    def test_gradient_matches_finite_difference(self):
        eps = 1e-6
        difference = (
            area_functional(self.m, self.u + eps * self.d)
            - area_functional(self.m, self.u - eps * self.d)
        ) / (2.0 * eps)
        self.assertAlmostEqual(float(area_gradient(self.m, self.u) @ self.d), difference, places=6)

    def test_gradient_in_random_directions(self):
        rng = np.random.default_rng(20240601)
        eps = 1e-6
        gradient = area_gradient(self.m, self.u)
        for _ in range(20):
            d = rng.normal(size=self.m.n_nodes)
            difference = (
                area_functional(self.m, self.u + eps * d) - area_functional(self.m, self.u - eps * d)
            ) / (2.0 * eps)
            self.assertLess(abs(float(gradient @ d) - difference), 1e-6 * max(1.0, abs(difference)))

    def test_jacobian_matches_finite_difference(self):
        eps = 1e-6
        difference = (
            area_gradient(self.m, self.u + eps * self.d) - area_gradient(self.m, self.u - eps * self.d)
        ) / (2.0 * eps)
        matrix = jacobian(self.m, self.u)
        np.testing.assert_allclose(matrix @ self.d, difference, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose((matrix - matrix.T).toarray(), 0.0, atol=1e-14)

    def test_residual_rows(self):
        field = VolumeField(mesh=self.m, values=self.u, origin="test")
        residual = mse_residual(field)
        np.testing.assert_array_equal(residual[self.m.dirichlet_nodes()], 0.0)


class TestAffineSolve(unittest.TestCase):
    def test_affine_data_is_exact(self):
        m = mesh_cube(3)
        gradient = np.array([0.3, -0.2, 0.1])
        g = affine_boundary_data(m, gradient, 0.5)
        self.assertEqual(g.generator, "affine")
        u, report = solve_mse(m, g)
        np.testing.assert_allclose(u.values, m.nodes @ gradient + 0.5, atol=1e-8)
        self.assertTrue(report.converged)
        self.assertEqual(report.continuation_steps, [0.25, 0.5, 0.75, 1.0])
        self.assertLess(report.final_residual, 1e-10)
        self.assertEqual(report.last_good, 1.0)

    def test_divergence_carries_the_report(self):
        m = mesh_cube(2)
        g = affine_boundary_data(m, np.array([1.0, 0.0, 0.0]))
        with self.assertRaises(NewtonDivergenceError) as caught:
            solve_mse(m, g, SolveOptions(max_newton=0))
        self.assertFalse(caught.exception.report.converged)
        self.assertEqual(caught.exception.report.last_good, 0.0)

    def test_surface_mesh_is_rejected(self):
        m = mesh_spherical_polytope(tetra_face(), 0.4)
        g = BoundaryData(values=np.zeros(m.n_nodes), scale=0.0, generator="zero")
        with self.assertRaises(UnsupportedMeshError):
            solve_mse(m, g)


class TestConeSolve(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        p = hemisphere()
        cls.cone = mesh_cone(p, 0.3)
        (cls.pair,) = dirichlet_eigs(mesh_spherical_polytope(p, 0.3), 1)

    def test_small_data_is_nearly_harmonic(self):
        g = eigen_boundary_data(self.cone, self.pair, 0.1)
        self.assertEqual(g.generator, "eigen:1")
        u, report = solve_mse(self.cone, g)
        self.assertTrue(report.converged)
        harmonic = direct_harmonic_solve(self.cone, g.values)
        scale = float(np.max(np.abs(harmonic.values)))
        self.assertLess(float(np.max(np.abs(u.values - harmonic.values))) / scale, 0.02)
        np.testing.assert_array_equal(u.values[self.cone.tagged("flat_face")], 0.0)
        self.assertEqual(report.edge_gradient, check_boundary_data(self.cone, g).edge_gradient)

    def test_invalid_data(self):
        with self.assertRaises(InvalidBoundaryDataError):
            solve_mse(self.cone, affine_boundary_data(self.cone, np.array([1.0, 0.0, 0.0])))
        short = BoundaryData(values=np.zeros(3), scale=0.0, generator="zero")
        with self.assertRaises(InvalidBoundaryDataError):
            solve_mse(self.cone, short)

    def test_decay_fits(self):
        z = VolumeField(mesh=self.cone, values=self.cone.nodes[:, 2], origin="test")
        fit = gradient_decay_fit(z, "origin", window=(0.05, 0.5))
        self.assertAlmostEqual(fit.exponent, 0.0, places=8)
        self.assertEqual(fit.stratum, "origin")
        self.assertAlmostEqual(value_decay_fit(z).exponent, 1.0, places=8)

    def test_decay_fit_errors(self):
        zero = VolumeField(mesh=self.cone, values=np.zeros(self.cone.n_nodes), origin="test")
        with self.assertRaises(InsufficientSamplesError):
            gradient_decay_fit(zero, "origin", window=(0.05, 0.5))
        with self.assertRaises(UnknownStratumError):
            gradient_decay_fit(zero, "vertex")
        with self.assertRaises(UnknownStratumError):
            value_decay_fit(zero, "edge:0")


class TestLinearization(unittest.TestCase):
    def test_cubic_deviation_from_harmonic_extension(self):
        p = tetra_face()
        cone = mesh_cone(p, 0.3)
        (pair,) = dirichlet_eigs(mesh_spherical_polytope(p, 0.3), 1)
        extension = direct_harmonic_solve(cone, eigen_boundary_data(cone, pair, 1.0).values).values

        def deviation(eps):
            u, report = solve_mse(cone, eigen_boundary_data(cone, pair, eps))
            self.assertTrue(report.converged)
            return float(np.linalg.norm(u.values - eps * extension))

        self.assertAlmostEqual(deviation(0.02) / deviation(0.01), 8.0, delta=1.5)


class TestBoundaryCheck(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.p = tetra_face()
        cls.cone = mesh_cone(cls.p, 0.4)

    def _product(self, m, scale=1.0):
        values = scale * np.prod(m.nodes @ self.p.facet_normals().T, axis=1)
        return BoundaryData(values=values, scale=scale, generator="product")

    def test_zero_data(self):
        zero = BoundaryData(values=np.zeros(self.cone.n_nodes), scale=0.0, generator="zero")
        check = check_boundary_data(self.cone, zero)
        self.assertEqual(check.max_value, 0.0)
        self.assertEqual(check.edge_gradient, 0.0)

    def test_edge_gradient_is_reported(self):
        check = check_boundary_data(self.cone, self._product(self.cone))
        self.assertLess(check.max_value, 1e-12)
        self.assertGreater(check.edge_gradient, 0.0)
        doubled = check_boundary_data(self.cone, self._product(self.cone, 2.0))
        self.assertAlmostEqual(doubled.edge_gradient, 2.0 * check.edge_gradient)

    def test_edge_gradient_decreases_under_refinement(self):
        fine = refine(self.cone)
        coarse = check_boundary_data(self.cone, self._product(self.cone)).edge_gradient
        self.assertLess(check_boundary_data(fine, self._product(fine)).edge_gradient, coarse)

    def test_cap_gradient_of_linear_data(self):
        a = np.array([0.3, -0.2, 0.5])
        gradient = cap_gradient(self.cone, self.cone.nodes @ a)
        cap = self.cone.tagged("cap")
        normals = self.cone.nodes[cap] / np.linalg.norm(self.cone.nodes[cap], axis=1)[:, None]
        # tangential part of a, up to the flatness of the cap triangles
        tangential = a - (normals @ a)[:, None] * normals
        np.testing.assert_allclose(gradient[cap], tangential, atol=0.25)
        interior = np.setdiff1d(np.arange(self.cone.n_nodes), cap)
        np.testing.assert_array_equal(gradient[interior], 0.0)

    def test_box_mesh_is_not_checked(self):
        m = mesh_cube(2)
        check = check_boundary_data(m, affine_boundary_data(m, np.array([1.0, 0.0, 0.0])))
        self.assertEqual(check.edge_gradient, 0.0)


class TestBarrier(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cone = mesh_cone(tetra_face(), 0.4)
        cls.beta = 2.0 * math.pi / 3.0
        cls.gamma = 0.5 * (1.0 + math.pi / cls.beta)

    def _profile_field(self, constant):
        rho, theta, _, opening = edge_polar(self.cone, 0)
        self.assertAlmostEqual(opening, self.beta)
        eps = 0.05 * self.beta
        values = constant * rho**self.gamma * np.cos(math.pi * (theta - 0.5 * self.beta) / (self.beta + eps))
        return VolumeField(mesh=self.cone, values=values, origin="test")

    def test_zero_field_passes(self):
        zero = VolumeField(mesh=self.cone, values=np.zeros(self.cone.n_nodes), origin="test")
        result = barrier_check(zero, 0, self.beta, self.gamma, 1.0)
        self.assertTrue(result.passed)
        self.assertGreaterEqual(result.margin, 0.0)
        self.assertGreater(result.checked, 0)

    def test_tuned_constant(self):
        u = self._profile_field(2.0)
        constant = tune_barrier_constant(u, 0, self.beta, self.gamma)
        self.assertAlmostEqual(constant, 2.4)
        self.assertTrue(barrier_check(u, 0, self.beta, self.gamma, constant).passed)
        self.assertFalse(barrier_check(u, 0, self.beta, self.gamma, 1.0).passed)

    def test_nonzero_on_edge_fails(self):
        ones = VolumeField(mesh=self.cone, values=np.ones(self.cone.n_nodes), origin="test")
        self.assertFalse(barrier_check(ones, 0, self.beta, self.gamma, 1e6).passed)

    def test_exponent_range(self):
        zero = VolumeField(mesh=self.cone, values=np.zeros(self.cone.n_nodes), origin="test")
        with self.assertRaises(InvalidBarrierExponentError):
            barrier_check(zero, 0, self.beta, 0.5, 1.0)
        with self.assertRaises(InvalidBarrierExponentError):
            tune_barrier_constant(zero, 0, self.beta, 2.0)
