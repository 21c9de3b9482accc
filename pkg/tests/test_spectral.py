import math
import os
import unittest

import numpy as np

from src.discretize import hemisphere, mesh_cone, mesh_spherical_polytope, tetra_face
from src.fem import assemble_mass
from src.spectral import (
    InsufficientSamplesError,
    InvalidCountError,
    NotSurfaceMeshError,
    OscillatoryRegimeError,
    dirichlet_eigs,
    eigen_sequence,
    equivariant_check,
    fit_vertex_exponent,
    indicial_exponents,
    richardson,
    vertex_frame,
    vertex_polar,
)
from src.tiling import build_simplex_tiling

_slow = os.environ.get("BRANCHLAB_SLOW") == "1"

# first Dirichlet eigenvalue of the spherical triangle with angles 2π/3
_tetra_face_lambda = 5.159


class TestHemisphere(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = mesh_spherical_polytope(hemisphere(), 0.15)
        cls.pairs = dirichlet_eigs(cls.mesh, 6)

    def test_spectrum(self):
        expected = [2.0, 6.0, 6.0, 12.0, 12.0, 12.0]
        self.assertLess(abs(self.pairs[0].lam - 2.0) / 2.0, 0.02)
        for pair, lam in zip(self.pairs, expected):
            self.assertLess(abs(pair.lam - lam) / lam, 0.05)
        self.assertEqual([pair.index for pair in self.pairs], [1, 2, 3, 4, 5, 6])
        values = [pair.lam for pair in self.pairs]
        self.assertEqual(values, sorted(values))

    def test_normalisation(self):
        mass = assemble_mass(self.mesh.nodes, self.mesh.elements)
        phi = np.stack([pair.phi for pair in self.pairs], axis=1)
        np.testing.assert_allclose(phi.T @ (mass @ phi), np.eye(6), atol=1e-8)

    def test_first_mode_is_height(self):
        phi = self.pairs[0].phi
        self.assertGreater(float(np.sum(assemble_mass(self.mesh.nodes, self.mesh.elements) @ phi)), 0.0)
        z = self.mesh.nodes[:, 2]
        correlation = np.corrcoef(phi, z)[0, 1]
        self.assertGreater(correlation, 0.999)

    def test_boundary_trace_vanishes(self):
        for pair in self.pairs:
            np.testing.assert_array_equal(pair.phi[self.mesh.dirichlet_nodes()], 0.0)
            self.assertLess(pair.residual, 1e-8)

    @unittest.skipUnless(_slow, "set BRANCHLAB_SLOW=1")
    def test_extrapolated_first_eigenvalue(self):
        sequence = eigen_sequence(hemisphere(), 0.2, 2.0, 3, 1)
        self.assertLess(abs(sequence.extrapolated[0] - 2.0) / 2.0, 0.005)


class TestTetraFace(unittest.TestCase):
    def test_first_eigenvalue(self):
        (pair,) = dirichlet_eigs(mesh_spherical_polytope(tetra_face(), 0.07), 1)
        self.assertLess(abs(pair.lam - _tetra_face_lambda) / _tetra_face_lambda, 0.01)

    def test_spectrum_exceeds_hemisphere_value(self):
        pairs = dirichlet_eigs(mesh_spherical_polytope(tetra_face(), 0.15), 10)
        self.assertEqual(len(pairs), 10)
        for pair in pairs:
            self.assertGreater(pair.lam, 2.0)

    def test_equivariant_check(self):
        m = mesh_spherical_polytope(tetra_face(), 0.15)
        (pair,) = dirichlet_eigs(m, 1)
        report = equivariant_check(pair, build_simplex_tiling(3), window=(0.1, 0.4))
        self.assertEqual(report.index, 1)
        self.assertEqual(report.max_trace, 0.0)
        self.assertEqual(report.wall_jumps, [0.0, 0.0, 0.0])
        self.assertEqual(len(report.vertex_fits), 3)
        self.assertEqual(report.warnings, [])

    def test_foreign_tiling_is_reported(self):
        m = mesh_spherical_polytope(hemisphere(), 0.3)
        (pair,) = dirichlet_eigs(m, 1)
        report = equivariant_check(pair, build_simplex_tiling(3), window=(0.1, 0.4))
        self.assertIn("mesh polytope is not the base cell of the tiling", report.warnings)

    @unittest.skipUnless(_slow, "set BRANCHLAB_SLOW=1")
    def test_extrapolated_sequence(self):
        sequence = eigen_sequence(tetra_face(), 0.3, 2.0, 3, 1)
        self.assertEqual(len(sequence.h), 3)
        self.assertAlmostEqual(sequence.h[1], sequence.h[0] / 2)
        self.assertEqual(sequence.values.shape, (3, 1))
        self.assertEqual(len(sequence.finest), 1)
        self.assertEqual(sequence.finest[0].lam, sequence.values[-1, 0])
        self.assertLess(
            abs(sequence.extrapolated[0] - _tetra_face_lambda) / _tetra_face_lambda, 0.01
        )


class TestErrors(unittest.TestCase):
    def test_count(self):
        m = mesh_spherical_polytope(tetra_face(), 0.4)
        with self.assertRaises(InvalidCountError):
            dirichlet_eigs(m, 0)
        with self.assertRaises(InvalidCountError):
            dirichlet_eigs(m, m.n_nodes)

    def test_needs_surface_mesh(self):
        with self.assertRaises(NotSurfaceMeshError):
            dirichlet_eigs(mesh_cone(tetra_face(), 0.5), 1)


class TestIndicialExponents(unittest.TestCase):
    def test_linear_harmonic(self):
        exponents = indicial_exponents(2.0, 3, 0)
        self.assertAlmostEqual(exponents.gamma_plus, 1.0)
        self.assertAlmostEqual(exponents.gamma_minus, -2.0)

    def test_torus_factor(self):
        exponents = indicial_exponents(2.0, 3, 2)
        centre = 0.5 * (exponents.gamma_plus + exponents.gamma_minus)
        self.assertAlmostEqual(centre, 0.5)
        self.assertAlmostEqual(exponents.gamma_plus * exponents.gamma_minus, -2.0)

    def test_oscillatory(self):
        with self.assertRaises(OscillatoryRegimeError):
            indicial_exponents(-1.0, 3, 0)


class TestRichardson(unittest.TestCase):
    def test_second_order(self):
        values = np.array([[2.0], [1.25], [1.0625]])
        extrapolated, orders = richardson(values)
        self.assertAlmostEqual(extrapolated[0], 1.0)
        self.assertAlmostEqual(orders[0], 2.0)

    def test_two_levels_assume_second_order(self):
        extrapolated, orders = richardson(np.array([[2.0, 3.0], [1.25, 2.25]]))
        np.testing.assert_allclose(extrapolated, [1.0, 2.0])
        np.testing.assert_array_equal(orders, [2.0, 2.0])

    def test_implausible_order_falls_back(self):
        values = np.array([[2.0], [1.0625], [1.00390625]])
        _, orders = richardson(values)
        self.assertEqual(orders[0], 2.0)

    def test_single_level(self):
        extrapolated, _ = richardson(np.array([[5.0, 6.0]]))
        np.testing.assert_array_equal(extrapolated, [5.0, 6.0])


class TestVertexFit(unittest.TestCase):
    def setUp(self):
        self.p = tetra_face()
        self.m = mesh_spherical_polytope(self.p, 0.15)

    def test_frame(self):
        v, t1, t2, opening = vertex_frame(self.p, 0)
        self.assertAlmostEqual(opening, 2.0 * math.pi / 3.0)
        self.assertAlmostEqual(float(t1 @ v), 0.0)
        self.assertAlmostEqual(float(t2 @ v), 0.0)
        self.assertAlmostEqual(float(t1 @ t2), 0.0)

    def test_synthetic_power_law(self):
        rho, theta = vertex_polar(self.m, 0)
        values = rho**1.5 * np.sin(1.5 * np.clip(theta, 0.0, 2.0 * math.pi / 3.0))
        fit = fit_vertex_exponent(self.m, values, 0, window=(0.1, 0.4))
        self.assertAlmostEqual(fit.exponent, 1.5, delta=0.1)
        self.assertEqual(len(fit.radii), 12)

    def test_empty_window(self):
        with self.assertRaises(InsufficientSamplesError):
            fit_vertex_exponent(self.m, np.ones(self.m.n_nodes), 0, window=(0.3, 0.2))
