import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from elliptic.boundary_functionals import (Cutoff, InequalityReport, NodalSample, SawTooth, bmo_norm, boundary_grid,
                                           caccioppoli_check, carleson_energy, energy, functional_csv,
                                           nontangential_max, ns_bounds_check, oscillation_decay, p_ellipticity_check,
                                           poincare_bank, poincare_check, sobolev_poincare_check, square_function,
                                           trace_gap, trace_h_norm, wp_norm)
from elliptic.boundary_geometry import make_boundary, sigma_quadrature
from elliptic.config import BoundaryDescriptor
from elliptic.exceptions import BudgetExceededError, ConfigError, GeometryError
from elliptic.operator_fields import ScalarField, model_operator
from elliptic.reports import CheckRow

AXIS = np.linspace(-1.0, 1.0, 17)


def plane(n=3, d=1):
    return make_boundary(BoundaryDescriptor(kind='affine_plane', n=n, d=d))


def height_field():
    def gradient(points):
        t = points[:, 1:]
        return np.concatenate([np.zeros((len(points), 1)), t / np.linalg.norm(t, axis=1)[:, None]], axis=1)

    return ScalarField(3, lambda points: np.linalg.norm(points[:, 1:], axis=1), gradient, name='height')


def mixed_field():
    def value(points):
        return (1.0 + 0.5 * points[:, 0]) * np.linalg.norm(points[:, 1:], axis=1)

    return ScalarField(3, value, name='mixed')


class CutoffTests(SimpleTestCase):
    def test_sawtooth(self):
        e = SawTooth([[0.0], [1.0]], 0.5)
        self.assertTrue(np.allclose(e(np.array([[0.25], [2.0]])), [0.125, 0.5]))
        self.assertEqual(e.halved().slope, 0.25)
        with self.assertRaises(ConfigError):
            SawTooth([[0.0]], 1.5)

    def test_arguments(self):
        with self.assertRaises(ConfigError):
            Cutoff(0.0, 1)
        with self.assertRaises(ConfigError):
            Cutoff(1.0, 1, center=[0.0])

    def test_mask(self):
        chi = Cutoff(0.5, 1, center=[0.0], radius=0.5, e=SawTooth([[0.0]], 1.0))
        points = np.array([[0.0, 0.3, 0.0], [0.0, 0.6, 0.0], [0.7, 0.3, 0.0], [0.4, 0.3, 0.0]])
        self.assertEqual(chi(points).tolist(), [True, False, False, False])

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_dilation_dominates(self, x, t1, t2, ell):
        chi = Cutoff(ell, 1, center=[0.2], radius=0.5, e=SawTooth([[0.0], [0.5]], 1.0))
        point = np.array([[x, t1, t2]])
        if chi(point)[0]:
            self.assertTrue(chi.dilate()(point)[0])


class ConeFunctionalTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sample = NodalSample.from_field(height_field(), [AXIS, AXIS, AXIS], 1)
        cls.mixed = NodalSample.from_field(mixed_field(), [AXIS, AXIS, AXIS], 1)
        cls.x_grid, cls.cell = boundary_grid([0.0], 0.5, 4)
        cls.cutoff = Cutoff(0.5, 1, center=[0.0], radius=0.5)

    def test_nodes_on_gamma_dropped(self):
        self.assertEqual(len(self.sample.values), 17 ** 3 - 17)
        self.assertTrue(np.all(self.sample.height > 0))

    def test_boundary_grid(self):
        self.assertTrue(np.allclose(self.x_grid[:, 0], [-0.375, -0.125, 0.125, 0.375]))
        self.assertAlmostEqual(self.cell, 0.25)

    def test_density_needs_p_above_one(self):
        with self.assertRaises(ConfigError):
            self.sample.p_density(1.0)

    def test_nontangential_maximum_of_height(self):
        functional = nontangential_max(self.sample, np.array([[0.0]]), self.cutoff)
        self.assertAlmostEqual(functional.values[0], 0.5)
        self.assertFalse(functional.empty[0])

    @given(st.floats(0.1, 10.0), st.sampled_from([1.5, 2.0, 3.0]))
    @settings(max_examples=15, deadline=None)
    def test_square_function_is_homogeneous(self, factor, p):
        base = square_function(self.mixed, p, self.x_grid, self.cutoff).values
        scaled = square_function(self.mixed.scaled(factor), p, self.x_grid, self.cutoff).values
        self.assertTrue(np.allclose(scaled, factor * np.asarray(base), rtol=1e-6))

    def test_wp_norm_at_two_is_energy(self):
        self.assertAlmostEqual(wp_norm(self.sample, 2.0), math.sqrt(energy(self.sample)), places=10)

    def test_p_ellipticity_of_model(self):
        report = p_ellipticity_check(model_operator(1, 3), [self.sample, self.mixed], [self.cutoff, Cutoff(1.0, 1)],
                                     3.0)
        self.assertAlmostEqual(report.worst, 2.0, places=8)
        self.assertEqual(len(report.rows), 4)

    def test_ns_bounds_need_ball(self):
        with self.assertRaises(ConfigError):
            ns_bounds_check(self.sample, 2.0, 2.0, Cutoff(0.5, 1), self.x_grid, self.cell)

    def test_ns_bounds_positive(self):
        bounds = ns_bounds_check(self.mixed, 2.0, 2.0, self.cutoff, self.x_grid, self.cell)
        self.assertGreater(bounds.s_norm, 0.0)
        self.assertGreater(bounds.n_norm_dilated, 0.0)
        self.assertGreater(bounds.anchor_term, 0.0)

    def test_carleson_energy_needs_rule(self):
        with self.assertRaises(ConfigError):
            carleson_energy(self.sample, [0.0, 0.0, 0.0], 0.5, gamma=plane())

    def test_carleson_energy_of_height(self):
        self.assertGreater(carleson_energy(self.sample, [0.0, 0.0, 0.0], 0.5), 0.0)

    def test_csv(self):
        functional = nontangential_max(self.sample, self.x_grid, self.cutoff)
        with tempfile.TemporaryDirectory() as directory:
            lines = functional_csv(functional, Path(directory) / 'n.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'x,value')
        self.assertEqual(len(lines), 5)


class InequalityTests(SimpleTestCase):
    def test_report_ignores_undefined_ratios(self):
        rows = [CheckRow(check_id='a', lhs=1.0, rhs=2.0, ratio=0.5),
                CheckRow(check_id='b', lhs=0.0, rhs=0.0, ratio=math.nan),
                CheckRow(check_id='c', lhs=3.0, rhs=1.0, ratio=3.0)]
        self.assertEqual(InequalityReport.from_rows('x', rows).worst, 3.0)
        self.assertEqual(InequalityReport.from_rows('x', rows, use_min=True).worst, 0.5)
        self.assertEqual(len(InequalityReport.from_rows('x', rows).rows), 3)

    def test_poincare_on_plane(self):
        gamma = plane()
        bank = poincare_bank(gamma, None, 0.5, 2, np.random.default_rng(0))
        report = poincare_check(gamma, None, [0.0, 0.0, 0.0], 0.5, bank, max_depth=3)
        self.assertEqual(len(report.rows), 2)
        self.assertGreater(report.worst, 0.0)
        self.assertLess(report.worst, 10.0)

    def test_sobolev_exponent_range(self):
        gamma = plane()
        with self.assertRaises(ConfigError):
            sobolev_poincare_check(gamma, None, [0.0, 0.0, 0.0], 0.5, [], 7.0)

    def test_caccioppoli(self):
        u = ScalarField(3, lambda p: 2.0 + p[:, 0], lambda p: np.tile([1.0, 0.0, 0.0], (len(p), 1)))
        report = caccioppoli_check(u, 2.0, [([0.0, 2.0, 0.0], 0.25)], 1, max_depth=2)
        self.assertEqual(report.rows[0].check_id, 'caccioppoli[p=2]:r=0.25')
        self.assertGreater(report.worst, 0.0)
        with self.assertRaises(GeometryError):
            caccioppoli_check(u, 2.0, [([0.0, 0.4, 0.0], 0.25)], 1)


class OscillationTests(SimpleTestCase):
    def test_linear_function(self):
        report = oscillation_decay(lambda X: X[:, 0], [0.0, 1.0, 0.0], [0.4, 0.2, 0.1])
        self.assertTrue(np.allclose(report.oscillations, [0.8, 0.4, 0.2]))
        self.assertAlmostEqual(report.hoelder_exponent, 1.0, places=8)

    def test_constant_function(self):
        report = oscillation_decay(lambda X: np.ones(len(X)), [0.0, 1.0, 0.0], [0.4, 0.2])
        self.assertIsNone(report.hoelder_exponent)


class TraceTests(SimpleTestCase):
    def test_trace_gap_of_tangential_function(self):
        report = trace_gap(lambda X: X[:, 0], lambda x: x[:, 0], np.array([[0.0], [0.5]]), [0.1, 1.0], 1, 3)
        self.assertEqual(report.radii, [1.0, 0.1])
        self.assertTrue(np.allclose(report.gaps, [[1.0, 0.1], [1.0, 0.1]]))
        self.assertEqual(report.converged_fraction, 1.0)

    def test_trace_norm_of_constant(self):
        rule = sigma_quadrature(plane(), 5, window=([-1.0], [1.0]))
        self.assertEqual(trace_h_norm(lambda y: np.ones(len(y)), rule, 1.0), 0.0)
        self.assertGreater(trace_h_norm(lambda y: y[:, 0], rule, 1.0), 0.0)

    def test_trace_norm_budget(self):
        rule = sigma_quadrature(plane(), 5, window=([-1.0], [1.0]))
        with self.assertRaises(BudgetExceededError):
            trace_h_norm(lambda y: y[:, 0], rule, 1.0, max_pairs=100)

    def test_bmo_of_constant(self):
        rule = sigma_quadrature(plane(), 5, window=([-1.0], [1.0]))
        balls = [([0.0, 0.0, 0.0], 0.5), ([0.5, 0.0, 0.0], 0.25)]
        self.assertAlmostEqual(bmo_norm(lambda y: np.full(len(y), 4.0), rule, balls), 0.0, places=12)
        self.assertGreater(bmo_norm(lambda y: y[:, 0], rule, balls), 0.0)
