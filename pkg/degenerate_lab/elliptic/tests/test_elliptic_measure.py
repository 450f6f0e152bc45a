import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from elliptic.boundary_geometry import make_boundary
from elliptic.config import BoundaryDescriptor, ProfileDescriptor
from elliptic.degenerate_solver import assemble, build_grid
from elliptic.elliptic_measure import (AInftyReport, BoundarySubset, MeasureSolver, RatioReport, comparability_check,
                                       comparability_sets, envelope_csv, exact_source_available, harmonic_measure,
                                       measure_battery, measure_csv, model_measure_exact)
from elliptic.exceptions import AccuracyError, ConfigError, GeometryError, MagicExponentError
from elliptic.operator_fields import model_operator

POLE = [0.0, 0.5, 0.0]


def plane(n=3, d=1):
    return make_boundary(BoundaryDescriptor(kind='affine_plane', n=n, d=d))


class BoundarySubsetTests(SimpleTestCase):
    def test_radii_must_be_positive(self):
        with self.assertRaises(GeometryError):
            BoundarySubset([[0.0, 0.0, 0.0]], [0.0])
        with self.assertRaises(GeometryError):
            BoundarySubset([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.5])

    def test_indicator_ramp(self):
        E = BoundarySubset([[0.0, 0.0, 0.0]], [1.0])
        feet = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        self.assertTrue(np.allclose(E.indicator(feet, 0.5), [1.0, 0.5, 0.0]))
        self.assertTrue(np.allclose(E.inverted().indicator(feet, 0.5), [0.0, 0.5, 1.0]))

    def test_sharp_indicator(self):
        E = BoundarySubset([[0.0, 0.0, 0.0]], [1.0])
        feet = np.array([[0.5, 0.0, 0.0], [1.5, 0.0, 0.0]])
        self.assertTrue(np.array_equal(E.indicator(feet, 0.0), [1.0, 0.0]))

    def test_flat_sigma(self):
        E = BoundarySubset([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]], [0.5, 0.25])
        self.assertAlmostEqual(E.flat_sigma(1), 1.5)
        self.assertAlmostEqual(E.flat_sigma(2), math.pi * (0.25 + 0.0625))

    def test_inverted_twice(self):
        E = BoundarySubset([[0.0, 0.0, 0.0]], [1.0], set_id='B')
        self.assertFalse(E.inverted().inverted().complement)
        self.assertEqual(E.inverted().set_id, 'B^c')


class ExactModelMeasureTests(SimpleTestCase):
    def test_interval_seen_from_its_height(self):
        value = model_measure_exact(1, [[0.0]], [[1.0, 0.0]], [[0.0]], [1.0])
        self.assertAlmostEqual(float(value[0]), 0.5, places=12)

    def test_whole_boundary(self):
        self.assertTrue(np.array_equal(model_measure_exact(1, [[0.0], [2.0]], [[1.0], [0.5]]), [1.0, 1.0]))

    def test_overlapping_intervals_merge(self):
        merged = model_measure_exact(1, [[0.3]], [[0.7]], [[0.0], [1.0]], [1.0, 1.0])
        single = model_measure_exact(1, [[0.3]], [[0.7]], [[0.5]], [1.5])
        self.assertAlmostEqual(float(merged[0]), float(single[0]), places=12)

    @given(st.floats(-2.0, 2.0), st.floats(0.05, 3.0), st.floats(-1.0, 1.0), st.floats(0.1, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_intervals_add(self, x, s, left, gap):
        pole, height = [[x]], [[s]]
        first = model_measure_exact(1, pole, height, [[left]], [0.5])[0]
        second = model_measure_exact(1, pole, height, [[left + 1.0 + gap]], [0.5])[0]
        both = model_measure_exact(1, pole, height, [[left], [left + 1.0 + gap]], [0.5, 0.5])[0]
        self.assertAlmostEqual(first + second, both, places=12)
        self.assertTrue(0.0 <= both <= 1.0)

    def test_centered_disc(self):
        value = model_measure_exact(2, [[0.0, 0.0]], [[1.0]], [[0.0, 0.0]], [1.0])
        self.assertAlmostEqual(float(value[0]), 1.0 - 1.0 / math.sqrt(2.0), places=7)

    def test_pole_on_gamma(self):
        with self.assertRaises(GeometryError):
            model_measure_exact(1, [[0.0]], [[0.0]], [[0.0]], [1.0])

    def test_overlapping_discs(self):
        with self.assertRaises(ConfigError):
            model_measure_exact(2, [[0.0, 0.0]], [[1.0]], [[0.0, 0.0], [0.5, 0.0]], [1.0, 1.0])

    def test_unsupported_dimension(self):
        with self.assertRaises(ConfigError):
            model_measure_exact(3, [[0.0, 0.0, 0.0]], [[1.0]], [[0.0, 0.0, 0.0]], [1.0])

    def test_exact_source_availability(self):
        self.assertTrue(exact_source_available(plane(), 'model'))
        graph = make_boundary(BoundaryDescriptor(kind='lipschitz_graph', n=3, d=1,
                                                 profiles=[ProfileDescriptor(name='zero')]))
        self.assertFalse(exact_source_available(graph, 'model'))


class MeasureSolverTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.gamma = plane()
        grid = build_grid([-1.0] * 3, [1.0] * 3, cls.gamma, 0.5, 0.125, 2.0, focus_points=[POLE])
        cls.solver = MeasureSolver(assemble(model_operator(1, 3), grid, 'direct'), cls.gamma)

    def test_total_mass_is_one(self):
        self.assertAlmostEqual(self.solver.total_mass(POLE), 1.0, places=9)

    def test_set_and_complement_sum_to_one(self):
        E = BoundarySubset([[0.2, 0.0, 0.0]], [0.4])
        total = self.solver.omega(POLE, E) + self.solver.omega(POLE, E.inverted())
        self.assertAlmostEqual(total, 1.0, places=9)

    def test_close_to_exact_half_space_measure(self):
        E = BoundarySubset([[0.0, 0.0, 0.0]], [0.5])
        estimate = harmonic_measure(self.solver, POLE, E)
        self.assertAlmostEqual(estimate.value, 0.5, delta=0.1)
        self.assertEqual(estimate.resolution, 0.125)
        self.assertEqual(estimate.width, 0.25)

    def test_measure_grows_with_the_set(self):
        small = self.solver.omega(POLE, BoundarySubset([[0.0, 0.0, 0.0]], [0.3]))
        large = self.solver.omega(POLE, BoundarySubset([[0.0, 0.0, 0.0]], [0.6]))
        self.assertLess(small, large)

    @given(st.floats(-0.8, -0.3), st.floats(0.1, 0.2), st.floats(0.1, 0.2), st.floats(0.3, 0.5))
    @settings(max_examples=20, deadline=None)
    def test_omega_adds_over_disjoint_sets(self, left, r1, r2, gap):
        right = left + r1 + gap + r2
        first = BoundarySubset([[left, 0.0, 0.0]], [r1])
        second = BoundarySubset([[right, 0.0, 0.0]], [r2])
        union = BoundarySubset([[left, 0.0, 0.0], [right, 0.0, 0.0]], [r1, r2])
        total = self.solver.omega(POLE, first) + self.solver.omega(POLE, second)
        self.assertAlmostEqual(self.solver.omega(POLE, union), total, places=10)

    def test_pole_in_band(self):
        with self.assertRaises(GeometryError):
            harmonic_measure(self.solver, [0.0, 0.125, 0.0], BoundarySubset([[0.0, 0.0, 0.0]], [0.5]))

    def test_unresolved_set(self):
        with self.assertRaises(AccuracyError):
            harmonic_measure(self.solver, POLE, BoundarySubset([[0.0, 0.0, 0.0]], [0.1]))

    def test_pole_outside_box(self):
        with self.assertRaises(GeometryError):
            self.solver.pole_weights([0.0, 2.0, 0.0])

    def test_battery_and_csv(self):
        cases = [(POLE, BoundarySubset([[0.0, 0.0, 0.0]], [r], set_id=f'B{r}')) for r in (0.3, 0.5)]
        estimates = measure_battery(self.solver, cases, workers=2)
        self.assertEqual([e.set_id for e in estimates], ['B0.3', 'B0.5'])
        with tempfile.TemporaryDirectory() as directory:
            path = measure_csv(estimates, Path(directory) / 'measure.csv')
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'pole,set_id,omega,sigma_fraction,resolution')
        self.assertEqual(len(lines), 3)


class RatioReportTests(SimpleTestCase):
    def test_two_sided_constant(self):
        report = RatioReport.from_ratios([0.5, 1.0, 2.0, math.inf])
        self.assertEqual(report.constant, 2.0)
        self.assertEqual(report.samples, 3)

    def test_no_ratios(self):
        with self.assertRaises(AccuracyError):
            RatioReport.from_ratios([math.nan])

    def test_envelope(self):
        report = AInftyReport(omegas=[0.01, 0.1, 0.4], fractions=[0.05, 0.2, 0.5], thresholds=[0.05, 0.5],
                              envelope=[], skipped=0)
        self.assertEqual(report.envelope_at(0.05), 0.05)
        self.assertEqual(report.envelope_at(0.5), 0.5)
        self.assertEqual(report.envelope_at(0.001), 0.0)
        report.envelope = [report.envelope_at(t) for t in report.thresholds]
        with tempfile.TemporaryDirectory() as directory:
            lines = envelope_csv(report, Path(directory) / 'envelope.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'delta,epsilon')
        self.assertEqual(len(lines), 3)


class ComparabilityTests(SimpleTestCase):
    def test_exact_flat_comparability(self):
        gamma = plane(n=4, d=1)
        X = np.array([0.0, 1.0, 0.0, 0.0])
        sets = comparability_sets(gamma, X, 1.0, 6, 4)
        self.assertTrue(sets)
        result = comparability_check(gamma, 1.0, X, sets)
        self.assertEqual(result.source, 'exact')
        self.assertGreaterEqual(result.constant, 1.0)
        self.assertTrue(math.isfinite(result.constant))

    def test_needs_magic_exponent(self):
        with self.assertRaises(MagicExponentError):
            comparability_check(plane(n=4, d=1), 0.5, [0.0, 1.0, 0.0, 0.0], [])

    def test_curved_boundary_needs_solver(self):
        gamma = make_boundary(BoundaryDescriptor(kind='lipschitz_graph', n=4, d=1, profiles=[
            ProfileDescriptor(name='sine', params={'amplitude': 0.05})]))
        E = BoundarySubset([[0.0, 0.0, 0.0, 0.0]], [0.5])
        with self.assertRaises(ConfigError):
            comparability_check(gamma, 1.0, [0.0, 1.0, 0.0, 0.0], [E])

    def test_set_leaving_reach(self):
        E = BoundarySubset([[3.0, 0.0, 0.0, 0.0]], [0.5])
        with self.assertRaises(GeometryError):
            comparability_check(plane(n=4, d=1), 1.0, [0.0, 1.0, 0.0, 0.0], [E])
