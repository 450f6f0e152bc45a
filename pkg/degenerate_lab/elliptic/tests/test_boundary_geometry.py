import math

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from elliptic.boundary_geometry import (CANTOR_PRESETS, FarFieldTail, corkscrew, distance, harnack_chain,
                                        make_boundary, nearest_points, sigma_quadrature, sphere_area, verify_ar)
from elliptic.config import BoundaryDescriptor, ProfileDescriptor, SimilarityDescriptor
from elliptic.exceptions import AccuracyError, BudgetExceededError, ConfigError, GeometryError


def plane(n=3, d=1):
    return make_boundary(BoundaryDescriptor(kind='affine_plane', n=n, d=d))


def sine_graph(n=3, d=1, amplitude=0.05, frequency=1.0):
    return make_boundary(BoundaryDescriptor(kind='lipschitz_graph', n=n, d=d, profiles=[
        ProfileDescriptor(name='sine', params={'amplitude': amplitude, 'frequency': frequency})]))


def cantor(preset='middle_third', n=3):
    return make_boundary(BoundaryDescriptor(kind='cantor', n=n, preset=preset))


class MakeBoundaryTests(SimpleTestCase):
    def test_dimension_must_leave_codimension_above_one(self):
        with self.assertRaises(GeometryError):
            plane(n=3, d=2)

    def test_fractional_dimension_rejected_for_planes(self):
        with self.assertRaises(GeometryError):
            make_boundary(BoundaryDescriptor(kind='affine_plane', n=4, d=1.5))

    def test_too_many_profiles(self):
        descriptor = BoundaryDescriptor(kind='lipschitz_graph', n=3, d=1,
                                        profiles=[ProfileDescriptor(name='zero')] * 3)
        with self.assertRaises(GeometryError):
            make_boundary(descriptor)

    def test_unknown_profile(self):
        descriptor = BoundaryDescriptor(kind='lipschitz_graph', n=3, d=1, profiles=[ProfileDescriptor(name='zigzag')])
        with self.assertRaises(ConfigError):
            make_boundary(descriptor)

    def test_middle_third_dimension(self):
        gamma = cantor()
        self.assertAlmostEqual(gamma.d, math.log(2) / math.log(3), places=10)
        self.assertAlmostEqual(float(gamma.probabilities.sum()), 1.0, places=12)

    def test_four_corner_is_one_dimensional(self):
        self.assertAlmostEqual(cantor('four_corner').d, 1.0, places=10)

    def test_inconsistent_declared_dimension(self):
        descriptor = BoundaryDescriptor(kind='cantor', n=3, dimension=0.9, maps=[
            SimilarityDescriptor(ratio=1 / 3, offset=[0.0, 0.0, 0.0]),
            SimilarityDescriptor(ratio=1 / 3, offset=[2 / 3, 0.0, 0.0])])
        with self.assertRaises(GeometryError):
            make_boundary(descriptor)

    def test_unknown_preset(self):
        self.assertNotIn('sierpinski', CANTOR_PRESETS)
        with self.assertRaises(ConfigError):
            make_boundary(BoundaryDescriptor(kind='cantor', n=3, preset='sierpinski'))

    def test_sine_lipschitz_constant(self):
        self.assertAlmostEqual(sine_graph(amplitude=0.05, frequency=2.0).lipschitz, 0.1)


class QuadratureTests(SimpleTestCase):
    def test_plane_window_mass_is_window_volume(self):
        rule = sigma_quadrature(plane(n=4, d=2), 4, window=([-1.0, -0.5], [1.0, 0.5]))
        self.assertAlmostEqual(rule.total_mass, 2.0, places=12)
        self.assertEqual(len(rule), 17 ** 2)

    def test_graph_mass_matches_arc_length(self):
        gamma = sine_graph(amplitude=0.3, frequency=1.0)
        rule = sigma_quadrature(gamma, 9, window=([0.0], [2 * math.pi]))
        exact = 2 * math.pi * 1.0221338
        self.assertAlmostEqual(rule.total_mass / exact, 1.0, places=4)

    def test_cantor_mass_is_one(self):
        rule = sigma_quadrature(cantor(), 8)
        self.assertEqual(len(rule), 256)
        self.assertAlmostEqual(rule.total_mass, 1.0, places=12)

    def test_far_shells_attach_tail(self):
        rule = sigma_quadrature(plane(), 4, window=([-1.0], [1.0]), far_radius=8.0)
        self.assertGreater(len(rule), rule.inner_count)
        self.assertIsNotNone(rule.tail)
        self.assertAlmostEqual(rule.window_mass, 2.0, places=12)

    def test_budget(self):
        with self.assertRaises(BudgetExceededError) as context:
            sigma_quadrature(plane(n=4, d=2), 10, max_nodes=1000)
        self.assertEqual(context.exception.exit_code, 3)

    def test_negative_level(self):
        with self.assertRaises(GeometryError):
            sigma_quadrature(plane(), -1)

    def test_far_field_tail_one_dimensional(self):
        tail = FarFieldTail(1, 4.0, 2.0)
        self.assertAlmostEqual(tail.value(1.0), 2.0 / 4.0)

    def test_sphere_area(self):
        self.assertAlmostEqual(sphere_area(2), 2 * math.pi)
        self.assertAlmostEqual(sphere_area(3), 4 * math.pi)


class DistanceTests(SimpleTestCase):
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_plane_distance_is_normal_norm(self, x, t1, t2):
        self.assertAlmostEqual(distance(plane(), [x, t1, t2]), math.hypot(t1, t2), places=12)

    def test_graph_distance_not_above_vertical_gap(self):
        gamma = sine_graph(amplitude=0.05)
        points = np.array([[0.3, 0.5, 0.0], [1.2, -0.2, 0.4], [-0.7, 0.1, -0.3]])
        result = nearest_points(gamma, points)
        vertical = np.linalg.norm(points[:, 1:] - gamma.embed(points[:, :1])[:, 1:], axis=1)
        self.assertTrue(np.all(result.distance <= vertical + 1e-12))
        self.assertTrue(np.allclose(np.linalg.norm(points - result.feet, axis=1), result.distance))

    @given(st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
           st.floats(-0.5, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_graph_distance_is_one_lipschitz(self, x, t1, t2, dx, dt1, dt2):
        gamma = sine_graph(amplitude=0.1)
        X, Y = [x, t1, t2], [x + dx, t1 + dt1, t2 + dt2]
        gap = abs(distance(gamma, X) - distance(gamma, Y))
        self.assertLessEqual(gap, math.dist(X, Y) + 1e-8)

    def test_cantor_distance_needs_rule(self):
        with self.assertRaises(AccuracyError):
            distance(cantor(), [0.5, 1.0, 0.0])

    def test_cantor_distance_error_bound(self):
        gamma = cantor()
        rule = sigma_quadrature(gamma, 8)
        result = nearest_points(gamma, [[0.5, 1.0, 0.0]], rule)
        self.assertAlmostEqual(float(result.error[0]), rule.covering_radius)
        self.assertGreater(float(result.distance[0]), 0.9)

    def test_wrong_dimension(self):
        with self.assertRaises(GeometryError):
            distance(plane(), [1.0, 2.0])


class RegularityTests(SimpleTestCase):
    def test_plane_ahlfors_constant(self):
        gamma = plane()
        rule = sigma_quadrature(gamma, 8, window=([-4.0], [4.0]))
        report = verify_ar(gamma, rule, 50, 7)
        self.assertEqual(report.samples, 50)
        self.assertLess(report.c0_estimate, 2.3)

    def test_cantor_ahlfors_constant_bounded(self):
        gamma = cantor('four_corner')
        rule = sigma_quadrature(gamma, 6)
        self.assertLess(verify_ar(gamma, rule, 40, 3).c0_estimate, 20.0)

    def test_coarse_rule(self):
        gamma = plane()
        rule = sigma_quadrature(gamma, 1, window=([-1.0], [1.0]))
        with self.assertRaises(AccuracyError):
            verify_ar(gamma, rule, 10, 0)

    def test_corkscrew_on_plane(self):
        point = corkscrew(plane(), [0.0, 0.0, 0.0], 1.0)
        self.assertAlmostEqual(point.delta, 0.5, places=12)
        self.assertAlmostEqual(point.c1, 2.0, places=12)

    def test_corkscrew_needs_positive_radius(self):
        with self.assertRaises(GeometryError):
            corkscrew(plane(), [0.0, 0.0, 0.0], 0.0)

    def test_corkscrew_radius_below_diameter(self):
        gamma = cantor()
        rule = sigma_quadrature(gamma, 6)
        self.assertGreater(corkscrew(gamma, rule.nodes[0], 0.9 * gamma.diameter, rule).delta, 0.0)
        with self.assertRaises(GeometryError):
            corkscrew(gamma, rule.nodes[0], gamma.diameter, rule)

    def test_harnack_chain_links(self):
        gamma = sine_graph()
        chain = harnack_chain(gamma, [0.0, 0.05, 0.0], [1.5, 0.0, 0.4])
        self.assertGreater(chain.length, 1)
        self.assertLessEqual(max(chain.ratios), 0.5)
        self.assertEqual(chain.points[-1], [1.5, 0.0, 0.4])

    def test_harnack_chain_same_point(self):
        chain = harnack_chain(plane(), [0.0, 1.0, 0.0], [0.0, 1.0, 0.0])
        self.assertEqual(chain.length, 0)
