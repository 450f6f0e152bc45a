import math

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from elliptic.boundary_geometry import make_boundary
from elliptic.config import BoundaryDescriptor
from elliptic.degenerate_solver import (CallableData, GaussianData, HatBank, IntervalIndicator, LinearData,
                                        LorentzianData, SolutionField, assemble, build_grid, data_from_descriptor,
                                        graded_axis, green_exponents, green_function, model_oracle, solve_dirichlet,
                                        weak_residual)
from elliptic.exceptions import AccuracyError, BudgetExceededError, ConfigError, GeometryError, OracleError
from elliptic.operator_fields import model_operator, model_weight


def model_problem(h_min=0.125, method='direct', focus_points=None):
    gamma = make_boundary(BoundaryDescriptor(kind='affine_plane', n=3, d=1))
    grid = build_grid([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], gamma, 0.5, h_min, 2.0, focus_points=focus_points)
    return assemble(model_operator(1, 3), grid, method)


class GradedAxisTests(SimpleTestCase):
    @given(st.floats(-0.8, 0.8), st.sampled_from([1 / 16, 1 / 32]), st.floats(1.2, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_spacing_bounds(self, anchor, h_min, ratio):
        axis = graded_axis(-1.0, 1.0, [anchor], h_min, 0.25, ratio)
        steps = np.diff(axis)
        self.assertEqual(axis[0], -1.0)
        self.assertAlmostEqual(axis[-1], 1.0, places=12)
        self.assertTrue(np.all(steps > 0))
        self.assertLessEqual(float(steps.max()), 0.25 + 1e-12)
        self.assertLess(float(np.min(np.abs(axis - anchor))), 1e-12)

    def test_unrefined_axis_uses_h_max(self):
        axis = graded_axis(0.0, 1.0, [], 0.1, 0.25, 2.0)
        self.assertTrue(np.allclose(np.diff(axis), 0.25))

    def test_empty_axis(self):
        with self.assertRaises(GeometryError):
            graded_axis(1.0, 1.0, [], 0.1, 0.25, 2.0)


class GridTests(SimpleTestCase):
    def setUp(self):
        self.gamma = make_boundary(BoundaryDescriptor(kind='affine_plane', n=3, d=1))

    def test_classes_partition_nodes(self):
        grid = build_grid([-1.0] * 3, [1.0] * 3, self.gamma, 0.5, 0.125, 2.0)
        total = len(grid.interior) + len(grid.band) + len(grid.shell)
        self.assertEqual(total, grid.node_count)
        self.assertTrue(np.all(grid.delta[grid.band] <= 0.25))
        self.assertTrue(np.all(grid.delta[grid.interior] > 0.25))

    def test_node_budget(self):
        with self.assertRaises(BudgetExceededError):
            build_grid([-1.0] * 3, [1.0] * 3, self.gamma, 0.5, 1 / 64, 2.0, max_nodes=1000)

    def test_spacing_order(self):
        with self.assertRaises(ConfigError):
            build_grid([-1.0] * 3, [1.0] * 3, self.gamma, 0.1, 0.2, 2.0)

    def test_focus_point_is_a_node(self):
        focus = [0.3, 0.55, -0.4]
        grid = build_grid([-1.0] * 3, [1.0] * 3, self.gamma, 0.5, 0.125, 2.0, focus_points=[focus])
        node = grid.nearest_node(focus)
        self.assertTrue(np.allclose(grid.points(np.array([node]))[0], focus))

    def test_dual_volumes_fill_box(self):
        grid = build_grid([-1.0] * 3, [1.0] * 3, self.gamma, 0.5, 0.125, 2.0)
        self.assertAlmostEqual(float(grid.dual_volumes().sum()), 8.0, places=10)


class DirichletSolveTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.problem = model_problem()

    def test_stiffness_is_symmetric(self):
        K = self.problem.K_II
        self.assertLess(abs(K - K.T).max(), 1e-12 * abs(K).max())

    def test_constants_reproduced(self):
        solution = solve_dirichlet(self.problem, 1.0, 1.0)
        self.assertTrue(np.allclose(solution.values, 1.0, atol=1e-10))

    def test_tangential_linear_function_is_exact(self):
        data = lambda points: points[:, 0]
        solution = solve_dirichlet(self.problem, data, data)
        exact = self.problem.grid.points()[:, 0]
        self.assertTrue(np.allclose(solution.values, exact, atol=1e-9))

    def test_maximum_principle(self):
        grid = self.problem.grid
        rng = np.random.default_rng(3)
        for _ in range(3):
            solution = solve_dirichlet(self.problem, rng.uniform(0, 1, len(grid.band)),
                                       rng.uniform(0, 1, len(grid.shell)))
            self.assertGreaterEqual(float(solution.values.min()), -1e-9)
            self.assertLessEqual(float(solution.values.max()), 1.0 + 1e-9)

    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    @settings(max_examples=10, deadline=None)
    def test_solution_is_linear_in_the_data(self, a, b):
        grid = self.problem.grid
        rng = np.random.default_rng(5)
        f_band, f_shell = rng.uniform(0, 1, len(grid.band)), rng.uniform(0, 1, len(grid.shell))
        g_band, g_shell = rng.uniform(-1, 1, len(grid.band)), rng.uniform(-1, 1, len(grid.shell))
        u = solve_dirichlet(self.problem, f_band, f_shell)
        v = solve_dirichlet(self.problem, g_band, g_shell)
        w = solve_dirichlet(self.problem, a * f_band + b * g_band, a * f_shell + b * g_shell)
        self.assertTrue(np.allclose(w.values, a * u.values + b * v.values, atol=1e-9))

    def test_data_hash_depends_on_data(self):
        first = solve_dirichlet(self.problem, 0.0, 1.0)
        second = solve_dirichlet(self.problem, 0.0, 1.0)
        third = solve_dirichlet(self.problem, 1.0, 0.0)
        self.assertEqual(first.metadata['data_hash'], second.metadata['data_hash'])
        self.assertNotEqual(first.metadata['data_hash'], third.metadata['data_hash'])

    def test_wrong_data_length(self):
        with self.assertRaises(ConfigError):
            solve_dirichlet(self.problem, np.zeros(3), 0.0)

    def test_non_finite_data(self):
        with self.assertRaises(ConfigError):
            solve_dirichlet(self.problem, math.nan, 0.0)

    def test_iterative_matches_direct(self):
        iterative = model_problem(method='iterative')
        data = lambda points: np.exp(-points[:, 0] ** 2)
        direct = solve_dirichlet(self.problem, data, 0.0)
        other = solve_dirichlet(iterative, data, 0.0)
        self.assertTrue(np.allclose(direct.values, other.values, atol=1e-7))

    def test_weak_residual_of_exact_solution(self):
        grid = self.problem.grid
        u = SolutionField(grid, grid.points()[:, 0].copy())
        bank = HatBank(np.array([[0.0, 0.6, 0.0], [0.25, 0.0, -0.6]]), 0.125)
        self.assertLess(weak_residual(u, model_operator(1, 3), bank), 1e-10)


class GreenFunctionTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.problem = model_problem(h_min=0.0625, focus_points=[[0.0, 0.5, 0.0], [0.5, 0.5, 0.0]])

    def test_positive_and_symmetric(self):
        Y, X = [0.0, 0.5, 0.0], [0.5, 0.5, 0.0]
        g_Y, _ = green_function(self.problem, Y)
        g_X, _ = green_function(self.problem, X)
        grid = self.problem.grid
        forward, backward = g_Y.values[grid.nearest_node(X)], g_X.values[grid.nearest_node(Y)]
        self.assertGreater(forward, 0.0)
        self.assertAlmostEqual(forward / backward, 1.0, places=8)
        self.assertGreaterEqual(float(g_Y.values.min()), -1e-12)

    def test_pole_on_band(self):
        with self.assertRaises(GeometryError):
            green_function(self.problem, [0.0, 0.0, 0.0])


class GreenExponentTests(SimpleTestCase):
    scales = [0.25, 0.5]

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        gamma = make_boundary(BoundaryDescriptor(kind='affine_plane', n=3, d=1))
        focus = [[0.0, 2.0, 0.0]] + [point for r in cls.scales for point in ([0.0, r, 0.0], [2.0 * r, r, 0.0])]
        grid = build_grid([-2.0, -4.0, -4.0], [2.0, 4.0, 4.0], gamma, 0.5, 1 / 16, 2.0, band_factor=0.5,
                          focus_points=focus)
        cls.problem = assemble(model_operator(1, 3), grid)

    def test_far_field_is_scale_invariant(self):
        report = green_exponents(self.problem, 1, self.scales, model_weight(1, 3), [0.0, 2.0, 0.0])
        self.assertLess(abs(report.far_field), 0.3)
        self.assertLess(abs(report.near_field + 1.0), 0.5)
        self.assertLess(report.symmetry_error, 1e-4)

    def test_scales_inside_the_band_clearance(self):
        problem = model_problem(h_min=0.0625, focus_points=[[0.0, 0.25, 0.0], [0.5, 0.25, 0.0], [0.0, 0.5, 0.0]])
        with self.assertRaises(AccuracyError):
            green_exponents(problem, 1, [0.25], model_weight(1, 3), [0.0, 0.5, 0.0])


class OracleTests(SimpleTestCase):
    def test_indicator_extension(self):
        g = IntervalIndicator(-1.0, 1.0)
        self.assertAlmostEqual(model_oracle(g, [0.0, 1.0, 0.0]), 0.5, places=12)
        self.assertAlmostEqual(model_oracle(g, [0.0, 0.6, 0.8]), 0.5, places=12)

    def test_discontinuity_on_gamma(self):
        with self.assertRaises(OracleError):
            model_oracle(IntervalIndicator(-1.0, 1.0), [1.0, 0.0, 0.0])

    def test_linear_data_reproduced(self):
        g = LinearData([0.5], 0.25)
        self.assertAlmostEqual(model_oracle(g, [2.0, 0.3, 0.4]), 1.25)

    def test_callable_extension_matches_lorentzian(self):
        x = np.array([[0.0], [0.7], [-1.5]])
        s = np.array([0.2, 0.5, 1.0])
        numeric = CallableData(lambda p: 1.0 / (1.0 + p[:, 0] ** 2)).extension(x, s)
        self.assertTrue(np.allclose(numeric, LorentzianData().extension(x, s), rtol=1e-6))

    def test_gaussian_extension_tends_to_data(self):
        g = GaussianData(0.5)
        x = np.array([[0.0], [0.4]])
        self.assertTrue(np.allclose(g.extension(x, np.full(2, 1e-6)), g(x), rtol=1e-4))

    def test_indicator_band_values_average_over_the_cell(self):
        g = IntervalIndicator(0.0, 1.0)
        x = np.array([[-0.5], [0.0], [0.125], [0.5], [1.0]])
        self.assertTrue(np.allclose(g.band_values(x, 0.5), [0.0, 0.5, 0.75, 1.0, 0.5]))

    def test_smooth_band_values_are_point_values(self):
        g = GaussianData(0.5)
        x = np.array([[0.0], [0.3]])
        self.assertTrue(np.array_equal(g.band_values(x, 0.25), g(x)))

    def test_descriptor(self):
        self.assertEqual(data_from_descriptor({'kind': 'lorentzian'}).name, 'lorentzian')
        with self.assertRaises(ConfigError):
            data_from_descriptor({'kind': 'step'})
