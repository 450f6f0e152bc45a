"""
    Experiment runner: the check registry, run / sweep / catalog and report bundles.

    A run validates its config, executes the listed checks in order and writes
    report.json next to the per-check CSVs. CSV bodies depend on the config and
    seed only; wall-clock times and the environment stamp live in report.json.
"""
import hashlib
import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import django
import numpy as np
import scipy
from django.conf import settings
from django.utils import timezone
from pydantic import BaseModel, Field
from traceback_with_variables import format_exc

from elliptic.boundary_functionals import (Cutoff, NodalSample, boundary_grid, bmo_norm, caccioppoli_check,
                                           carleson_energy, energy, functional_csv, nontangential_max,
                                           ns_bounds_check, oscillation_decay, p_ellipticity_check, poincare_bank,
                                           poincare_check, random_sawtooth, sobolev_poincare_check, square_function,
                                           square_function_fubini, trace_gap, trace_h_norm, wp_norm)
from elliptic.boundary_geometry import (BoundarySet, QuadratureRule, corkscrew, export_quadrature_csv, harnack_chain,
                                        make_boundary, nearest_points, quadrature_from_descriptor, verify_ar)
from elliptic.config import (BoundaryDescriptor, CheckSpec, ExperimentConfig, GridConfig, OperatorDescriptor,
                             ProfileDescriptor, load_config, parse_config, set_by_path)
from elliptic.degenerate_solver import (ConstantData, GaussianData, IntervalIndicator, LinearData, LorentzianData,
                                        HatBank, assemble, export_solution_csv, export_structured_mesh,
                                        green_exponents, green_function, grid_from_config, oracle_data,
                                        solve_dirichlet, weak_residual)
from elliptic.elliptic_measure import (BoundarySubset, MeasureSolver, ainfty_probe, boundary_comparison_check,
                                       change_of_pole_check, comparability_check, comparability_sets, doubling_check,
                                       envelope_csv, green_measure_compare, green_measure_compare_inner,
                                       harmonic_measure, harnack_pole_check, measure_csv, model_measure_exact,
                                       nondegeneracy_check, random_sub_balls, sample_poles)
from elliptic.enums import BoundaryKind, OperatorKind, WeightMode
from elliptic.exceptions import BudgetExceededError, ConfigError, DegenerateLabError
from elliptic.operator_fields import (TentRule, build_operator, c3_from_comparability, carleson_norm,
                                      cov_from_descriptor, default_ball_family, ellipticity_constants,
                                      measure_m_ball, model_operator, model_weight, radial_lift,
                                      structure_decompose, weight_ratio_field, weight_w)
from elliptic.regularized_distance import (beta_carleson, beta_csv, comparability_scan, d_alpha_jet,
                                           magic_residual, regularized_distance_csv, sample_off_boundary)
from elliptic.reports import CheckRow, carleson_csv, check_rows_csv, write_rows_csv

logger = logging.getLogger(__name__)

FLOATING_FLOOR = 1e-10


class CheckOutcome(BaseModel):
    value: float = Field(..., description='Measured value compared against the tolerance')
    passed: bool
    details: Dict[str, Any] = Field(default_factory=dict)


class CheckRecord(BaseModel):
    name: str
    value: Optional[float] = None
    tolerance: Optional[float] = None
    passed: bool
    mandatory: bool = True
    wall_clock: float = Field(..., description='Seconds spent in the check')
    message: str = ''
    details: Dict[str, Any] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list, description='CSV files written by the check')


class ReportBundle(BaseModel):
    experiment_id: str
    description: str = ''
    anchor: str = ''
    config_hash: str
    seed: int
    passed: bool = Field(..., description='True when every mandatory check passed')
    checks: List[CheckRecord]
    environment: Dict[str, Any]
    output_dir: str

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def write(self) -> Path:
        path = Path(self.output_dir) / 'report.json'
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding='utf-8')
        return path


class CatalogEntry(BaseModel):
    id: str
    description: str
    anchor: str
    path: str
    checks: List[str]


def environment_stamp() -> Dict[str, Any]:
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'django': django.get_version(),
        'platform': platform.platform(),
        'started_at': timezone.now().isoformat(),
    }


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, BaseModel):
        return _jsonable(value.model_dump())
    return value


class RunContext(object):
    """
        Shared state of one run: the boundary, cached quadrature rules, budgets and the output directory
    """

    def __init__(self, config: ExperimentConfig, output_dir: Path, workers: int = 1,
                 node_cap: Optional[int] = None, quadrature_cap: Optional[int] = None):
        self.config = config
        self.output_dir = Path(output_dir)
        self.workers = max(1, workers)
        self.max_nodes = min(config.budget.max_nodes, node_cap or config.budget.max_nodes)
        self.max_quadrature_nodes = min(config.budget.max_quadrature_nodes,
                                        quadrature_cap or config.budget.max_quadrature_nodes)
        self.max_cubature_points = config.budget.max_cubature_points
        self.prefix = 'check'
        self.files: List[str] = []
        self._gamma: Optional[BoundarySet] = None
        self._rules: Dict[int, Optional[QuadratureRule]] = {}

    def fork(self, subdir: str) -> 'RunContext':
        return RunContext(self.config, self.output_dir / subdir, self.workers, self.max_nodes,
                          self.max_quadrature_nodes)

    @property
    def gamma(self) -> BoundarySet:
        if self._gamma is None:
            self._gamma = make_boundary(self.config.boundary)
        return self._gamma

    @property
    def n(self) -> int:
        return self.gamma.n

    @property
    def d(self) -> int:
        return int(self.gamma.d)

    def rule(self, level: Optional[int] = None, gamma: Optional[BoundarySet] = None) -> Optional[QuadratureRule]:
        """
            Quadrature at the configured level (or level); flat planes without a window use closed forms
        """
        gamma = gamma or self.gamma
        quadrature = self.config.quadrature
        if gamma.kind == BoundaryKind.AFFINE_PLANE and quadrature.window is None:
            return None
        level = quadrature.level if level is None else level
        if gamma is not self.gamma:
            return quadrature_from_descriptor(gamma, quadrature, self.max_quadrature_nodes, level)
        if level not in self._rules:
            self._rules[level] = quadrature_from_descriptor(gamma, quadrature, self.max_quadrature_nodes, level)
        return self._rules[level]

    def grid(self, gamma: Optional[BoundarySet] = None, rule: Optional[QuadratureRule] = None,
             focus_points: Optional[Sequence[Sequence[float]]] = None, h_min: Optional[float] = None,
             h_max: Optional[float] = None):
        if self.config.grid is None:
            raise ConfigError(f'{self.prefix} needs a grid block in the config')
        grid_config = self.config.grid
        update = {key: float(value) for key, value in (('h_min', h_min), ('h_max', h_max)) if value is not None}
        if update:
            grid_config = grid_config.model_copy(update=update)
        return grid_from_config(grid_config, gamma or self.gamma, rule, self.max_nodes, focus_points)

    def problem(self, field, grid):
        grid_config = self.config.grid
        return assemble(field, grid, grid_config.method, grid_config.rtol, grid_config.max_iterations)

    def operator(self, spec: Optional[OperatorDescriptor] = None, gamma: Optional[BoundarySet] = None,
                 rule: Optional[QuadratureRule] = None):
        gamma = gamma or self.gamma
        return build_operator(spec or self.config.operator, gamma, rule)

    def param(self, spec: CheckSpec, key: str, default: Any = None) -> Any:
        """
            Check parameter, falling back to the sweepable top-level parameters block
        """
        if key in spec.params:
            return spec.params[key]
        return self.config.parameters.get(key, default)

    def alpha(self, spec: CheckSpec) -> float:
        value = self.param(spec, 'alpha', self.config.operator.alpha)
        if value is None or value == 'magic':
            return self.gamma.n - self.gamma.d - 2.0
        return float(value)

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.config.seed + offset)

    def path(self, suffix: str, extension: str = 'csv') -> Path:
        path = self.output_dir / f'{self.prefix}_{suffix}.{extension}'
        self.files.append(path.name)
        return path


CheckFunction = Callable[[RunContext, CheckSpec], CheckOutcome]
CHECKS: Dict[str, CheckFunction] = {}


def register_check(name: str) -> Callable[[CheckFunction], CheckFunction]:
    def decorator(fn: CheckFunction) -> CheckFunction:
        CHECKS[name] = fn
        return fn

    return decorator


def _tolerance(spec: CheckSpec, default: float) -> float:
    return default if spec.tolerance is None else float(spec.tolerance)


def _off_boundary_points(ctx: RunContext, rule: Optional[QuadratureRule], count: int, rng: np.random.Generator,
                         min_delta: float, max_delta: float) -> np.ndarray:
    if rule is not None:
        return sample_off_boundary(ctx.gamma, rule, count, rng, min_delta, max_delta)
    d, n = ctx.d, ctx.n
    points = np.zeros((count, n))
    points[:, :d] = rng.uniform(-0.5, 0.5, size=(count, d))
    normals = rng.standard_normal((count, n - d))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    heights = np.exp(rng.uniform(math.log(min_delta), math.log(max_delta), size=count))
    points[:, d:] = heights[:, None] * normals
    return points


def _unit_height(n: int, d: int, height: float = 1.0) -> np.ndarray:
    point = np.zeros(n)
    point[d] = height
    return point


@register_check('magic_residual_battery')
def check_magic_residual(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        R(X) at the configured level and one level finer, plus the non-magic comparison
    """
    tolerance = _tolerance(spec, 1e-3)
    alpha = ctx.alpha(spec)
    samples = int(ctx.param(spec, 'samples', 100))
    level = ctx.config.quadrature.level
    coarse, fine = ctx.rule(level), ctx.rule(level + 1)
    h = coarse.covering_radius if coarse is not None else 1.0 / 64
    max_delta = float(ctx.param(spec, 'max_delta', 1.0))
    points = _off_boundary_points(ctx, coarse, samples, ctx.rng(), 8.0 * h, max_delta)

    coarse_residual = magic_residual(ctx.gamma, coarse, alpha, points)
    fine_residual = magic_residual(ctx.gamma, fine, alpha, points)
    jet = d_alpha_jet(ctx.gamma, fine, alpha, points, order=2)
    regularized_distance_csv(points, jet, fine_residual, ctx.path('residuals'))

    median_coarse, median_fine = float(np.median(coarse_residual)), float(np.median(fine_residual))
    at_floor = coarse_residual.max() <= FLOATING_FLOOR and fine_residual.max() <= FLOATING_FLOOR
    decrease = median_coarse / median_fine if median_fine > 0 else math.inf
    refines = at_floor or decrease >= 2.0
    passed = bool(fine_residual.max() <= tolerance and refines)
    details = {'alpha': alpha, 'median_coarse': median_coarse, 'median_fine': median_fine,
               'max_fine': float(fine_residual.max()), 'refinement_decrease': decrease, 'at_floor': at_floor}
    levels = [(level, median_coarse, float(coarse_residual.max())), (level + 1, median_fine,
                                                                     float(fine_residual.max()))]

    non_magic = ctx.param(spec, 'non_magic_alpha')
    if non_magic is not None:
        other = magic_residual(ctx.gamma, fine, float(non_magic), points)
        median_other = float(np.median(other))
        separation = median_other / max(median_fine, np.finfo(float).tiny)
        details.update({'non_magic_alpha': float(non_magic), 'median_non_magic': median_other,
                        'separation': separation})
        passed = passed and separation >= 10.0
    write_rows_csv(ctx.path('levels'), ['level', 'median', 'max'], levels)
    return CheckOutcome(value=float(fine_residual.max()), passed=passed, details=details)


def _oracle_battery(count: int, rng: np.random.Generator) -> List:
    battery = []
    for index in range(count):
        kind = index % 5
        if kind == 0:
            a = rng.uniform(-1.0, 0.0)
            battery.append(IntervalIndicator(a, a + rng.uniform(0.5, 1.5)))
        elif kind == 1:
            battery.append(GaussianData(rng.uniform(0.2, 0.6), rng.uniform(0.5, 1.0), rng.uniform(-0.5, 0.5)))
        elif kind == 2:
            battery.append(LorentzianData())
        elif kind == 3:
            battery.append(LinearData([rng.uniform(-0.5, 0.5)], rng.uniform(-0.5, 0.5)))
        else:
            battery.append(ConstantData(rng.uniform(-1.0, 1.0)))
    return battery


def oracle_resolutions(grid_config: GridConfig, h_min_values: Optional[Sequence[float]] = None,
                       h_max_values: Optional[Sequence[float]] = None) -> List[Tuple[float, float]]:
    """
        (h_min, h_max) per refinement level; h_max follows h_min at the configured ratio unless listed
    """
    h_mins = [float(h) for h in (h_min_values or [2.0 * grid_config.h_min, grid_config.h_min])]
    if h_max_values is None:
        h_maxes = [grid_config.h_max * h / grid_config.h_min for h in h_mins]
    else:
        h_maxes = [float(h) for h in h_max_values]
        if len(h_maxes) != len(h_mins):
            raise ConfigError(f'h_max_values has {len(h_maxes)} entries for {len(h_mins)} h_min_values')
    for h_min, h_max in zip(h_mins, h_maxes):
        if not 0.0 < h_min < h_max:
            raise ConfigError(f'resolution h_min={h_min:g}, h_max={h_max:g} needs 0 < h_min < h_max')
    return list(zip(h_mins, h_maxes))


def _oracle_errors(ctx: RunContext, spec: CheckSpec, resolution: Tuple[float, float],
                   battery: Sequence) -> Tuple[List[float], Dict]:
    d = ctx.d
    h_min, h_max = resolution
    grid = ctx.grid(h_min=h_min, h_max=h_max)
    field = model_operator(d, ctx.n)
    problem = ctx.problem(field, grid)
    evaluate = grid.interior[grid.delta[grid.interior] >= float(ctx.param(spec, 'eval_min_delta', 0.25))]
    points = grid.points(evaluate)
    errors, extras = [], {}
    for g in battery:
        solution = solve_dirichlet(problem, lambda p, g=g: g.band_values(p[:, :d], h_min), oracle_data(g, d))
        exact = oracle_data(g, d)(points)
        scale = max(1.0, float(np.max(np.abs(solution.values[problem.dirichlet]))))
        errors.append(float(np.max(np.abs(solution.values[evaluate] - exact))) / scale)
        if not extras:
            centers = grid.points(evaluate[:: max(1, len(evaluate) // 8)])[:8]
            extras['weak_residual'] = weak_residual(solution, field,
                                                    HatBank(centers, float(ctx.param(spec, 'hat_width', 0.125))))
            if ctx.param(spec, 'export', False):
                export_solution_csv(solution, ctx.path(f'solution_h{h_min:g}'))
                export_structured_mesh(solution, ctx.path(f'mesh_h{h_min:g}', 'txt'))
    return errors, extras


@register_check('oracle_agreement')
def check_oracle_agreement(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Model solves against the half-space Poisson oracle on a refinement of the whole grid
    """
    if not ctx.gamma.is_flat or ctx.d != 1:
        raise ConfigError('oracle_agreement runs on a flat line')
    if ctx.config.grid is None:
        raise ConfigError('oracle_agreement needs a grid block in the config')
    tolerance = _tolerance(spec, 0.02)
    resolutions = oracle_resolutions(ctx.config.grid, ctx.param(spec, 'h_min_values'),
                                     ctx.param(spec, 'h_max_values'))
    battery = _oracle_battery(int(ctx.param(spec, 'cases', 20)), ctx.rng())
    with ThreadPoolExecutor(max_workers=min(ctx.workers, len(resolutions))) as pool:
        results = list(pool.map(lambda pair: _oracle_errors(ctx, spec, pair, battery), resolutions))
    rows = []
    for (h_min, h_max), (errors, _) in zip(resolutions, results):
        rows.extend((index, g.name, h_min, h_max, e) for index, (g, e) in enumerate(zip(battery, errors)))
    write_rows_csv(ctx.path('errors'), ['case', 'data', 'h_min', 'h_max', 'error'], rows)

    worst = [max(errors) for errors, _ in results]
    finest = worst[-1]
    ratio = worst[-2] / finest if len(worst) > 1 and finest > 0 else math.inf
    converges = len(worst) < 2 or finest <= FLOATING_FLOOR or ratio >= float(ctx.param(spec, 'min_ratio', 1.7))
    details = {'sup_errors': dict(zip([f'{h:g}' for h, _ in resolutions], worst)),
               'h_max': [h for _, h in resolutions], 'error_ratio': ratio,
               'weak_residual': results[-1][1].get('weak_residual')}
    return CheckOutcome(value=finest, passed=bool(finest <= tolerance and converges), details=details)


@register_check('exact_measure_value')
def check_exact_measure(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        w^X(B(center, radius)) for the model operator against the closed form and the expected value
    """
    d, n = ctx.d, ctx.n
    X = np.asarray(ctx.param(spec, 'pole', _unit_height(n, d).tolist()), dtype=float)
    center = np.zeros(n)
    center[:d] = ctx.param(spec, 'center', [0.0] * d)
    radius = float(ctx.param(spec, 'radius', 1.0))
    expected = float(ctx.param(spec, 'expected', 0.5))
    grid = ctx.grid(focus_points=[X.tolist()])
    problem = ctx.problem(model_operator(d, n), grid)
    solver = MeasureSolver(problem, ctx.gamma)
    E = BoundarySubset([center], [radius], set_id='E')
    estimate = harmonic_measure(solver, X, E)
    complement = harmonic_measure(solver, X, E.inverted())
    exact = float(model_measure_exact(d, X[None, :d], X[None, d:], [center], [radius])[0])
    measure_csv([estimate, complement], ctx.path('measure'))
    error = abs(estimate.value - expected)
    details = {'estimate': estimate.value, 'closed_form': exact, 'expected': expected,
               'total_mass': estimate.value + complement.value, 'representing_mass': solver.total_mass(X)}
    return CheckOutcome(value=error, passed=bool(error <= _tolerance(spec, 0.02)), details=details)


@register_check('m_doubling')
def check_m_doubling(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Single constant C with m(B(X, 2s)) / m(B(X, s)) in [2^{d+1} / C, C 2^n]
    """
    gamma, rule = ctx.gamma, ctx.rule()
    rng = ctx.rng()
    samples = int(ctx.param(spec, 'samples', 100))
    on_boundary = float(ctx.param(spec, 'on_boundary_fraction', 0.25))
    s_range = ctx.param(spec, 's_range', [0.05, 1.0])
    depth = int(ctx.param(spec, 'max_depth', 4))
    weight = weight_w(gamma, WeightMode.EUCLIDEAN, rule)
    h = rule.covering_radius if rule is not None else 1.0 / 64
    points = _off_boundary_points(ctx, rule, samples, rng, 4.0 * h, 1.0)
    flags = rng.uniform(size=samples) < on_boundary
    points[flags] = nearest_points(gamma, points[flags], rule).feet
    radii = np.exp(rng.uniform(math.log(s_range[0]), math.log(s_range[1]), size=samples))

    rows, constants = [], []
    for X, s in zip(points, radii):
        small = measure_m_ball(weight, X, s, gamma, rule, max_depth=depth, max_points=ctx.max_cubature_points)
        large = measure_m_ball(weight, X, 2.0 * s, gamma, rule, max_depth=depth,
                               max_points=ctx.max_cubature_points)
        q = large.value / small.value
        constant = max(2.0 ** (gamma.d + 1.0) / q, q / 2.0 ** gamma.n, 1.0)
        constants.append(constant)
        rows.append((' '.join(format(v, '.17g') for v in X), s, q, constant))
    write_rows_csv(ctx.path('ratios'), ['center', 's', 'ratio', 'constant'], rows)
    worst = float(max(constants))
    return CheckOutcome(value=worst, passed=bool(worst <= _tolerance(spec, 10.0)),
                        details={'samples': samples, 'median_constant': float(np.median(constants))})


@register_check('green_exponents')
def check_green_exponents(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    d, n = ctx.d, ctx.n
    scales = [float(r) for r in ctx.param(spec, 'scales', [0.25, 0.5, 1.0])]
    near_pole = np.asarray(ctx.param(spec, 'near_pole', _unit_height(n, d).tolist()), dtype=float)
    focus = [near_pole.tolist()]
    for r in scales:
        Y = _unit_height(n, d, r)
        X = Y.copy()
        X[0] = 2.0 * r
        focus.extend([Y.tolist(), X.tolist()])
    grid = ctx.grid(focus_points=focus)
    problem = ctx.problem(ctx.operator(), grid)
    report = green_exponents(problem, d, scales, model_weight(d, n), near_pole)
    green, _ = green_function(problem, near_pole)
    positivity = float(green.values.min() / green.values.max())
    tolerance = _tolerance(spec, 0.3)
    far_gap = abs(report.far_field - (1.0 - d))
    near_gap = abs(report.near_field - (2.0 - n))
    passed = far_gap <= tolerance and near_gap <= tolerance and positivity >= -1e-12
    symmetry_tolerance = ctx.param(spec, 'symmetry_tolerance')
    if symmetry_tolerance is not None:
        passed = passed and report.symmetry_error <= float(symmetry_tolerance)
    write_rows_csv(ctx.path('exponents'), ['quantity', 'value', 'expected'],
                   [('far_field', report.far_field, 1.0 - d), ('near_field', report.near_field, 2.0 - n),
                    ('near_ratio_min', report.near_ratio_min, ''), ('near_ratio_max', report.near_ratio_max, ''),
                    ('symmetry_error', report.symmetry_error, 0.0)])
    details = dict(report.model_dump(), min_over_max=positivity, method=problem.resolved_method())
    return CheckOutcome(value=max(far_gap, near_gap), passed=bool(passed), details=details)


@register_check('max_principle')
def check_max_principle(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Random data in [0, 1] on every Dirichlet node; the solution must stay in [0, 1]
    """
    rule = ctx.rule()
    grid = ctx.grid(rule=rule)
    problem = ctx.problem(ctx.operator(rule=rule), grid)
    rng = ctx.rng()
    rows, worst = [], 0.0
    for index in range(int(ctx.param(spec, 'cases', 50))):
        solution = solve_dirichlet(problem, rng.uniform(0.0, 1.0, len(grid.band)),
                                   rng.uniform(0.0, 1.0, len(grid.shell)), check_max_principle=False)
        low, high = float(solution.values.min()), float(solution.values.max())
        violation = max(0.0, -low, high - 1.0)
        worst = max(worst, violation)
        rows.append((index, low, high, violation, solution.metadata['data_hash']))
    write_rows_csv(ctx.path('ranges'), ['case', 'min', 'max', 'violation', 'data_hash'], rows)
    return CheckOutcome(value=worst, passed=bool(worst <= _tolerance(spec, 1e-9)),
                        details={'scalar': problem.is_scalar, 'method': problem.resolved_method()})


def _graph_with_lipschitz(ctx: RunContext, epsilon: float, frequency: float) -> BoundarySet:
    """
        The configured graph with its profile replaced by a sine of Lipschitz constant epsilon
    """
    if ctx.config.boundary.kind == BoundaryKind.CANTOR:
        raise ConfigError('Lipschitz scaling studies need a graph boundary')
    profile = ProfileDescriptor(name='sine', params={'amplitude': epsilon / frequency, 'frequency': frequency})
    descriptor = ctx.config.boundary.model_copy(update={'kind': BoundaryKind.LIPSCHITZ_GRAPH,
                                                        'profiles': [profile]})
    return make_boundary(descriptor)


def _tent(ctx: RunContext, spec: CheckSpec) -> TentRule:
    raw = ctx.param(spec, 'tent', {})
    return TentRule(ctx.d, ctx.n, bands=int(raw.get('bands', 6)), band_order=int(raw.get('band_order', 2)),
                    x_order=int(raw.get('x_order', 4)), directions=int(raw.get('directions', 4)))


def _balls(ctx: RunContext, spec: CheckSpec) -> List[Tuple[List[float], float]]:
    raw = ctx.param(spec, 'balls')
    if raw is None:
        return default_ball_family(ctx.d, radii=(0.5,), spread=0.25, per_axis=2)
    return [(list(map(float, center)), float(r)) for center, r in raw]


@register_check('carleson_scaling')
def check_carleson_scaling(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Structure decomposition of the conjugated operator on graphs of decreasing Lipschitz constant
    """
    epsilons = ctx.param(spec, 'epsilons')
    if epsilons is None:
        epsilons = [ctx.param(spec, 'epsilon', 0.1)]
    epsilons = sorted((float(e) for e in epsilons), reverse=True)
    frequency = float(ctx.param(spec, 'frequency', 1.0))
    tent, balls = _tent(ctx, spec), _balls(ctx, spec)
    totals, rows = [], []
    for epsilon in epsilons:
        gamma = _graph_with_lipschitz(ctx, epsilon, frequency)
        field = ctx.operator(gamma=gamma)
        report = structure_decompose(field, ctx.d, balls, tent)
        totals.append(report.total)
        rows.append([epsilon] + [report.norms[k] for k in sorted(report.norms)] + [report.total, report.b_min,
                                                                                    report.b_max])
        carleson_csv(report.reports['C4'], ctx.path(f'c4_eps{epsilon:g}'))
    names = sorted(report.norms)
    write_rows_csv(ctx.path('norms'), ['epsilon'] + names + ['total', 'b_min', 'b_max'], rows)
    ratios = [a / b for a, b in zip(totals[:-1], totals[1:]) if b > 0]
    low, high = ctx.param(spec, 'ratio_range', [2.5, 6.0])
    if ratios:
        passed = all(low <= r <= high for r in ratios)
        value = float(min(ratios))
    else:
        passed = bool(np.isfinite(totals[0]))
        value = float(totals[0])
    return CheckOutcome(value=value, passed=bool(passed),
                        details={'epsilons': epsilons, 'totals': totals, 'ratios': ratios})


def _probe(ctx: RunContext, spec: CheckSpec, gamma: BoundarySet, operator: OperatorDescriptor, balls,
           exact_shell: Optional[bool], offset: int):
    rule = ctx.rule(gamma=gamma)
    poles = [corkscrew(gamma, center, r, rule).point for center, r in balls]
    grid = ctx.grid(gamma=gamma, rule=rule, focus_points=poles)
    problem = ctx.problem(ctx.operator(operator, gamma, rule), grid)
    solver = MeasureSolver(problem, gamma, rule, exact_shell=exact_shell)
    thresholds = [float(t) for t in ctx.param(spec, 'thresholds', [0.005, 0.01, 0.02, 0.05, 0.1, 0.2])]
    return ainfty_probe(solver, balls, int(ctx.param(spec, 'sets_per_ball', 40)), thresholds,
                        ctx.config.seed + offset)


@register_check('ainfty_evidence')
def check_ainfty(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Envelope epsilon(delta) for the configured operator and, optionally, for an insulated-layer contrast
    """
    n, d = ctx.n, ctx.d
    bound = _tolerance(spec, 0.2)
    at = float(ctx.param(spec, 'at', 0.01))
    balls = _balls(ctx, spec)
    for center, _ in balls:
        center.extend([0.0] * (n - len(center)))
    report = _probe(ctx, spec, ctx.gamma, ctx.config.operator, balls, None, 0)
    envelope_csv(report, ctx.path('envelope'))
    monotone = all(a <= b for a, b in zip(report.envelope[:-1], report.envelope[1:]))
    value = report.envelope_at(at)
    passed = monotone and value <= bound
    details = {'envelope': dict(zip(map(str, report.thresholds), report.envelope)), 'theta': report.theta,
               'sets': len(report.omegas), 'skipped': report.skipped, 'monotone': monotone}

    contrast = ctx.param(spec, 'contrast')
    if contrast is not None:
        boundary = BoundaryDescriptor.model_validate(contrast.get('boundary', {'kind': BoundaryKind.AFFINE_PLANE,
                                                                               'n': n, 'd': d}))
        operator = OperatorDescriptor.model_validate(contrast.get('operator', {
            'kind': OperatorKind.LIFT, 'coefficients': {'family': 'layered_contrast'}}))
        contrast_balls = [(list(map(float, c)) + [0.0] * (n - len(c)), float(r))
                          for c, r in contrast.get('balls', [[[0.0] * d, 0.5]])]
        contrast_report = _probe(ctx, spec, make_boundary(boundary), operator, contrast_balls, False, 1)
        envelope_csv(contrast_report, ctx.path('contrast_envelope'))
        contrast_value = contrast_report.envelope_at(at)
        details['contrast_envelope'] = dict(zip(map(str, contrast_report.thresholds), contrast_report.envelope))
        details['contrast_violates'] = contrast_value > bound
        if contrast.get('required', True):
            passed = passed and contrast_value > bound
    return CheckOutcome(value=value, passed=bool(passed), details=details)


@register_check('measure_comparability')
def check_comparability(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Two-sided comparability of R^d w^X and sigma

        The exact flat measure is compared against sigma at two quadrature levels
        (sigma drift); with a grid block w^X is also solved on two refinements of
        the whole grid (omega drift).
    """
    gamma = ctx.gamma
    n, d = ctx.n, ctx.d
    alpha = ctx.alpha(spec)
    X = np.asarray(ctx.param(spec, 'pole', _unit_height(n, d).tolist()), dtype=float)
    reach = float(ctx.param(spec, 'reach', 1.5))
    max_drift = float(ctx.param(spec, 'max_drift', 2.0))
    R = float(nearest_points(gamma, X[None]).distance[0])
    sets = comparability_sets(gamma, X, R, int(ctx.param(spec, 'sets', 30)), ctx.config.seed, reach)
    exact = comparability_check(gamma, alpha, X, sets, reach=reach)

    constants = {'exact': exact.constant}
    level = ctx.config.quadrature.level
    for label, rule in (('level', ctx.rule(level)), ('refined', ctx.rule(level + 1))):
        if rule is None:
            continue
        quotients = []
        for A, reference in zip(sets, exact.quotients):
            quotients.append(reference * A.flat_sigma(d) / A.sigma(rule))
        constants[label] = float(max(max(quotients), 1.0 / min(quotients)))
    write_rows_csv(ctx.path('quotients'), ['set', 'quotient'], [(A.set_id, q) for A, q in zip(sets, exact.quotients)])
    values = list(constants.values())
    drifts = {'sigma_drift': max(values) / min(values)}

    if ctx.config.grid is not None:
        rule = ctx.rule()
        solved = {}
        for h_min, h_max in oracle_resolutions(ctx.config.grid):
            grid = ctx.grid(rule=rule, focus_points=[X.tolist()], h_min=h_min, h_max=h_max)
            solver = MeasureSolver(ctx.problem(ctx.operator(rule=rule), grid), gamma, rule)
            solved[f'solver_h{h_min:g}'] = comparability_check(gamma, alpha, X, sets, solver=solver,
                                                                reach=reach).constant
        constants.update(solved)
        drifts['omega_drift'] = max(solved.values()) / min(solved.values())

    passed = exact.constant <= _tolerance(spec, 10.0) and all(v <= max_drift for v in drifts.values())
    return CheckOutcome(value=exact.constant, passed=bool(passed),
                        details=dict(drifts, constants=constants, sets=len(sets), R=R, source=exact.source))


def _lorentzian_lift(d: int, n: int):
    """
        u(x, t) = v(x, |t|) with v the Poisson extension of 1 / (1 + x^2)
    """

    def value(x, s):
        return (1.0 + s) / (x[:, 0] ** 2 + (1.0 + s) ** 2)

    def gradient(x, s):
        denominator = (x[:, 0] ** 2 + (1.0 + s) ** 2) ** 2
        grad = np.zeros((len(x), d + 1))
        grad[:, 0] = -2.0 * x[:, 0] * (1.0 + s) / denominator
        grad[:, d] = (x[:, 0] ** 2 - (1.0 + s) ** 2) / denominator
        return grad

    return radial_lift(value, gradient, d, n)


def _functional_sample(ctx: RunContext, spec: CheckSpec) -> Tuple[NodalSample, Any]:
    d, n = ctx.d, ctx.n
    per_axis = int(ctx.param(spec, 'per_axis', 25))
    half = float(ctx.param(spec, 'half_width', 1.0))
    axes = [np.linspace(-half, half, per_axis) for _ in range(d)]
    axes += [np.linspace(-half, half, per_axis | 1) for _ in range(n - d)]
    u = _lorentzian_lift(d, n)
    return NodalSample.from_field(u, axes, d), u


@register_check('functional_homogeneity')
def check_functional_homogeneity(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        N(lambda u) = |lambda| N(u), S_p(lambda u) = |lambda| S_p(u), and monotonicity under cutoff dilation
    """
    if ctx.d != 1:
        raise ConfigError('functional_homogeneity samples the d = 1 Lorentzian lift')
    sample, _ = _functional_sample(ctx, spec)
    rng = ctx.rng()
    cutoff = Cutoff(0.5, ctx.d, [0.0], 0.5, random_sawtooth(ctx.d, 3, rng, 0.5, 1.0))
    x_grid, cell = boundary_grid([0.0], 0.5, int(ctx.param(spec, 'boundary_points', 16)))
    p_values = [float(p) for p in ctx.param(spec, 'p_values', [1.5, 2.0, 3.0])]
    deviation, violations, rows = 0.0, 0, []
    base_n = nontangential_max(sample, x_grid, cutoff)
    base_s = {p: square_function(sample, p, x_grid, cutoff) for p in p_values}
    for lam in ctx.param(spec, 'lambdas', [2.0, -0.5, 3.0]):
        lam = float(lam)
        scaled = sample.scaled(lam)
        pairs = [('N', base_n, nontangential_max(scaled, x_grid, cutoff))]
        pairs += [(f'S_{p:g}', base_s[p], square_function(scaled, p, x_grid, cutoff)) for p in p_values]
        for name, base, other in pairs:
            expected = abs(lam) * np.asarray(base.values)
            gap = np.abs(np.asarray(other.values) - expected) / np.maximum(np.abs(expected), np.finfo(float).tiny)
            gap = np.where(expected == 0, np.abs(np.asarray(other.values)), gap)
            deviation = max(deviation, float(gap.max()))
            rows.append((name, lam, float(gap.max())))
    dilated = cutoff.dilate()
    for name, small, large in [('N', base_n, nontangential_max(sample, x_grid, dilated))] + \
            [(f'S_{p:g}', base_s[p], square_function(sample, p, x_grid, dilated)) for p in p_values]:
        violations += int(np.sum(np.asarray(small.values) > np.asarray(large.values) * (1.0 + 1e-12)))
    functional_csv(base_n, ctx.path('nontangential'))
    write_rows_csv(ctx.path('homogeneity'), ['functional', 'lambda', 'relative_gap'], rows)
    passed = deviation <= _tolerance(spec, 1e-12) and violations == 0
    return CheckOutcome(value=deviation, passed=bool(passed),
                        details={'monotonicity_violations': violations, 'nodes': len(sample.values)})


@register_check('functional_inequalities')
def check_functional_inequalities(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Local N / S bounds, p-ellipticity, Caccioppoli, oscillation decay, Carleson energy and trace convergence
        on the Lorentzian lift solving the model equation
    """
    d, n = ctx.d, ctx.n
    if d != 1:
        raise ConfigError('functional_inequalities samples the d = 1 Lorentzian lift')
    sample, u = _functional_sample(ctx, spec)
    rng = ctx.rng()
    p_values = [float(p) for p in ctx.param(spec, 'p_values', [1.5, 2.0, 3.0])]
    cutoff = Cutoff(0.5, d, [0.0], 0.25, random_sawtooth(d, 2, rng, 0.25, 0.5))
    x_grid, cell = boundary_grid([0.0], 0.25, 8)
    field = model_operator(d, n)
    center = _unit_height(n, d, 0.75)
    rows: List[CheckRow] = []
    worst = 0.0
    for p in p_values:
        ns = ns_bounds_check(sample, p, p, cutoff, x_grid, cell)
        rows.append(CheckRow(check_id=f'ns_s_over_n[p={p:g}]', lhs=ns.s_norm, rhs=ns.n_norm_dilated,
                             ratio=ns.s_over_n))
        rows.append(CheckRow(check_id=f'ns_n_over_s[p={p:g}]', lhs=ns.n_norm, rhs=ns.s_norm_dilated + ns.anchor_term,
                             ratio=ns.n_over_s))
        ellipticity = p_ellipticity_check(field, [sample, sample.scaled(-2.0)], [cutoff, cutoff.dilate()], p)
        caccioppoli = caccioppoli_check(u, p, [(center.tolist(), 0.25)], d)
        rows.extend(ellipticity.rows + caccioppoli.rows)
        worst = max(worst, ns.s_over_n, ns.n_over_s, caccioppoli.worst, 1.0 / ellipticity.worst)
    fubini = square_function_fubini(sample, x_grid, cell, cutoff)
    rows.append(CheckRow(check_id='square_function_fubini', lhs=fubini, rhs=1.0, ratio=fubini))
    oscillation = oscillation_decay(u, center, [0.05, 0.1, 0.2])
    gaps = trace_gap(u, lambda x: 1.0 / (1.0 + x[:, 0] ** 2), np.array([[0.0], [0.3]]), [0.4, 0.1, 0.025], d, n)
    carleson = carleson_energy(sample, np.zeros(n), 0.5)
    check_rows_csv(rows, ctx.config.config_hash(), ctx.path('rows'))
    passed = worst <= _tolerance(spec, 100.0) and gaps.converged_fraction >= 0.9 and math.isfinite(carleson)
    details = {'fubini_ratio': fubini, 'hoelder_exponent': oscillation.hoelder_exponent,
               'trace_converged_fraction': gaps.converged_fraction, 'carleson_energy': carleson,
               'wp_norm_2': wp_norm(sample, 2.0), 'energy': energy(sample)}
    rule = ctx.rule()
    if rule is not None:
        data = lambda points: 1.0 / (1.0 + points[:, 0] ** 2)
        details['bmo_norm'] = bmo_norm(data, rule, [([0.0] * n, 0.5), ([0.0] * n, 0.25)])
        details['trace_h_norm'] = trace_h_norm(data, rule, ctx.gamma.d)
    return CheckOutcome(value=worst, passed=bool(passed), details=details)


@register_check('measure_estimates')
def check_measure_estimates(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Non-degeneracy, doubling, change of pole, Green / measure comparison,
        boundary comparison and Harnack constants of w on one ball
    """
    n, d = ctx.n, ctx.d
    rule = ctx.rule()
    center = np.zeros(n)
    center[:d] = ctx.param(spec, 'center', [0.0] * d)
    r = float(ctx.param(spec, 'radius', 0.25))
    samples = int(ctx.param(spec, 'samples', 6))
    grid = ctx.grid(rule=rule, focus_points=[corkscrew(ctx.gamma, center, s * r, rule).point for s in (1.0, 2.0)])
    problem = ctx.problem(ctx.operator(rule=rule), grid)
    solver = MeasureSolver(problem, ctx.gamma, rule)
    rng = ctx.rng()

    nondegeneracy = nondegeneracy_check(solver, center, r, samples, ctx.config.seed)
    far = sample_poles(solver, center, 4.0 * r, 6.0 * r, samples, rng)
    inner = sample_poles(solver, center, 0.0, 0.5 * r, samples, rng)
    sub_centers, sub_radii = random_sub_balls(center, r, rule, d, 3, rng, (0.2, 0.5))
    subsets = [BoundarySubset([c], [s], set_id=f'E{i}') for i, (c, s) in enumerate(zip(sub_centers, sub_radii))]
    offset = np.zeros(n)
    offset[0] = 5.0 * r
    far_sets = [BoundarySubset([center + offset], [r], set_id='F+'),
                BoundarySubset([center - offset], [r], set_id='F-')]
    reports = {
        'doubling': doubling_check(solver, center, r, far),
        'change_of_pole': change_of_pole_check(solver, center, r, subsets, far),
        'green_measure': green_measure_compare(solver, center, r, far),
        'green_measure_inner': green_measure_compare_inner(solver, center, r, inner),
        'boundary_comparison': boundary_comparison_check(solver, center, r, far_sets, samples, ctx.config.seed),
        'harnack': harnack_pole_check(solver, subsets[0] if subsets else _ball(center, r), far, ctx.config.seed),
    }
    rows = [CheckRow(check_id=name, lhs=report.max_ratio, rhs=report.min_ratio, ratio=report.constant)
            for name, report in reports.items()]
    rows.append(CheckRow(check_id='nondegeneracy', lhs=nondegeneracy.inner_min, rhs=nondegeneracy.outer_min,
                         ratio=nondegeneracy.corkscrew_value))
    check_rows_csv(rows, ctx.config.config_hash(), ctx.path('constants'))
    worst = max(report.constant for report in reports.values())
    floor = float(ctx.param(spec, 'nondegeneracy_floor', 0.01))
    passed = worst <= _tolerance(spec, 50.0) and min(nondegeneracy.inner_min, nondegeneracy.outer_min) >= floor
    details = {name: report.model_dump() for name, report in reports.items()}
    details['nondegeneracy'] = nondegeneracy.model_dump()
    return CheckOutcome(value=worst, passed=bool(passed), details=details)


def _ball(center: np.ndarray, r: float) -> BoundarySubset:
    return BoundarySubset([center], [r], set_id='B')


@register_check('operator_structure')
def check_operator_structure(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Sampled ellipticity of the configured operator, D_alpha comparability,
        bi-Lipschitz constant of the change of variables and the weight-ratio Carleson norm
    """
    gamma, rule = ctx.gamma, ctx.rule()
    n, d = ctx.n, ctx.d
    samples = int(ctx.param(spec, 'samples', 400))
    field = ctx.operator(rule=rule)
    points = _off_boundary_points(ctx, rule, samples, ctx.rng(), 0.05, 1.0)
    report = ellipticity_constants(field, samples, ctx.config.seed, points=points)
    details: Dict[str, Any] = {'c3': report.c3, 'worst_point': report.worst_point}
    value = report.c3
    operator = ctx.config.operator
    alpha = operator.alpha or ctx.param(spec, 'alpha')
    if alpha is not None:
        scan = comparability_scan(gamma, rule, float(alpha), samples, ctx.config.seed)
        details['d_alpha_over_delta'] = [scan.min_ratio, scan.max_ratio]
        details['c3_from_comparability'] = c3_from_comparability(scan, n, gamma.d)
    if operator.kind == OperatorKind.CONJUGATED:
        rho = cov_from_descriptor(gamma, operator.cov, operator.cov_params)
        details['bilipschitz'] = rho.bilipschitz(samples, ctx.config.seed).constant
        if alpha is not None:
            ratio = weight_ratio_field(gamma, rule, float(alpha), rho)
            carleson = carleson_norm(ratio, d, n, _balls(ctx, spec), _tent(ctx, spec))
            carleson_csv(carleson, ctx.path('weight_ratio'))
            details['weight_ratio_carleson'] = carleson.supremum
    return CheckOutcome(value=value, passed=bool(value <= _tolerance(spec, 100.0)), details=details)


@register_check('beta_carleson')
def check_beta_carleson(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    d = ctx.d
    region = (ctx.param(spec, 'lower', [-1.0] * d), ctx.param(spec, 'upper', [1.0] * d))
    report, cubes = beta_carleson(ctx.gamma, region, int(ctx.param(spec, 'levels', 5)),
                                  int(ctx.param(spec, 'per_axis', 33)))
    beta_csv(cubes, ctx.path('cubes'))
    carleson_csv(report, ctx.path('quotients'))
    passed = report.is_finite and (spec.tolerance is None or report.supremum <= spec.tolerance)
    return CheckOutcome(value=report.supremum, passed=bool(passed),
                        details={'cubes': len(cubes), 'max_beta': max(c.beta for c in cubes)})


@register_check('ar_regularity')
def check_ar_regularity(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    rule = ctx.rule()
    if rule is None:
        raise ConfigError('ar_regularity needs a quadrature rule (a window on flat planes)')
    report = verify_ar(ctx.gamma, rule, int(ctx.param(spec, 'trials', 200)), ctx.config.seed)
    if ctx.param(spec, 'export', False):
        export_quadrature_csv(rule, ctx.path('quadrature'))
    return CheckOutcome(value=report.c0_estimate, passed=bool(report.c0_estimate <= _tolerance(spec, 4.0)),
                        details=dict(report.model_dump(), nodes=len(rule), total_mass=rule.total_mass))


@register_check('corkscrew_chain')
def check_corkscrew_chain(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Corkscrew constants at random (x, r) and Harnack chain lengths against log(2 + Lambda)
    """
    gamma, rule = ctx.gamma, ctx.rule()
    rng = ctx.rng()
    samples = int(ctx.param(spec, 'samples', 20))
    r_low, r_high = ctx.param(spec, 'radius_range', [0.05, 0.5])
    anchors = nearest_points(gamma, _off_boundary_points(ctx, rule, samples, rng, 0.05, 0.5), rule).feet
    radii = np.exp(rng.uniform(math.log(r_low), math.log(r_high), size=samples))
    c1 = [corkscrew(gamma, x, r, rule).c1 for x, r in zip(anchors, radii)]

    points = _off_boundary_points(ctx, rule, 2 * samples, rng, 0.01, 0.5)
    rows, growth, link_ratio = [], [], 0.0
    for X, Y in zip(points[:samples], points[samples:]):
        chain = harnack_chain(gamma, X, Y, rule)
        scale = chain.length / math.log(2.0 + chain.lambda_value)
        growth.append(scale)
        link_ratio = max([link_ratio] + chain.ratios)
        rows.append((chain.lambda_value, chain.length, chain.min_delta_ratio, chain.max_delta_ratio))
    write_rows_csv(ctx.path('chains'), ['lambda', 'length', 'min_delta_ratio', 'max_delta_ratio'], rows)
    worst = float(max(c1))
    passed = worst <= _tolerance(spec, 4.0) and link_ratio <= 0.5
    return CheckOutcome(value=worst, passed=bool(passed),
                        details={'max_link_ratio': link_ratio, 'max_length_over_log': float(max(growth))})


@register_check('poincare')
def check_poincare(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    gamma, rule = ctx.gamma, ctx.rule()
    n = ctx.n
    r = float(ctx.param(spec, 'radius', 0.5))
    center = np.asarray(ctx.param(spec, 'center', [0.0] * n), dtype=float)
    depth = int(ctx.param(spec, 'max_depth', 3))
    bank = poincare_bank(gamma, rule, r, int(ctx.param(spec, 'bank', 4)), ctx.rng())
    reports = [poincare_check(gamma, rule, center, r, bank, ctx.max_cubature_points, depth)]
    for p in ctx.param(spec, 'p_values', [1.0, 2.0]):
        reports.append(sobolev_poincare_check(gamma, rule, center, r, bank, float(p), ctx.max_cubature_points, depth))
    rows = [row for report in reports for row in report.rows]
    check_rows_csv(rows, ctx.config.config_hash(), ctx.path('rows'))
    worst = float(max(report.worst for report in reports))
    return CheckOutcome(value=worst, passed=bool(worst <= _tolerance(spec, 10.0)),
                        details={report.check_id: report.worst for report in reports})


@register_check('determinism')
def check_determinism(ctx: RunContext, spec: CheckSpec) -> CheckOutcome:
    """
        Re-run the other checks twice from scratch and compare the CSV bytes
    """
    targets = ctx.param(spec, 'targets')
    candidates = [(index, s) for index, s in enumerate(ctx.config.checks) if s.name != 'determinism']
    if targets is not None:
        candidates = [(index, s) for index, s in candidates if s.name in targets]
    if not candidates:
        raise ConfigError('determinism needs at least one other check to repeat')
    digests = []
    for label in ('a', 'b'):
        fork = ctx.fork(f'{ctx.prefix}_{label}')
        for index, target in candidates:
            record = _run_check(fork, index, target)
            if not record.files and record.message:
                logger.warning(f'Determinism target {target.name} failed before writing output: {record.message}')
        digests.append({name: hashlib.sha256((fork.output_dir / name).read_bytes()).hexdigest()
                        for name in sorted(fork.files)})
    first, second = digests
    differing = sorted(name for name in set(first) | set(second) if first.get(name) != second.get(name))
    write_rows_csv(ctx.path('digests'), ['file', 'sha256'], sorted(first.items()))
    return CheckOutcome(value=float(len(differing)), passed=not differing and bool(first),
                        details={'files': len(first), 'differing': differing})


def _run_check(ctx: RunContext, index: int, spec: CheckSpec) -> CheckRecord:
    ctx.prefix = f'{index:02d}_{spec.name}'
    before = len(ctx.files)
    started = time.perf_counter()
    try:
        outcome = CHECKS[spec.name](ctx, spec)
    except (BudgetExceededError, ConfigError):
        raise
    except (DegenerateLabError, ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as e:
        logger.error(format_exc(e))
        return CheckRecord(name=spec.name, tolerance=spec.tolerance, passed=False, mandatory=spec.mandatory,
                           wall_clock=time.perf_counter() - started, message=f'{type(e).__name__}: {e}',
                           files=ctx.files[before:])
    elapsed = time.perf_counter() - started
    status = 'passed' if outcome.passed else 'FAILED'
    logger.info(f'{ctx.config.id}/{spec.name}: {status}, value={outcome.value:.6g} in {elapsed:.2f}s')
    return CheckRecord(name=spec.name, value=outcome.value, tolerance=spec.tolerance, passed=outcome.passed,
                       mandatory=spec.mandatory, wall_clock=elapsed, details=_jsonable(outcome.details),
                       files=ctx.files[before:])


def validate_checks(config: ExperimentConfig):
    unknown = [spec.name for spec in config.checks if spec.name not in CHECKS]
    if unknown:
        raise ConfigError(f'Unknown checks {unknown} in {config.id}; available: {sorted(CHECKS)}')


def default_output_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(getattr(settings, 'DEGENLAB_OUTPUT_ROOT', 'runs')) / config.id


def run_experiment(config: ExperimentConfig, output_dir: Optional[Path] = None,
                   workers: Optional[int] = None) -> ReportBundle:
    """
        Execute every check of config and write report.json; passes iff every mandatory check passes
    """
    validate_checks(config)
    output_dir = Path(output_dir) if output_dir is not None else default_output_dir(config)
    output_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, output_dir, workers or getattr(settings, 'DEGENLAB_WORKERS', 1),
                     getattr(settings, 'DEGENLAB_MAX_NODES', None),
                     getattr(settings, 'DEGENLAB_MAX_QUADRATURE_NODES', None))
    environment = environment_stamp()
    logger.info(f'Running {config.id} ({config.anchor}) into {output_dir}')
    records = [_run_check(ctx, index, spec) for index, spec in enumerate(config.checks)]
    passed = all(record.passed for record in records if record.mandatory)
    bundle = ReportBundle(experiment_id=config.id, description=config.description, anchor=config.anchor,
                          config_hash=config.config_hash(), seed=config.seed, passed=passed, checks=records,
                          environment=environment, output_dir=str(output_dir))
    bundle.write()
    logger.info(f'{config.id}: {"pass" if passed else "FAIL"} ({sum(r.passed for r in records)}/{len(records)})')
    return bundle


def resolve_config_path(name: str) -> Path:
    """
        A path as given, or a file of the built-in catalog (with or without .json)
    """
    path = Path(name)
    if path.exists():
        return path
    catalog = Path(getattr(settings, 'DEGENLAB_EXPERIMENTS_DIR', 'experiments'))
    for candidate in (catalog / name, catalog / f'{name}.json'):
        if candidate.exists():
            return candidate
    return path


def run(config_path: str, output_dir: Optional[Path] = None, workers: Optional[int] = None) -> ReportBundle:
    return run_experiment(load_config(resolve_config_path(config_path)), output_dir, workers)


class SweepResult(BaseModel):
    parameter: str
    values: List[Any]
    bundles: List[ReportBundle]
    table: str = Field(..., description='Aggregated CSV path')

    @property
    def exit_code(self) -> int:
        return 0 if all(b.passed for b in self.bundles) else 1


def sweep(config_path: str, parameter: str, values: Sequence[Any], output_dir: Optional[Path] = None,
          workers: Optional[int] = None) -> SweepResult:
    """
        One run per value of the dotted parameter, concurrently up to the worker cap, stacked into sweep.csv
    """
    if not values:
        raise ConfigError('A sweep needs at least one value')
    path = resolve_config_path(config_path)
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigError(f'Config file not found: {path}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'Malformed JSON in {path}: {e}') from e
    configs = [parse_config(set_by_path(raw, parameter, value)) for value in values]
    for config in configs:
        validate_checks(config)
    root = Path(output_dir) if output_dir is not None else default_output_dir(configs[0]) / 'sweep'
    cap = workers or getattr(settings, 'DEGENLAB_WORKERS', 1)
    logger.info(f'Sweeping {parameter} over {list(values)} with {cap} workers')
    with ThreadPoolExecutor(max_workers=max(1, min(cap, len(configs)))) as pool:
        bundles = list(pool.map(lambda pair: run_experiment(pair[1], root / f'{parameter}={pair[0]}', 1),
                                zip(values, configs)))
    rows = []
    for value, bundle in zip(values, bundles):
        for record in bundle.checks:
            rows.append((parameter, value, record.name, '' if record.value is None else record.value,
                         '' if record.tolerance is None else record.tolerance, record.passed))
    table = write_rows_csv(root / 'sweep.csv', ['parameter', 'value', 'check', 'measured', 'tolerance', 'passed'],
                           rows)
    return SweepResult(parameter=parameter, values=list(values), bundles=bundles, table=str(table))


def list_experiments(directory: Optional[Path] = None) -> List[CatalogEntry]:
    directory = Path(directory or getattr(settings, 'DEGENLAB_EXPERIMENTS_DIR', 'experiments'))
    entries = []
    for path in sorted(directory.glob('*.json')):
        try:
            config = load_config(path)
        except ConfigError as e:
            logger.warning(f'Skipping catalog entry {path.name}: {e}')
            continue
        entries.append(CatalogEntry(id=config.id, description=config.description, anchor=config.anchor,
                                    path=str(path), checks=[c.name for c in config.checks]))
    return entries
