"""
    Elliptic measure estimates on top of the finite-volume solver.

    A MeasureSolver holds one assembled problem and turns every pole X into
    its discrete representing measure over the Dirichlet nodes with a single
    adjoint solve, so that w^X(E) for many sets E costs one dot product each.
    On flat boundaries with the model operator the exact half-space Poisson
    measure is available as well, through the radial reduction.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import integrate

from elliptic.boundary_geometry import BoundarySet, QuadratureRule, corkscrew, nearest_points, unit_ball_volume
from elliptic.degenerate_solver import DiscreteProblem, fit_loglog, green_function
from elliptic.enums import BoundaryKind
from elliptic.exceptions import AccuracyError, ConfigError, GeometryError, MagicExponentError
from elliptic.reports import write_rows_csv

logger = logging.getLogger(__name__)

PROBABILITY_SLACK = 1e-6


class BoundarySubset(object):
    """
        Union of surface balls B(c_i, r_i) intersected with Gamma, or its complement
    """

    def __init__(self, centers: Sequence[Sequence[float]], radii: Sequence[float], complement: bool = False,
                 set_id: str = 'E'):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.asarray(radii, dtype=float)
        if len(self.centers) != len(self.radii) or np.any(self.radii <= 0):
            raise GeometryError('A boundary subset needs one positive radius per center')
        self.complement = complement
        self.set_id = set_id

    def __repr__(self):
        prefix = 'complement of ' if self.complement else ''
        return f'BoundarySubset({prefix}{len(self.radii)} balls, id={self.set_id})'

    def inverted(self) -> 'BoundarySubset':
        return BoundarySubset(self.centers, self.radii, not self.complement, f'{self.set_id}^c')

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """
            min_i (|y - c_i| - r_i): negative inside the union
        """
        gaps = np.linalg.norm(points[:, None, :] - self.centers[None], axis=2) - self.radii[None]
        return gaps.min(axis=1)

    def indicator(self, feet: np.ndarray, width: float) -> np.ndarray:
        """
            Linear ramp of total width `width` across the ball boundaries, evaluated at foot points
        """
        ramp = np.clip(0.5 - self.signed_distance(feet) / width, 0.0, 1.0) if width > 0 else \
            (self.signed_distance(feet) <= 0).astype(float)
        return 1.0 - ramp if self.complement else ramp

    def sigma(self, rule: QuadratureRule) -> float:
        inside = self.signed_distance(rule.nodes) <= 0
        mass = float(rule.weights[inside].sum())
        return rule.total_mass - mass if self.complement else mass

    def flat_sigma(self, d: int) -> float:
        """
            Lebesgue measure of the union of the d-dimensional slices, assuming disjoint balls
        """
        return float(np.sum(unit_ball_volume(d) * self.radii ** d))

    def flat_balls(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.centers[:, :d], self.radii


class MeasureEstimate(BaseModel):
    pole: List[float]
    set_id: str
    value: float = Field(..., description='w^X(E), clamped to [0, 1]')
    sigma_fraction: Optional[float] = Field(None, description='sigma(E) / sigma(reference ball) when defined')
    width: float = Field(..., description='Mollification width of the indicator along Gamma')
    resolution: float = Field(..., description='h_min of the grid the estimate was computed on')
    error: float = Field(0.0, description='Difference to the coarser resolution, 0 when only one grid was used')


def _merge_intervals(lower: np.ndarray, upper: np.ndarray) -> List[Tuple[float, float]]:
    order = np.argsort(lower)
    merged: List[List[float]] = []
    for a, b in zip(lower[order], upper[order]):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([float(a), float(b)])
    return [(a, b) for a, b in merged]


def model_measure_exact(d: int, x_pole, t_pole, centers: Optional[Sequence] = None,
                        radii: Optional[Sequence[float]] = None) -> np.ndarray:
    """
        Half-space Poisson measure of a union of balls in R^d seen from (x, |t|)

        centers=None means E = R^d. For d = 1 overlapping intervals are merged and
        the arctan closed form is exact; for d = 2 the discs must be disjoint and
        each ray from x is integrated in closed form along its chord.
    """
    x = np.atleast_2d(np.asarray(x_pole, dtype=float))
    s = np.atleast_1d(np.linalg.norm(np.atleast_2d(np.asarray(t_pole, dtype=float)), axis=1))
    if centers is None:
        return np.ones(len(x))
    if np.any(s <= 0):
        raise GeometryError('The exact model measure needs poles off Gamma')
    centers = np.atleast_2d(np.asarray(centers, dtype=float))[:, :d]
    radii = np.asarray(radii, dtype=float)
    if d == 1:
        total = np.zeros(len(x))
        for a, b in _merge_intervals(centers[:, 0] - radii, centers[:, 0] + radii):
            total += (np.arctan((b - x[:, 0]) / s) - np.arctan((a - x[:, 0]) / s)) / math.pi
        return total
    if d == 2:
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2) - radii[:, None] - radii[None]
        np.fill_diagonal(gaps, 1.0)
        if np.any(gaps < 0):
            raise ConfigError('Exact d = 2 model measures need disjoint discs')
        total = np.zeros(len(x))
        for c, r in zip(centers, radii):
            offset = c[None, :] - x
            distance = np.linalg.norm(offset, axis=1)

            def chord(phi, offset=offset, distance=distance, r=r):
                # ray y = x + rho e(phi) meets the disc for rho in [rho_1, rho_2]
                direction = np.array([math.cos(phi), math.sin(phi)])
                along = offset @ direction
                disc = along ** 2 - distance ** 2 + r ** 2
                root = np.sqrt(np.maximum(disc, 0.0))
                near = np.maximum(along - root, 0.0)
                far = np.maximum(along + root, 0.0)
                mass = s * (1.0 / np.sqrt(near ** 2 + s ** 2) - 1.0 / np.sqrt(far ** 2 + s ** 2))
                return np.where(disc > 0, mass, 0.0) / (2.0 * math.pi)

            value, _ = integrate.quad_vec(chord, 0.0, 2.0 * math.pi, epsabs=1e-10, epsrel=1e-8, limit=400)
            total += value
        return total
    raise ConfigError('Exact model measures are available for d = 1 and d = 2')


def exact_source_available(gamma: BoundarySet, operator_name: str) -> bool:
    """
        Flat planes with L_0, or with L_alpha (D_alpha is a multiple of |t| there)
    """
    return gamma.kind == BoundaryKind.AFFINE_PLANE and gamma.d in (1, 2) and (
        operator_name == 'model' or operator_name.startswith('L_alpha') or operator_name == 'distance')


class MeasureSolver(object):
    """
        Discrete representing measures of one assembled problem
    """

    def __init__(self, problem: DiscreteProblem, gamma: BoundarySet, rule: Optional[QuadratureRule] = None,
                 exact_shell: Optional[bool] = None, width: Optional[float] = None):
        self.problem = problem
        self.gamma = gamma
        self.rule = rule
        self.grid = problem.grid
        self.d = int(gamma.d) if gamma.kind != BoundaryKind.CANTOR else None
        self.exact_shell = exact_source_available(gamma, problem.field.name) if exact_shell is None else exact_shell
        self.width = 2.0 * self.grid.h_min if width is None else width
        dirichlet_points = self.grid.points(problem.dirichlet)
        self._dirichlet_points = dirichlet_points
        self._feet = nearest_points(gamma, dirichlet_points, rule).feet
        self._is_band = np.isin(problem.dirichlet, self.grid.band)
        self._measures: Dict[Tuple[float, ...], np.ndarray] = {}
        self._truncation_logged = False

    def __repr__(self):
        return f'MeasureSolver({self.problem}, exact_shell={self.exact_shell})'

    @property
    def resolution(self) -> float:
        return self.grid.h_min

    def pole_weights(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """
            Interior positions and multilinear weights of the cell holding X
        """
        grid = self.grid
        X = np.asarray(X, dtype=float)
        corners, weights = [], []
        lower_index, fractions = [], []
        for k, axis in enumerate(grid.axes):
            if not axis[0] <= X[k] <= axis[-1]:
                raise GeometryError(f'Pole {X.tolist()} lies outside the solve box')
            j = int(np.clip(np.searchsorted(axis, X[k]) - 1, 0, len(axis) - 2))
            lower_index.append(j)
            fractions.append((X[k] - axis[j]) / (axis[j + 1] - axis[j]))
        for bits in np.ndindex(*([2] * grid.n)):
            weight = 1.0
            for k, bit in enumerate(bits):
                weight *= fractions[k] if bit else 1.0 - fractions[k]
            if weight <= 1e-14:
                continue
            multi = tuple(lower_index[k] + bits[k] for k in range(grid.n))
            corners.append(int(np.ravel_multi_index(multi, grid.shape)))
            weights.append(weight)
        corners = np.asarray(corners)
        positions = np.searchsorted(self.problem.interior, corners)
        valid = (positions < len(self.problem.interior))
        valid &= self.problem.interior[np.minimum(positions, len(self.problem.interior) - 1)] == corners
        if not np.all(valid):
            raise GeometryError(f'Pole {X.tolist()} touches the Gamma band or the outer shell')
        return positions, np.asarray(weights)

    def representing_measure(self, X) -> np.ndarray:
        """
            mu over the Dirichlet nodes with u(X) = mu . g_D for every Dirichlet vector g_D
        """
        key = tuple(np.round(np.asarray(X, dtype=float), 12))
        if key not in self._measures:
            positions, weights = self.pole_weights(X)
            rhs = np.zeros(len(self.problem.interior))
            rhs[positions] = weights
            adjoint = self.problem.solve_interior(rhs, transpose=True)
            self._measures[key] = -(self.problem.K_ID.T @ adjoint)
        return self._measures[key]

    def dirichlet_values(self, E: BoundarySubset) -> np.ndarray:
        values = np.zeros(len(self.problem.dirichlet))
        band = self._is_band
        values[band] = E.indicator(self._feet[band], self.width)
        shell_points = self._dirichlet_points[~band]
        if self.exact_shell:
            centers, radii = E.flat_balls(self.d)
            exact = model_measure_exact(self.d, shell_points[:, :self.d], shell_points[:, self.d:], centers, radii)
            values[~band] = 1.0 - exact if E.complement else exact
        else:
            if not self._truncation_logged:
                logger.warning(f'{self}: no shell oracle, shell data truncated to the set indicator at infinity')
                self._truncation_logged = True
            values[~band] = 1.0 if E.complement else 0.0
        return values

    def omega(self, X, E: BoundarySubset) -> float:
        raw = float(self.representing_measure(X) @ self.dirichlet_values(E))
        if raw < -PROBABILITY_SLACK or raw > 1.0 + PROBABILITY_SLACK:
            raise AccuracyError(f'Measure estimate {raw:.3e} of {E} at {np.asarray(X).tolist()} leaves [0, 1]')
        clamped = min(max(raw, 0.0), 1.0)
        if clamped != raw:
            logger.info(f'Clamped measure estimate {raw:.3e} to {clamped:g}')
        return clamped

    def total_mass(self, X) -> float:
        return float(self.representing_measure(X).sum())


def harmonic_measure(solver: MeasureSolver, X, E: BoundarySubset, coarse: Optional[MeasureSolver] = None,
                     sigma_reference: Optional[float] = None) -> MeasureEstimate:
    """
        w^X(E) from the mollified indicator of E, with the coarse grid as error proxy
    """
    delta = float(nearest_points(solver.gamma, np.asarray(X, dtype=float)[None], solver.rule).distance[0])
    if delta <= solver.grid.band_width:
        raise GeometryError(f'Pole {np.asarray(X).tolist()} lies inside the Gamma band')
    E_radius = float(E.radii.max())
    if E_radius < solver.width:
        raise AccuracyError(f'{E} is not resolved: radius {E_radius:.3g} below the mollification width')
    value = solver.omega(X, E)
    error = abs(value - coarse.omega(X, E)) if coarse is not None else 0.0
    fraction = None
    if sigma_reference:
        sigma = E.flat_sigma(solver.d) if solver.rule is None else E.sigma(solver.rule)
        fraction = sigma / sigma_reference
    return MeasureEstimate(pole=[float(v) for v in np.asarray(X)], set_id=E.set_id, value=value,
                           sigma_fraction=fraction, width=solver.width, resolution=solver.resolution, error=error)


def measure_battery(solver: MeasureSolver, cases: Sequence[Tuple[Sequence[float], BoundarySubset]],
                    workers: int = 1, coarse: Optional[MeasureSolver] = None) -> List[MeasureEstimate]:
    """
        Estimates for independent (pole, set) pairs; representing measures are shared per pole
    """
    for X in {tuple(np.asarray(p, dtype=float)) for p, _ in cases}:
        solver.representing_measure(np.asarray(X))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda case: harmonic_measure(solver, case[0], case[1], coarse), cases))


def _ball_source(solver: MeasureSolver, center, r: float) -> BoundarySubset:
    center = np.asarray(center, dtype=float)
    grid = solver.grid
    if solver.gamma.kind != BoundaryKind.CANTOR:
        d = solver.d
        if np.any(center[:d] - r < grid.lower[:d]) or np.any(center[:d] + r > grid.upper[:d]):
            raise GeometryError(f'Surface ball B({center.tolist()}, {r}) exceeds the solve window')
    return BoundarySubset([center], [r], set_id=f'B({r:g})')


def _pole_ok(solver: MeasureSolver, X: np.ndarray) -> bool:
    try:
        solver.pole_weights(X)
    except GeometryError:
        return False
    delta = nearest_points(solver.gamma, X[None], solver.rule).distance[0]
    return bool(delta > 2.0 * solver.grid.band_width)


def sample_poles(solver: MeasureSolver, center: np.ndarray, r_in: float, r_out: float, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """
        Admissible poles with r_in <= |X - center| <= r_out
    """
    n = solver.grid.n
    found: List[np.ndarray] = []
    for _ in range(200 * count):
        if len(found) == count:
            break
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        X = center + rng.uniform(r_in, r_out) * direction
        if _pole_ok(solver, X):
            found.append(X)
    if not found:
        raise GeometryError(f'No admissible poles between radii {r_in:g} and {r_out:g} around {center.tolist()}')
    return np.stack(found)


class NondegeneracyReport(BaseModel):
    inner_min: float = Field(..., description='min over X in half the ball of w^X(B)')
    outer_min: float = Field(..., description='min over Y outside twice the ball of w^Y(Gamma minus B)')
    corkscrew_value: float = Field(..., description='w^{A_B}(B) at the corkscrew point of B')
    samples: int


def nondegeneracy_check(solver: MeasureSolver, center, r: float, samples: int, rng_seed: int) -> NondegeneracyReport:
    rng = np.random.default_rng(rng_seed)
    center = np.asarray(center, dtype=float)
    ball = _ball_source(solver, center, r)
    inner = sample_poles(solver, center, 0.0, 0.5 * r, samples, rng)
    outer = sample_poles(solver, center, 2.0 * r, 3.0 * r, samples, rng)
    A = np.asarray(corkscrew(solver.gamma, center, r, solver.rule).point)
    report = NondegeneracyReport(inner_min=min(solver.omega(X, ball) for X in inner),
                                 outer_min=min(solver.omega(Y, ball.inverted()) for Y in outer),
                                 corkscrew_value=solver.omega(A, ball), samples=len(inner) + len(outer))
    logger.info(f'Non-degeneracy at B({center.tolist()}, {r:g}): {report}')
    return report


class RatioReport(BaseModel):
    """
        Two-sided constant of a family of ratios that should stay in [1/C, C]
    """
    min_ratio: float
    max_ratio: float
    constant: float = Field(..., description='max(max_ratio, 1 / min_ratio)')
    samples: int

    @classmethod
    def from_ratios(cls, ratios: Sequence[float]) -> 'RatioReport':
        ratios = np.asarray([r for r in ratios if np.isfinite(r)], dtype=float)
        if len(ratios) == 0:
            raise AccuracyError('No finite ratios to report')
        low, high = float(ratios.min()), float(ratios.max())
        constant = max(high, 1.0 / low) if low > 0 else math.inf
        return cls(min_ratio=low, max_ratio=high, constant=constant, samples=len(ratios))


def doubling_check(solver: MeasureSolver, center, r: float, poles: Sequence[Sequence[float]]) -> RatioReport:
    """
        max over poles outside 4B of w^X(2B) / w^X(B)
    """
    center = np.asarray(center, dtype=float)
    small, large = _ball_source(solver, center, r), _ball_source(solver, center, 2.0 * r)
    ratios = []
    for X in poles:
        X = np.asarray(X, dtype=float)
        if np.linalg.norm(X - center) < 4.0 * r:
            raise GeometryError(f'Doubling pole {X.tolist()} lies inside 4B')
        ratios.append(solver.omega(X, large) / solver.omega(X, small))
    return RatioReport.from_ratios(ratios)


def change_of_pole_check(solver: MeasureSolver, center, r: float, sets: Sequence[BoundarySubset],
                         poles: Sequence[Sequence[float]]) -> RatioReport:
    """
        [w^X(E) / w^X(B)] / w^{A_B}(E) for E inside B and X outside 2B
    """
    center = np.asarray(center, dtype=float)
    ball = _ball_source(solver, center, r)
    A = np.asarray(corkscrew(solver.gamma, center, r, solver.rule).point)
    ratios = []
    for X in poles:
        if np.linalg.norm(np.asarray(X) - center) < 2.0 * r:
            raise GeometryError('Change-of-pole poles must lie outside 2B')
        whole = solver.omega(X, ball)
        for E in sets:
            reference = solver.omega(A, E)
            if reference > 0 and whole > 0:
                ratios.append(solver.omega(X, E) / whole / reference)
    return RatioReport.from_ratios(ratios)


def green_measure_compare(solver: MeasureSolver, center, r: float, poles: Sequence[Sequence[float]]) -> RatioReport:
    """
        w^X(Gamma cap B) / (r^{1-d} g(X, A_B)) over poles X outside 2B
    """
    center = np.asarray(center, dtype=float)
    d = solver.gamma.d
    ball = _ball_source(solver, center, r)
    A = np.asarray(corkscrew(solver.gamma, center, r, solver.rule).point)
    green, _ = green_function(solver.problem, A)
    ratios = [solver.omega(X, ball) / (r ** (1.0 - d) * green(np.asarray(X, dtype=float))) for X in poles]
    return RatioReport.from_ratios(ratios)


def green_measure_compare_inner(solver: MeasureSolver, center, r: float, poles: Sequence[Sequence[float]],
                                c1: float = 2.0) -> RatioReport:
    """
        w^Y(Gamma minus B) / (r^{1-d} g(Y, A_{c1 B})) over poles Y in half the ball
    """
    center = np.asarray(center, dtype=float)
    d = solver.gamma.d
    outside = _ball_source(solver, center, r).inverted()
    A = np.asarray(corkscrew(solver.gamma, center, c1 * r, solver.rule).point)
    green, _ = green_function(solver.problem, A)
    ratios = []
    for Y in poles:
        Y = np.asarray(Y, dtype=float)
        if np.linalg.norm(Y - center) > 0.5 * r:
            raise GeometryError('Inner comparison poles must lie in half the ball')
        ratios.append(solver.omega(Y, outside) / (r ** (1.0 - d) * green(Y)))
    return RatioReport.from_ratios(ratios)


def boundary_comparison_check(solver: MeasureSolver, center, r: float, far_sets: Sequence[BoundarySubset],
                              samples: int, rng_seed: int) -> RatioReport:
    """
        Positive solutions u, v vanishing on 2B cap Gamma (data supported on far_sets):
        C = sup_B (u/v) / inf_B (u/v), reported as the spread of u/v
    """
    if len(far_sets) < 2:
        raise ConfigError('The boundary comparison needs two data sets')
    center = np.asarray(center, dtype=float)
    for E in far_sets:
        if np.any(E.signed_distance(center[None]) < 2.0 * r + solver.width):
            raise GeometryError(f'{E} does not vanish on 2B')
    rng = np.random.default_rng(rng_seed)
    poles = sample_poles(solver, center, 0.0, r, samples, rng)
    first, second = far_sets[0], far_sets[1]
    quotients = [solver.omega(X, first) / solver.omega(X, second) for X in poles]
    quotients = np.asarray([q for q in quotients if np.isfinite(q) and q > 0])
    if len(quotients) == 0:
        raise AccuracyError('Boundary comparison produced no positive quotients')
    spread = float(quotients.max() / quotients.min())
    return RatioReport(min_ratio=float(quotients.min()), max_ratio=float(quotients.max()), constant=spread,
                       samples=len(quotients))


def harnack_pole_check(solver: MeasureSolver, E: BoundarySubset, poles: Sequence[Sequence[float]],
                       rng_seed: int) -> RatioReport:
    """
        w^X(E) / w^{X'}(E) for X' within delta(X)/2 of X
    """
    rng = np.random.default_rng(rng_seed)
    ratios = []
    for X in poles:
        X = np.asarray(X, dtype=float)
        delta = float(nearest_points(solver.gamma, X[None], solver.rule).distance[0])
        for _ in range(20):
            direction = rng.standard_normal(len(X))
            direction /= np.linalg.norm(direction)
            moved = X + rng.uniform(0.0, 0.5 * delta) * direction
            if _pole_ok(solver, moved):
                ratios.append(solver.omega(X, E) / solver.omega(moved, E))
                break
    return RatioReport.from_ratios(ratios)


class AInftyReport(BaseModel):
    omegas: List[float] = Field(..., description='w^{A_B}(E) per probed set')
    fractions: List[float] = Field(..., description='sigma(E) / sigma(B) per probed set')
    thresholds: List[float]
    envelope: List[float] = Field(..., description='epsilon(delta) = max sigma fraction among sets with w < delta')
    theta: Optional[float] = Field(None, description='Fitted exponent of epsilon ~ delta^theta when defined')
    skipped: int = Field(..., description='Under-resolved sets left out')

    def envelope_at(self, delta: float) -> float:
        fractions = np.asarray(self.fractions)
        below = fractions[np.asarray(self.omegas) < delta]
        return float(below.max()) if len(below) else 0.0


def random_sub_balls(center: np.ndarray, r: float, rule: Optional[QuadratureRule], d: Optional[int], count: int,
                     rng: np.random.Generator, radius_range: Tuple[float, float] = (0.05, 0.5),
                     attempts: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """
        Up to count disjoint balls centered on Gamma inside B(center, r)
    """
    centers: List[np.ndarray] = []
    radii: List[float] = []
    if rule is not None:
        candidates = rule.nodes[np.linalg.norm(rule.nodes - center, axis=1) < r]
    else:
        candidates = None
    for _ in range(attempts):
        if len(radii) == count:
            break
        rho = r * rng.uniform(*radius_range)
        if candidates is not None:
            if len(candidates) == 0:
                break
            c = candidates[rng.integers(len(candidates))]
        else:
            c = center.copy()
            offset = rng.standard_normal(d)
            c[:d] += offset / np.linalg.norm(offset) * rng.uniform(0.0, r - rho)
        if np.linalg.norm(c - center) + rho > r:
            continue
        if any(np.linalg.norm(c - other) < rho + other_r for other, other_r in zip(centers, radii)):
            continue
        centers.append(c)
        radii.append(rho)
    return np.asarray(centers), np.asarray(radii)


def ainfty_probe(solver: MeasureSolver, balls: Sequence[Tuple[Sequence[float], float]], sets_per_ball: int,
                 thresholds: Sequence[float], rng_seed: int, max_pieces: int = 3,
                 fraction_range: Tuple[float, float] = (0.01, 0.9)) -> AInftyReport:
    """
        Scatter of (w^{A_B}(E), sigma(E)/sigma(B)) over random unions of sub-balls

        The envelope is a monotone empirical bound; its decay towards 0 as delta
        shrinks is evidence for A_infinity, never a proof of it.
    """
    rng = np.random.default_rng(rng_seed)
    omegas, fractions = [], []
    skipped = 0
    d = solver.d
    for center, r in balls:
        center = np.asarray(center, dtype=float)
        ball = _ball_source(solver, center, r)
        A = np.asarray(corkscrew(solver.gamma, center, r, solver.rule).point)
        reference = ball.flat_sigma(d) if solver.rule is None else ball.sigma(solver.rule)
        for index in range(sets_per_ball):
            pieces = int(rng.integers(1, max_pieces + 1))
            centers, radii = random_sub_balls(center, r, solver.rule, d, pieces, rng)
            if len(radii) == 0 or radii.min() < solver.width:
                skipped += 1
                continue
            E = BoundarySubset(centers, radii, set_id=f'E{index}')
            sigma = E.flat_sigma(d) if solver.rule is None else E.sigma(solver.rule)
            fraction = sigma / reference
            if not fraction_range[0] <= fraction <= fraction_range[1]:
                skipped += 1
                continue
            omegas.append(solver.omega(A, E))
            fractions.append(fraction)
    if skipped:
        logger.warning(f'A_infinity probe skipped {skipped} under-resolved or out-of-range sets')
    thresholds = sorted(float(t) for t in thresholds)
    report = AInftyReport(omegas=omegas, fractions=fractions, thresholds=thresholds, envelope=[], skipped=skipped)
    report.envelope = [report.envelope_at(t) for t in thresholds]
    positive = [(t, e) for t, e in zip(thresholds, report.envelope) if e > 0]
    if len(positive) >= 2:
        report.theta = fit_loglog(np.array([p[0] for p in positive]), np.array([p[1] for p in positive]))
    logger.info(f'A_infinity envelope over {len(omegas)} sets: {dict(zip(thresholds, report.envelope))}')
    return report


class ComparabilityResult(BaseModel):
    constant: float = Field(..., description='max over sets of max(q, 1/q) with q = R^d w^X(A) / sigma(A)')
    quotients: List[float]
    reach: float = Field(..., description='Sets lie in B(X, reach * R)')
    source: str = Field(..., description='exact (radial reduction) or solver')


def comparability_check(gamma: BoundarySet, alpha: float, X, sets: Sequence[BoundarySubset],
                        solver: Optional[MeasureSolver] = None, rule: Optional[QuadratureRule] = None,
                        reach: float = 1.5) -> ComparabilityResult:
    """
        Two-sided comparability of R^d w^X and sigma for L_alpha at the magic exponent

        Flat planes use the exact half-space measure (L_alpha is a multiple of
        L_0 there); other sets need a solver on the L_alpha problem.
    """
    if abs(gamma.n - gamma.d - 2.0 - alpha) > 1e-9:
        raise MagicExponentError(gamma.n, gamma.d, alpha)
    X = np.asarray(X, dtype=float)
    R = float(nearest_points(gamma, X[None], rule if solver is None else solver.rule).distance[0])
    quotients = []
    exact = solver is None
    if exact and gamma.kind != BoundaryKind.AFFINE_PLANE:
        raise ConfigError('Comparability away from flat planes needs a measure solver')
    d = int(gamma.d) if exact else gamma.d
    for A in sets:
        reach_A = np.linalg.norm(A.centers - X, axis=1) + A.radii
        if np.any(reach_A > reach * R + 1e-12):
            raise GeometryError(f'{A} leaves B(X, {reach:g} R)')
        if exact:
            centers, radii = A.flat_balls(d)
            omega = float(model_measure_exact(d, X[None, :d], X[None, d:], centers, radii)[0])
            sigma = A.flat_sigma(d)
        else:
            omega = solver.omega(X, A)
            sigma = A.flat_sigma(int(gamma.d)) if solver.rule is None else A.sigma(solver.rule)
        if sigma > 0 and omega > 0:
            quotients.append(R ** gamma.d * omega / sigma)
    report = RatioReport.from_ratios(quotients)
    return ComparabilityResult(constant=report.constant, quotients=quotients, reach=reach,
                               source='exact' if exact else 'solver')


def comparability_sets(gamma: BoundarySet, X: np.ndarray, R: float, count: int, rng_seed: int, reach: float = 1.5,
                       rule: Optional[QuadratureRule] = None) -> List[BoundarySubset]:
    """
        Random unions of balls on Gamma inside B(X, reach * R)
    """
    rng = np.random.default_rng(rng_seed)
    if gamma.kind == BoundaryKind.CANTOR:
        foot = nearest_points(gamma, X[None], rule).feet[0]
        radius = math.sqrt(max((reach * R) ** 2 - R ** 2, 0.0))
        d = None
    else:
        d = int(gamma.d)
        foot = X.copy()
        foot[d:] = 0.0
        radius = math.sqrt((reach * R) ** 2 - float(np.sum(X[d:] ** 2)))
    sets = []
    for index in range(count * 5):
        if len(sets) == count:
            break
        centers, radii = random_sub_balls(foot, radius, rule, d, int(rng.integers(1, 4)), rng, (0.05, 0.6))
        if len(radii) == 0:
            continue
        E = BoundarySubset(centers, radii, set_id=f'A{len(sets)}')
        if np.all(np.linalg.norm(E.centers - X, axis=1) + E.radii <= reach * R):
            sets.append(E)
    return sets


def measure_csv(estimates: Sequence[MeasureEstimate], path: Path) -> Path:
    return write_rows_csv(path, ['pole', 'set_id', 'omega', 'sigma_fraction', 'resolution'],
                          ([' '.join(format(v, '.17g') for v in e.pole), e.set_id, e.value,
                            '' if e.sigma_fraction is None else e.sigma_fraction, e.resolution] for e in estimates))


def envelope_csv(report: AInftyReport, path: Path) -> Path:
    return write_rows_csv(path, ['delta', 'epsilon'], zip(report.thresholds, report.envelope))
