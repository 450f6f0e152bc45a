"""
    Cone functionals, cutoffs and the inequality checks built on them.

    Cone and tent integrals are grid-cell sums over the nodes of a NodalSample,
    in the flat coordinates X = (x, t) of the complement of R^d. Ball integrals
    of the Poincare and Caccioppoli checks go through the adaptive cubature of
    operator_fields instead, since their integrands are callables.
"""
import logging
import math
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from elliptic.boundary_geometry import (BoundarySet, QuadratureRule, nearest_points, sphere_directions,
                                        unit_ball_volume)
from elliptic.degenerate_solver import SolutionField, fit_loglog
from elliptic.enums import WeightMode
from elliptic.exceptions import BudgetExceededError, ConfigError, GeometryError
from elliptic.operator_fields import MatrixField, ScalarField, integrate_ball, weight_w
from elliptic.reports import CheckRow, write_rows_csv

logger = logging.getLogger(__name__)

C4 = math.sqrt(2.0)
KAPPA_SCALE = 1e-12


class SawTooth(object):
    """
        e(x) = slope * dist(x, P) for a finite set P; 1-Lipschitz when slope <= 1
    """

    def __init__(self, anchors: np.ndarray, slope: float = 1.0):
        if not 0.0 <= slope <= 1.0:
            raise ConfigError('Saw-tooth slopes must lie in [0, 1]')
        self.anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        self.slope = float(slope)

    def __repr__(self):
        return f'SawTooth({len(self.anchors)} anchors, slope={self.slope:g})'

    def __call__(self, x: np.ndarray) -> np.ndarray:
        gaps = np.linalg.norm(x[:, None, :] - self.anchors[None], axis=2)
        return self.slope * gaps.min(axis=1)

    def halved(self) -> 'SawTooth':
        return SawTooth(self.anchors, 0.5 * self.slope)


def sawtooth(points: np.ndarray, scale: float = 1.0) -> SawTooth:
    return SawTooth(points, scale)


def random_sawtooth(d: int, count: int, rng: np.random.Generator, spread: float = 1.0,
                    scale: float = 1.0) -> SawTooth:
    return SawTooth(rng.uniform(-spread, spread, size=(count, d)), scale)


class Cutoff(object):
    """
        chi = 1_{[0, ell]}(|t|) 1_E(x) 1_{e(x) <= |t|}, E a ball of R^d or all of it
    """

    def __init__(self, ell: float, d: int, center: Optional[Sequence[float]] = None, radius: Optional[float] = None,
                 e: Optional[SawTooth] = None):
        if ell <= 0:
            raise ConfigError('Cutoff heights must be positive')
        if (center is None) != (radius is None):
            raise ConfigError('A ball cutoff needs both a center and a radius')
        self.ell = float(ell)
        self.d = d
        self.center = None if center is None else np.asarray(center, dtype=float)[:d]
        self.radius = None if radius is None else float(radius)
        self.e = e

    def __repr__(self):
        where = 'R^d' if self.center is None else f'B({self.center.tolist()}, {self.radius:g})'
        return f'Cutoff(ell={self.ell:g}, {where}, e={self.e})'

    def __call__(self, points: np.ndarray) -> np.ndarray:
        x, height = points[:, :self.d], np.linalg.norm(points[:, self.d:], axis=1)
        mask = height <= self.ell
        if self.center is not None:
            mask &= np.linalg.norm(x - self.center, axis=1) <= self.radius
        if self.e is not None:
            mask &= self.e(x) <= height
        return mask

    def dilate(self) -> 'Cutoff':
        """
            chi_{2 ell, 2B, e/2}, pointwise above this cutoff
        """
        return Cutoff(2.0 * self.ell, self.d, self.center, None if self.radius is None else 2.0 * self.radius,
                      None if self.e is None else self.e.halved())


class NodalSample(object):
    """
        Values and gradients of u on grid nodes with their dual-cell volumes
    """

    def __init__(self, points: np.ndarray, values: np.ndarray, gradients: np.ndarray, volumes: np.ndarray, d: int,
                 source: Optional[Callable] = None):
        height = np.linalg.norm(points[:, d:], axis=1)
        keep = height > 0
        self.points = points[keep]
        self.values = values[keep]
        self.gradients = gradients[keep]
        self.volumes = volumes[keep]
        self.height = height[keep]
        self.d = d
        self.n = points.shape[1]
        self.source = source

    def __repr__(self):
        return f'NodalSample({len(self.values)} nodes, d={self.d}, n={self.n})'

    @classmethod
    def from_solution(cls, solution: SolutionField, d: int) -> 'NodalSample':
        grid = solution.grid
        return cls(grid.points(), solution.values, solution.nodal_gradient(), grid.dual_volumes(), d, solution)

    @classmethod
    def from_field(cls, field: ScalarField, axes: Sequence[np.ndarray], d: int) -> 'NodalSample':
        """
            Sample an analytic field on the tensor grid spanned by axes
        """
        points = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing='ij')], axis=1)
        widths = []
        for a in axes:
            w = np.zeros(len(a))
            w[1:] += 0.5 * np.diff(a)
            w[:-1] += 0.5 * np.diff(a)
            widths.append(w)
        volumes = np.prod(np.stack([g.ravel() for g in np.meshgrid(*widths, indexing='ij')], axis=1), axis=1)
        height = np.linalg.norm(points[:, d:], axis=1)
        off = height > 0
        values = np.zeros(len(points))
        gradients = np.zeros_like(points)
        values[off] = field(points[off])
        gradients[off] = field.gradient(points[off])
        return cls(points, values, gradients, volumes, d, field)

    def scaled(self, factor: float) -> 'NodalSample':
        sample = object.__new__(NodalSample)
        sample.__dict__.update(self.__dict__)
        sample.values = factor * self.values
        sample.gradients = factor * self.gradients
        if self.source is not None:
            source = self.source
            sample.source = lambda X: factor * source(X)
        return sample

    @property
    def kappa(self) -> float:
        return KAPPA_SCALE * float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def p_density(self, p: float) -> np.ndarray:
        """
            |grad u|^2 |u|^{p-2}, zero where grad u = 0; (|u| + kappa)^{p-2} for p < 2
        """
        if p <= 1:
            raise ConfigError('p-adapted functionals need p > 1')
        grad_sq = np.sum(self.gradients ** 2, axis=1)
        magnitude = np.abs(self.values)
        if p < 2:
            magnitude = magnitude + self.kappa
        with np.errstate(divide='ignore', invalid='ignore'):
            density = grad_sq * magnitude ** (p - 2.0)
        return np.where(grad_sq > 0, density, 0.0)

    def cone(self, x: np.ndarray, aperture: float = C4) -> np.ndarray:
        """
            Nodes in gamma(x) = {|X - x| <= aperture delta(X)}, which for aperture sqrt(2) is |y - x| <= |t|
        """
        planar = np.sum((self.points[:, :self.d] - x[None, :]) ** 2, axis=1)
        return planar + self.height ** 2 <= (aperture * self.height) ** 2 * (1.0 + 1e-12)


class ConeFunctional(BaseModel):
    x: List[List[float]] = Field(..., description='Boundary points where the functional was evaluated')
    values: List[float]
    empty: List[bool] = Field(..., description='Cone intersected with the cutoff support held no node')
    p: Optional[float] = None
    aperture: float = C4

    def lp_norm(self, p: float, cell: float) -> float:
        values = np.asarray(self.values)
        return float((np.sum(values ** p) * cell) ** (1.0 / p))


def boundary_grid(center: Sequence[float], radius: float, per_axis: int) -> Tuple[np.ndarray, float]:
    """
        Cell-centered points of the cube of half side radius around center in R^d, with the cell measure
    """
    center = np.asarray(center, dtype=float)
    step = 2.0 * radius / per_axis
    axis = -radius + step * (np.arange(per_axis) + 0.5)
    points = center + np.stack([g.ravel() for g in np.meshgrid(*([axis] * len(center)), indexing='ij')], axis=1)
    return points, step ** len(center)


def nontangential_max(sample: NodalSample, x_grid: np.ndarray, cutoff: Cutoff, aperture: float = C4) -> ConeFunctional:
    """
        N(u | chi)(x): max of |u| over grid nodes of gamma(x) inside the cutoff support
    """
    support = cutoff(sample.points)
    magnitude = np.abs(sample.values)
    values, empty = [], []
    for x in np.atleast_2d(x_grid):
        inside = sample.cone(x, aperture) & support
        empty.append(not inside.any())
        values.append(float(magnitude[inside].max()) if inside.any() else 0.0)
    if any(empty):
        logger.info(f'N(u|chi): {sum(empty)} of {len(empty)} cones miss the support of {cutoff}')
    return ConeFunctional(x=[list(map(float, x)) for x in np.atleast_2d(x_grid)], values=values, empty=empty,
                          aperture=aperture)


def square_function(sample: NodalSample, p: float, x_grid: np.ndarray, cutoff: Cutoff,
                    aperture: float = C4) -> ConeFunctional:
    """
        S_p(u | chi)(x) = (sum over gamma(x) of |grad u|^2 |u|^{p-2} / |s|^{n-2} times cell volume)^{1/p}
    """
    density = sample.p_density(p) * sample.volumes / sample.height ** (sample.n - 2)
    density = np.where(cutoff(sample.points), density, 0.0)
    values, empty = [], []
    for x in np.atleast_2d(x_grid):
        inside = sample.cone(x, aperture)
        empty.append(not (inside & (density > 0)).any())
        values.append(float(np.sum(density[inside])) ** (1.0 / p))
    return ConeFunctional(x=[list(map(float, x)) for x in np.atleast_2d(x_grid)], values=values, empty=empty, p=p,
                          aperture=aperture)


def square_function_fubini(sample: NodalSample, x_grid: np.ndarray, cell: float, cutoff: Cutoff) -> float:
    """
        sum_x S_2(u|chi)(x)^2 cell against the node sum weighted by the cone-section measure omega_d |t|^d
    """
    functional = square_function(sample, 2.0, x_grid, cutoff)
    lhs = float(np.sum(np.asarray(functional.values) ** 2) * cell)
    density = np.sum(sample.gradients ** 2, axis=1) * sample.volumes / sample.height ** (sample.n - 2)
    overlap = unit_ball_volume(sample.d) * sample.height ** sample.d
    rhs = float(np.sum(np.where(cutoff(sample.points), density * overlap, 0.0)))
    return lhs / rhs if rhs > 0 else math.nan


def wp_norm(sample: NodalSample, p: float) -> float:
    """
        (integral of |grad u|^2 |u|^{p-2} |t|^{-(n-d-1)} over the solve box)^{1/p}
    """
    weight = sample.height ** (sample.d + 1.0 - sample.n)
    return float(np.sum(sample.p_density(p) * weight * sample.volumes)) ** (1.0 / p)


def energy(sample: NodalSample) -> float:
    weight = sample.height ** (sample.d + 1.0 - sample.n)
    return float(np.sum(np.sum(sample.gradients ** 2, axis=1) * weight * sample.volumes))


class InequalityReport(BaseModel):
    """
        Worst ratio of an inequality over a battery, with every row kept for the CSV
    """
    check_id: str
    worst: float
    rows: List[CheckRow]

    @classmethod
    def from_rows(cls, check_id: str, rows: Sequence[CheckRow], use_min: bool = False) -> 'InequalityReport':
        ratios = [r.ratio for r in rows if np.isfinite(r.ratio)]
        worst = (min(ratios) if use_min else max(ratios)) if ratios else math.nan
        return cls(check_id=check_id, worst=worst, rows=list(rows))


def _ratio(lhs: float, rhs: float) -> float:
    if rhs == 0:
        return math.nan if lhs == 0 else math.inf
    return lhs / rhs


def poincare_bank(gamma: BoundarySet, rule: Optional[QuadratureRule], r: float, count: int,
                  rng: np.random.Generator) -> List[ScalarField]:
    """
        u = (delta / r) f with f a random product of shifted sines; the first member is f = 1
    """
    n = gamma.n
    bank = []
    for index in range(count):
        if index == 0:
            freq, phase, amplitude = np.zeros(n), np.zeros(n), 0.0
        else:
            freq = rng.uniform(0.5, 3.0, size=n) / r
            phase = rng.uniform(0.0, 2.0 * math.pi, size=n)
            amplitude = 0.5

        def factor(points, freq=freq, phase=phase, amplitude=amplitude):
            terms = 1.0 + amplitude * np.sin(points * freq + phase)
            value = np.prod(terms, axis=1)
            grad = np.zeros_like(points)
            for k in range(n):
                others = np.prod(np.delete(terms, k, axis=1), axis=1)
                grad[:, k] = amplitude * freq[k] * np.cos(points[:, k] * freq[k] + phase[k]) * others
            return value, grad

        def value(points, factor=factor):
            delta = nearest_points(gamma, points, rule).distance
            return delta / r * factor(points)[0]

        def gradient(points, factor=factor):
            near = nearest_points(gamma, points, rule)
            with np.errstate(divide='ignore', invalid='ignore'):
                unit = (points - near.feet) / near.distance[:, None]
            unit = np.nan_to_num(unit)
            f, grad_f = factor(points)
            return (f[:, None] * unit + near.distance[:, None] * grad_f) / r

        bank.append(ScalarField(n, value, gradient, name=f'poincare[{index}]'))
    return bank


def _ball_integrals(u: ScalarField, weight: ScalarField, center, r: float, gamma, rule, p: float,
                    max_points: int, max_depth: int) -> Tuple[float, float]:
    def u_term(points):
        return np.abs(u(points)) ** p * weight(points)

    def grad_term(points):
        return np.sum(u.gradient(points) ** 2, axis=1) * weight(points)

    value = integrate_ball(u_term, center, r, gamma, rule, max_depth=max_depth, max_points=max_points).value
    grad = integrate_ball(grad_term, center, r, gamma, rule, max_depth=max_depth, max_points=max_points).value
    return value, grad


def poincare_check(gamma: BoundarySet, rule: Optional[QuadratureRule], center, r: float, bank: Sequence[ScalarField],
                   max_points: int = 5_000_000, max_depth: int = 4) -> InequalityReport:
    """
        max over the bank of int_B |u|^2 dm / (r^2 int_B |grad u|^2 dm)
    """
    weight = weight_w(gamma, WeightMode.EUCLIDEAN, rule)
    rows = []
    for u in bank:
        lhs, grad = _ball_integrals(u, weight, center, r, gamma, rule, 2.0, max_points, max_depth)
        if lhs == 0 and grad == 0:
            continue
        rows.append(CheckRow(check_id=f'poincare:{u.name}', lhs=lhs, rhs=r ** 2 * grad, ratio=_ratio(lhs, r ** 2 * grad)))
    return InequalityReport.from_rows('poincare', rows)


def sobolev_poincare_check(gamma: BoundarySet, rule: Optional[QuadratureRule], center, r: float,
                           bank: Sequence[ScalarField], p: float, max_points: int = 5_000_000,
                           max_depth: int = 4) -> InequalityReport:
    """
        (avg_B |u|^p dm)^{1/p} / (r (avg_B |grad u|^2 dm)^{1/2}) for p in [1, 2n/(n-2)]
    """
    n = gamma.n
    upper = math.inf if n == 2 else 2.0 * n / (n - 2.0)
    if not 1.0 <= p <= upper:
        raise ConfigError(f'Sobolev-Poincare exponent {p} outside [1, {upper:g}]')
    weight = weight_w(gamma, WeightMode.EUCLIDEAN, rule)
    mass = integrate_ball(weight._value, center, r, gamma, rule, max_depth=max_depth, max_points=max_points).value
    rows = []
    for u in bank:
        lp, grad = _ball_integrals(u, weight, center, r, gamma, rule, p, max_points, max_depth)
        lhs = (lp / mass) ** (1.0 / p)
        rhs = r * math.sqrt(grad / mass)
        if lhs == 0 and rhs == 0:
            continue
        rows.append(CheckRow(check_id=f'sobolev_poincare[p={p:g}]:{u.name}', lhs=lhs, rhs=rhs, ratio=_ratio(lhs, rhs)))
    return InequalityReport.from_rows(f'sobolev_poincare_p{p:g}', rows)


class OscillationReport(BaseModel):
    radii: List[float]
    oscillations: List[float]
    hoelder_exponent: Optional[float] = Field(None, description='Slope of log osc against log s; None for constant u')


def oscillation_decay(u, x, radii: Sequence[float], per_axis: int = 9) -> OscillationReport:
    """
        Least-squares decay exponent of osc_{B(x, s)} u over the radii
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    unit = np.linspace(-1.0, 1.0, per_axis)
    lattice = np.stack([g.ravel() for g in np.meshgrid(*([unit] * n), indexing='ij')], axis=1)
    lattice = lattice[np.linalg.norm(lattice, axis=1) <= 1.0]
    oscillations = []
    for s in radii:
        values = np.asarray(u(x + s * lattice), dtype=float)
        values = values[np.isfinite(values)]
        oscillations.append(float(values.max() - values.min()) if len(values) else 0.0)
    osc = np.asarray(oscillations)
    scale = max(1.0, float(np.max(np.abs(osc))))
    exponent = None
    if np.count_nonzero(osc > 1e-12 * scale) >= 2:
        exponent = fit_loglog(np.asarray(radii, dtype=float), osc)
    else:
        logger.info('Oscillation is numerically zero; decay fit skipped')
    return OscillationReport(radii=[float(s) for s in radii], oscillations=oscillations, hoelder_exponent=exponent)


def p_ellipticity_check(field: MatrixField, bank: Sequence[NodalSample], cutoffs: Sequence[Cutoff],
                        p: float) -> InequalityReport:
    """
        min over the bank of int A grad u . grad(|u|^{p-2} u) chi / int |grad u|^2 |u|^{p-2} chi dm_0
    """
    rows = []
    for index, sample in enumerate(bank):
        A = field(sample.points)
        density = sample.p_density(p)
        grad_sq = np.sum(sample.gradients ** 2, axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            factor = np.where(grad_sq > 0, density / grad_sq, 0.0)
        flux = (p - 1.0) * factor * np.einsum('qij,qj,qi->q', A, sample.gradients, sample.gradients)
        weight = sample.height ** (sample.d + 1.0 - sample.n)
        for chi_index, chi in enumerate(cutoffs):
            mask = chi(sample.points)
            lhs = float(np.sum(np.where(mask, flux * sample.volumes, 0.0)))
            rhs = float(np.sum(np.where(mask, density * weight * sample.volumes, 0.0)))
            if rhs == 0:
                continue
            rows.append(CheckRow(check_id=f'p_ellipticity[p={p:g}]:{index}:{chi_index}', lhs=lhs, rhs=rhs,
                                 ratio=lhs / rhs))
    return InequalityReport.from_rows(f'p_ellipticity_p{p:g}', rows, use_min=True)


def caccioppoli_check(u, p: float, balls: Sequence[Tuple[Sequence[float], float]], d: int,
                      max_points: int = 5_000_000, max_depth: int = 3) -> InequalityReport:
    """
        r^2 int_B |grad u|^2 |u|^{p-2} dm_0 / int_{2B} |u|^p dm_0 with 2B away from R^d
    """
    rows = []
    for center, r in balls:
        center = np.asarray(center, dtype=float)
        n = len(center)
        if np.linalg.norm(center[d:]) <= 2.0 * r:
            raise GeometryError(f'Caccioppoli ball B({center.tolist()}, {r}) is too close to the boundary')

        def weight(points):
            return np.linalg.norm(points[:, d:], axis=1) ** (d + 1.0 - n)

        def gradient_term(points):
            values = np.abs(u(points))
            grad_sq = np.sum(np.atleast_2d(u.gradient(points)) ** 2, axis=1)
            with np.errstate(divide='ignore', invalid='ignore'):
                density = np.where(grad_sq > 0, grad_sq * values ** (p - 2.0), 0.0)
            return density * weight(points)

        def value_term(points):
            return np.abs(u(points)) ** p * weight(points)

        lhs = r ** 2 * integrate_ball(gradient_term, center, r, max_depth=max_depth, max_points=max_points).value
        rhs = integrate_ball(value_term, center, 2.0 * r, max_depth=max_depth, max_points=max_points).value
        rows.append(CheckRow(check_id=f'caccioppoli[p={p:g}]:r={r:g}', lhs=lhs, rhs=rhs, ratio=_ratio(lhs, rhs)))
    return InequalityReport.from_rows(f'caccioppoli_p{p:g}', rows)


class NSBounds(BaseModel):
    s_norm: float = Field(..., description='||S_q(u|chi)||_p')
    n_norm_dilated: float = Field(..., description='||N(u|chi dilated)||_p')
    s_over_n: float
    n_norm: float = Field(..., description='||N(u|chi)||_p')
    s_norm_dilated: float
    anchor_term: float = Field(..., description='ell^d |u(x_B, ell)|')
    n_over_s: float


def ns_bounds_check(sample: NodalSample, p: float, q: float, cutoff: Cutoff, x_grid: np.ndarray,
                    cell: float) -> NSBounds:
    """
        Both sides of the S <= C N and N <= C (S + ell^d |u(x_B, ell)|) local estimates
    """
    if cutoff.center is None:
        raise ConfigError('N/S bounds need a ball cutoff')
    dilated = cutoff.dilate()
    s_norm = square_function(sample, q, x_grid, cutoff).lp_norm(p, cell)
    n_dilated = nontangential_max(sample, x_grid, dilated).lp_norm(p, cell)
    n_norm = nontangential_max(sample, x_grid, cutoff).lp_norm(p, cell)
    s_dilated = square_function(sample, q, x_grid, dilated).lp_norm(p, cell)
    anchor_point = np.zeros(sample.n)
    anchor_point[:sample.d] = cutoff.center
    anchor_point[sample.d] = cutoff.ell
    if sample.source is None:
        raise ConfigError('N/S bounds need a sample that can be evaluated off the grid')
    anchor = cutoff.ell ** sample.d * abs(float(np.atleast_1d(sample.source(anchor_point[None]))[0]))
    return NSBounds(s_norm=s_norm, n_norm_dilated=n_dilated, s_over_n=_ratio(s_norm, n_dilated), n_norm=n_norm,
                    s_norm_dilated=s_dilated, anchor_term=anchor, n_over_s=_ratio(n_norm, s_dilated + anchor))


def carleson_energy(sample: NodalSample, center: Sequence[float], r: float, gamma: Optional[BoundarySet] = None,
                    rule: Optional[QuadratureRule] = None) -> float:
    """
        (1 / sigma(Delta)) sum over the tent B(x, r) of |grad u|^2 delta^{d-n+2} times cell volume
    """
    center = np.asarray(center, dtype=float)
    inside = np.linalg.norm(sample.points - center, axis=1) < r
    if gamma is None:
        delta = sample.height
        sigma = unit_ball_volume(sample.d) * r ** sample.d
    else:
        delta = nearest_points(gamma, sample.points, rule).distance
        if rule is None:
            raise ConfigError('Carleson energy on a general boundary needs a quadrature rule')
        sigma = rule.mass_in_ball(center, r)
    density = np.sum(sample.gradients ** 2, axis=1) * delta ** (sample.d - sample.n + 2.0) * sample.volumes
    return float(np.sum(density[inside & (delta > 0)])) / sigma


def bmo_norm(f: Callable, rule: QuadratureRule, balls: Sequence[Tuple[Sequence[float], float]]) -> float:
    """
        sup over the surface balls of (avg |f - f_Delta|^2 d sigma)^{1/2}
    """
    values = np.asarray(f(rule.nodes), dtype=float)
    worst = 0.0
    for center, r in balls:
        index = rule.tree.query_ball_point(np.asarray(center, dtype=float), r)
        if not index:
            continue
        weights = rule.weights[index]
        local = values[index]
        mean = float(weights @ local / weights.sum())
        worst = max(worst, math.sqrt(float(weights @ (local - mean) ** 2 / weights.sum())))
    return worst


def trace_h_norm(g: Callable, rule: QuadratureRule, d: float, max_pairs: float = 4e8, chunk: int = 2048) -> float:
    """
        H^{1/2} trace seminorm: double sum of |g(x) - g(y)|^2 / |x - y|^{d+1} over node pairs
    """
    count = len(rule.nodes)
    if float(count) ** 2 > max_pairs:
        raise BudgetExceededError('trace norm pairs', float(count) ** 2, max_pairs)
    values = np.asarray(g(rule.nodes), dtype=float)
    total = 0.0
    for start in range(0, count, chunk):
        block = slice(start, start + chunk)
        gaps = np.linalg.norm(rule.nodes[block, None, :] - rule.nodes[None], axis=2)
        diff = (values[block, None] - values[None]) ** 2
        with np.errstate(divide='ignore', invalid='ignore'):
            kernel = np.where(gaps > 0, diff / gaps ** (d + 1.0), 0.0)
        total += float(rule.weights[block] @ kernel @ rule.weights)
    return math.sqrt(total)


class TraceGapReport(BaseModel):
    radii: List[float]
    gaps: List[List[float]] = Field(..., description='Per boundary point, sup |u - g(x)| over the cone below each radius')
    converged_fraction: float = Field(..., description='Share of points whose gap shrinks to a quarter or to round-off')


def trace_gap(u, g: Callable, x_points: np.ndarray, radii: Sequence[float], d: int, n: int,
              heights: int = 6, directions: int = 8) -> TraceGapReport:
    """
        sup over gamma(x) cap {delta <= r} of |u - g(x)|, on a lattice of cone points
    """
    radii = sorted((float(r) for r in radii), reverse=True)
    normals, _ = sphere_directions(n - d, count=directions)
    planar = np.linspace(-1.0, 1.0, 5)
    planar = np.stack([g_.ravel() for g_ in np.meshgrid(*([planar] * d), indexing='ij')], axis=1)
    planar = planar[np.linalg.norm(planar, axis=1) <= 1.0]
    all_gaps = []
    for x in np.atleast_2d(x_points):
        target = float(np.atleast_1d(g(x[None]))[0])
        row = []
        for r in radii:
            levels = np.geomspace(r / 16.0, r, heights)
            points = []
            for s in levels:
                for normal in normals:
                    for offset in planar:
                        point = np.zeros(n)
                        point[:d] = x + s * offset
                        point[d:] = s * normal
                        points.append(point)
            values = np.asarray(u(np.asarray(points)), dtype=float)
            row.append(float(np.nanmax(np.abs(values - target))))
        all_gaps.append(row)
    gaps = np.asarray(all_gaps)
    converged = gaps[:, -1] <= np.maximum(0.25 * gaps[:, 0], 1e-6)
    return TraceGapReport(radii=radii, gaps=gaps.tolist(), converged_fraction=float(np.mean(converged)))


def functional_csv(functional: ConeFunctional, path: Path) -> Path:
    return write_rows_csv(path, ['x', 'value'], ([' '.join(format(v, '.17g') for v in x), value]
                                                 for x, value in zip(functional.x, functional.values)))

