import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import special

from elliptic.boundary_geometry import BoundarySet, QuadratureRule, as_points, nearest_points, unit_ball_volume
from elliptic.enums import BoundaryKind
from elliptic.exceptions import AccuracyError, ConfigError, DegeneratePointError, GeometryError
from elliptic.reports import CarlesonReport, write_rows_csv

logger = logging.getLogger(__name__)

KERNEL_CHUNK = 2_000_000
GRADIENT_FLOOR = 1e-12
BETA_MAX_ITERATIONS = 50


def flat_constant(d: int, alpha: float) -> float:
    """
        c_{d,alpha} = integral over R^d of (1 + |u|^2)^{-(d+alpha)/2} du
    """
    return math.pi ** (d / 2.0) * special.gamma(alpha / 2.0) / special.gamma((d + alpha) / 2.0)


class DAlphaJet(object):
    """
        Values, gradients and Laplacians of D_alpha at a batch of points

        error is the relative truncation bound carried by I_0; it propagates
        to D as error / alpha and to the derivatives at the same order.
    """

    def __init__(self, value: np.ndarray, gradient: Optional[np.ndarray], laplacian: Optional[np.ndarray],
                 error: np.ndarray, integral: np.ndarray):
        self.value = value
        self.gradient = gradient
        self.laplacian = laplacian
        self.error = error
        self.integral = integral

    def __len__(self):
        return len(self.value)

    @property
    def gradient_norm(self) -> np.ndarray:
        return np.linalg.norm(self.gradient, axis=1)

    @property
    def value_error(self) -> np.ndarray:
        return self.value * self.error

    def row(self, i: int) -> 'DAlphaJet':
        return DAlphaJet(self.value[i:i + 1], None if self.gradient is None else self.gradient[i:i + 1],
                         None if self.laplacian is None else self.laplacian[i:i + 1], self.error[i:i + 1],
                         self.integral[i:i + 1])


def d_alpha_jet(gamma: BoundarySet, rule: Optional[QuadratureRule], alpha: float, X, order: int = 2,
                strict: bool = True) -> DAlphaJet:
    """
        Evaluate D_alpha = I_0^{-1/alpha} with I_0(X) = integral of |X - y|^{-d-alpha} dsigma(y)

        Kernel derivatives are analytic. When rule is None the boundary must be a
        flat plane and the closed form D = c^{-1/alpha} |t| is used. With strict,
        points closer to Gamma than 4 h_L raise an AccuracyError.
    """
    if alpha <= 0:
        raise ConfigError(f'alpha must be positive, got {alpha}')
    if order not in (0, 1, 2):
        raise ConfigError(f'Jet order must be 0, 1 or 2, got {order}')
    points, _ = as_points(X, gamma.n)

    if rule is None:
        if not gamma.is_flat:
            raise AccuracyError('D_alpha on a curved or fractal boundary needs a quadrature rule')
        return _flat_jet(gamma, alpha, points, order)

    if strict:
        delta = nearest_points(gamma, points, rule).distance
        too_close = delta < 4.0 * rule.covering_radius
        if too_close.any():
            worst = int(np.argmin(delta))
            raise AccuracyError(f'X={points[worst]} has delta={delta[worst]:.3g} below 4 h_L='
                                f'{4.0 * rule.covering_radius:.3g}')

    s = gamma.d + alpha
    n = gamma.n
    q = len(points)
    I0 = np.zeros(q)
    grad = np.zeros((q, n)) if order >= 1 else None
    lap = np.zeros(q) if order >= 2 else None
    step = max(1, KERNEL_CHUNK // max(1, len(rule.nodes)))
    for start in range(0, q, step):
        block = slice(start, start + step)
        diff = points[block, None, :] - rule.nodes[None, :, :]
        rho2 = np.einsum('qkn,qkn->qk', diff, diff)
        kernel = rho2 ** (-s / 2.0)
        I0[block] = kernel @ rule.weights
        if order >= 1:
            factor = kernel / rho2 * rule.weights
            grad[block] = -s * np.einsum('qk,qkn->qn', factor, diff)
            if order >= 2:
                lap[block] = s * (s + 2.0 - n) * factor.sum(axis=1)

    error = np.zeros(q)
    if rule.tail is not None:
        I0 = I0 + rule.tail.value(alpha)
        error = np.full(q, rule.tail.error(alpha)) / I0
    elif gamma.unbounded and rule.window is not None:
        error = _window_truncation(gamma, rule, alpha, points) / I0
    return _chain_rule(I0, grad, lap, alpha, error)


def _chain_rule(I0: np.ndarray, grad: Optional[np.ndarray], lap: Optional[np.ndarray], alpha: float,
                error: np.ndarray) -> DAlphaJet:
    power = -1.0 / alpha
    value = I0 ** power
    gradient = laplacian = None
    if grad is not None:
        gradient = (power * I0 ** (power - 1.0))[:, None] * grad
        if lap is not None:
            grad_sq = np.einsum('qn,qn->q', grad, grad)
            laplacian = power * ((power - 1.0) * I0 ** (power - 2.0) * grad_sq + I0 ** (power - 1.0) * lap)
    return DAlphaJet(value, gradient, laplacian, error / alpha, I0)


def _flat_jet(gamma: BoundarySet, alpha: float, points: np.ndarray, order: int) -> DAlphaJet:
    d = int(gamma.d)
    m = gamma.n - d
    scale = flat_constant(d, alpha) ** (-1.0 / alpha)
    t = points[:, d:]
    height = np.linalg.norm(t, axis=1)
    if np.any(height <= 0):
        raise AccuracyError('D_alpha is evaluated off the boundary only')
    value = scale * height
    gradient = laplacian = None
    if order >= 1:
        gradient = np.zeros_like(points)
        gradient[:, d:] = scale * t / height[:, None]
        if order >= 2:
            laplacian = scale * (m - 1) / height
    return DAlphaJet(value, gradient, laplacian, np.zeros(len(points)), value ** (-alpha))


def _window_truncation(gamma: BoundarySet, rule: QuadratureRule, alpha: float, points: np.ndarray) -> np.ndarray:
    """
        Interval bound C0 R^{-alpha} / (1 - 2^{-alpha}) for the part of Gamma
        outside a window whose edge sits at parameter distance R from X
    """
    d = int(gamma.d)
    lower, upper = rule.window
    x = points[:, :d]
    reach = np.min(np.minimum(x - lower, upper - x), axis=1)
    reach = np.maximum(reach, rule.covering_radius)
    c0 = unit_ball_volume(d) * (1.0 + gamma.lipschitz ** 2) ** (d / 2.0)
    return c0 * reach ** (-alpha) / (1.0 - 2.0 ** (-alpha))


def magic_residual(gamma: BoundarySet, rule: Optional[QuadratureRule], alpha: float, X,
                   strict: bool = True) -> np.ndarray:
    """
        R(X) = |D Delta D + (d + 1 - n) |grad D|^2| / |grad D|^2

        Vanishes exactly when div(D^{d+1-n} grad D) = 0. For n = d + 2 + alpha the
        kernel is harmonic, so R sits at round-off for every discrete measure.
    """
    points, single = as_points(X, gamma.n)
    jet = d_alpha_jet(gamma, rule, alpha, points, order=2, strict=strict)
    grad_sq = jet.gradient_norm ** 2
    degenerate = jet.gradient_norm <= GRADIENT_FLOOR
    if degenerate.any():
        raise DegeneratePointError(points[int(np.argmax(degenerate))].tolist())
    residual = np.abs(jet.value * jet.laplacian + (gamma.d + 1.0 - gamma.n) * grad_sq) / grad_sq
    return residual[0] if single else residual


class ComparabilityReport(BaseModel):
    min_ratio: float = Field(..., description='min of D_alpha / delta over the samples')
    max_ratio: float = Field(..., description='max of D_alpha / delta over the samples')
    samples: int
    min_delta: float
    max_delta: float


def sample_off_boundary(gamma: BoundarySet, rule: QuadratureRule, count: int, rng: np.random.Generator,
                        min_delta: float, max_delta: float, inner_fraction: float = 0.5) -> np.ndarray:
    """
        Points with delta log-uniform in [min_delta, max_delta], placed over the
        central part of the window (planes, graphs) or around the attractor (Cantor)
    """
    n = gamma.n
    collected: List[np.ndarray] = []
    attempts = 0
    while sum(len(c) for c in collected) < count and attempts < 50:
        attempts += 1
        batch = 2 * count
        heights = np.exp(rng.uniform(math.log(min_delta), math.log(max_delta), size=batch))
        if gamma.kind == BoundaryKind.CANTOR:
            start = rule.nodes[rng.integers(len(rule.nodes), size=batch)]
            directions = rng.standard_normal((batch, n))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            candidates = start + heights[:, None] * directions
        else:
            d = int(gamma.d)
            lower, upper = rule.window
            center = 0.5 * (lower + upper)
            half = 0.5 * inner_fraction * (upper - lower)
            params = center + rng.uniform(-1.0, 1.0, size=(batch, d)) * half
            normals = rng.standard_normal((batch, n - d))
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            frames = gamma.tangent_frame(params)[:, :, d:]
            candidates = gamma.embed(params) + heights[:, None] * np.einsum('qnk,qk->qn', frames, normals)
        delta = nearest_points(gamma, candidates, rule).distance
        keep = (delta >= min_delta) & (delta <= max_delta * 1.5)
        collected.append(candidates[keep])
    points = np.concatenate(collected) if collected else np.zeros((0, n))
    if len(points) < count:
        raise AccuracyError(f'Could only place {len(points)} of {count} sample points at the requested distances')
    return points[:count]


def comparability_scan(gamma: BoundarySet, rule: Optional[QuadratureRule], alpha: float, samples: int,
                       rng_seed: int, max_delta: Optional[float] = None) -> ComparabilityReport:
    """
        Bounds of D_alpha / delta over random X with delta in [8 h_L, diam]
    """
    if samples < 1:
        raise ConfigError('comparability_scan needs at least one sample')
    rng = np.random.default_rng(rng_seed)
    if rule is None:
        d = int(gamma.d)
        ratio = flat_constant(d, alpha) ** (-1.0 / alpha)
        return ComparabilityReport(min_ratio=ratio, max_ratio=ratio, samples=samples, min_delta=0.0,
                                   max_delta=math.inf)
    if max_delta is None:
        if gamma.kind == BoundaryKind.CANTOR:
            max_delta = gamma.diameter
        else:
            lower, upper = rule.window
            max_delta = float(np.min(upper - lower)) / 2.0
    min_delta = 8.0 * rule.covering_radius
    if min_delta >= max_delta:
        raise AccuracyError(f'Rule too coarse for a comparability scan: 8 h_L = {min_delta:.3g}')
    points = sample_off_boundary(gamma, rule, samples, rng, min_delta, max_delta)
    delta = nearest_points(gamma, points, rule).distance
    values = d_alpha_jet(gamma, rule, alpha, points, order=0).value
    ratios = values / delta
    logger.info(f'D_alpha/delta on {gamma}, alpha={alpha:.6g}: [{ratios.min():.6g}, {ratios.max():.6g}]')
    return ComparabilityReport(min_ratio=float(ratios.min()), max_ratio=float(ratios.max()), samples=len(points),
                               min_delta=float(delta.min()), max_delta=float(delta.max()))


class BetaNumber(BaseModel):
    center: List[float]
    radius: float
    value: float = Field(..., description='Normalized sup distance to the best affine fit over B(x, r)')


def _ball_grid(center: np.ndarray, r: float, per_axis: int) -> np.ndarray:
    d = len(center)
    axis = np.linspace(-r, r, per_axis)
    grid = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing='ij')], axis=1)
    grid = grid[np.linalg.norm(grid, axis=1) <= r * (1.0 + 1e-12)]
    return center + grid


def beta_infinity(gamma: BoundarySet, x, r: float, per_axis: int = 65) -> BetaNumber:
    """
        Jones beta_infinity(x, r) of a graph: minimax affine fit over a sample grid of B(x, r)

        Lawson's iteratively reweighted least squares; for scalar graphs the
        intercept is finally moved to the midrange of the signed residuals,
        which makes the returned value an upper bound of the grid optimum.
    """
    if gamma.graph is None:
        if gamma.kind == BoundaryKind.AFFINE_PLANE:
            return BetaNumber(center=[float(v) for v in np.atleast_1d(x)], radius=float(r), value=0.0)
        raise GeometryError('beta numbers are defined for graphs')
    if r <= 0:
        raise GeometryError('beta numbers need a positive radius')
    center = np.atleast_1d(np.asarray(x, dtype=float))
    samples = _ball_grid(center, r, per_axis)
    design = np.concatenate([np.ones((len(samples), 1)), samples - center], axis=1)
    if len(samples) <= design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        raise GeometryError(f'Degenerate sample grid for beta at x={center}, r={r}')
    values = gamma.graph.value(samples)

    weights = np.full(len(samples), 1.0 / len(samples))
    best_sup, best_coef = math.inf, None
    for _ in range(BETA_MAX_ITERATIONS):
        sqrt_w = np.sqrt(weights)[:, None]
        coef, *_ = np.linalg.lstsq(design * sqrt_w, values * sqrt_w, rcond=None)
        errors = np.linalg.norm(values - design @ coef, axis=1)
        sup = float(errors.max())
        if sup < best_sup:
            best_sup, best_coef = sup, coef
        total = float(np.sum(weights * errors))
        if total <= 1e-300:
            break
        weights = weights * errors / total

    if values.shape[1] == 1 or np.count_nonzero(np.ptp(values, axis=0)) <= 1:
        signed = values - design @ best_coef
        best_coef = best_coef.copy()
        best_coef[0] += 0.5 * (signed.max(axis=0) + signed.min(axis=0))
        best_sup = min(best_sup, float(np.linalg.norm(values - design @ best_coef, axis=1).max()))
    return BetaNumber(center=center.tolist(), radius=float(r), value=best_sup / r)


class BetaCube(BaseModel):
    center: List[float]
    side: float
    level: int
    beta: float
    carleson_quotient: float


def beta_carleson(gamma: BoundarySet, region: Tuple[Sequence[float], Sequence[float]], dyadic_levels: int,
                  per_axis: int = 33) -> Tuple[CarlesonReport, List[BetaCube]]:
    """
        sup over dyadic cubes Q of len(Q)^{-d} * sum over R in Q of beta(center(R), len(R))^2 len(R)^d
    """
    d = int(gamma.d)
    if gamma.d != 1:
        logger.warning(f'beta Carleson estimate requested for d={gamma.d}: outside the d = 1 statement')
    lower = np.asarray(region[0], dtype=float)[:d]
    upper = np.asarray(region[1], dtype=float)[:d]
    sides = upper - lower
    if np.any(sides <= 0) or not np.allclose(sides, sides[0]):
        raise GeometryError('beta Carleson regions are cubes')
    if dyadic_levels < 1:
        raise ConfigError('beta_carleson needs at least one dyadic level')

    cubes: List[Tuple[int, Tuple[int, ...], np.ndarray, float, float]] = []
    for level in range(dyadic_levels):
        count = 2 ** level
        side = float(sides[0]) / count
        for index in np.ndindex(*([count] * d)):
            center = lower + side * (np.asarray(index) + 0.5)
            beta = beta_infinity(gamma, center, side, per_axis).value if gamma.graph is not None else 0.0
            cubes.append((level, index, center, side, beta))

    rows: List[BetaCube] = []
    for level, index, center, side, beta in cubes:
        total = 0.0
        for sub_level, sub_index, _, sub_side, sub_beta in cubes:
            if sub_level < level:
                continue
            shift = sub_level - level
            if tuple(i >> shift for i in sub_index) == tuple(index):
                total += sub_beta ** 2 * sub_side ** d
        rows.append(BetaCube(center=center.tolist(), side=side, level=level, beta=beta,
                             carleson_quotient=total / side ** d))
    report = CarlesonReport.from_quotients([c.center for c in rows], [c.side for c in rows],
                                           [c.carleson_quotient for c in rows],
                                           resolution={'dyadic_levels': dyadic_levels, 'per_axis': per_axis})
    logger.info(f'beta Carleson norm over {len(rows)} cubes: {report.supremum:.6g}')
    return report, rows


def regularized_distance_csv(points: np.ndarray, jet: DAlphaJet, residuals: Optional[np.ndarray],
                             path: Path) -> Path:
    n = points.shape[1]
    residuals = np.full(len(points), np.nan) if residuals is None else residuals
    header = [f'x{i + 1}' for i in range(n)] + ['D', 'grad_norm', 'laplacian', 'residual']
    return write_rows_csv(path, header, (list(p) + [v, g, lap, res] for p, v, g, lap, res in
                                         zip(points, jet.value, jet.gradient_norm, jet.laplacian, residuals)))


def beta_csv(rows: Sequence[BetaCube], path: Path) -> Path:
    return write_rows_csv(path, ['cube', 'beta', 'carleson_quotient'],
                          ([f'L{c.level}:' + ' '.join(format(v, '.17g') for v in c.center), c.beta,
                            c.carleson_quotient] for c in rows))
