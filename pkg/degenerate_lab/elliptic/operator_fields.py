import itertools
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from elliptic.boundary_geometry import (BoundarySet, QuadratureRule, as_points, nearest_points, sphere_directions,
                                        unit_ball_volume)
from elliptic.config import OperatorDescriptor
from elliptic.enums import BoundaryKind, CovVariant, OperatorKind, WeightMode
from elliptic.exceptions import (AccuracyError, BiLipschitzError, BudgetExceededError, ConfigError,
                                 EllipticityError, GeometryError)
from elliptic.regularized_distance import ComparabilityReport, d_alpha_jet, flat_constant
from elliptic.reports import CarlesonReport

logger = logging.getLogger(__name__)

RHO_FULL_SMALLNESS = 0.1
BUMP_ORDER = 8


class ScalarField(object):
    """
        X -> value, with an analytic gradient when one is known
    """

    def __init__(self, n: int, value: Callable, gradient: Optional[Callable] = None, name: str = 'field',
                 smoothness: int = 0):
        self.n = n
        self._value = value
        self._gradient = gradient
        self.name = name
        self.smoothness = smoothness

    def __repr__(self):
        return f'ScalarField({self.name})'

    def __call__(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        values = self._value(points)
        return values[0] if single else values

    @property
    def has_analytic_gradient(self) -> bool:
        return self._gradient is not None

    def gradient(self, X, step: float = 1e-6) -> np.ndarray:
        points, single = as_points(X, self.n)
        if self._gradient is not None:
            grad = self._gradient(points)
        else:
            grad = np.zeros_like(points)
            h = step * np.maximum(1.0, np.linalg.norm(points, axis=1))
            for i in range(self.n):
                shift = np.zeros_like(points)
                shift[:, i] = h
                grad[:, i] = (self._value(points + shift) - self._value(points - shift)) / (2.0 * h)
        return grad[0] if single else grad


class MatrixField(object):
    """
        X -> A(X) (n x n) together with its reference weight w

        The reduced matrix is A / w. Scalar fields (A = a(X) Id) expose their
        coefficient so that assembly can use harmonic face averages.
    """

    def __init__(self, n: int, weight: ScalarField, matrix: Optional[Callable] = None,
                 coefficient: Optional[Callable] = None, name: str = 'operator', smoothness: int = 0,
                 d: Optional[float] = None):
        if matrix is None and coefficient is None:
            raise ConfigError('A matrix field needs a matrix or a scalar coefficient')
        self.n = n
        self.d = d
        self.weight = weight
        self._matrix = matrix
        self._coefficient = coefficient
        self.name = name
        self.smoothness = smoothness

    def __repr__(self):
        return f'MatrixField({self.name}, n={self.n})'

    @property
    def is_scalar(self) -> bool:
        return self._coefficient is not None

    def coefficient(self, X) -> np.ndarray:
        if self._coefficient is None:
            raise ConfigError(f'{self} is not a scalar multiple of the identity')
        points, single = as_points(X, self.n)
        values = self._coefficient(points)
        return values[0] if single else values

    def __call__(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        if self._matrix is not None:
            values = self._matrix(points)
        else:
            values = self._coefficient(points)[:, None, None] * np.eye(self.n)[None]
        return values[0] if single else values

    def reduced(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        with np.errstate(invalid='ignore', divide='ignore'):
            values = self(points) / self.weight(points)[:, None, None]
        return values[0] if single else values


def _power_of_positive(values: np.ndarray, exponent: float) -> np.ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(values > 0, np.abs(values) ** exponent, np.inf)


def model_weight(d: int, n: int) -> ScalarField:
    exponent = d + 1.0 - n

    def value(points):
        return _power_of_positive(np.linalg.norm(points[:, d:], axis=1), exponent)

    def gradient(points):
        t = points[:, d:]
        height = np.linalg.norm(t, axis=1)
        grad = np.zeros_like(points)
        with np.errstate(divide='ignore', invalid='ignore'):
            grad[:, d:] = (exponent * height ** (exponent - 2.0))[:, None] * t
        return grad

    return ScalarField(n, value, gradient, name=f'|t|^{exponent:g}', smoothness=2)


def weight_w(gamma: BoundarySet, mode: str = WeightMode.EUCLIDEAN, rule: Optional[QuadratureRule] = None,
             alpha: Optional[float] = None) -> ScalarField:
    """
        w = delta^{d+1-n} (euclidean) or D_alpha^{d+1-n} (d_alpha); +inf on Gamma
    """
    exponent = gamma.d + 1.0 - gamma.n
    if mode == WeightMode.EUCLIDEAN:
        def value(points):
            return _power_of_positive(nearest_points(gamma, points, rule).distance, exponent)

        def gradient(points):
            result = nearest_points(gamma, points, rule)
            delta = result.distance
            with np.errstate(divide='ignore', invalid='ignore'):
                unit = (points - result.feet) / delta[:, None]
                return (exponent * delta ** (exponent - 1.0))[:, None] * unit

        return ScalarField(gamma.n, value, gradient, name='delta^(d+1-n)', smoothness=0)

    if mode != WeightMode.D_ALPHA:
        raise ConfigError(f'Unknown weight mode {mode!r}')
    if alpha is None or alpha <= 0:
        raise ConfigError('The d_alpha weight needs a positive alpha')

    def jet_values(points, order):
        delta = nearest_points(gamma, points, rule).distance
        off = delta > 0
        value = np.full(len(points), np.inf)
        grad = np.zeros_like(points)
        if off.any():
            jet = d_alpha_jet(gamma, rule, alpha, points[off], order=order, strict=False)
            value[off] = jet.value ** exponent
            if order:
                grad[off] = (exponent * jet.value ** (exponent - 1.0))[:, None] * jet.gradient
        return value, grad

    return ScalarField(gamma.n, lambda p: jet_values(p, 0)[0], lambda p: jet_values(p, 1)[1],
                       name=f'D_{alpha:g}^(d+1-n)', smoothness=2)


def model_operator(d: int, n: int) -> MatrixField:
    """
        L_0 = -div |t|^{d+1-n} grad on the complement of R^d
    """
    weight = model_weight(d, n)
    return MatrixField(n, weight, coefficient=weight._value, name='model', smoothness=2, d=d)


def distance_operator(gamma: BoundarySet, rule: Optional[QuadratureRule] = None) -> MatrixField:
    weight = weight_w(gamma, WeightMode.EUCLIDEAN, rule)
    return MatrixField(gamma.n, weight, coefficient=weight._value, name='distance', d=gamma.d)


def build_L_alpha(gamma: BoundarySet, rule: Optional[QuadratureRule], alpha: float) -> MatrixField:
    """
        A = D_alpha^{d+1-n} Id, reduced against the Euclidean weight delta^{d+1-n}
    """
    coefficient = weight_w(gamma, WeightMode.D_ALPHA, rule, alpha)
    weight = weight_w(gamma, WeightMode.EUCLIDEAN, rule)
    return MatrixField(gamma.n, weight, coefficient=coefficient._value, name=f'L_alpha({alpha:g})', smoothness=2,
                       d=gamma.d)


def c3_from_comparability(report: ComparabilityReport, n: int, d: float) -> float:
    """
        Ellipticity constant of L_alpha: (max D/delta / min D/delta)^{n-d-1}
    """
    return (report.max_ratio / report.min_ratio) ** (n - d - 1.0)


class CodimOneCoefficients(object):
    """
        Coefficient matrix field A_1(x, s) on the half-space R^{d+1}_+
    """

    def __init__(self, d: int, matrix: Callable, scalar: Optional[Callable] = None, name: str = 'coefficients'):
        self.d = d
        self._matrix = matrix
        self._scalar = scalar
        self.name = name

    @property
    def is_scalar(self) -> bool:
        return self._scalar is not None

    def __call__(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self._matrix(x, s)

    def scalar(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self._scalar(x, s)


def constant_coefficients(matrix: Sequence[Sequence[float]]) -> CodimOneCoefficients:
    matrix = np.asarray(matrix, dtype=float)
    d = matrix.shape[0] - 1
    if matrix.shape != (d + 1, d + 1):
        raise ConfigError('Codimension-one coefficients are square (d+1) x (d+1) matrices')
    sym = 0.5 * (matrix + matrix.T)
    if np.linalg.eigvalsh(sym).min() <= 0:
        raise EllipticityError([], [], float(np.linalg.eigvalsh(sym).min()))
    scalar = None
    if np.allclose(matrix, matrix[0, 0] * np.eye(d + 1), rtol=0.0, atol=0.0):
        scalar = lambda x, s: np.full(len(s), matrix[0, 0])
    return CodimOneCoefficients(d, lambda x, s: np.broadcast_to(matrix, (len(s), d + 1, d + 1)).copy(), scalar,
                                name='constant')


def layered_contrast(d: int, kappa: float, interval: Sequence[float], thickness: float) -> CodimOneCoefficients:
    """
        kappa Id inside the layer {x in interval, 0 <= s < thickness}, Id elsewhere

        With kappa << 1 the layer insulates the boundary piece under it, which
        starves it of elliptic measure while keeping its surface measure.
    """
    if kappa <= 0:
        raise ConfigError('layer conductivity must be positive')
    lo, hi = float(interval[0]), float(interval[1])

    def scalar(x, s):
        inside = np.all((x >= lo) & (x <= hi), axis=1) & (s >= 0) & (s < thickness)
        return np.where(inside, kappa, 1.0)

    return CodimOneCoefficients(d, lambda x, s: scalar(x, s)[:, None, None] * np.eye(d + 1)[None], scalar,
                                name='layered_contrast')


def coefficients_from_descriptor(d: int, raw: Dict) -> CodimOneCoefficients:
    family = raw.get('family', 'constant')
    if family == 'constant':
        return constant_coefficients(raw.get('matrix', np.eye(d + 1).tolist()))
    if family == 'layered_contrast':
        return layered_contrast(d, float(raw.get('kappa', 1e-3)), raw.get('interval', [-0.25, 0.25]),
                                float(raw.get('thickness', 0.25)))
    raise ConfigError(f'Unknown codimension-one coefficient family {family!r}')


def lift_codim1(coefficients: CodimOneCoefficients, n: int) -> MatrixField:
    """
        Block lift of a half-space matrix to R^n minus R^d

        A(x, t) = |t|^{d+1-n} [[a_ij, a_{i,d+1} t_j/|t|], [t_i/|t| a_{d+1,j}, a_{d+1,d+1} Id]],
        so that u(x, t) = v(x, |t|) solves the lifted equation whenever v solves
        the half-space one.
    """
    d = coefficients.d
    if n - d < 2:
        raise GeometryError('The block lift needs codimension at least 2')
    weight = model_weight(d, n)

    def reduced_blocks(points):
        x, t = points[:, :d], points[:, d:]
        height = np.linalg.norm(t, axis=1)
        with np.errstate(invalid='ignore', divide='ignore'):
            direction = np.where(height[:, None] > 0, t / height[:, None], 0.0)
        a = coefficients(x, height)
        blocks = np.zeros((len(points), n, n))
        blocks[:, :d, :d] = a[:, :d, :d]
        blocks[:, :d, d:] = a[:, :d, d:d + 1] * direction[:, None, :]
        blocks[:, d:, :d] = direction[:, :, None] * a[:, d:d + 1, :d]
        blocks[:, d:, d:] = a[:, d, d][:, None, None] * np.eye(n - d)[None]
        return blocks

    coefficient = None
    if coefficients.is_scalar:
        coefficient = lambda points: weight._value(points) * coefficients.scalar(
            points[:, :d], np.linalg.norm(points[:, d:], axis=1))
    return MatrixField(n, weight, matrix=lambda points: weight._value(points)[:, None, None] * reduced_blocks(points),
                       coefficient=coefficient, name=f'lift({coefficients.name})', d=d)


def radial_lift(value: Callable, gradient: Callable, d: int, n: int) -> ScalarField:
    """
        u(x, t) = v(x, |t|) for v given on the closed half-space by value(x, s) and gradient(x, s) -> (q, d+1)
    """

    def lifted_value(points):
        return value(points[:, :d], np.linalg.norm(points[:, d:], axis=1))

    def lifted_gradient(points):
        t = points[:, d:]
        height = np.linalg.norm(t, axis=1)
        g = gradient(points[:, :d], height)
        grad = np.zeros_like(points)
        grad[:, :d] = g[:, :d]
        with np.errstate(invalid='ignore', divide='ignore'):
            grad[:, d:] = np.where(height[:, None] > 0, g[:, d:d + 1] * t / height[:, None], 0.0)
        return grad

    return ScalarField(n, lifted_value, lifted_gradient, name='radial_lift', smoothness=1)


class EllipticityReport(BaseModel):
    c3: float = Field(..., description='max over samples of max(|A xi . zeta|, |xi|^2 / A xi . xi) for the reduced A')
    worst_point: List[float]
    samples: int


def ellipticity_constants(field: MatrixField, samples: int, rng_seed: int,
                          lower: Optional[Sequence[float]] = None,
                          upper: Optional[Sequence[float]] = None,
                          points: Optional[np.ndarray] = None) -> EllipticityReport:
    """
        Sampled C3 of the reduced matrix

        Per point the sup over unit xi, zeta is computed exactly as
        max(||A||_2, 1 / lambda_min(sym A)).
    """
    if samples < 1:
        raise ConfigError('ellipticity_constants needs at least one sample')
    n = field.n
    if points is None:
        rng = np.random.default_rng(rng_seed)
        lower = np.full(n, -1.0) if lower is None else np.asarray(lower, dtype=float)
        upper = np.full(n, 1.0) if upper is None else np.asarray(upper, dtype=float)
        points = rng.uniform(lower, upper, size=(samples, n))
    reduced = field.reduced(points)
    finite = np.all(np.isfinite(reduced), axis=(1, 2))
    points, reduced = points[finite], reduced[finite]
    if len(points) == 0:
        raise AccuracyError(f'No sample of {field} lies off the boundary')
    sym = 0.5 * (reduced + np.transpose(reduced, (0, 2, 1)))
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    lam_min = eigenvalues[:, 0]
    if np.any(lam_min <= 0):
        worst = int(np.argmin(lam_min))
        raise EllipticityError(points[worst].tolist(), eigenvectors[worst, :, 0].tolist(), float(lam_min[worst]))
    sigma_max = np.linalg.norm(reduced, ord=2, axis=(1, 2))
    per_point = np.maximum(sigma_max, 1.0 / lam_min)
    worst = int(np.argmax(per_point))
    logger.info(f'Ellipticity of {field}: C3 ~ {per_point[worst]:.6g} over {len(points)} samples')
    return EllipticityReport(c3=float(per_point[worst]), worst_point=points[worst].tolist(), samples=len(points))


class MeasureValue(BaseModel):
    value: float
    error: float = Field(..., description='Difference between the two finest refinement depths')
    evaluations: int


def integrate_ball(integrand: Callable, center, r: float, gamma: Optional[BoundarySet] = None,
                   rule: Optional[QuadratureRule] = None, resolution: int = 4, max_depth: int = 5,
                   max_points: int = 5_000_000) -> MeasureValue:
    """
        Adaptive cubature of integrand over B(center, r)

        Cells carry a 2-point Gauss rule per axis; cells cut by the sphere or
        closer to Gamma than their diameter are bisected up to max_depth. The
        error is the change between depth max_depth - 1 and max_depth.
    """
    if r <= 0:
        raise GeometryError('Ball radius must be positive')
    center = np.asarray(center, dtype=float)
    fine, used_fine = _adaptive_ball(integrand, center, r, gamma, rule, resolution, max_depth, max_points)
    if max_depth == 0:
        return MeasureValue(value=fine, error=abs(fine), evaluations=used_fine)
    coarse, used_coarse = _adaptive_ball(integrand, center, r, gamma, rule, resolution, max_depth - 1,
                                         max_points - used_fine)
    return MeasureValue(value=fine, error=abs(fine - coarse), evaluations=used_fine + used_coarse)


def _adaptive_ball(integrand, center, r, gamma, rule, resolution, max_depth, max_points) -> Tuple[float, int]:
    n = len(center)
    side = 2.0 * r / resolution
    axis = -r + side * (np.arange(resolution) + 0.5)
    cells = center + np.stack([g.ravel() for g in np.meshgrid(*([axis] * n), indexing='ij')], axis=1)
    half = 0.5 * side
    offsets = np.array(list(itertools.product([-1.0, 1.0], repeat=n))) / math.sqrt(3.0)
    children = np.array(list(itertools.product([-0.5, 0.5], repeat=n)))
    total, used = 0.0, 0

    for depth in range(max_depth + 1):
        if len(cells) == 0:
            break
        reach = half * math.sqrt(n)
        dist = np.linalg.norm(cells - center, axis=1)
        cells, dist = cells[dist - reach <= r], dist[dist - reach <= r]
        refine = dist + reach > r
        if gamma is not None:
            refine |= nearest_points(gamma, cells, rule).distance < 2.0 * reach
        if depth == max_depth:
            refine[:] = False
        final = cells[~refine]
        if len(final):
            used += len(final) * len(offsets)
            if used > max_points:
                raise BudgetExceededError('cubature points', used, max_points)
            samples = final[:, None, :] + half * offsets[None]
            values = integrand(samples.reshape(-1, n)).reshape(len(final), len(offsets))
            inside = np.linalg.norm(samples - center, axis=2) <= r
            values = np.where(inside & np.isfinite(values), values, 0.0)
            total += float(values.sum()) * (2.0 * half) ** n / len(offsets)
        split = cells[refine]
        cells = (split[:, None, :] + half * children[None]).reshape(-1, n)
        half *= 0.5
    return total, used


def measure_m_ball(weight: ScalarField, X, r: float, gamma: Optional[BoundarySet] = None,
                   rule: Optional[QuadratureRule] = None, resolution: int = 4, max_depth: int = 5,
                   max_points: int = 5_000_000) -> MeasureValue:
    """
        m(B(X, r)) = integral of w over the ball
    """
    return integrate_ball(weight._value, X, r, gamma, rule, resolution, max_depth, max_points)


class BiLipschitzReport(BaseModel):
    constant: float
    worst_pair: List[List[float]]
    samples: int


class CovMap(object):
    """
        Change of variables rho with Jacobian J_ij = d rho_i / d X_j
    """

    def __init__(self, variant: str, n: int, d: int, mapping: Callable, jacobian: Optional[Callable] = None,
                 step: float = 1e-5, params: Optional[Dict] = None):
        self.variant = variant
        self.n = n
        self.d = d
        self._mapping = mapping
        self._jacobian = jacobian
        self.step = step
        self.params = params or {}

    def __repr__(self):
        return f'CovMap({self.variant}, {self.params})'

    @property
    def analytic(self) -> bool:
        return self._jacobian is not None

    def __call__(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        values = self._mapping(points)
        return values[0] if single else values

    def jacobian(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        if self._jacobian is not None:
            values = self._jacobian(points)
        else:
            height = np.linalg.norm(points[:, self.d:], axis=1)
            h = self.step * np.clip(height, 1e-3, 1.0)
            values = np.zeros((len(points), self.n, self.n))
            for j in range(self.n):
                shift = np.zeros_like(points)
                shift[:, j] = h
                values[:, :, j] = (self._mapping(points + shift) - self._mapping(points - shift)) / (2.0 * h[:, None])
        return values[0] if single else values

    def bilipschitz(self, samples: int = 2000, rng_seed: int = 0, half_width: float = 1.0,
                    budget: Optional[float] = None) -> BiLipschitzReport:
        """
            max(|rho X - rho Y| / |X - Y|, |X - Y| / |rho X - rho Y|) over sampled pairs at several scales
        """
        rng = np.random.default_rng(rng_seed)
        X = rng.uniform(-half_width, half_width, size=(samples, self.n))
        scales = half_width * 2.0 ** -rng.integers(0, 8, size=samples)
        offsets = rng.standard_normal((samples, self.n))
        offsets *= (scales / np.linalg.norm(offsets, axis=1))[:, None]
        Y = X + offsets
        image = np.linalg.norm(self._mapping(X) - self._mapping(Y), axis=1)
        base = np.linalg.norm(X - Y, axis=1)
        with np.errstate(divide='ignore'):
            quotient = np.maximum(image / base, base / image)
        worst = int(np.argmax(quotient))
        report = BiLipschitzReport(constant=float(quotient[worst]), worst_pair=[X[worst].tolist(), Y[worst].tolist()],
                                   samples=samples)
        if budget is not None and report.constant > budget:
            raise BiLipschitzError(f'{self} has bi-Lipschitz constant {report.constant:.4g} above {budget:.4g}',
                                   report.worst_pair)
        return report


def cov_identity(n: int, d: int) -> CovMap:
    return CovMap(CovVariant.IDENTITY, n, d, lambda p: p.copy(),
                  lambda p: np.broadcast_to(np.eye(n), (len(p), n, n)).copy())


def _require_graph(gamma: BoundarySet):
    if gamma.kind == BoundaryKind.AFFINE_PLANE:
        return None
    if gamma.graph is None:
        raise GeometryError('Changes of variables straighten Lipschitz graphs only')
    return gamma.graph


def cov_rho1(gamma: BoundarySet) -> CovMap:
    """
        (x, t) -> (x, t + phi(x))
    """
    n, d = gamma.n, int(gamma.d)
    graph = _require_graph(gamma)
    if graph is None:
        return CovMap(CovVariant.RHO1, n, d, lambda p: p.copy(),
                      lambda p: np.broadcast_to(np.eye(n), (len(p), n, n)).copy())

    def mapping(points):
        image = points.copy()
        image[:, d:] += graph.value(points[:, :d])
        return image

    def jacobian(points):
        J = np.broadcast_to(np.eye(n), (len(points), n, n)).copy()
        J[:, d:, :d] = graph.jacobian(points[:, :d])
        return J

    return CovMap(CovVariant.RHO1, n, d, mapping, jacobian)


class Mollifier(object):
    """
        Tensor product of C^2 bumps (35/32)(1 - u^2)^3 on [-1, 1]^d, integrated by Gauss-Legendre
    """

    def __init__(self, d: int, order: int = BUMP_ORDER):
        self.d = d
        nodes, weights = np.polynomial.legendre.leggauss(order)
        bump = weights * self.profile(nodes)
        self.nodes = np.stack([g.ravel() for g in np.meshgrid(*([nodes] * d), indexing='ij')], axis=1)
        self.weights = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([bump] * d), indexing='ij')], axis=1),
                               axis=1)

    @staticmethod
    def profile(u: np.ndarray) -> np.ndarray:
        return np.where(np.abs(u) < 1.0, (35.0 / 32.0) * (1.0 - u ** 2) ** 3, 0.0)

    @property
    def gradient_l1(self) -> float:
        """
            ||grad eta||_1 bounded by d * ||eta_1'||_1 = 35 d / 16
        """
        return 35.0 * self.d / 16.0

    def smooth(self, graph, x: np.ndarray, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
            (eta_r * phi)(x), its x-Jacobian (q, m, d) and its r-derivative (q, m)
        """
        q, d = x.shape
        g = len(self.weights)
        y = (x[:, None, :] - r[:, None, None] * self.nodes[None]).reshape(-1, d)
        values = graph.value(y).reshape(q, g, -1)
        jac = graph.jacobian(y).reshape(q, g, -1, d)
        smoothed = np.einsum('g,qgm->qm', self.weights, values)
        grad_x = np.einsum('g,qgmd->qmd', self.weights, jac)
        d_r = -np.einsum('g,qgmd,gd->qm', self.weights, jac, self.nodes)
        return smoothed, grad_x, d_r


def cov_rho2(gamma: BoundarySet, c: Optional[float] = None) -> CovMap:
    """
        (x, t) -> (x, c t + (eta_{|t|} * phi)(x)) with c = 1 + 2 Lip ||grad eta||_1 unless given
    """
    n, d = gamma.n, int(gamma.d)
    graph = _require_graph(gamma)
    mollifier = Mollifier(d)
    lip = gamma.lipschitz
    c = 1.0 + 2.0 * lip * mollifier.gradient_l1 if c is None else float(c)
    if graph is None:
        return CovMap(CovVariant.RHO2, n, d, lambda p: np.concatenate([p[:, :d], c * p[:, d:]], axis=1),
                      lambda p: np.broadcast_to(np.diag([1.0] * d + [c] * (n - d)), (len(p), n, n)).copy(),
                      params={'c': c})

    def mapping(points):
        height = np.linalg.norm(points[:, d:], axis=1)
        smoothed, _, _ = mollifier.smooth(graph, points[:, :d], height)
        return np.concatenate([points[:, :d], c * points[:, d:] + smoothed], axis=1)

    def jacobian(points):
        t = points[:, d:]
        height = np.linalg.norm(t, axis=1)
        _, grad_x, d_r = mollifier.smooth(graph, points[:, :d], height)
        with np.errstate(invalid='ignore', divide='ignore'):
            direction = np.where(height[:, None] > 0, t / height[:, None], 0.0)
        J = np.zeros((len(points), n, n))
        J[:, :d, :d] = np.eye(d)
        J[:, d:, :d] = grad_x
        J[:, d:, d:] = c * np.eye(n - d)[None] + d_r[:, :, None] * direction[:, None, :]
        return J

    return CovMap(CovVariant.RHO2, n, d, mapping, jacobian, params={'c': c})


def tangent_rotation(grad_x: np.ndarray, d: int, n: int) -> np.ndarray:
    """
        Rotation R with R(R^d) the tangent plane of the smoothed graph

        QR of the frame [[Id, 0], [grad, Id]] with a positive diagonal in R; the
        first d columns span the tangent plane, the rest its orthogonal complement.
    """
    frame = np.broadcast_to(np.eye(n), (len(grad_x), n, n)).copy()
    frame[:, d:, :d] = grad_x
    q, r = np.linalg.qr(frame)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]


def cov_rho_full(gamma: BoundarySet, dilation: Optional[Callable] = None, smallness: float = RHO_FULL_SMALLNESS,
                 step: float = 1e-5) -> CovMap:
    """
        (x, t) -> (x, Phi_r(x)) + h(x, r) R_{x,r}(0, t), r = |t|, Phi_r = eta_r * phi

        h defaults to 1. Only available in the small-Lipschitz regime.
    """
    n, d = gamma.n, int(gamma.d)
    graph = _require_graph(gamma)
    if graph is None:
        return cov_identity(n, d)
    if gamma.lipschitz > smallness:
        raise BiLipschitzError(f'rho_full needs Lip <= {smallness}, got {gamma.lipschitz:.4g}')
    mollifier = Mollifier(d)

    def mapping(points):
        x, t = points[:, :d], points[:, d:]
        height = np.linalg.norm(t, axis=1)
        smoothed, grad_x, _ = mollifier.smooth(graph, x, height)
        rotation = tangent_rotation(grad_x, d, n)
        h = np.ones(len(points)) if dilation is None else dilation(x, height)
        base = np.concatenate([x, smoothed], axis=1)
        return base + h[:, None] * np.einsum('qnk,qk->qn', rotation[:, :, d:], t)

    return CovMap(CovVariant.RHO_FULL, n, d, mapping, None, step=step, params={'smallness': smallness})


def compose(rho: CovMap, tau: CovMap) -> CovMap:
    """
        rho o tau, Jacobian by the chain rule
    """
    if rho.n != tau.n:
        raise GeometryError('Composed maps must share the ambient dimension')

    def mapping(points):
        return rho._mapping(tau._mapping(points))

    def jacobian(points):
        return np.einsum('qij,qjk->qik', rho.jacobian(tau._mapping(points)), tau.jacobian(points))

    return CovMap(f'{rho.variant}*{tau.variant}', rho.n, rho.d, mapping, jacobian,
                  params={'outer': rho.params, 'inner': tau.params})


def cov_from_descriptor(gamma: BoundarySet, variant: str, params: Dict) -> CovMap:
    if variant == CovVariant.IDENTITY:
        return cov_identity(gamma.n, int(gamma.d))
    if variant == CovVariant.RHO1:
        return cov_rho1(gamma)
    if variant == CovVariant.RHO2:
        return cov_rho2(gamma, params.get('c'))
    if variant == CovVariant.RHO_FULL:
        return cov_rho_full(gamma, smallness=float(params.get('smallness', RHO_FULL_SMALLNESS)),
                            step=float(params.get('step', 1e-5)))
    raise ConfigError(f'Unknown change of variables {variant!r}')


def conjugate(field: MatrixField, rho: CovMap, weight: Optional[ScalarField] = None) -> MatrixField:
    """
        A_rho(X) = |det J| J^{-1} A(rho X) J^{-T}, the coefficients of the pulled-back equation

        With J_ij = d rho_i / d X_j, u = v o rho solves the conjugated equation
        exactly when v solves the original one. The reference weight is the
        model weight |t|^{d+1-n}, the pulled-back domain being the complement of R^d.
    """
    if rho.variant == CovVariant.IDENTITY:
        return MatrixField(field.n, field.weight if weight is None else weight, field._matrix, field._coefficient,
                           field.name, field.smoothness, field.d)
    if weight is None:
        weight = model_weight(rho.d, rho.n)

    def matrix(points):
        J = rho.jacobian(points)
        det = np.linalg.det(J)
        if np.any(np.abs(det) <= 1e-14):
            worst = int(np.argmin(np.abs(det)))
            raise BiLipschitzError(f'Singular Jacobian of {rho} at {points[worst]}', [points[worst].tolist()])
        J_inv = np.linalg.inv(J)
        A = field(rho._mapping(points))
        return np.abs(det)[:, None, None] * np.einsum('qij,qjk,qlk->qil', J_inv, A, J_inv)

    smoothness = min(field.smoothness, 2 if rho.analytic else 1)
    return MatrixField(field.n, weight, matrix=matrix, name=f'{field.name}@{rho.variant}', smoothness=smoothness,
                       d=rho.d)


def build_operator(spec: OperatorDescriptor, gamma: BoundarySet, rule: Optional[QuadratureRule]) -> MatrixField:
    """
        MatrixField described by an operator block of an experiment config
    """
    n = gamma.n
    if spec.kind == OperatorKind.MODEL:
        if not gamma.is_flat:
            raise ConfigError('The model operator lives on the complement of a flat plane')
        return model_operator(int(gamma.d), n)
    if spec.kind == OperatorKind.DISTANCE:
        return distance_operator(gamma, rule)
    if spec.kind == OperatorKind.L_ALPHA:
        if spec.alpha is None:
            raise ConfigError('l_alpha operators need alpha')
        return build_L_alpha(gamma, None if gamma.kind == BoundaryKind.AFFINE_PLANE else rule, spec.alpha)
    if spec.kind == OperatorKind.LIFT:
        if not gamma.is_flat:
            raise ConfigError('Lifted operators live on the complement of a flat plane')
        return lift_codim1(coefficients_from_descriptor(int(gamma.d), spec.coefficients), n)
    if spec.kind == OperatorKind.CONJUGATED:
        base = spec.base or OperatorDescriptor(kind=OperatorKind.DISTANCE)
        return conjugate(build_operator(base, gamma, rule), cov_from_descriptor(gamma, spec.cov, spec.cov_params))
    raise ConfigError(f'Unknown operator kind {spec.kind!r}')


def weight_ratio_field(gamma: BoundarySet, rule: Optional[QuadratureRule], alpha: float, rho: CovMap) -> ScalarField:
    """
        f = (D_alpha o rho / (c^{-1/alpha} |t|))^{d+1-n} - 1, normalized by the flat constant so that f = 0 on flat Gamma
    """
    d, n = int(gamma.d), gamma.n
    scale = flat_constant(d, alpha) ** (-1.0 / alpha)
    exponent = d + 1.0 - n

    def value(points):
        image = rho._mapping(points)
        jet = d_alpha_jet(gamma, rule, alpha, image, order=0, strict=False)
        height = np.linalg.norm(points[:, d:], axis=1)
        return (jet.value / (scale * height)) ** exponent - 1.0

    return ScalarField(n, value, name='weight_ratio')


class TentRule(object):
    """
        Nodes and weights for integral over B(x0, l) x {|t| <= l} of g dt dx / |t|^{n-d}

        In t = s theta the measure is ds/s dtheta dx; ln s is cut into bands of
        width ln 2 below ln l, each with Gauss-Legendre nodes.
    """

    def __init__(self, d: int, n: int, bands: int = 10, band_order: int = 3, x_order: int = 8,
                 directions: int = 8):
        self.d = d
        self.n = n
        self.bands = bands
        u_nodes, u_weights = np.polynomial.legendre.leggauss(band_order)
        self.u_nodes = 0.5 * math.log(2.0) * (u_nodes - 1.0)
        self.u_weights = 0.5 * math.log(2.0) * u_weights
        self.x_unit, self.x_weights = _unit_ball_rule(d, x_order)
        self.theta, self.theta_weights = sphere_directions(n - d, count=directions)
        self.resolution = {'bands': bands, 'band_order': band_order, 'x_order': x_order, 'directions': directions}

    def points(self, center: np.ndarray, ell: float) -> Tuple[np.ndarray, np.ndarray]:
        """
            (bands, P, n) points and the (P,) weights of one band, scaled for ball (center, ell)
        """
        xs = center + ell * self.x_unit
        xw = self.x_weights * ell ** self.d
        grid_x = np.repeat(xs, len(self.u_nodes) * len(self.theta), axis=0)
        weights = (xw[:, None, None] * self.u_weights[None, :, None] * self.theta_weights[None, None, :]).ravel()
        stacked = []
        for k in range(self.bands):
            heights = ell * np.exp(self.u_nodes - k * math.log(2.0))
            t = heights[:, None, None] * self.theta[None, :, :]
            t = np.tile(t.reshape(-1, self.n - self.d), (len(xs), 1))
            stacked.append(np.concatenate([grid_x, t], axis=1))
        return np.stack(stacked), weights


def _unit_ball_rule(d: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    if d == 1:
        return nodes[:, None], weights
    radii = 0.5 * (nodes + 1.0)
    radial_w = 0.5 * weights * radii ** (d - 1)
    directions, dir_w = sphere_directions(d, count=4 * order)
    points = (radii[:, None, None] * directions[None]).reshape(-1, d)
    return points, (radial_w[:, None] * dir_w[None]).ravel()


def _squared_norm(values: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return values ** 2
    return np.sum(values.reshape(len(values), -1) ** 2, axis=1)


def carleson_norm(f: Callable, d: int, n: int, balls: Sequence[Tuple[Sequence[float], float]],
                  tent: Optional[TentRule] = None, divergence_ratio: float = 0.9) -> CarlesonReport:
    """
        sup over balls of l^{-d} * integral over B(x, l) x {|t| <= l} of |f|^2 dt dx / |t|^{n-d}

        f may be scalar or matrix valued (Frobenius norm). Bands of ln|t| are summed
        down to l 2^{-K}; the remainder is extrapolated geometrically from the
        ratio q of the last two bands. q >= divergence_ratio reports +inf with the
        growth per unit of ln(1/|t|).
    """
    tent = tent or TentRule(d, n)
    centers, radii, quotients = [], [], []
    rate: Optional[float] = None
    for center, ell in balls:
        center = np.asarray(center, dtype=float)[:d]
        points, weights = tent.points(center, float(ell))
        bands = np.array([float(weights @ _squared_norm(np.asarray(f(points[k])))) for k in range(tent.bands)])
        total = bands.sum()
        last, previous = bands[-1], bands[-2] if tent.bands > 1 else 0.0
        quotient = total / ell ** d
        if last > 0:
            q = last / previous if previous > 0 else math.inf
            if q >= divergence_ratio:
                quotient = math.inf
                band_rate = last / math.log(2.0) / ell ** d
                rate = band_rate if rate is None else max(rate, band_rate)
            else:
                quotient = (total + last * q / (1.0 - q)) / ell ** d
        centers.append(center)
        radii.append(ell)
        quotients.append(quotient)
    report = CarlesonReport.from_quotients(centers, radii, quotients, resolution=tent.resolution,
                                           divergence_rate=rate)
    logger.info(f'Carleson norm over {len(radii)} balls: {report.supremum:.6g}')
    return report


def default_ball_family(d: int, radii: Sequence[float] = (0.5, 0.25), spread: float = 0.5,
                        per_axis: int = 3) -> List[Tuple[List[float], float]]:
    axis = np.linspace(-spread, spread, per_axis)
    centers = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing='ij')], axis=1)
    return [(c.tolist(), float(r)) for r in radii for c in centers]


class StructureReport(BaseModel):
    b_min: float
    b_max: float
    b_bounded: bool = Field(..., description='b stays within [1/C, C] for the recorded C')
    norms: Dict[str, float] = Field(..., description='Carleson norm per structural term')
    total: float
    reports: Dict[str, CarlesonReport]


def whitney_average(values: Callable, points: np.ndarray, d: int) -> np.ndarray:
    """
        Average over the Whitney cube X + (|t|/4)[-1, 1]^n, 2-point Gauss per axis
    """
    q, n = points.shape
    offsets = np.array(list(itertools.product([-1.0, 1.0], repeat=n))) / math.sqrt(3.0)
    size = 0.25 * np.linalg.norm(points[:, d:], axis=1)
    samples = points[:, None, :] + size[:, None, None] * offsets[None]
    block = values(samples.reshape(-1, n))
    return block.reshape(q, len(offsets), *block.shape[1:]).mean(axis=1)


def _centered_gradient_norm(values: Callable, points: np.ndarray, d: int, step: float = 1e-3) -> np.ndarray:
    n = points.shape[1]
    h = step * np.linalg.norm(points[:, d:], axis=1)
    total = np.zeros(len(points))
    for i in range(n):
        shift = np.zeros_like(points)
        shift[:, i] = h
        diff = (values(points + shift) - values(points - shift)).reshape(len(points), -1) / (2.0 * h[:, None])
        total += np.sum(diff ** 2, axis=1)
    return np.sqrt(total)


def structure_decompose(field: MatrixField, d: int, balls: Sequence[Tuple[Sequence[float], float]],
                        tent: Optional[TentRule] = None, b_bound: float = 10.0) -> StructureReport:
    """
        Split the reduced matrix on the complement of R^d into the structured part
        and Carleson-small perturbations

        Lower-right block = b Id + C4 with b = trace / (n - d); lower-left block =
        B3 + C3 with B3 the Whitney-cube average. Carleson norms are reported for
        |t| |grad B3|, C3, C4 and |t| |grad b|.
    """
    n = field.n
    m = n - d

    def lower_left(points):
        return field.reduced(points)[:, d:, :d]

    def b_value(points):
        return np.trace(field.reduced(points)[:, d:, d:], axis1=1, axis2=2) / m

    def c4(points):
        block = field.reduced(points)[:, d:, d:]
        b = np.trace(block, axis1=1, axis2=2) / m
        return block - b[:, None, None] * np.eye(m)[None]

    def b3(points):
        return whitney_average(lower_left, points, d)

    def c3(points):
        return lower_left(points) - b3(points)

    def t_grad_b3(points):
        return np.linalg.norm(points[:, d:], axis=1) * _centered_gradient_norm(b3, points, d)

    def t_grad_b(points):
        return np.linalg.norm(points[:, d:], axis=1) * _centered_gradient_norm(b_value, points, d)

    tent = tent or TentRule(d, n)
    terms = {'t_grad_B3': t_grad_b3, 'C3': c3, 'C4': c4, 't_grad_b': t_grad_b}
    reports = {name: carleson_norm(fn, d, n, balls, tent) for name, fn in terms.items()}
    norms = {name: report.supremum for name, report in reports.items()}

    b_samples = []
    for center, ell in balls:
        points, _ = tent.points(np.asarray(center, dtype=float)[:d], float(ell))
        b_samples.append(b_value(points.reshape(-1, n)))
    b_all = np.concatenate(b_samples)
    b_min, b_max = float(b_all.min()), float(b_all.max())
    bounded = b_min >= 1.0 / b_bound and b_max <= b_bound
    if not bounded:
        logger.warning(f'Structure hypothesis fails for {field}: b in [{b_min:.4g}, {b_max:.4g}]')
    total = float(sum(norms.values()))
    logger.info(f'Structure decomposition of {field}: {norms}')
    return StructureReport(b_min=b_min, b_max=b_max, b_bounded=bounded, norms=norms, total=total, reports=reports)
