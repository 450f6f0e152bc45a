import csv
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import integrate, special
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from elliptic.config import BoundaryDescriptor, QuadratureDescriptor
from elliptic.enums import BoundaryKind
from elliptic.exceptions import AccuracyError, BudgetExceededError, ChainError, ConfigError, GeometryError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_HALF_WIDTH = 1.0


def sphere_area(m: int) -> float:
    """
        Surface measure of the unit sphere S^{m-1} in R^m (2 for m = 1)
    """
    return 2.0 * math.pi ** (m / 2.0) / special.gamma(m / 2.0)


def unit_ball_volume(d: float) -> float:
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0)


def sphere_directions(m: int, count: int = 16, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
        Deterministic direction set on S^{m-1} with equal weights summing to |S^{m-1}|

        m=1 gives the two signs, m=2 a uniform circle, m=3 a Fibonacci lattice;
        higher dimensions fall back to seeded normalized Gaussian samples.
    """
    if m == 1:
        directions = np.array([[1.0], [-1.0]])
    elif m == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    elif m == 3:
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        phi = np.pi * (1.0 + 5.0 ** 0.5) * k
        rho = np.sqrt(1.0 - z ** 2)
        directions = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    else:
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((count, m))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    weights = np.full(len(directions), sphere_area(m) / len(directions))
    return directions, weights


def as_points(X, n: int) -> Tuple[np.ndarray, bool]:
    points = np.asarray(X, dtype=float)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    if points.shape[1] != n:
        raise GeometryError(f'Points must live in R^{n}, got shape {points.shape}')
    return points, single


class GraphProfile(object):
    """
        Closed-form scalar profile f: R^d -> R with gradient and declared Lipschitz constant
    """

    def __init__(self, name: str, value: Callable, gradient: Callable, lipschitz: float, params: Dict):
        self.name = name
        self.value = value
        self.gradient = gradient
        self.lipschitz = float(lipschitz)
        self.params = params

    def __repr__(self):
        return f'GraphProfile({self.name}, {self.params})'


def _zero_profile(d: int) -> GraphProfile:
    return GraphProfile('zero', lambda x: np.zeros(len(x)), lambda x: np.zeros((len(x), d)), 0.0, {})


def make_profile(name: str, d: int, **params) -> GraphProfile:
    """
        Build one of the closed-form profile families used for Lipschitz graphs
    """
    if name == 'zero':
        return _zero_profile(d)

    if name == 'affine':
        slope = np.broadcast_to(np.asarray(params.get('slope', 0.0), dtype=float), (d,)).copy()
        offset = float(params.get('offset', 0.0))
        return GraphProfile(name, lambda x: x @ slope + offset, lambda x: np.tile(slope, (len(x), 1)),
                            float(np.linalg.norm(slope)), params)

    if name == 'cone':
        amplitude = float(params.get('amplitude', 0.1))

        def cone_gradient(x):
            norm = np.linalg.norm(x, axis=1, keepdims=True)
            safe = np.where(norm > 0, norm, 1.0)
            return np.where(norm > 0, amplitude * x / safe, 0.0)

        return GraphProfile(name, lambda x: amplitude * np.linalg.norm(x, axis=1), cone_gradient, abs(amplitude),
                            params)

    if name == 'sine':
        amplitude = float(params.get('amplitude', 0.05))
        frequency = float(params.get('frequency', 1.0))
        phase = float(params.get('phase', 0.0))
        axis = int(params.get('axis', 0))

        def sine_gradient(x):
            grad = np.zeros_like(x)
            grad[:, axis] = amplitude * frequency * np.cos(frequency * x[:, axis] + phase)
            return grad

        return GraphProfile(name, lambda x: amplitude * np.sin(frequency * x[:, axis] + phase), sine_gradient,
                            abs(amplitude * frequency), params)

    if name == 'bump':
        amplitude = float(params.get('amplitude', 0.05))
        center = np.broadcast_to(np.asarray(params.get('center', 0.0), dtype=float), (d,)).copy()
        width = float(params.get('width', 1.0))

        def bump_value(x):
            return amplitude * np.exp(-np.sum((x - center) ** 2, axis=1) / (2.0 * width ** 2))

        def bump_gradient(x):
            return -bump_value(x)[:, None] * (x - center) / width ** 2

        return GraphProfile(name, bump_value, bump_gradient, abs(amplitude) / width * math.exp(-0.5), params)

    raise ConfigError(f'Unknown graph profile {name!r}')


class GraphMap(object):
    """
        Vector-valued graph function phi: R^d -> R^{n-d}, one profile per component
    """

    def __init__(self, d: int, m: int, profiles: Sequence[GraphProfile]):
        self.d = d
        self.m = m
        self.profiles = list(profiles) + [_zero_profile(d) for _ in range(m - len(profiles))]

    @property
    def lipschitz(self) -> float:
        return float(np.sqrt(sum(p.lipschitz ** 2 for p in self.profiles)))

    @property
    def is_flat(self) -> bool:
        return all(p.name == 'zero' for p in self.profiles)

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.stack([p.value(x) for p in self.profiles], axis=1)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """
            Shape (q, n-d, d)
        """
        return np.stack([p.gradient(x) for p in self.profiles], axis=1)


class Similarity(object):
    def __init__(self, ratio: float, offset: np.ndarray):
        self.ratio = float(ratio)
        self.offset = np.asarray(offset, dtype=float)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.ratio * y + self.offset


CANTOR_PRESETS = {
    'middle_third': [(1 / 3, (0.0,)), (1 / 3, (2 / 3,))],
    'four_corner': [(1 / 4, (0.0, 0.0)), (1 / 4, (3 / 4, 0.0)), (1 / 4, (0.0, 3 / 4)), (1 / 4, (3 / 4, 3 / 4))],
}


class BoundarySet(object):
    """
        d-dimensional Ahlfors regular set in R^n

        Planes and graphs are parametrized by x in R^d and live in the first d
        coordinates, t in R^{n-d} holding the rest. Cantor sets are attractors of
        rotation-free similarities and carry their self-similar probability measure.
    """

    def __init__(self, kind: str, n: int, d: float, graph: Optional[GraphMap] = None,
                 maps: Optional[List[Similarity]] = None):
        self.kind = kind
        self.n = n
        self.d = d
        self.graph = graph
        self.maps = maps or []
        self._cantor_center: Optional[np.ndarray] = None
        self._cantor_radius: Optional[float] = None

    def __repr__(self):
        return f'BoundarySet({self.kind}, n={self.n}, d={self.d:.6g})'

    @property
    def unbounded(self) -> bool:
        return self.kind != BoundaryKind.CANTOR

    @property
    def is_flat(self) -> bool:
        return self.kind == BoundaryKind.AFFINE_PLANE or (self.graph is not None and self.graph.is_flat)

    @property
    def codimension(self) -> float:
        return self.n - self.d

    @property
    def lipschitz(self) -> float:
        return self.graph.lipschitz if self.graph is not None else 0.0

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.ratio ** self.d for s in self.maps])

    @property
    def cantor_center(self) -> np.ndarray:
        """
            Barycenter of the self-similar measure, c = sum p_i b_i / (1 - sum p_i r_i)
        """
        if self._cantor_center is None:
            p = self.probabilities
            ratios = np.array([s.ratio for s in self.maps])
            offsets = np.stack([s.offset for s in self.maps])
            self._cantor_center = (p @ offsets) / (1.0 - p @ ratios)
        return self._cantor_center

    @property
    def cantor_radius(self) -> float:
        """
            Radius R0 of a ball around the barycenter containing the attractor
        """
        if self._cantor_radius is None:
            c = self.cantor_center
            r_max = max(s.ratio for s in self.maps)
            self._cantor_radius = max(float(np.linalg.norm(s(c) - c)) for s in self.maps) / (1.0 - r_max)
        return self._cantor_radius

    @property
    def diameter(self) -> Optional[float]:
        return 2.0 * self.cantor_radius if self.kind == BoundaryKind.CANTOR else None

    def embed(self, params: np.ndarray) -> np.ndarray:
        """
            Map parameters x in R^d to points (x, phi(x)) of a plane or graph
        """
        params = np.atleast_2d(params)
        tail = np.zeros((len(params), self.n - int(self.d)))
        if self.graph is not None:
            tail = self.graph.value(params)
        return np.concatenate([params, tail], axis=1)

    def surface_jacobian(self, params: np.ndarray) -> np.ndarray:
        if self.graph is None:
            return np.ones(len(params))
        jac = self.graph.jacobian(params)
        gram = np.eye(int(self.d))[None] + np.einsum('qki,qkj->qij', jac, jac)
        return np.sqrt(np.linalg.det(gram))

    def tangent_frame(self, params: np.ndarray) -> np.ndarray:
        """
            Orthonormal frames (q, n, n) whose first d columns span the tangent plane
        """
        params = np.atleast_2d(params)
        d = int(self.d)
        frame = np.tile(np.eye(self.n), (len(params), 1, 1))
        if self.graph is not None:
            frame[:, d:, :d] = self.graph.jacobian(params)
        q, r = np.linalg.qr(frame)
        signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
        signs[signs == 0] = 1.0
        return q * signs[:, None, :]


def make_boundary(spec: BoundaryDescriptor) -> BoundarySet:
    """
        Validate a boundary descriptor and build the corresponding BoundarySet
    """
    n = spec.n
    if spec.kind == BoundaryKind.CANTOR:
        maps = _cantor_maps(spec)
        ratios = np.array([s.ratio for s in maps])
        d = brentq(lambda s: float(np.sum(ratios ** s)) - 1.0, 1e-12, float(n))
        declared = spec.dimension if spec.dimension is not None else spec.d
        if declared is not None and abs(float(np.sum(ratios ** declared)) - 1.0) > 1e-12:
            raise GeometryError(f'Inconsistent Cantor ratios: sum r_i^d = {np.sum(ratios ** declared):.15g} '
                                f'for declared d={declared}')
        if not 0.0 < d < n - 1:
            raise GeometryError(f'Boundary dimension must satisfy 0 < d < n - 1, got d={d:.6g}, n={n}')
        gamma = BoundarySet(BoundaryKind.CANTOR, n, float(d), maps=maps)
        logger.info(f'Built Cantor set with {len(maps)} maps, d={d:.12g} in R^{n}')
        return gamma

    if spec.d is None or float(spec.d) != int(spec.d):
        raise GeometryError(f'Planes and graphs need an integer dimension d, got {spec.d}')
    d = int(spec.d)
    if not 0 < d < n - 1:
        raise GeometryError(f'Boundary dimension must satisfy 0 < d < n - 1, got d={d}, n={n}')

    if spec.kind == BoundaryKind.AFFINE_PLANE:
        return BoundarySet(BoundaryKind.AFFINE_PLANE, n, d)

    if len(spec.profiles) > n - d:
        raise GeometryError(f'A graph over R^{d} in R^{n} has {n - d} components, got {len(spec.profiles)} profiles')
    profiles = [make_profile(p.name, d, **p.params) for p in spec.profiles]
    gamma = BoundarySet(BoundaryKind.LIPSCHITZ_GRAPH, n, d, graph=GraphMap(d, n - d, profiles))
    estimate = estimate_lipschitz(gamma.graph)
    if estimate > 1.05 * gamma.graph.lipschitz + 1e-12:
        raise GeometryError(f'Sampled Lipschitz constant {estimate:.6g} exceeds the declared '
                            f'{gamma.graph.lipschitz:.6g} by more than 5%')
    logger.info(f'Built Lipschitz graph over R^{d} in R^{n}, Lip={gamma.graph.lipschitz:.6g} (sampled {estimate:.6g})')
    return gamma


def _cantor_maps(spec: BoundaryDescriptor) -> List[Similarity]:
    if spec.preset is not None:
        if spec.preset not in CANTOR_PRESETS:
            raise ConfigError(f'Unknown Cantor preset {spec.preset!r}')
        raw = CANTOR_PRESETS[spec.preset]
        maps = []
        for ratio, offset in raw:
            full = np.zeros(spec.n)
            full[:len(offset)] = offset
            maps.append(Similarity(ratio, full))
        return maps
    if len(spec.maps) < 2:
        raise GeometryError('A Cantor set needs at least two similarities')
    maps = []
    for item in spec.maps:
        if len(item.offset) != spec.n:
            raise GeometryError(f'Similarity offsets must live in R^{spec.n}')
        maps.append(Similarity(item.ratio, np.asarray(item.offset)))
    return maps


def estimate_lipschitz(graph: GraphMap, samples: int = 4000, radius: float = 4.0, seed: int = 0) -> float:
    """
        Sampled Lipschitz estimate from far pairs and from Jacobian norms at random points
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=(samples, graph.d))
    y = rng.uniform(-radius, radius, size=(samples, graph.d))
    dist = np.linalg.norm(x - y, axis=1)
    keep = dist > 1e-9
    quotients = np.linalg.norm(graph.value(x[keep]) - graph.value(y[keep]), axis=1) / dist[keep]
    jac_norms = np.linalg.norm(graph.jacobian(x), ord=2, axis=(1, 2))
    return float(max(quotients.max(initial=0.0), jac_norms.max(initial=0.0)))


class FarFieldTail(object):
    """
        Analytic tail of the inverse-power integral beyond the outermost shell

        Gamma is treated as flat outside the cube of half-width radius, so the
        tail is radius^{-alpha}/alpha times the angular integral of
        max_i |theta_i|^alpha over S^{d-1}. The reported error is the
        Ahlfors-regular bound C0 radius^{-alpha} / (1 - 2^{-alpha}).
    """

    def __init__(self, d: int, radius: float, c0: float):
        self.d = d
        self.radius = radius
        self.c0 = c0
        self._angular: Dict[float, float] = {}

    def angular_factor(self, alpha: float) -> float:
        if alpha not in self._angular:
            if self.d == 1:
                value = 2.0
            elif self.d == 2:
                value = 8.0 * integrate.quad(lambda th: math.cos(th) ** alpha, 0.0, math.pi / 4, epsabs=1e-13)[0]
            else:
                directions, weights = sphere_directions(self.d, count=200000, seed=7)
                value = float(weights @ np.max(np.abs(directions), axis=1) ** alpha)
            self._angular[alpha] = value
        return self._angular[alpha]

    def value(self, alpha: float) -> float:
        return self.angular_factor(alpha) * self.radius ** (-alpha) / alpha

    def error(self, alpha: float) -> float:
        return self.c0 * self.radius ** (-alpha) / (1.0 - 2.0 ** (-alpha))


class QuadratureRule(object):
    """
        Surface-measure quadrature on Gamma: nodes in R^n, positive weights in units of length^d
    """

    def __init__(self, gamma: BoundarySet, nodes: np.ndarray, weights: np.ndarray, level: int,
                 covering_radius: float, params: Optional[np.ndarray] = None, inner_count: Optional[int] = None,
                 window: Optional[Tuple[np.ndarray, np.ndarray]] = None, tail: Optional[FarFieldTail] = None):
        self.gamma = gamma
        self.nodes = nodes
        self.weights = weights
        self.level = level
        self.covering_radius = covering_radius
        self.params = params
        self.inner_count = len(nodes) if inner_count is None else inner_count
        self.window = window
        self.tail = tail
        self._tree: Optional[cKDTree] = None

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f'QuadratureRule(level={self.level}, nodes={len(self)}, h={self.covering_radius:.3g})'

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.nodes)
        return self._tree

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def window_mass(self) -> float:
        return float(self.weights[:self.inner_count].sum())

    def mass_in_ball(self, center: np.ndarray, radius: float) -> float:
        index = self.tree.query_ball_point(center, radius)
        return float(self.weights[index].sum()) if index else 0.0

    def nearest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
            Nearest node per point; equal distances resolve to the lowest node index
        """
        k = min(4, len(self.nodes))
        dist, index = self.tree.query(points, k=k)
        if k == 1:
            return dist, index
        dist = np.atleast_2d(dist)
        index = np.atleast_2d(index)
        tied = dist <= dist[:, :1] * (1.0 + 1e-12) + 1e-300
        masked = np.where(tied, index, np.iinfo(index.dtype).max)
        best = np.argmin(masked, axis=1)
        rows = np.arange(len(points))
        return dist[rows, best], index[rows, best]


def sigma_quadrature(gamma: BoundarySet, level: int, window: Optional[Sequence[Sequence[float]]] = None,
                     far_radius: Optional[float] = None, max_nodes: int = 2_000_000) -> QuadratureRule:
    """
        Quadrature rule for sigma on Gamma at refinement level L

        Planes and graphs: trapezoid tensor rule with 2^L + 1 nodes per axis over
        the parameter window, optionally followed by graded midpoint shells up to
        far_radius and an analytic far-field tail. Cantor sets: the m^L images of
        the barycenter with self-similar weights of total mass 1.
    """
    if level < 0:
        raise GeometryError('Quadrature level must be non-negative')
    if gamma.kind == BoundaryKind.CANTOR:
        return _cantor_quadrature(gamma, level, window, max_nodes)
    return _graph_quadrature(gamma, level, window, far_radius, max_nodes)


def quadrature_from_descriptor(gamma: BoundarySet, spec: QuadratureDescriptor, max_nodes: int,
                               level: Optional[int] = None) -> QuadratureRule:
    window = None
    if spec.window is not None:
        window = (spec.window.lower, spec.window.upper)
    return sigma_quadrature(gamma, spec.level if level is None else level, window, spec.far_radius, max_nodes)


def _graph_quadrature(gamma: BoundarySet, level: int, window, far_radius: Optional[float],
                      max_nodes: int) -> QuadratureRule:
    d = int(gamma.d)
    if window is None:
        lower = np.full(d, -DEFAULT_WINDOW_HALF_WIDTH)
        upper = np.full(d, DEFAULT_WINDOW_HALF_WIDTH)
    else:
        lower = np.asarray(window[0], dtype=float)[:d]
        upper = np.asarray(window[1], dtype=float)[:d]
        if len(lower) != d or np.any(lower >= upper):
            raise GeometryError(f'Window {window} does not intersect the {d}-dimensional boundary')

    per_axis = 2 ** level + 1
    count = per_axis ** d
    if count > max_nodes:
        raise BudgetExceededError('quadrature nodes', count, max_nodes)

    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    axis_weights = []
    for lo, hi in zip(lower, upper):
        w = np.full(per_axis, (hi - lo) / (per_axis - 1))
        w[[0, -1]] *= 0.5
        axis_weights.append(w)
    params = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing='ij')], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in np.meshgrid(*axis_weights, indexing='ij')], axis=1), axis=1)
    spacing = float(np.max((upper - lower) / (per_axis - 1)))
    stretch = math.sqrt(1.0 + gamma.lipschitz ** 2)
    covering = 0.5 * math.sqrt(d) * spacing * stretch

    tail = None
    inner_count = len(params)
    if far_radius is not None:
        half = 0.5 * (upper - lower)
        center = 0.5 * (upper + lower)
        if not np.allclose(half, half[0]):
            raise GeometryError('Far-field shells need a cubic parameter window')
        shell_params, shell_weights, outer = _far_shells(center, float(half[0]), far_radius, d)
        if count + len(shell_params) > max_nodes:
            raise BudgetExceededError('quadrature nodes', count + len(shell_params), max_nodes)
        params = np.concatenate([params, shell_params])
        weights = np.concatenate([weights, shell_weights])
        c0 = unit_ball_volume(d) * stretch ** d
        tail = FarFieldTail(d, outer, c0)

    weights = weights * gamma.surface_jacobian(params)
    nodes = gamma.embed(params)
    rule = QuadratureRule(gamma, nodes, weights, level, covering, params=params, inner_count=inner_count,
                          window=(lower, upper), tail=tail)
    logger.info(f'Built quadrature on {gamma}: {rule}, window mass {rule.window_mass:.6g}')
    return rule


def _far_shells(center: np.ndarray, half: float, far_radius: float, d: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """
        Midpoint cells in dyadic cube annuli: each shell splits its outer cube
        into 16 cells per axis and drops the 8 central ones covered by the inner cube
    """
    params, weights = [], []
    inner = half
    while 2.0 * inner <= far_radius + 1e-12:
        outer = 2.0 * inner
        size = 2.0 * outer / 16.0
        mids = -outer + size * (np.arange(16) + 0.5)
        grid = np.stack([g.ravel() for g in np.meshgrid(*([mids] * d), indexing='ij')], axis=1)
        keep = np.max(np.abs(grid), axis=1) > inner
        params.append(center + grid[keep])
        weights.append(np.full(int(keep.sum()), size ** d))
        inner = outer
    if not params:
        return np.zeros((0, d)), np.zeros(0), half
    return np.concatenate(params), np.concatenate(weights), inner


def _cantor_quadrature(gamma: BoundarySet, level: int, window, max_nodes: int) -> QuadratureRule:
    m = len(gamma.maps)
    count = m ** level
    if count > max_nodes:
        raise BudgetExceededError('quadrature nodes', count, max_nodes)
    points = gamma.cantor_center[None, :].copy()
    weights = np.ones(1)
    p = gamma.probabilities
    for _ in range(level):
        points = np.concatenate([s(points) for s in gamma.maps])
        weights = np.concatenate([pi * weights for pi in p])
    covering = gamma.cantor_radius * max(s.ratio for s in gamma.maps) ** level
    if window is not None:
        lower = np.asarray(window[0], dtype=float)
        upper = np.asarray(window[1], dtype=float)
        if len(lower) != gamma.n:
            raise GeometryError('Cantor windows are boxes in R^n')
        keep = np.all((points >= lower) & (points <= upper), axis=1)
        if not keep.any():
            raise GeometryError(f'Window {window} does not intersect the Cantor set')
        points, weights = points[keep], weights[keep]
    rule = QuadratureRule(gamma, points, weights, level, covering)
    logger.info(f'Built quadrature on {gamma}: {rule}, total mass {rule.total_mass:.6g}')
    return rule


class NearestPoints(object):
    def __init__(self, distance: np.ndarray, error: np.ndarray, feet: np.ndarray,
                 params: Optional[np.ndarray] = None):
        self.distance = distance
        self.error = error
        self.feet = feet
        self.params = params


def nearest_points(gamma: BoundarySet, X, rule: Optional[QuadratureRule] = None,
                   iterations: int = 40) -> NearestPoints:
    """
        Distances to Gamma with foot points and an error bound

        Planes are exact. Graphs refine the nearest quadrature node (or the
        vertical projection) by Gauss-Newton on |X - (u, phi(u))|^2. Cantor sets
        return the nearest quadrature node with error h_L.
    """
    points, _ = as_points(X, gamma.n)
    d = int(gamma.d) if gamma.kind != BoundaryKind.CANTOR else None

    if gamma.kind == BoundaryKind.AFFINE_PLANE:
        feet = points.copy()
        feet[:, d:] = 0.0
        return NearestPoints(np.linalg.norm(points[:, d:], axis=1), np.zeros(len(points)), feet, points[:, :d].copy())

    if gamma.kind == BoundaryKind.CANTOR:
        if rule is None:
            raise AccuracyError('Distances to a Cantor set need a quadrature rule')
        dist, index = rule.nearest(points)
        return NearestPoints(np.asarray(dist, dtype=float), np.full(len(points), rule.covering_radius),
                             rule.nodes[index].copy())

    seeds = [points[:, :d].copy()]
    if rule is not None and rule.params is not None:
        _, index = rule.nearest(points)
        seeds.append(rule.params[index].copy())
    best_dist = np.full(len(points), np.inf)
    best_params = seeds[0].copy()
    best_error = np.zeros(len(points))
    for seed in seeds:
        params, step = _gauss_newton(gamma, points, seed, iterations)
        dist = np.linalg.norm(points - gamma.embed(params), axis=1)
        better = dist < best_dist
        best_dist = np.where(better, dist, best_dist)
        best_params[better] = params[better]
        best_error = np.where(better, step, best_error)
    if rule is not None:
        best_error = np.minimum(best_error, rule.covering_radius)
    return NearestPoints(best_dist, best_error, gamma.embed(best_params), best_params)


def _gauss_newton(gamma: BoundarySet, points: np.ndarray, params: np.ndarray,
                  iterations: int) -> Tuple[np.ndarray, np.ndarray]:
    d = int(gamma.d)
    x, t = points[:, :d], points[:, d:]
    step_norm = np.full(len(points), np.inf)
    for _ in range(iterations):
        jac = gamma.graph.jacobian(params)
        gram = np.eye(d)[None] + np.einsum('qki,qkj->qij', jac, jac)
        grad = (params - x) + np.einsum('qki,qk->qi', jac, gamma.graph.value(params) - t)
        step = np.linalg.solve(gram, grad[..., None])[..., 0]
        params = params - step
        step_norm = np.linalg.norm(step, axis=1)
        if np.all(step_norm <= 1e-14 * (1.0 + np.linalg.norm(params, axis=1))):
            break
    return params, step_norm


def distance(gamma: BoundarySet, X, rule: Optional[QuadratureRule] = None):
    """
        Euclidean distance to Gamma; a float for a single point, an array otherwise
    """
    _, single = as_points(X, gamma.n)
    result = nearest_points(gamma, X, rule)
    return float(result.distance[0]) if single else result.distance


class ARReport(BaseModel):
    c0_estimate: float = Field(..., description='max over samples of max(sigma(B)/r^d, r^d/sigma(B))')
    worst_center: List[float] = Field(..., description='Center of the worst sampled ball')
    worst_radius: float = Field(..., description='Radius of the worst sampled ball')
    min_radius: float
    max_radius: float
    samples: int


def verify_ar(gamma: BoundarySet, rule: QuadratureRule, trials: int, rng_seed: int) -> ARReport:
    """
        Sample surface balls B(x, r) centered at nodes with r log-uniform in
        [8 h_L, diam/4] and report the Ahlfors-regularity constant
    """
    if trials < 1:
        raise GeometryError('verify_ar needs at least one trial')
    rng = np.random.default_rng(rng_seed)
    if gamma.kind == BoundaryKind.CANTOR:
        diam = gamma.diameter
    else:
        lower, upper = rule.window
        diam = float(np.min(upper - lower))
    r_min, r_max = 8.0 * rule.covering_radius, diam / 4.0
    if r_min >= r_max:
        raise AccuracyError(f'Rule too coarse: 8 h_L = {r_min:.3g} is not below diam/4 = {r_max:.3g}')

    worst, worst_center, worst_radius, done = 0.0, rule.nodes[0], r_min, 0
    inner_params = rule.params[:rule.inner_count] if rule.params is not None else None
    for _ in range(20 * trials):
        if done == trials:
            break
        r = float(math.exp(rng.uniform(math.log(r_min), math.log(r_max))))
        if inner_params is not None:
            lower, upper = rule.window
            eligible = np.flatnonzero(np.all((inner_params >= lower + r) & (inner_params <= upper - r), axis=1))
        else:
            eligible = np.arange(len(rule.nodes))
        if len(eligible) == 0:
            continue
        center = rule.nodes[eligible[rng.integers(len(eligible))]]
        mass = rule.mass_in_ball(center, r)
        quotient = mass / r ** gamma.d
        value = max(quotient, 1.0 / quotient) if quotient > 0 else math.inf
        if value > worst:
            worst, worst_center, worst_radius = value, center, r
        done += 1
    logger.info(f'AR check on {gamma}: C0 ~ {worst:.4g} over {done} balls')
    return ARReport(c0_estimate=worst, worst_center=[float(v) for v in worst_center], worst_radius=worst_radius,
                    min_radius=r_min, max_radius=r_max, samples=done)


class Corkscrew(BaseModel):
    point: List[float]
    delta: float
    c1: float = Field(..., description='r / delta(A): the corkscrew constant realized at this (x, r)')


def normal_directions(gamma: BoundarySet, x: np.ndarray, rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """
        Candidate unit directions for corkscrew searches at a boundary point x
    """
    if gamma.kind == BoundaryKind.CANTOR:
        axes = np.concatenate([np.eye(gamma.n), -np.eye(gamma.n)])
        lattice, _ = sphere_directions(gamma.n, count=32) if gamma.n <= 3 else sphere_directions(gamma.n, 64, seed=3)
        return np.concatenate([axes, lattice])
    d = int(gamma.d)
    m = gamma.n - d
    feet = nearest_points(gamma, x, rule)
    frame = gamma.tangent_frame(feet.params)[0]
    normal_basis = frame[:, d:]
    local, _ = sphere_directions(m, count=8) if m <= 3 else sphere_directions(m, count=4 * m, seed=3)
    return local @ normal_basis.T


def corkscrew(gamma: BoundarySet, x, r: float, rule: Optional[QuadratureRule] = None) -> Corkscrew:
    """
        Point A with |A - x| < r maximizing delta over a direction lattice at radius r/2
    """
    x = np.asarray(x, dtype=float)
    if r <= 0:
        raise GeometryError('Corkscrew radius must be positive')
    if gamma.diameter is not None and r >= gamma.diameter:
        raise GeometryError(f'Corkscrew radius {r} is not below the diameter bound {gamma.diameter:.6g}')
    directions = normal_directions(gamma, x, rule)
    candidates = x[None, :] + 0.5 * r * directions
    deltas = nearest_points(gamma, candidates, rule).distance
    best = int(np.argmax(deltas))
    if deltas[best] <= 0:
        raise ChainError(f'Corkscrew search failed at x={x}, r={r}')
    return Corkscrew(point=[float(v) for v in candidates[best]], delta=float(deltas[best]), c1=float(r / deltas[best]))


class Chain(BaseModel):
    points: List[List[float]]
    ratios: List[float] = Field(..., description='|Z_{i+1} - Z_i| / delta(Z_i) per link')
    min_delta_ratio: float = Field(..., description='min delta(Z_i) / r')
    max_delta_ratio: float = Field(..., description='max delta(Z_i) / r')
    lambda_value: float = Field(..., description='|X - Y| / min(delta(X), delta(Y))')

    @property
    def length(self) -> int:
        return len(self.points) - 1


def harnack_chain(gamma: BoundarySet, X, Y, rule: Optional[QuadratureRule] = None,
                  step_fraction: float = 0.49, max_links: int = 20000) -> Chain:
    """
        Harnack chain from X to Y: climb along the normal rays over the foot
        points at dyadic heights, bridge at the scale of |X - Y|, then descend.
        Every link obeys |Z_{i+1} - Z_i| <= delta(Z_i) / 2.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if np.allclose(X, Y, rtol=0.0, atol=1e-15):
        return Chain(points=[X.tolist()], ratios=[], min_delta_ratio=1.0, max_delta_ratio=1.0, lambda_value=0.0)

    ends = nearest_points(gamma, np.stack([X, Y]), rule)
    dX, dY = ends.distance
    if dX <= 0 or dY <= 0:
        raise ChainError('Harnack chains join points of the open domain')
    scale = float(np.linalg.norm(X - Y))
    lam = scale / min(dX, dY)

    ascent_x = _ascent(X, ends.feet[0], dX, scale)
    ascent_y = _ascent(Y, ends.feet[1], dY, scale)
    top_x, top_y = ascent_x[-1], ascent_y[-1]
    bridge = _bridge(gamma, top_x, top_y, rule)
    waypoints = ascent_x + bridge + ascent_y[::-1]

    points = [X]
    ratios: List[float] = []
    for target in waypoints[1:]:
        while True:
            current = points[-1]
            gap = target - current
            remaining = float(np.linalg.norm(gap))
            if remaining <= 1e-15 * max(1.0, scale):
                break
            delta_now = distance(gamma, current, rule)
            if delta_now <= 1e-12 * scale:
                raise ChainError(f'Harnack chain bridge failed: path reached Gamma near {current}')
            step = min(remaining, step_fraction * delta_now)
            nxt = target.copy() if step == remaining else current + gap * (step / remaining)
            ratios.append(float(np.linalg.norm(nxt - current) / delta_now))
            points.append(nxt)
            if len(points) > max_links:
                raise ChainError(f'Harnack chain exceeded {max_links} links')

    deltas = nearest_points(gamma, np.stack(points), rule).distance
    return Chain(points=[p.tolist() for p in points], ratios=ratios, min_delta_ratio=float(deltas.min() / scale),
                 max_delta_ratio=float(deltas.max() / scale), lambda_value=float(lam))


def _ascent(Z: np.ndarray, foot: np.ndarray, delta_z: float, scale: float) -> List[np.ndarray]:
    rungs = [Z]
    height = delta_z
    while 2.0 * height <= scale:
        height *= 2.0
        rungs.append(foot + (Z - foot) * (height / delta_z))
    return rungs


def _bridge(gamma: BoundarySet, A: np.ndarray, B: np.ndarray, rule: Optional[QuadratureRule]) -> List[np.ndarray]:
    """
        Direct segment when it stays clear of Gamma, otherwise a detour through
        the waypoint (from a fixed direction lattice) maximizing the clearance
    """
    samples = np.linspace(0.0, 1.0, 33)[:, None]
    floor = 0.25 * min(distance(gamma, A, rule), distance(gamma, B, rule))

    def clearance(path: List[np.ndarray]) -> float:
        worst = math.inf
        for P, Q in zip(path[:-1], path[1:]):
            worst = min(worst, float(nearest_points(gamma, P + samples * (Q - P), rule).distance.min()))
        return worst

    if clearance([A, B]) >= floor:
        return []
    mid = 0.5 * (A + B)
    radius = max(float(np.linalg.norm(A - B)), floor)
    lattice, _ = sphere_directions(gamma.n, count=32) if gamma.n <= 3 else sphere_directions(gamma.n, 64, seed=5)
    lattice = np.concatenate([np.eye(gamma.n), -np.eye(gamma.n), lattice])
    best, best_clearance = None, -math.inf
    for v in lattice:
        W = mid + radius * v
        value = clearance([A, W, B])
        if value > best_clearance:
            best, best_clearance = W, value
    if best_clearance <= 0:
        raise ChainError(f'Harnack chain bridge failed between {A} and {B}')
    return [best]


def export_quadrature_csv(rule: QuadratureRule, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow([f'x{i + 1}' for i in range(rule.nodes.shape[1])] + ['weight'])
        for node, weight in zip(rule.nodes, rule.weights):
            writer.writerow([format(v, '.17g') for v in node] + [format(weight, '.17g')])
    return path
