import hashlib
import itertools
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import integrate, sparse, special
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse import linalg as sparse_linalg

from elliptic.boundary_geometry import BoundarySet, QuadratureRule, as_points, nearest_points
from elliptic.config import GridConfig
from elliptic.enums import BoundaryKind, SolverMethod
from elliptic.exceptions import (AccuracyError, BudgetExceededError, ConfigError, ConvergenceError, GeometryError,
                                 OracleError)
from elliptic.operator_fields import MatrixField, ScalarField
from elliptic.reports import write_rows_csv

logger = logging.getLogger(__name__)

INTERIOR, BAND, SHELL = 0, 1, 2
DIRECT_LIMIT = 40_000


def graded_axis(lo: float, hi: float, anchors: Sequence[float], h_min: float, h_max: float, ratio: float,
                band_cells: int = 3) -> np.ndarray:
    """
        Node coordinates on [lo, hi]: spacing h_min for band_cells cells on both
        sides of every anchor, then growing by ratio up to h_max

        Neighbouring anchors march towards each other; the gap left when the two
        fronts meet is split evenly.
    """
    if not lo < hi:
        raise GeometryError(f'Empty axis [{lo}, {hi}]')
    focus = sorted({float(a) for a in anchors if lo <= a <= hi})
    knots = sorted(set([lo, hi] + focus))
    refined = {k for k in knots if k in focus}

    def steps(is_refined: bool):
        if not is_refined:
            while True:
                yield h_max
        for _ in range(band_cells):
            yield h_min
        h = h_min
        while True:
            h = min(h * ratio, h_max)
            yield h

    coords = [lo]
    for left, right in zip(knots[:-1], knots[1:]):
        forward, backward = steps(left in refined), steps(right in refined)
        front, back = [left], [right]
        while True:
            s_left, s_right = next(forward), next(backward)
            gap = back[-1] - front[-1]
            if s_left + s_right >= gap:
                cells = max(1, int(math.ceil(gap / max(s_left, s_right) - 1e-9)))
                fill = np.linspace(front[-1], back[-1], cells + 1)[1:-1]
                break
            front.append(front[-1] + s_left)
            back.append(back[-1] - s_right)
        segment = front[1:] + list(fill) + back[::-1]
        coords.extend(segment)
    return np.asarray(coords)


def focus_anchors(gamma: Optional[BoundarySet], lower: np.ndarray, upper: np.ndarray, h_min: float,
                  band_cells: int, rule: Optional[QuadratureRule] = None,
                  focus_points: Optional[Sequence[Sequence[float]]] = None) -> List[List[float]]:
    """
        Per-axis coordinates the grid must resolve at spacing h_min
    """
    n = len(lower)
    anchors: List[List[float]] = [[] for _ in range(n)]
    pitch = band_cells * h_min
    if gamma is not None:
        if gamma.kind == BoundaryKind.CANTOR:
            nodes = rule.nodes if rule is not None else gamma.cantor_center[None, :]
            spread = gamma.cantor_radius * max(s.ratio for s in gamma.maps) ** (rule.level if rule else 0)
            for k in range(n):
                lo, hi = nodes[:, k].min() - spread, nodes[:, k].max() + spread
                anchors[k].extend(np.arange(lo, hi + pitch, pitch).tolist())
        else:
            d = int(gamma.d)
            for k in range(d):
                anchors[k].extend(np.arange(lower[k], upper[k] + pitch, pitch).tolist())
            if gamma.graph is None:
                for k in range(d, n):
                    anchors[k].append(0.0)
            else:
                axes = [np.linspace(lower[k], upper[k], 257) for k in range(d)]
                samples = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing='ij')], axis=1)
                values = gamma.graph.value(samples)
                for k in range(d, n):
                    lo, hi = values[:, k - d].min(), values[:, k - d].max()
                    anchors[k].extend(np.arange(lo, hi, pitch).tolist() + [hi])
    for point in focus_points or []:
        for k in range(n):
            anchors[k].append(float(point[k]))
    return anchors


class Grid(object):
    """
        Tensor grid over a box with per-node classes and distances to Gamma
    """

    def __init__(self, axes: List[np.ndarray], gamma: Optional[BoundarySet], rule: Optional[QuadratureRule],
                 h_min: float, band_width: float):
        self.axes = axes
        self.gamma = gamma
        self.rule = rule
        self.h_min = h_min
        self.band_width = band_width
        self.shape = tuple(len(a) for a in axes)
        self.n = len(axes)
        points = self.points()
        if gamma is None:
            self.delta = np.full(len(points), np.inf)
        else:
            self.delta = nearest_points(gamma, points, rule).distance
        on_shell = np.zeros(self.shape, dtype=bool)
        for k in range(self.n):
            index = [slice(None)] * self.n
            index[k] = 0
            on_shell[tuple(index)] = True
            index[k] = -1
            on_shell[tuple(index)] = True
        self.classes = np.full(len(points), INTERIOR, dtype=np.int8)
        self.classes[on_shell.ravel()] = SHELL
        self.classes[self.delta <= band_width] = BAND

    def __repr__(self):
        return (f'Grid(shape={self.shape}, interior={len(self.interior)}, band={len(self.band)}, '
                f'shell={len(self.shell)})')

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.classes == INTERIOR)

    @property
    def band(self) -> np.ndarray:
        return np.flatnonzero(self.classes == BAND)

    @property
    def shell(self) -> np.ndarray:
        return np.flatnonzero(self.classes == SHELL)

    @property
    def dirichlet(self) -> np.ndarray:
        return np.flatnonzero(self.classes != INTERIOR)

    def points(self, index: Optional[np.ndarray] = None) -> np.ndarray:
        if index is None:
            return np.stack([g.ravel() for g in np.meshgrid(*self.axes, indexing='ij')], axis=1)
        multi = np.unravel_index(index, self.shape)
        return np.stack([self.axes[k][multi[k]] for k in range(self.n)], axis=1)

    def dual_volumes(self, index: Optional[np.ndarray] = None) -> np.ndarray:
        widths = []
        for a in self.axes:
            w = np.zeros(len(a))
            w[1:] += 0.5 * np.diff(a)
            w[:-1] += 0.5 * np.diff(a)
            widths.append(w)
        if index is None:
            index = np.arange(self.node_count)
        multi = np.unravel_index(index, self.shape)
        return np.prod(np.stack([widths[k][multi[k]] for k in range(self.n)], axis=1), axis=1)

    def local_spacing(self, index: np.ndarray) -> np.ndarray:
        multi = np.unravel_index(index, self.shape)
        spacing = np.zeros(len(index))
        for k, a in enumerate(self.axes):
            h = np.diff(a)
            j = multi[k]
            left = np.where(j > 0, h[np.maximum(j - 1, 0)], 0.0)
            right = np.where(j < len(a) - 1, h[np.minimum(j, len(h) - 1)], 0.0)
            spacing = np.maximum(spacing, np.maximum(left, right))
        return spacing

    def nearest_node(self, X) -> int:
        X = np.asarray(X, dtype=float)
        multi = tuple(int(np.argmin(np.abs(a - X[k]))) for k, a in enumerate(self.axes))
        return int(np.ravel_multi_index(multi, self.shape))


def build_grid(lower: Sequence[float], upper: Sequence[float], gamma: Optional[BoundarySet], h_max: float,
               h_min: float, grading_ratio: float, band_factor: float = 2.0, band_cells: int = 3,
               rule: Optional[QuadratureRule] = None, focus_points: Optional[Sequence[Sequence[float]]] = None,
               max_nodes: int = 400_000) -> Grid:
    """
        Graded tensor grid: spacing h_min near Gamma and the focus points, growing
        geometrically; nodes with delta <= band_factor * h_min form the Gamma band
    """
    if not h_min < h_max:
        raise ConfigError('h_min must be smaller than h_max')
    if not 1.0 < grading_ratio <= 2.0:
        raise ConfigError('grading ratio must lie in (1, 2]')
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    anchors = focus_anchors(gamma, lower, upper, h_min, band_cells, rule, focus_points)
    axes = [graded_axis(lower[k], upper[k], anchors[k], h_min, h_max, grading_ratio, band_cells)
            for k in range(len(lower))]
    count = int(np.prod([len(a) for a in axes]))
    if count > max_nodes:
        raise BudgetExceededError('grid nodes', count, max_nodes)
    grid = Grid(axes, gamma, rule, h_min, band_factor * h_min)
    logger.info(f'Built {grid} with h_min={h_min:g}, h_max={h_max:g}, ratio={grading_ratio:g}')
    return grid


def grid_from_config(config: GridConfig, gamma: Optional[BoundarySet], rule: Optional[QuadratureRule],
                     max_nodes: int, focus_points: Optional[Sequence[Sequence[float]]] = None) -> Grid:
    half = np.asarray(config.half_width, dtype=float)
    center = np.zeros(len(half)) if config.center is None else np.asarray(config.center, dtype=float)
    return build_grid(center - half, center + half, gamma, config.h_max, config.h_min, config.grading_ratio,
                      config.band_factor, config.band_cells, rule, focus_points, max_nodes)


class DiscreteProblem(object):
    """
        Vertex-centered finite-volume system for -div(A grad u) = f on a Grid

        Rows of interior nodes carry the flux balance of their dual cell; every
        other row is an identity row awaiting Dirichlet data.
    """

    def __init__(self, grid: Grid, field: MatrixField, matrix: sparse.csr_matrix, weight_range: Tuple[float, float],
                 method: str = SolverMethod.AUTO, rtol: float = 1e-10, max_iterations: int = 20000):
        self.grid = grid
        self.field = field
        self.matrix = matrix
        self.weight_range = weight_range
        self.method = method
        self.rtol = rtol
        self.max_iterations = max_iterations
        self.interior = grid.interior
        self.dirichlet = grid.dirichlet
        self.K_II = matrix[self.interior][:, self.interior].tocsc()
        self.K_ID = matrix[self.interior][:, self.dirichlet].tocsc()
        self._factor = None

    def __repr__(self):
        return f'DiscreteProblem({self.field.name}, {self.grid}, unknowns={len(self.interior)})'

    @property
    def is_scalar(self) -> bool:
        return self.field.is_scalar

    def resolved_method(self) -> str:
        if self.method != SolverMethod.AUTO:
            return self.method
        return SolverMethod.DIRECT if len(self.interior) <= DIRECT_LIMIT else SolverMethod.ITERATIVE

    @property
    def factor(self):
        if self._factor is None:
            self._factor = sparse_linalg.splu(self.K_II)
        return self._factor

    def solve_interior(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        """
            Solve K_II x = rhs (or its transpose) with the configured method
        """
        method = self.resolved_method()
        if method == SolverMethod.DIRECT:
            return self.factor.solve(rhs, trans='T' if transpose else 'N')
        matrix = self.K_II.T.tocsr() if transpose else self.K_II.tocsr()
        norm_rhs = float(np.linalg.norm(rhs))
        if norm_rhs == 0.0:
            return np.zeros_like(rhs)
        history: List[float] = []

        def record(xk):
            history.append(float(np.linalg.norm(rhs - matrix @ xk) / norm_rhs))

        if self.is_scalar:
            diagonal = matrix.diagonal()
            preconditioner = sparse_linalg.LinearOperator(matrix.shape, matvec=lambda v: v / diagonal)
            solution, info = sparse_linalg.cg(matrix, rhs, rtol=self.rtol, maxiter=self.max_iterations,
                                              M=preconditioner, callback=record)
        else:
            ilu = sparse_linalg.spilu(matrix.tocsc(), drop_tol=1e-5, fill_factor=10)
            preconditioner = sparse_linalg.LinearOperator(matrix.shape, matvec=ilu.solve)
            solution, info = sparse_linalg.bicgstab(matrix, rhs, rtol=self.rtol, maxiter=self.max_iterations,
                                                    M=preconditioner, callback=record)
        if info != 0:
            raise ConvergenceError(f'{self}: iterative solve stopped with info={info} after {len(history)} iterations',
                                   history)
        logger.info(f'{self}: converged in {len(history)} iterations, residual {history[-1] if history else 0:.3e}')
        return solution


def _face_points(grid: Grid, multi: Tuple[np.ndarray, ...], k: int, side: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
        Node coordinates, neighbour spacing and the two quarter points of the face in direction side * e_k
    """
    base = np.stack([grid.axes[i][multi[i]] for i in range(grid.n)], axis=1)
    neighbour = grid.axes[k][multi[k] + side]
    h = np.abs(neighbour - base[:, k])
    quarter = []
    for fraction in (0.25, 0.75):
        p = base.copy()
        p[:, k] = base[:, k] + side * fraction * h
        quarter.append(p)
    return base, h, np.stack(quarter)


def _sample_finite(values: Callable, points: np.ndarray, jitter: float) -> np.ndarray:
    sampled = values(points)
    bad = ~np.all(np.isfinite(sampled.reshape(len(points), -1)), axis=1)
    if bad.any():
        moved = points[bad] + jitter
        sampled[bad] = values(moved)
        still = ~np.all(np.isfinite(sampled.reshape(len(points), -1)), axis=1)
        if still.any():
            raise AccuracyError(f'Coefficient is not finite at face point {points[np.flatnonzero(still)[0]]}')
        logger.warning(f'Jittered {int(bad.sum())} face samples off Gamma by {jitter:.3g}')
    return sampled


def assemble(field: MatrixField, grid: Grid, method: str = SolverMethod.AUTO, rtol: float = 1e-10,
             max_iterations: int = 20000) -> DiscreteProblem:
    """
        Finite-volume flux discretization of -div(A grad u)

        Diagonal coefficients on a face are harmonic means of the two quarter-point
        samples; off-diagonal couplings use the face-center matrix against the
        averaged central differences of the two nodes sharing the face.
    """
    n = grid.n
    interior = grid.interior
    multi = np.unravel_index(interior, grid.shape)
    widths = []
    for a in grid.axes:
        w = np.zeros(len(a))
        w[1:] += 0.5 * np.diff(a)
        w[:-1] += 0.5 * np.diff(a)
        widths.append(w)
    cell_widths = np.stack([widths[k][multi[k]] for k in range(n)], axis=1)
    strides = np.array([int(np.prod(grid.shape[k + 1:])) for k in range(n)])
    jitter = grid.h_min / 7.0

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    w_min, w_max = math.inf, 0.0

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for k in range(n):
        area = np.prod(np.delete(cell_widths, k, axis=1), axis=1)
        for side in (1, -1):
            base, h, quarter = _face_points(grid, multi, k, side)
            neighbour = interior + side * strides[k]
            if field.is_scalar:
                samples = _sample_finite(field.coefficient, quarter.reshape(-1, n), jitter).reshape(2, -1)
                a_kk = 2.0 / (1.0 / samples[0] + 1.0 / samples[1])
                w_min, w_max = min(w_min, float(samples.min())), max(w_max, float(samples.max()))
            else:
                samples = _sample_finite(field, quarter.reshape(-1, n), jitter).reshape(2, -1, n, n)
                a_kk = 2.0 / (1.0 / samples[0][:, k, k] + 1.0 / samples[1][:, k, k])
                center = base.copy()
                center[:, k] += side * 0.5 * h
                face = _sample_finite(field, center, jitter)
                diag = np.abs(samples[..., k, k])
                w_min, w_max = min(w_min, float(diag.min())), max(w_max, float(diag.max()))
            transmissibility = a_kk * area / h
            add(interior, interior, transmissibility)
            add(interior, neighbour, -transmissibility)
            if field.is_scalar:
                continue
            for l in range(n):
                if l == k:
                    continue
                # outward flux through the face: side * A_kl d_l u, averaged over both face nodes
                coupling = -side * face[:, k, l] * area
                for node in (interior, neighbour):
                    node_multi = np.unravel_index(node, grid.shape)
                    up = grid.axes[l][node_multi[l] + 1]
                    down = grid.axes[l][node_multi[l] - 1]
                    span = up - down
                    add(interior, node + strides[l], 0.5 * coupling / span)
                    add(interior, node - strides[l], -0.5 * coupling / span)

    others = grid.dirichlet
    add(others, others, np.ones(len(others)))
    size = grid.node_count
    matrix = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(size, size)).tocsr()
    matrix.sum_duplicates()
    problem = DiscreteProblem(grid, field, matrix, (w_min, w_max), method, rtol, max_iterations)
    logger.info(f'Assembled {problem}: nnz={matrix.nnz}, face coefficients in [{w_min:.3g}, {w_max:.3g}]')
    return problem


class SolutionField(object):
    """
        Nodal solution with multilinear interpolation and np.gradient derivatives
    """

    def __init__(self, grid: Grid, values: np.ndarray, metadata: Optional[Dict] = None):
        self.grid = grid
        self.values = values
        self.metadata = metadata or {}
        self.n = grid.n
        self._interpolator = RegularGridInterpolator(grid.axes, values.reshape(grid.shape), method='linear',
                                                     bounds_error=False, fill_value=np.nan)
        self._gradient_interpolators: Optional[List[RegularGridInterpolator]] = None

    def __repr__(self):
        return f'SolutionField({self.metadata.get("operator", "?")}, {self.grid.shape})'

    def __call__(self, X) -> Union[float, np.ndarray]:
        points, single = as_points(X, self.n)
        values = self._interpolator(points)
        return float(values[0]) if single else values

    def gradient(self, X) -> np.ndarray:
        points, single = as_points(X, self.n)
        if self._gradient_interpolators is None:
            derivatives = np.gradient(self.values.reshape(self.grid.shape), *self.grid.axes)
            if self.n == 1:
                derivatives = [derivatives]
            self._gradient_interpolators = [
                RegularGridInterpolator(self.grid.axes, g, method='linear', bounds_error=False, fill_value=np.nan)
                for g in derivatives]
        grad = np.stack([interp(points) for interp in self._gradient_interpolators], axis=1)
        return grad[0] if single else grad

    def nodal_gradient(self) -> np.ndarray:
        derivatives = np.gradient(self.values.reshape(self.grid.shape), *self.grid.axes)
        return np.stack([g.ravel() for g in derivatives], axis=1)

    def scaled(self, factor: float) -> 'SolutionField':
        return SolutionField(self.grid, factor * self.values, dict(self.metadata, scaled=factor))

    def as_scalar_field(self) -> ScalarField:
        return ScalarField(self.n, self._interpolator, lambda p: self.gradient(p), name='solution')


DataSource = Union[float, np.ndarray, Callable]


def _dirichlet_values(grid: Grid, index: np.ndarray, data: DataSource) -> np.ndarray:
    if callable(data):
        return np.asarray(data(grid.points(index)), dtype=float)
    values = np.asarray(data, dtype=float)
    if values.ndim == 0:
        return np.full(len(index), float(values))
    if len(values) != len(index):
        raise ConfigError(f'Dirichlet data of length {len(values)} for {len(index)} nodes')
    return values


def data_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()[:16]


def solve_dirichlet(problem: DiscreteProblem, g_band: DataSource, g_shell: DataSource,
                    check_max_principle: bool = True) -> SolutionField:
    """
        Dirichlet solve with g_band imposed on the Gamma band and g_shell on the outer shell
    """
    grid = problem.grid
    full = np.zeros(grid.node_count)
    band, shell = grid.band, grid.shell
    full[band] = _dirichlet_values(grid, band, g_band)
    full[shell] = _dirichlet_values(grid, shell, g_shell)
    boundary = full[problem.dirichlet]
    if not np.all(np.isfinite(boundary)):
        raise ConfigError('Dirichlet data must be finite')
    rhs = -(problem.K_ID @ boundary)
    full[problem.interior] = problem.solve_interior(rhs)

    if check_max_principle and problem.is_scalar and len(boundary):
        scale = max(1.0, float(np.max(np.abs(boundary))))
        tol = 1e-8 * scale
        inside = full[problem.interior]
        if len(inside) and (inside.min() < boundary.min() - tol or inside.max() > boundary.max() + tol):
            raise ConvergenceError(f'Discrete maximum principle violated: interior range [{inside.min():.3e}, '
                                   f'{inside.max():.3e}] vs data [{boundary.min():.3e}, {boundary.max():.3e}]')
    return SolutionField(grid, full, {'operator': problem.field.name, 'data_hash': data_hash(boundary)})


class BoundaryData(object):
    """
        Function g on R^d with its half-space Poisson extension
    """
    d: int = 1
    name: str = 'data'

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def extension(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def discontinuities(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(len(x), dtype=bool)

    def band_values(self, x: np.ndarray, width: float) -> np.ndarray:
        """
            Values on Gamma band nodes whose dual cell has the given tangential width
        """
        return self(x)


class ConstantData(BoundaryData):
    def __init__(self, value: float, d: int = 1):
        self.value = float(value)
        self.d = d
        self.name = f'constant({value:g})'

    def __call__(self, x):
        return np.full(len(x), self.value)

    def extension(self, x, s):
        return np.full(len(x), self.value)


class LinearData(BoundaryData):
    """
        Affine data; the Poisson kernel reproduces affine functions
    """

    def __init__(self, slope: Sequence[float], offset: float = 0.0):
        self.slope = np.atleast_1d(np.asarray(slope, dtype=float))
        self.offset = float(offset)
        self.d = len(self.slope)
        self.name = 'linear'

    def __call__(self, x):
        return x @ self.slope + self.offset

    def extension(self, x, s):
        return x @ self.slope + self.offset


class IntervalIndicator(BoundaryData):
    def __init__(self, a: float, b: float):
        self.a, self.b = float(a), float(b)
        self.name = f'indicator[{a:g},{b:g}]'

    def __call__(self, x):
        return ((x[:, 0] >= self.a) & (x[:, 0] <= self.b)).astype(float)

    def extension(self, x, s):
        x = x[:, 0]
        with np.errstate(divide='ignore', invalid='ignore'):
            inside = (np.arctan((self.b - x) / s) - np.arctan((self.a - x) / s)) / math.pi
        return np.where(s > 0, inside, self(x[:, None]))

    def discontinuities(self, x):
        return np.isin(x[:, 0], [self.a, self.b])

    def band_values(self, x, width):
        # fraction of the cell [x - width / 2, x + width / 2] inside [a, b]
        left = np.maximum(x[:, 0] - 0.5 * width, self.a)
        right = np.minimum(x[:, 0] + 0.5 * width, self.b)
        return np.clip(right - left, 0.0, None) / width


class GaussianData(BoundaryData):
    """
        g = amplitude exp(-(x - center)^2 / (2 sigma^2)); its extension is a Voigt profile
    """

    def __init__(self, sigma: float, amplitude: float = 1.0, center: float = 0.0):
        self.sigma, self.amplitude, self.center = float(sigma), float(amplitude), float(center)
        self.name = f'gaussian({sigma:g})'

    def __call__(self, x):
        return self.amplitude * np.exp(-(x[:, 0] - self.center) ** 2 / (2.0 * self.sigma ** 2))

    def extension(self, x, s):
        factor = self.amplitude * self.sigma * math.sqrt(2.0 * math.pi)
        return factor * special.voigt_profile(x[:, 0] - self.center, self.sigma, s)


class LorentzianData(BoundaryData):
    """
        g = 1 / (1 + x^2); the Cauchy semigroup gives (1 + s) / (x^2 + (1 + s)^2)
    """

    name = 'lorentzian'

    def __call__(self, x):
        return 1.0 / (1.0 + x[:, 0] ** 2)

    def extension(self, x, s):
        return (1.0 + s) / (x[:, 0] ** 2 + (1.0 + s) ** 2)


class CallableData(BoundaryData):
    """
        Arbitrary bounded g; the extension is integrated with quad_vec

        d = 1 substitutes y = x + s tan(theta), which turns the Poisson integral
        into the mean of g over theta; d = 2 uses polar coordinates with the same
        substitution in the radius and a trapezoid rule in the angle.
    """

    def __init__(self, fn: Callable, d: int = 1, name: str = 'callable', angles: int = 64):
        if d not in (1, 2):
            raise ConfigError('Poisson extensions of general data are available for d = 1 and d = 2')
        self.fn = fn
        self.d = d
        self.name = name
        self.angles = angles

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)

    def extension(self, x, s):
        result = np.asarray(self(x), dtype=float).copy()
        positive = s > 0
        if not positive.any():
            return result
        xs, ss = x[positive], s[positive]
        if self.d == 1:
            def integrand(theta):
                return self(xs + (ss * math.tan(theta))[:, None]) / math.pi

            values, _ = integrate.quad_vec(integrand, -math.pi / 2, math.pi / 2, epsabs=1e-10, epsrel=1e-8)
        else:
            phis = 2.0 * math.pi * np.arange(self.angles) / self.angles
            directions = np.stack([np.cos(phis), np.sin(phis)], axis=1)

            def integrand(theta):
                radius = ss * math.tan(theta)
                points = xs[:, None, :] + radius[:, None, None] * directions[None]
                ring = self(points.reshape(-1, 2)).reshape(len(xs), self.angles).mean(axis=1)
                return ring * math.sin(theta)

            values, _ = integrate.quad_vec(integrand, 0.0, math.pi / 2, epsabs=1e-10, epsrel=1e-8)
        result[positive] = values
        return result


def model_oracle(g: BoundaryData, X, d: Optional[int] = None):
    """
        u(x, t) = (P_{|t|} * g)(x), the solution of the model problem with data g

        At t = 0 the data value is returned where g is continuous.
    """
    d = g.d if d is None else d
    points, single = as_points(X, np.asarray(X).shape[-1])
    x = points[:, :d]
    s = np.linalg.norm(points[:, d:], axis=1)
    on_gamma = s == 0
    if np.any(on_gamma & g.discontinuities(x)):
        raise OracleError(f'Model oracle evaluated on Gamma at a discontinuity of {g.name}')
    values = g.extension(x, s)
    return float(values[0]) if single else values


def data_from_descriptor(raw: Dict) -> BoundaryData:
    kind = raw.get('kind', 'constant')
    if kind == 'constant':
        return ConstantData(raw.get('value', 1.0), int(raw.get('d', 1)))
    if kind == 'linear':
        return LinearData(raw.get('slope', [1.0]), raw.get('offset', 0.0))
    if kind == 'indicator':
        return IntervalIndicator(*raw.get('interval', [-1.0, 1.0]))
    if kind == 'gaussian':
        return GaussianData(raw.get('sigma', 0.5), raw.get('amplitude', 1.0), raw.get('center', 0.0))
    if kind == 'lorentzian':
        return LorentzianData()
    raise ConfigError(f'Unknown boundary data kind {kind!r}')


def oracle_data(g: BoundaryData, d: int) -> Callable:
    """
        Node-value callable: g on the band (through the foot x), the oracle elsewhere
    """

    def values(points):
        s = np.linalg.norm(points[:, d:], axis=1)
        return g.extension(points[:, :d], s)

    return values


def green_function(problem: DiscreteProblem, Y) -> Tuple[SolutionField, int]:
    """
        Discrete Green function with pole at the grid node nearest Y

        The load is the unit vector at the pole (a source of unit mass spread
        over the pole's dual cell), so g(X, Y) = (K_II^{-1})_{XY} and the
        discrete Green function is symmetric for symmetric stencils.
    """
    grid = problem.grid
    node = grid.nearest_node(Y)
    position = np.searchsorted(problem.interior, node)
    if position >= len(problem.interior) or problem.interior[position] != node:
        raise GeometryError(f'Green pole {Y} does not sit on an interior node')
    spacing = float(grid.local_spacing(np.array([node]))[0])
    if grid.delta[node] < 4.0 * spacing:
        raise AccuracyError(f'Green pole too close to Gamma: delta={grid.delta[node]:.3g}, spacing={spacing:.3g}')
    rhs = np.zeros(len(problem.interior))
    rhs[position] = 1.0
    full = np.zeros(grid.node_count)
    full[problem.interior] = problem.solve_interior(rhs)
    return SolutionField(grid, full, {'operator': problem.field.name, 'pole': grid.points(np.array([node]))[0]
                                      .tolist()}), node


def fit_loglog(x: np.ndarray, y: np.ndarray) -> float:
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise AccuracyError('Not enough positive samples for a log-log fit')
    slope, _ = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(slope)


class GreenExponents(BaseModel):
    far_field: float = Field(..., description='log-log slope of g(X_r, Y_r) against r over the similarity family')
    near_field: float = Field(..., description='log-log slope of g(X, Y) against |X - Y| near the pole')
    near_ratio_min: float = Field(..., description='min of g w(Y) |X - Y|^{n-2} near the pole')
    near_ratio_max: float
    symmetry_error: float = Field(..., description='max relative |g(X, Y) - g(Y, X)| over the family')


def green_exponents(problem: DiscreteProblem, d: int, scales: Sequence[float], weight: ScalarField,
                    near_pole: Sequence[float]) -> GreenExponents:
    """
        Fit the far-field exponent on the family Y_r = (0, r e_1), X_r = (2 r, r e_1)
        and the near-field exponent on |X - Y| in [3 h, delta(Y) / 4]
    """
    grid = problem.grid
    n = grid.n
    clearance = 4.0 * grid.band_width
    if min(scales) < clearance:
        raise AccuracyError(f'Far-field scale {min(scales):g} is closer to Gamma than four band widths ({clearance:g})')
    far, symmetry = [], []
    for r in scales:
        Y = np.zeros(n)
        Y[d] = r
        X = Y.copy()
        X[0] = 2.0 * r
        g_Y, _ = green_function(problem, Y)
        g_X, _ = green_function(problem, X)
        forward = g_Y.values[grid.nearest_node(X)]
        backward = g_X.values[grid.nearest_node(Y)]
        far.append(forward)
        symmetry.append(abs(forward - backward) / max(abs(forward), 1e-300))
    far_exponent = fit_loglog(np.asarray(scales), np.asarray(far))

    g_near, node = green_function(problem, near_pole)
    pole = grid.points(np.array([node]))[0]
    spacing = float(grid.local_spacing(np.array([node]))[0])
    radii = np.geomspace(3.0 * spacing, grid.delta[node] / 4.0, 8)
    if radii[0] >= radii[-1]:
        raise AccuracyError('Grid too coarse near the Green pole for a near-field fit')
    direction = np.zeros(n)
    direction[0] = 1.0
    samples = g_near(pole[None, :] + radii[:, None] * direction[None, :])
    near_exponent = fit_loglog(radii, samples)
    ratio = samples * float(weight(pole[None, :])[0]) * radii ** (n - 2)
    logger.info(f'Green exponents: far {far_exponent:.4g}, near {near_exponent:.4g}')
    return GreenExponents(far_field=far_exponent, near_field=near_exponent, near_ratio_min=float(ratio.min()),
                          near_ratio_max=float(ratio.max()), symmetry_error=float(max(symmetry)))


class HatBank(object):
    """
        Tensor-product hat functions prod_k max(0, 1 - |X_k - c_k| / h)
    """

    def __init__(self, centers: np.ndarray, width: float, order: int = 3):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.width = float(width)
        n = self.centers.shape[1]
        nodes, weights = np.polynomial.legendre.leggauss(order)
        unit = 0.5 * (nodes + 1.0)
        half_w = 0.5 * weights
        orthant_nodes = np.stack([g.ravel() for g in np.meshgrid(*([unit] * n), indexing='ij')], axis=1)
        orthant_weights = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([half_w] * n), indexing='ij')],
                                           axis=1), axis=1)
        signs = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
        self.offsets = (signs[:, None, :] * orthant_nodes[None]).reshape(-1, n) * self.width
        self.weights = np.tile(orthant_weights, len(signs)) * self.width ** n

    def gradient(self, offsets: np.ndarray) -> np.ndarray:
        factors = 1.0 - np.abs(offsets) / self.width
        grad = np.zeros_like(offsets)
        for k in range(offsets.shape[1]):
            others = np.prod(np.delete(factors, k, axis=1), axis=1)
            grad[:, k] = -np.sign(offsets[:, k]) / self.width * others
        return grad


def weak_residual(u, field: MatrixField, bank: HatBank) -> float:
    """
        max over the bank of |int A grad u . grad phi| / (sqrt(int w |grad u|^2) sqrt(int w |grad phi|^2))
    """
    worst = 0.0
    phi_grad = bank.gradient(bank.offsets)
    for center in bank.centers:
        points = center + bank.offsets
        grad_u = u.gradient(points)
        A = field(points)
        w = field.weight(points)
        flux = np.einsum('qij,qj,qi->q', A, grad_u, phi_grad)
        numerator = abs(float(bank.weights @ flux))
        energy_u = float(bank.weights @ (w * np.sum(grad_u ** 2, axis=1)))
        energy_phi = float(bank.weights @ (w * np.sum(phi_grad ** 2, axis=1)))
        if energy_u <= 0 or energy_phi <= 0 or not np.isfinite(numerator):
            continue
        worst = max(worst, numerator / math.sqrt(energy_u * energy_phi))
    return worst


def export_solution_csv(solution: SolutionField, path: Path) -> Path:
    points = solution.grid.points()
    header = [f'x{i + 1}' for i in range(solution.n)] + ['value']
    return write_rows_csv(path, header, (list(p) + [v] for p, v in zip(points, solution.values)))


def export_structured_mesh(solution: SolutionField, path: Path) -> Path:
    """
        Header: dims line, then one axis line per dimension; body: values in lexicographic (C) order
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as handle:
        handle.write('dims ' + ' '.join(str(s) for s in solution.grid.shape) + '\n')
        for k, axis in enumerate(solution.grid.axes):
            handle.write(f'axis{k + 1} ' + ' '.join(format(v, '.17g') for v in axis) + '\n')
        for value in solution.values:
            handle.write(format(value, '.17g') + '\n')
    return path
