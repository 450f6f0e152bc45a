import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from elliptic.enums import BoundaryKind, CovVariant, OperatorKind, SolverMethod
from elliptic.exceptions import ConfigError

logger = logging.getLogger(__name__)


class ProfileDescriptor(BaseModel):
    name: str = Field(..., description='Closed-form profile family: zero, affine, cone, sine or bump')
    params: Dict[str, Any] = Field(default_factory=dict, description='Keyword arguments of the profile family')


class SimilarityDescriptor(BaseModel):
    ratio: float = Field(..., gt=0, lt=1, description='Contraction ratio r_i of the similarity y -> r_i y + b_i')
    offset: List[float] = Field(..., description='Translation b_i in R^n')


class WindowDescriptor(BaseModel):
    lower: List[float] = Field(..., description='Lower corner of the parameter window')
    upper: List[float] = Field(..., description='Upper corner of the parameter window')

    @model_validator(mode='after')
    def check_corners(self):
        if len(self.lower) != len(self.upper):
            raise ValueError('window corners must have the same length')
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError('window lower corner must be below the upper corner')
        return self


class BoundaryDescriptor(BaseModel):
    kind: str = Field(..., description='affine_plane, lipschitz_graph or cantor')
    n: int = Field(..., ge=2, description='Ambient dimension')
    d: Optional[float] = Field(None, description='Boundary dimension (solved from the maps for Cantor sets)')
    profiles: List[ProfileDescriptor] = Field(default_factory=list,
                                              description='One profile per graph component t_k; missing ones are 0')
    preset: Optional[str] = Field(None, description='Cantor preset: middle_third or four_corner')
    maps: List[SimilarityDescriptor] = Field(default_factory=list, description='Explicit Cantor similarities')
    dimension: Optional[float] = Field(None, description='Declared Cantor dimension, checked against the ratios')

    @field_validator('kind')
    @classmethod
    def check_kind(cls, value: str) -> str:
        return BoundaryKind.check(value, 'boundary kind')


class QuadratureDescriptor(BaseModel):
    level: int = Field(6, ge=0, description='Refinement level L')
    window: Optional[WindowDescriptor] = Field(None, description='Parameter window for planes and graphs')
    far_radius: Optional[float] = Field(None, gt=0, description='Outer radius of the graded far-field shells')


class OperatorDescriptor(BaseModel):
    kind: str = Field(OperatorKind.MODEL, description='model, distance, l_alpha, lift or conjugated')
    alpha: Optional[float] = Field(None, gt=0, description='Exponent of the regularized distance')
    coefficients: Dict[str, Any] = Field(default_factory=dict,
                                         description='Codimension-one coefficient family for lifts')
    base: Optional['OperatorDescriptor'] = Field(None, description='Operator being conjugated')
    cov: str = Field(CovVariant.IDENTITY, description='Change of variables used by conjugated operators')
    cov_params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator('kind')
    @classmethod
    def check_kind(cls, value: str) -> str:
        return OperatorKind.check(value, 'operator kind')

    @field_validator('cov')
    @classmethod
    def check_cov(cls, value: str) -> str:
        return CovVariant.check(value, 'change of variables')


OperatorDescriptor.model_rebuild()


class GridConfig(BaseModel):
    half_width: List[float] = Field(..., description='Half side lengths of the solve box, one per axis')
    center: Optional[List[float]] = Field(None, description='Box center, origin by default')
    h_max: float = Field(0.25, gt=0)
    h_min: float = Field(1 / 32, gt=0)
    grading_ratio: float = Field(2.0, gt=1, le=2)
    band_factor: float = Field(2.0, gt=0, description='Gamma band holds nodes with delta <= band_factor * h_min')
    band_cells: int = Field(3, ge=1, description='Cells of spacing h_min next to every focus before grading starts')
    method: str = Field(SolverMethod.AUTO)
    rtol: float = Field(1e-10, gt=0)
    max_iterations: int = Field(20000, ge=1)

    @model_validator(mode='after')
    def check_spacing(self):
        if self.h_min >= self.h_max:
            raise ValueError('h_min must be smaller than h_max')
        SolverMethod.check(self.method, 'solver method')
        return self


class BudgetConfig(BaseModel):
    max_nodes: int = Field(..., gt=0, description='Grid node budget')
    max_quadrature_nodes: int = Field(..., gt=0, description='Quadrature node budget')
    max_cubature_points: int = Field(5_000_000, gt=0, description='Adaptive cubature evaluation budget')


class CheckSpec(BaseModel):
    name: str = Field(..., description='Registered check name')
    tolerance: Optional[float] = Field(None, description='Acceptance tolerance interpreted by the check')
    mandatory: bool = Field(True)
    params: Dict[str, Any] = Field(default_factory=dict)


class ExperimentConfig(BaseModel):
    id: str = Field(..., min_length=1)
    description: str = Field('')
    anchor: str = Field('', description='The estimate this experiment reproduces')
    seed: int = Field(..., description='Mandatory RNG seed')
    boundary: BoundaryDescriptor
    quadrature: QuadratureDescriptor = Field(default_factory=QuadratureDescriptor)
    operator: OperatorDescriptor = Field(default_factory=OperatorDescriptor)
    grid: Optional[GridConfig] = None
    budget: BudgetConfig
    checks: List[CheckSpec] = Field(..., min_length=1)
    parameters: Dict[str, Any] = Field(default_factory=dict, description='Free parameters addressable by sweeps')
    output_dir: Optional[str] = None

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode='json', exclude={'output_dir'}), sort_keys=True,
                               separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_config(path: Path) -> ExperimentConfig:
    """
        Parse and validate an experiment config; every failure surfaces as a ConfigError
    """
    try:
        raw = json.loads(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigError(f'Config file not found: {path}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'Malformed JSON in {path}: {e}') from e
    return parse_config(raw)


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f'Invalid experiment config: {e}') from e


def set_by_path(raw: Dict[str, Any], path: str, value: Any) -> Dict[str, Any]:
    """
        Return a copy of raw with the dotted path replaced by value

        Integer segments index lists (checks.0.params.epsilon). The path must
        already exist so that typos are reported instead of silently creating keys.
    """
    data = json.loads(json.dumps(raw))
    parts = path.split('.')
    node: Any = data
    for part in parts[:-1]:
        node = _child(node, part, path)
    last = parts[-1]
    if isinstance(node, list):
        index = _index(last, path)
        if index >= len(node):
            raise ConfigError(f'Parameter {path!r} is not addressable in this config')
        node[index] = value
    elif isinstance(node, dict) and last in node:
        node[last] = value
    else:
        raise ConfigError(f'Parameter {path!r} is not addressable in this config')
    return data


def _child(node: Any, part: str, path: str) -> Any:
    if isinstance(node, list):
        index = _index(part, path)
        if index < len(node):
            return node[index]
    elif isinstance(node, dict) and part in node:
        return node[part]
    raise ConfigError(f'Parameter {path!r} is not addressable in this config')


def _index(part: str, path: str) -> int:
    try:
        return int(part)
    except ValueError as e:
        raise ConfigError(f'Parameter {path!r} indexes a list with {part!r}') from e
