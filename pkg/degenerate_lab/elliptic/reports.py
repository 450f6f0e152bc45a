import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


def fmt(value: Any) -> str:
    """
        Round-trip float formatting shared by every CSV writer
    """
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


class CarlesonReport(BaseModel):
    """
        Per-ball Carleson quotients of a field over a ball family
    """
    centers: List[List[float]] = Field(..., description='Ball centers (boundary points)')
    radii: List[float] = Field(..., description='Ball radii l')
    quotients: List[float] = Field(..., description='Per-ball quotient, +inf for divergent integrals')
    supremum: float = Field(..., description='Max of the per-ball quotients')
    divergence_rate: Optional[float] = Field(None,
                                             description='Growth per unit of ln(1/s) when the small-|t| integral diverges')
    resolution: Dict[str, Any] = Field(default_factory=dict, description='Integration resolution used')

    @classmethod
    def from_quotients(cls, centers, radii, quotients, resolution: Optional[Dict] = None,
                       divergence_rate: Optional[float] = None) -> 'CarlesonReport':
        quotients = [float(q) for q in quotients]
        return cls(centers=[[float(v) for v in c] for c in centers], radii=[float(r) for r in radii],
                   quotients=quotients, supremum=max(quotients) if quotients else 0.0,
                   divergence_rate=divergence_rate, resolution=resolution or {})

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.supremum))


def carleson_csv(report: CarlesonReport, path: Path) -> Path:
    return write_rows_csv(path, ['center', 'radius', 'quotient'],
                          ([' '.join(fmt(v) for v in c), r, q]
                           for c, r, q in zip(report.centers, report.radii, report.quotients)))


class CheckRow(BaseModel):
    """
        One inequality check outcome, the row shape shared by functional and measure checks
    """
    check_id: str
    lhs: float
    rhs: float
    ratio: float


def check_rows_csv(rows: Sequence[CheckRow], config_hash: str, path: Path) -> Path:
    return write_rows_csv(path, ['check_id', 'lhs', 'rhs', 'ratio', 'config_hash'],
                          ([r.check_id, r.lhs, r.rhs, r.ratio, config_hash] for r in rows))
