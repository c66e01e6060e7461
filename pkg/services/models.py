from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from services.grid import DiscreteDomain


@dataclass
class Certificate:
    """Outcome of one numerical check: pass iff violation <= tolerance"""
    name: str
    violation: float
    tolerance: float
    location: Optional[Tuple[float, float]] = None
    skipped: bool = False
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if self.skipped:
            return True
        return bool(self.violation <= self.tolerance)

    @classmethod
    def from_field(cls, name: str, values: np.ndarray, where: np.ndarray, dom: DiscreteDomain,
                   tolerance: float, **details) -> "Certificate":
        """Largest positive part of `values` over finite nodes selected by `where`"""
        selected = where & np.isfinite(values)
        if not selected.any():
            return cls(name=name, violation=float('nan'), tolerance=tolerance, skipped=True,
                       details={'reason': 'no testable nodes', **details})
        masked = np.where(selected, values, -np.inf)
        flat = int(np.argmax(masked))
        worst = float(masked.flat[flat])
        return cls(name=name, violation=max(worst, 0.0), tolerance=tolerance,
                   location=dom.node_location(flat), details=details)

    def row(self) -> Dict[str, Any]:
        x, y = self.location if self.location is not None else (float('nan'), float('nan'))
        return {
            'name': self.name,
            'violation': self.violation,
            'tolerance': self.tolerance,
            'pass': 'skipped' if self.skipped else int(self.passed),
            'x': x,
            'y': y,
        }


def certificate_table(certificates: List[Certificate]) -> pd.DataFrame:
    return pd.DataFrame([c.row() for c in certificates], columns=['name', 'violation', 'tolerance', 'pass', 'x', 'y'])


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = float('nan')
    wall_time: float = 0.0
    method: str = ''


@dataclass
class IterationRecord:
    step: int
    update_norm: float
    residual_norm: float
    sandwich_violation: float = float('nan')
    damping: float = 1.0


@dataclass
class SolveReport:
    """Solution of the Toda system with its iteration history"""
    xi: np.ndarray
    method: str
    converged: bool
    trace: List[IterationRecord] = field(default_factory=list)
    stats: SolveStats = field(default_factory=SolveStats)
    certificates: List[Certificate] = field(default_factory=list)
    message: str = ''
    clamped: bool = False
    left_sandwich: bool = False
    sign_defect: float = float('nan')

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def residual(self) -> float:
        return self.stats.residual

    def trace_table(self) -> pd.DataFrame:
        return trace_table(self.trace)


def trace_table(trace: List[IterationRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(rec.step, rec.update_norm, rec.residual_norm, rec.sandwich_violation) for rec in trace],
        columns=['step', 'update_norm', 'residual_norm', 'sandwich_violation'],
    )
