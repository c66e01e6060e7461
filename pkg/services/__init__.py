from .grid import DiscreteDomain, DomainSpec, build_domain
from .models import Certificate, SolveReport
from .storage import StorageManager
from .elliptic import EllipticSolver, SolverOptions
from .bundle import CoefficientSet, MetricWeights
from .barriers import BarrierPair
from .solver import TodaSolver
from .harness import SweepManager

__all__ = [
    'DiscreteDomain',
    'DomainSpec',
    'build_domain',
    'Certificate',
    'SolveReport',
    'StorageManager',
    'EllipticSolver',
    'SolverOptions',
    'CoefficientSet',
    'MetricWeights',
    'BarrierPair',
    'TodaSolver',
    'SweepManager'
]
