from typing import Any, List, Optional


class BenchError(Exception):
    """Base class for all todabench failures"""


class ConfigError(BenchError, ValueError):
    """Invalid run configuration or input file"""


class DomainError(ConfigError):
    """Discrete domain cannot be built (empty or disconnected interior)"""


class SolverError(BenchError, RuntimeError):
    """A linear or nonlinear solve did not converge"""

    def __init__(self, message: str, stats: Optional[Any] = None, trace: Optional[List[Any]] = None):
        super().__init__(message)
        self.stats = stats
        self.trace = trace or []


class CertificateError(BenchError):
    """A certificate could not be evaluated at all"""
