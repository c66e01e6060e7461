from .errors import BenchError, CertificateError, ConfigError, DomainError, SolverError
from .helpers import (
    format_float,
    format_duration,
    format_status,
    format_vector,
    parse_float_list,
    parse_rows,
    parse_bool
)

__all__ = [
    'BenchError',
    'CertificateError',
    'ConfigError',
    'DomainError',
    'SolverError',
    'format_float',
    'format_duration',
    'format_status',
    'format_vector',
    'parse_float_list',
    'parse_rows',
    'parse_bool'
]
