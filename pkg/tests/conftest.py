import numpy as np
import pytest

from services.bundle import CoefficientSet, MetricWeights
from services.elliptic import EllipticSolver, SolverOptions
from services.grid import DomainSpec, build_domain


@pytest.fixture(autouse=True)
def log_to_tmp(tmp_path, monkeypatch):
    monkeypatch.setenv('TODABENCH_LOG_FILE', str(tmp_path / 'todabench.log'))
    monkeypatch.setenv('TODABENCH_LOG_LEVEL', 'WARNING')


@pytest.fixture
def square():
    """Unit square [0,1]² at h = 1/16"""
    return build_domain(DomainSpec(shape='rectangle', h=1.0 / 16, bounds=(0.0, 1.0, 0.0, 1.0)))


@pytest.fixture
def small_disk():
    """Disk of radius 0.3 centered at the origin, h = 0.025"""
    return build_domain(DomainSpec(shape='disk', h=0.025, radius=0.3))


@pytest.fixture
def disk_solver(small_disk):
    return EllipticSolver(small_disk, SolverOptions())


def constant_eta(dom, values):
    values = np.asarray(values, dtype=float)
    return np.where(dom.active[np.newaxis], values[:, None, None] * np.ones((values.size,) + dom.mask.shape), 0.0)


def unit_coefficients(r, dom, value=1.0):
    return CoefficientSet.constant(r, dom, value)


def flat_weights(r, dom):
    return MetricWeights.flat(r, dom)
