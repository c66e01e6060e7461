import numpy as np
import pytest

from conftest import constant_eta
from services.barriers import build_barriers
from services.bundle import CoefficientSet, MetricWeights, curvature_term, gauge_reduce
from services.elliptic import EllipticSolver, SolverOptions
from services.grid import DomainSpec, build_domain
from services.solver import (
    TodaSolver, apply_S, mass_terms, residual_strong, residual_weak, sign_excess, solve_newton, solve_picard,
    weak_directions,
)
from utils.errors import SolverError


@pytest.fixture
def problem(small_disk, disk_solver):
    k = CoefficientSet.constant(2, small_disk)
    eta = constant_eta(small_disk, [0.2, -0.2])
    return k, eta, build_barriers(k, eta, disk_solver)


@pytest.fixture
def newton_solution(problem, disk_solver):
    k, eta, barriers = problem
    return solve_newton(k, eta, disk_solver, barriers=barriers)


def test_mass_terms_clamp_is_flagged(small_disk):
    k = CoefficientSet.constant(2, small_disk)
    xi = np.zeros((2,) + small_disk.mask.shape)
    xi[0, 5, 5], xi[1, 5, 5] = 400.0, -400.0
    m, clamped = mass_terms(xi, k)
    assert clamped
    assert np.all(np.isfinite(m))
    _, clean = mass_terms(np.zeros_like(xi), k)
    assert not clean


def test_newton_converges(newton_solution, problem, small_disk):
    k, eta, _ = problem
    assert newton_solution.converged
    assert newton_solution.residual <= 1e-8
    xi = newton_solution.xi
    assert np.all(xi[:, small_disk.boundary] == eta[:, small_disk.boundary])
    assert np.abs(xi.sum(axis=0)).max() < 1e-12
    assert not newton_solution.left_sandwich
    assert np.abs(residual_strong(xi, k, None, small_disk))[:, ~small_disk.interior].max() == 0.0


def test_picard_reaches_the_newton_solution(problem, newton_solution, disk_solver):
    k, eta, barriers = problem
    report = solve_picard(k, eta, barriers, disk_solver)
    assert report.converged
    assert report.method == 'picard'
    assert np.abs(report.xi - newton_solution.xi).max() < 1e-7
    assert len(report.trace_table()) == report.iterations


def test_solution_is_a_fixed_point(problem, newton_solution, disk_solver):
    k, eta, _ = problem
    assert np.abs(apply_S(newton_solution.xi, k, eta, disk_solver) - newton_solution.xi).max() < 1e-7


def test_apply_S_parts_have_the_expected_signs(problem, newton_solution, disk_solver, small_disk):
    k, eta, _ = problem
    toda = TodaSolver(disk_solver, k, eta)
    plus, minus = toda.apply_S_parts(newton_solution.xi)
    assert plus.shape == minus.shape == (1,) + small_disk.mask.shape
    assert sign_excess(plus, minus, small_disk)[small_disk.interior].max() <= toda.tolerance
    assert toda.sign_defect <= toda.tolerance
    cert = toda.sign_certificate(newton_solution.xi)
    assert cert.name == 'apply_S_signs'
    assert cert.passed


def test_swapped_S_parts_fail_the_sign_check(problem, newton_solution, disk_solver, small_disk):
    k, eta, _ = problem
    toda = TodaSolver(disk_solver, k, eta)
    plus, minus = toda.apply_S_parts(newton_solution.xi)
    assert sign_excess(minus, plus, small_disk)[small_disk.interior].max() > toda.tolerance


def test_picard_reports_sign_defect(problem, disk_solver):
    k, eta, barriers = problem
    report = solve_picard(k, eta, barriers, disk_solver)
    assert 0.0 <= report.sign_defect <= 10.0 * disk_solver.dom.h ** 2


def test_tolerance_follows_tol_scale(problem, small_disk):
    k, eta, _ = problem
    toda = TodaSolver(EllipticSolver(small_disk, SolverOptions(tol_scale=2.0)), k, eta)
    assert toda.tolerance == pytest.approx(2.0 * small_disk.h ** 2)


def test_start_does_not_matter(problem, newton_solution, disk_solver):
    k, eta, barriers = problem
    toda = TodaSolver(disk_solver, k, eta)
    for start in ('zero', 'plus', 'minus'):
        other = toda.newton(start=start, barriers=barriers)
        assert np.abs(other.xi - newton_solution.xi).max() < 1e-7


@pytest.mark.parametrize('r', [2, 3, 5])
@pytest.mark.parametrize('c', [0.5, 1.0, 4.0])
def test_trivial_instance_is_exact(r, c):
    dom = build_domain(DomainSpec(shape='rectangle', h=1.0 / 32, bounds=(0.0, 1.0, 0.0, 1.0)))
    report = solve_newton(CoefficientSet.constant(r, dom, c), constant_eta(dom, [0.0] * r), EllipticSolver(dom))
    assert np.abs(report.xi).max() <= 1e-8


@pytest.mark.parametrize('eta_values', [[0.1, -0.1], [0.1, 0.2, -0.3]])
def test_newton_jacobian_matches_finite_differences(eta_values):
    r = len(eta_values)
    dom = build_domain(DomainSpec(shape='rectangle', h=0.25, bounds=(0.0, 1.0, 0.0, 1.0)))
    solver = EllipticSolver(dom)
    rng = np.random.default_rng(11)
    k = CoefficientSet(k=1.0 + rng.random((r,) + dom.mask.shape))
    eta = constant_eta(dom, eta_values)
    toda = TodaSolver(solver, k, eta)
    y = 0.3 * rng.normal(size=(r - 1) * dom.n_interior)
    _, K = toda.newton_system(y)
    dense = K.toarray()
    assert np.allclose(dense, dense.T)
    step = 1e-6
    for i in range(y.size):
        e = np.zeros_like(y)
        e[i] = step
        column = (toda.newton_system(y + e)[0] - toda.newton_system(y - e)[0]) / (2 * step)
        assert np.allclose(column, dense[:, i], atol=1e-6)


def test_gauge_reduction_gives_the_same_solution(small_disk, disk_solver):
    weights = MetricWeights.from_polynomial(small_disk, [0.0, 0.0], [0.0, 0.0], [0.5, -0.5])
    k = CoefficientSet.constant(2, small_disk)
    eta = constant_eta(small_disk, [0.1, -0.1])
    R = curvature_term(weights, small_disk)
    direct = solve_newton(k, eta, disk_solver, R=R)
    reduction = gauge_reduce(weights, k, eta, disk_solver)
    reduced = solve_newton(reduction.k_hat, eta, disk_solver)
    assert np.abs(reduction.restore(reduced.xi) - direct.xi).max() < 1e-7


@pytest.mark.parametrize('eta_values', [[0.3, 0.0, -0.3], [0.3, 0.1, -0.1, -0.3]])
def test_symmetric_instance_has_symmetric_solution(small_disk, disk_solver, eta_values):
    r = len(eta_values)
    k = CoefficientSet.constant(r, small_disk)
    xi = solve_newton(k, constant_eta(small_disk, eta_values), disk_solver).xi
    assert np.abs(xi + xi[::-1]).max() <= 10.0 * disk_solver.options.tol_res


def test_weak_residual_of_a_solution(problem, newton_solution, small_disk):
    k, _, _ = problem
    results = residual_weak(newton_solution.xi, k, None, small_disk, [(0.0, 0.0), (0.05, -0.05)], 4 * small_disk.h)
    assert len(results) == 2 * 2
    assert max(abs(item.value) for item in results) < 1e-6
    assert {item.component for item in results} == {1, 2}


def test_weak_bump_near_boundary_is_skipped(problem, newton_solution, small_disk):
    k, _, _ = problem
    assert residual_weak(newton_solution.xi, k, None, small_disk, [(0.28, 0.0)], 4 * small_disk.h) == []


def test_weak_directions_lie_in_v():
    directions = weak_directions(4)
    assert np.allclose(directions.sum(axis=1), 0.0)
    assert directions.shape == (4, 4)


def test_picard_needs_barriers_for_minus_start(problem, disk_solver):
    k, eta, _ = problem
    with pytest.raises(ValueError, match='barrier'):
        TodaSolver(disk_solver, k, eta).picard(barriers=None, start='minus')


def test_picard_rejects_curvature_term(problem, small_disk, disk_solver):
    k, eta, barriers = problem
    R = np.ones((2,) + small_disk.mask.shape)
    with pytest.raises(ValueError, match='gauge'):
        TodaSolver(disk_solver, k, eta, R=R).picard(barriers=barriers)


def test_picard_exhaustion_reports_stats(problem, small_disk):
    k, eta, barriers = problem
    solver = EllipticSolver(small_disk, SolverOptions(max_iter=2))
    with pytest.raises(SolverError) as info:
        TodaSolver(solver, k, eta).picard(barriers=barriers)
    assert info.value.stats.iterations == 2
    assert len(info.value.trace) == 2


def test_boundary_shape_checked(problem, disk_solver):
    k, _, _ = problem
    with pytest.raises(ValueError):
        TodaSolver(disk_solver, k, np.zeros((3, 4, 4)))
