import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from services.barriers import BarrierPair
from services.bundle import CoefficientSet, PolynomialPower
from services.elliptic import EllipticSolver
from services.grid import DiscreteDomain, Mollifier, laplacian, mollify, project_to_v, truncation_estimate
from services.models import Certificate
from services.solver import TodaSolver, mass_terms, residual_strong, residual_weak
from utils.errors import CertificateError, SolverError

logger = logging.getLogger(__name__)

RadialCoefficients = Callable[[np.ndarray], np.ndarray]


def _stencil_tolerance(dom: DiscreteDomain, tol_scale: float, tolerance: Optional[float]) -> float:
    return tol_scale * dom.h ** 2 if tolerance is None else tolerance


def check_subharmonic(u: np.ndarray, dom: DiscreteDomain, eps: Optional[float] = None,
                      tolerance: Optional[float] = None, tol_scale: float = 10.0,
                      name: str = 'subharmonic') -> Certificate:
    """Positive part of Δ_ω u over the interior, optionally after mollification at scale ε

    Fourth-difference truncation of the stencil is discounted, so smooth
    harmonic functions pass at stencil tolerance.
    """
    values = np.asarray(u, dtype=float)
    if eps is not None:
        values = mollify(values, Mollifier(eps), dom)
    excess = laplacian(values, dom) - tol_scale * np.nan_to_num(np.abs(truncation_estimate(values, dom)), nan=0.0)
    return Certificate.from_field(name, excess, dom.interior, dom, _stencil_tolerance(dom, tol_scale, tolerance),
                                  mollified=eps is not None)


def _node_norm(field: Optional[np.ndarray], shape: Tuple[int, ...]) -> np.ndarray:
    if field is None:
        return np.zeros(shape)
    return np.sqrt(np.sum(np.asarray(field, dtype=float) ** 2, axis=0))


def check_prop2(xi: np.ndarray, xi_other: np.ndarray, res: Optional[np.ndarray], res_other: Optional[np.ndarray],
                dom: DiscreteDomain, tolerance: Optional[float] = None, tol_scale: float = 10.0) -> Certificate:
    """Δ_ω log Σ_j e^{ξ_j - ξ'_j} ≤ |res| + |res'| at interior nodes"""
    s = logsumexp(np.asarray(xi) - np.asarray(xi_other), axis=0)
    slack = _node_norm(res, s.shape) + _node_norm(res_other, s.shape)
    cert = Certificate.from_field('prop2', laplacian(s, dom) - slack, dom.interior, dom,
                                  _stencil_tolerance(dom, tol_scale, tolerance))
    cert.details['difference_sup'] = float(np.abs(np.asarray(xi) - np.asarray(xi_other))[:, dom.active].max())
    return cert


def check_prop3(xi: np.ndarray, k: CoefficientSet, dom: DiscreteDomain, res: Optional[np.ndarray] = None,
                R: Optional[np.ndarray] = None, tolerance: Optional[float] = None,
                tol_scale: float = 10.0) -> Certificate:
    """Δ_ω t + |Σ m_j v_j|²/Σ m_j + Δ_ω log λ ≤ 0 with t = log Σ m_j

    The discrete coefficient defect Σ p_j max(Δ_ω log k'_j + Δ_ω log λ, 0),
    p_j = m_j/Σm, and the residual term |Σ m v|·|res + R|/Σm are subtracted.
    Nodes whose stencil touches a zero of Σ m_j or of some k'_j are skipped.
    """
    m, _ = mass_terms(xi, k)
    total = m.sum(axis=0)
    positive = np.all(k.k > 0, axis=0) & (total > 0)
    stencil_ok = positive.copy()
    stencil_ok[1:-1, 1:-1] &= positive[2:, 1:-1] & positive[:-2, 1:-1] & positive[1:-1, 2:] & positive[1:-1, :-2]
    tested = dom.interior & stencil_ok
    if not tested.any():
        raise CertificateError("prop3 certificate skipped every node (coefficients degenerate)")

    with np.errstate(divide='ignore', invalid='ignore'):
        t = np.log(np.where(positive, total, 1.0))
        p = np.where(positive, m / np.where(positive, total, 1.0), 0.0)
        rank_combined = np.roll(m, 1, axis=0) - m
        log_lam = laplacian(np.log(dom.lam), dom)
        log_k = laplacian(np.log(np.where(positive, k.k, 1.0)), dom)
        defect = np.sum(p * np.maximum(log_k + log_lam, 0.0), axis=0)
        n_norm = np.sqrt(np.sum(rank_combined ** 2, axis=0))
        forcing = np.zeros_like(xi) if res is None else np.asarray(res, dtype=float)
        if R is not None:
            forcing = forcing + R
        slack = n_norm * _node_norm(forcing, t.shape) / np.where(positive, total, 1.0)
        lhs = laplacian(t, dom) + n_norm ** 2 / np.where(positive, total, 1.0) + log_lam

    scale = 1.0 + float(total[dom.active].max(initial=0.0))
    tol = tol_scale * dom.h ** 2 * scale if tolerance is None else tolerance
    return Certificate.from_field('prop3', lhs - defect - slack, tested, dom, tol,
                                  coefficient_defect=float(defect[tested].max()),
                                  skipped_nodes=int((dom.interior & ~stencil_ok).sum()))


def check_lemma1(G: np.ndarray, G_tilde: np.ndarray, dom: DiscreteDomain,
                 tolerance: Optional[float] = None, tol_scale: float = 10.0) -> Certificate:
    """Δ log Σ e^{G_j} ≤ Σ_j p_j G̃_j with p_j = e^{G_j}/Σ e^{G}, Euclidean Laplacian

    Requires Δ G_j ≤ G̃_j; a failed precondition raises CertificateError.
    """
    G = np.asarray(G, dtype=float)
    G_tilde = np.asarray(G_tilde, dtype=float)
    tol = _stencil_tolerance(dom, tol_scale, tolerance)
    lap_G = laplacian(G, dom, euclidean=True)
    tested = dom.interior & np.all(np.isfinite(lap_G), axis=0) & np.all(np.isfinite(G_tilde), axis=0)
    if not tested.any():
        raise CertificateError("lemma1 certificate has no node with finite data")

    precondition = ((lap_G - G_tilde) / (1.0 + np.abs(G_tilde))).max(axis=0)
    worst = float(np.where(tested, precondition, -np.inf).max())
    if worst > tol:
        raise CertificateError(f"lemma1 precondition Δ G_j ≤ G̃_j fails by {worst:.3e}")

    with np.errstate(invalid='ignore'):
        lse = logsumexp(G, axis=0)
        p = np.exp(G - lse)
        bound = np.sum(p * G_tilde, axis=0)
        values = (laplacian(lse, dom, euclidean=True) - bound) / (1.0 + np.abs(bound))
    return Certificate.from_field('lemma1', values, tested, dom, tol)


@dataclass(frozen=True)
class RadialProfile:
    t: np.ndarray
    xi: np.ndarray
    interpolant: Callable[[np.ndarray], np.ndarray]

    def __call__(self, t: np.ndarray) -> np.ndarray:
        """Profile values (r, ...) at radii t"""
        t = np.asarray(t, dtype=float)
        r = self.xi.shape[0]
        return self.interpolant(t.ravel())[:r].reshape((r,) + t.shape)

    @property
    def center(self) -> np.ndarray:
        return self.xi[:, 0]


def radial_oracle(r: int, k_profile: RadialCoefficients, eta: Sequence[float], R0: float,
                  n: int = 4096, tol: float = 1e-8) -> RadialProfile:
    """Collocation solve of -(ξ'' + ξ'/t) + [Σ 4k_j e^{ξ_{j+1}-ξ_j} v_j] = 0, ξ'(0) = 0, ξ(R0) = η

    Self-contained: the coupling is written out here rather than shared
    with the lattice solver.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (r,):
        raise ValueError(f"oracle needs {r} boundary constants, got {eta.shape}")
    if abs(eta.sum()) > 1e-9:
        raise ValueError("oracle boundary constants must sum to zero")

    def coupling(t, xi):
        k = np.asarray(k_profile(t), dtype=float).reshape(r, -1)
        exponent = np.concatenate([xi[1:] - xi[:-1], xi[:1] - xi[-1:]], axis=0)
        m = 4.0 * k * np.exp(exponent)
        # component j of Σ m_i v_i is m_{j-1} - m_j
        return np.concatenate([m[-1:], m[:-1]], axis=0) - m

    def rhs(t, y):
        return np.vstack([y[r:], coupling(t, y[:r])])

    def boundary(ya, yb):
        return np.concatenate([ya[r:], yb[:r] - eta])

    singular = np.zeros((2 * r, 2 * r))
    singular[r:, r:] = -np.eye(r)
    mesh = np.linspace(0.0, R0, n)
    guess = np.zeros((2 * r, n))
    guess[:r] = eta[:, None]
    result = integrate.solve_bvp(rhs, boundary, mesh, guess, S=singular, tol=tol,
                                 max_nodes=max(4 * n, 10_000))
    if result.status != 0:
        raise SolverError(f"radial oracle did not converge: {result.message}")
    logger.info(f"Radial oracle solved on {result.x.size} nodes, center {result.y[:r, 0]}")
    return RadialProfile(t=result.x, xi=result.y[:r], interpolant=result.sol)


def oracle_difference(xi: np.ndarray, dom: DiscreteDomain, profile: RadialProfile,
                      center: Tuple[float, float] = (0.0, 0.0)) -> float:
    radius = np.hypot(dom.X - center[0], dom.Y - center[1])
    reference = profile(radius[dom.active])
    return float(np.abs(xi[:, dom.active] - reference).max())


def check_residual(xi: np.ndarray, k: CoefficientSet, R: Optional[np.ndarray], dom: DiscreteDomain,
                   tolerance: float) -> Certificate:
    res = np.abs(residual_strong(xi, k, R, dom)).max(axis=0)
    return Certificate.from_field('residual', res, dom.interior, dom, tolerance)


def check_boundary(xi: np.ndarray, eta: np.ndarray, dom: DiscreteDomain, tolerance: float = 1e-12) -> Certificate:
    error = np.abs(np.asarray(xi) - np.asarray(eta)).max(axis=0)
    return Certificate.from_field('boundary', error, dom.boundary, dom, tolerance)


def check_sandwich(xi: np.ndarray, barriers: Optional[BarrierPair], dom: DiscreteDomain,
                   tolerance: Optional[float] = None, tol_scale: float = 10.0) -> Certificate:
    tol = _stencil_tolerance(dom, tol_scale, tolerance)
    if barriers is None:
        return Certificate(name='sandwich', violation=float('nan'), tolerance=tol, skipped=True,
                           details={'reason': 'no barrier pair'})
    return Certificate.from_field('sandwich', barriers.sandwich_excess(xi), dom.active, dom, tol)


def is_symmetric_instance(k: CoefficientSet, eta: np.ndarray, dom: DiscreteDomain, tol: float = 1e-12) -> bool:
    """k'_j = k'_{r-j} and η_j + η_{r+1-j} = 0"""
    eta = np.asarray(eta)[:, dom.boundary]
    return k.is_symmetric(dom, tol) and bool(np.all(np.abs(eta + eta[::-1]) <= tol))


def check_symmetry(xi: np.ndarray, k: CoefficientSet, eta: np.ndarray, dom: DiscreteDomain,
                   tolerance: float) -> Certificate:
    """‖ξ_j + ξ_{r+1-j}‖∞ on symmetric instances; skipped otherwise"""
    if not is_symmetric_instance(k, eta, dom):
        return Certificate(name='symmetry', violation=float('nan'), tolerance=tolerance, skipped=True,
                           details={'reason': 'instance is not real-symmetric'})
    xi = np.asarray(xi)
    return Certificate.from_field('symmetry', np.abs(xi + xi[::-1]).max(axis=0), dom.active, dom, tolerance)


def check_weak(xi: np.ndarray, k: CoefficientSet, R: Optional[np.ndarray], dom: DiscreteDomain,
               centers: Sequence[Tuple[float, float]], eps: float, tolerance: float = 1e-6) -> Certificate:
    results = residual_weak(xi, k, R, dom, centers, eps) if centers else []
    if not results:
        return Certificate(name='weak_residual', violation=float('nan'), tolerance=tolerance, skipped=True,
                           details={'reason': 'no admissible test bump'})
    worst = max(results, key=lambda item: abs(item.value))
    return Certificate(name='weak_residual', violation=abs(worst.value), tolerance=tolerance,
                       location=(worst.x, worst.y), details={'bumps': len(results)})


def uniqueness_probe(k: CoefficientSet, eta: np.ndarray, solver: EllipticSolver,
                     barriers: Optional[BarrierPair] = None, tolerance: float = 1e-5,
                     tol_scale: float = 10.0) -> Certificate:
    """Newton from ξ⁺ and Picard from ξ⁻ must reach the same solution

    The pair must also satisfy the prop2 comparison inequality. Its excess is
    rescaled onto this certificate's tolerance, so either failure fails it.
    """
    dom = solver.dom
    toda = TodaSolver(solver, k, eta)
    first = toda.newton(start='plus' if barriers is not None else 'harmonic', barriers=barriers)
    second = toda.picard(barriers=barriers, start='minus' if barriers is not None else 'zero')
    prop2 = check_prop2(first.xi, second.xi, toda.residual(first.xi), toda.residual(second.xi), dom,
                        tol_scale=tol_scale)
    difference = float(np.abs(first.xi - second.xi)[:, dom.active].max())
    logger.info(f"Uniqueness probe: ‖ξ - ξ'‖∞ = {difference:.3e}, prop2 violation {prop2.violation:.3e}")
    prop2_excess = 0.0 if prop2.skipped else prop2.violation / prop2.tolerance
    violation = max(difference, tolerance * prop2_excess)
    return Certificate(name='uniqueness', violation=violation, tolerance=tolerance,
                       details={'difference': difference, 'prop2': prop2,
                                'newton_steps': first.iterations, 'picard_steps': second.iterations})


def certificate_summary(certificates: List[Certificate]) -> str:
    failed = [c.name for c in certificates if not c.passed]
    return 'all passed' if not failed else 'failed: ' + ', '.join(failed)


def radial_coefficients(datum: PolynomialPower, r: int, center: complex = 0j) -> RadialCoefficients:
    """k'_j ≡ 1 (j < r) and k'_r(t) = |lead|^{2/N} t^{2M/N}, M = Σ multiplicities

    Valid for flat weights with λ = 1 when every root sits at the disk center.
    """
    if any(abs(complex(a) - center) > 1e-12 for a, _ in datum.roots):
        raise ValueError("radial oracle needs every root at the disk center")
    total = sum(mult for _, mult in datum.roots)
    exponent = 2.0 * total / datum.N
    scale = abs(datum.lead) ** (2.0 / datum.N)

    def profile(t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.ones((r,) + t.shape)
        out[-1] = scale * t ** exponent
        return out

    return profile


def check_oracle(xi: np.ndarray, k: CoefficientSet, solver: EllipticSolver, reference: RadialProfile,
                 center: Tuple[float, float] = (0.0, 0.0), tolerance: float = 5e-3) -> Certificate:
    """Compare a lattice solution against the radial reference on a radial instance

    Lattice boundary nodes sit inside the circle, so the lattice problem is
    re-solved with boundary data sampled from the reference at the node radii;
    that re-solve must agree with the reference within `tolerance`. The given
    `xi` carries the circle's constant data on those nodes instead, and may
    exceed the same tolerance by twice that boundary offset.
    """
    dom = solver.dom
    radius = np.hypot(dom.X - center[0], dom.Y - center[1])
    sampled = reference(radius[dom.boundary])
    offset = float(np.abs(sampled - reference.xi[:, -1:]).max(initial=0.0))
    eta = np.zeros((k.r,) + dom.mask.shape)
    eta[:, dom.boundary] = project_to_v(sampled)
    report = TodaSolver(solver, k, eta).newton()
    lattice_gap = oracle_difference(report.xi, dom, reference, center)
    solution_gap = oracle_difference(xi, dom, reference, center)
    logger.info(f"Radial oracle agreement {lattice_gap:.3e}, solution gap {solution_gap:.3e}, "
                f"boundary offset {offset:.3e}")
    return Certificate(name='oracle', violation=max(lattice_gap, solution_gap - 2.0 * offset), tolerance=tolerance,
                       details={'lattice_gap': lattice_gap, 'solution_gap': solution_gap,
                                'boundary_offset': offset, 'center': reference.center.tolist()})
