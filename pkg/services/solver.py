import logging
import time
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from services.barriers import BarrierPair, boundary_harmonics
from services.bundle import CoefficientSet, root_vectors
from services.elliptic import EllipticSolver
from services.grid import FOUR_NEIGHBORS, DiscreteDomain, Mollifier, complete_vfield, laplacian
from services.models import Certificate, IterationRecord, SolveReport, SolveStats
from utils.errors import SolverError

logger = logging.getLogger(__name__)

EXP_CLAMP = 700.0

Start = Union[str, np.ndarray, None]


def mass_terms(xi: np.ndarray, k: CoefficientSet) -> Tuple[np.ndarray, bool]:
    """m_j = 4k'_j e^{ξ_{j+1} - ξ_j}; exponents are clamped to ±700 and the clamp is flagged"""
    exponent = root_vectors(k.r).pair(np.asarray(xi, dtype=float))
    clamped = bool(np.any(np.abs(exponent) > EXP_CLAMP))
    if clamped:
        logger.warning(f"Mass-term exponent clamped (max |(v_j, ξ)| = {np.abs(exponent).max():.3e})")
    return 4.0 * k.k * np.exp(np.clip(exponent, -EXP_CLAMP, EXP_CLAMP)), clamped


def residual_strong(xi: np.ndarray, k: CoefficientSet, R: Optional[np.ndarray], dom: DiscreteDomain) -> np.ndarray:
    """Δ_ω ξ + Σ_j m_j v_j - R at interior nodes, zero elsewhere"""
    m, _ = mass_terms(xi, k)
    res = laplacian(xi, dom) + root_vectors(k.r).combine(m)
    if R is not None:
        res = res - R
    return np.where(dom.interior, res, 0.0)


def sign_excess(plus: np.ndarray, minus: np.ndarray, dom: DiscreteDomain) -> np.ndarray:
    """Per-node failure of Δ_ω ξ'_{j,+} ≥ 0 and Δ_ω ξ'_{j,-} ≤ 0, worst component"""
    return np.maximum((-laplacian(plus, dom)).max(axis=0), laplacian(minus, dom).max(axis=0))


class WeakResidual(NamedTuple):
    x: float
    y: float
    component: int
    value: float


def weak_directions(r: int) -> np.ndarray:
    """e_j = u_j - (1/r)Σ u_i, the unit vectors projected onto V"""
    return np.eye(r) - 1.0 / r


def residual_weak(xi: np.ndarray, k: CoefficientSet, R: Optional[np.ndarray], dom: DiscreteDomain,
                  centers: Sequence[Tuple[float, float]], eps: float, amplitude: float = 1.0) -> List[WeakResidual]:
    """Quadrature of ∫ (ξ, Δ_ω ψ) + (Σ m_j v_j - R, ψ) dA for bumps ψ = amplitude·χ_ε(· - c)·e_j

    A bump whose support (with its stencil neighbors) is not inside the
    interior is skipped with a warning.
    """
    xi = np.asarray(xi, dtype=float)
    m, _ = mass_terms(xi, k)
    forcing = root_vectors(k.r).combine(m)
    if R is not None:
        forcing = forcing - R
    forcing = np.where(dom.interior, forcing, 0.0)
    mollifier = Mollifier(eps)
    directions = weak_directions(k.r)
    results: List[WeakResidual] = []

    for cx, cy in centers:
        bump = amplitude * mollifier(dom.X - cx, dom.Y - cy)
        support = bump > 0
        if not support.any():
            logger.warning(f"Weak-residual bump at ({cx:g}, {cy:g}) misses every lattice node, skipped")
            continue
        if not np.all(dom.interior[ndimage.binary_dilation(support, structure=FOUR_NEIGHBORS)]):
            logger.warning(f"Weak-residual bump at ({cx:g}, {cy:g}) overlaps the boundary, skipped")
            continue
        lap_bump = laplacian(bump, dom)
        for j, e in enumerate(directions):
            xi_e = np.tensordot(e, xi, axes=1)
            forcing_e = np.tensordot(e, forcing, axes=1)
            value = float(np.sum(dom.area_weights * (xi_e * lap_bump + forcing_e * bump)))
            results.append(WeakResidual(x=float(cx), y=float(cy), component=j + 1, value=value))
    return results


class TodaSolver:
    """Discrete Toda system Δ_ω ξ + Σ 4k'_j e^{(v_j,ξ)} v_j = R with ξ = η on the boundary"""

    def __init__(self, solver: EllipticSolver, k: CoefficientSet, eta: np.ndarray, R: Optional[np.ndarray] = None):
        self.solver = solver
        self.dom = solver.dom
        self.options = solver.options
        self.k = k
        self.eta = np.asarray(eta, dtype=float)
        self.R = R
        self.r = k.r
        self.rank = root_vectors(self.r)
        if self.eta.shape != (self.r,) + self.dom.mask.shape:
            raise ValueError(f"boundary data has shape {self.eta.shape}, expected {(self.r,) + self.dom.mask.shape}")
        k.validate(self.dom)
        self._reduced = np.eye(self.r - 1) + np.ones((self.r - 1, self.r - 1))
        # c_i = P^T v_i with P = [I; -1^T]
        self._c = self.rank.vectors[:, :-1] - self.rank.vectors[:, -1:]
        self.clamped = False
        self.tolerance = self.options.tol_scale * self.dom.h ** 2
        self.sign_defect = 0.0

    def residual(self, xi: np.ndarray) -> np.ndarray:
        return residual_strong(xi, self.k, self.R, self.dom)

    def residual_norm(self, xi: np.ndarray) -> float:
        return float(np.abs(self.residual(xi)[:, self.dom.interior]).max(initial=0.0))

    def with_boundary(self, xi: np.ndarray) -> np.ndarray:
        return np.where(self.dom.boundary[np.newaxis], self.eta, np.where(self.dom.active[np.newaxis], xi, 0.0))

    def lift(self, y: np.ndarray) -> np.ndarray:
        """Reduced interior unknowns (r-1 stacked blocks) to a full V-field"""
        n = self.dom.n_interior
        first = np.stack([self.solver.to_field(y[a * n:(a + 1) * n], self.eta[a]) for a in range(self.r - 1)])
        return complete_vfield(first)

    def restrict(self, xi: np.ndarray) -> np.ndarray:
        return np.concatenate([self.solver.interior_values(xi[a]) for a in range(self.r - 1)])

    def newton_system(self, y: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        """Symmetric reduced residual G = P^T(λh²·Res) and its Jacobian K"""
        xi = self.lift(y)
        res = self.residual(xi)
        scale = self.solver.scale
        residual_int = np.stack([scale * self.solver.interior_values(res[j]) for j in range(self.r)])
        G = (residual_int[:-1] - residual_int[-1:]).ravel()

        m, clamped = mass_terms(xi, self.k)
        self.clamped = self.clamped or clamped
        m_int = np.stack([scale * self.solver.interior_values(m[i]) for i in range(self.r)])
        blocks = [[None] * (self.r - 1) for _ in range(self.r - 1)]
        for a in range(self.r - 1):
            for b in range(self.r - 1):
                weights = np.tensordot(self._c[:, a] * self._c[:, b], m_int, axes=1)
                blocks[a][b] = sp.diags(weights)
        K = sp.kron(sp.csr_matrix(self._reduced), self.solver.A) + sp.bmat(blocks)
        return G, K.tocsr()

    def apply_S_parts(self, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """ξ'_{j,+} and ξ'_{j,-} for j = 1..r-1

        The largest sign defect seen so far is kept in `sign_defect`.
        """
        m, clamped = mass_terms(xi, self.k)
        self.clamped = self.clamped or clamped
        plus, minus = [], []
        for j in range(self.r - 1):
            half = 0.5 * self.eta[j]
            field_plus, _ = self.solver.solve_poisson(m[j], half)
            field_minus, _ = self.solver.solve_poisson(-m[j - 1], half)
            plus.append(field_plus)
            minus.append(field_minus)
        plus, minus = np.stack(plus), np.stack(minus)
        excess = sign_excess(plus, minus, self.dom)
        defect = float(excess[self.dom.interior].max(initial=0.0))
        if defect > self.tolerance and defect > self.sign_defect:
            logger.warning(f"S-map part has the wrong Laplacian sign by {defect:.3e}")
        self.sign_defect = max(self.sign_defect, defect)
        return plus, minus

    def sign_certificate(self, xi: np.ndarray) -> Certificate:
        plus, minus = self.apply_S_parts(xi)
        return Certificate.from_field('apply_S_signs', sign_excess(plus, minus, self.dom), self.dom.interior,
                                      self.dom, self.tolerance)

    def apply_S(self, xi: np.ndarray) -> np.ndarray:
        plus, minus = self.apply_S_parts(xi)
        return complete_vfield(plus + minus)

    def initial_field(self, start: Start, barriers: Optional[BarrierPair]) -> np.ndarray:
        if isinstance(start, np.ndarray):
            return self.with_boundary(np.asarray(start, dtype=float))
        if start in ('minus', 'plus'):
            if barriers is None:
                raise ValueError(f"start '{start}' needs a barrier pair")
            return self.with_boundary(barriers.xi_minus if start == 'minus' else barriers.xi_plus)
        if start in (None, 'harmonic'):
            return boundary_harmonics(self.eta, self.solver)
        if start == 'zero':
            return self.with_boundary(np.zeros_like(self.eta))
        raise ValueError(f"unknown start '{start}'")

    def _sandwich(self, xi: np.ndarray, barriers: Optional[BarrierPair]) -> float:
        return barriers.sandwich_violation(xi, self.dom) if barriers is not None else float('nan')

    def picard(self, barriers: Optional[BarrierPair] = None, start: Start = 'minus') -> SolveReport:
        """Damped fixed-point iteration ξ ← (1-θ)ξ + θ S(ξ)

        θ is halved (down to min_theta) whenever successive updates point in
        opposite directions.
        """
        if self.R is not None and np.any(self.R[:, self.dom.interior] != 0):
            raise ValueError("Picard iteration expects a gauge-reduced problem (R = 0)")
        opts = self.options
        dom = self.dom
        started = time.perf_counter()
        xi = self.initial_field(start, barriers)
        theta = opts.damping
        trace: List[IterationRecord] = []
        previous: Optional[np.ndarray] = None
        left = False
        logger.info(f"Picard iteration started: r={self.r}, θ={theta:g}, start={start if isinstance(start, str) else 'array'}")

        for step in range(1, opts.max_iter + 1):
            update = self.apply_S(xi) - xi
            if not np.all(np.isfinite(update)):
                raise SolverError("NaN detected in Picard update", trace=trace)
            if previous is not None and theta > opts.min_theta and float(np.vdot(update, previous)) < 0.0:
                theta = max(theta / 2.0, opts.min_theta)
                logger.warning(f"Picard oscillation at step {step}, damping reduced to θ={theta:g}")
            previous = update
            update_norm = float(np.abs(update[:, dom.active]).max(initial=0.0))
            xi = xi + theta * update
            residual = self.residual_norm(xi)
            sandwich = self._sandwich(xi, barriers)
            if sandwich > self.tolerance and not left:
                left = True
                logger.warning(f"Picard iterate {step} left the barrier sandwich by {sandwich:.3e}")
            trace.append(IterationRecord(step=step, update_norm=update_norm, residual_norm=residual,
                                         sandwich_violation=sandwich, damping=theta))
            logger.debug(f"Picard step {step}: update {update_norm:.3e}, residual {residual:.3e}")
            if update_norm <= opts.tol_fp and residual <= opts.tol_res:
                stats = SolveStats(iterations=step, residual=residual,
                                   wall_time=time.perf_counter() - started, method='picard')
                logger.info(f"Picard converged in {step} steps, residual {residual:.3e}")
                return SolveReport(xi=xi, method='picard', converged=True, trace=trace, stats=stats,
                                   clamped=self.clamped, left_sandwich=left,
                                   sign_defect=self.sign_defect)

        stats = SolveStats(iterations=opts.max_iter, residual=trace[-1].residual_norm if trace else float('nan'),
                           wall_time=time.perf_counter() - started, method='picard')
        raise SolverError(f"Picard iteration exhausted {opts.max_iter} steps "
                          f"(last update {trace[-1].update_norm:.3e})", stats=stats, trace=trace)

    def newton(self, start: Start = None, barriers: Optional[BarrierPair] = None) -> SolveReport:
        """Damped Newton on the reduced (r-1)-component system"""
        opts = self.options
        started = time.perf_counter()
        xi = self.initial_field(start, barriers)
        y = self.restrict(xi)
        residual = self.residual_norm(xi)
        trace: List[IterationRecord] = []
        logger.info(f"Newton solve started: r={self.r}, {y.size} unknowns, initial residual {residual:.3e}")

        for step in range(1, opts.newton_max_steps + 1):
            if residual <= opts.tol_res:
                break
            G, K = self.newton_system(y)
            delta, _ = self.solver.solve_linear(K, -G)
            theta = 1.0
            while True:
                candidate = self.lift(y + theta * delta)
                candidate_residual = self.residual_norm(candidate)
                if np.isfinite(candidate_residual) and candidate_residual < residual:
                    break
                theta /= 2.0
                if theta < opts.min_damping:
                    stats = SolveStats(iterations=step, residual=residual,
                                       wall_time=time.perf_counter() - started, method='newton')
                    raise SolverError(f"Newton stagnated at residual {residual:.3e}; "
                                      f"try the Picard method (--method picard)", stats=stats, trace=trace)
            y = y + theta * delta
            xi, residual = candidate, candidate_residual
            update_norm = float(theta * np.abs(delta).max(initial=0.0))
            trace.append(IterationRecord(step=step, update_norm=update_norm, residual_norm=residual,
                                         sandwich_violation=self._sandwich(xi, barriers), damping=theta))
            logger.debug(f"Newton step {step}: θ={theta:g}, update {update_norm:.3e}, residual {residual:.3e}")
        else:
            if residual > opts.tol_res:
                stats = SolveStats(iterations=opts.newton_max_steps, residual=residual,
                                   wall_time=time.perf_counter() - started, method='newton')
                raise SolverError(f"Newton did not converge in {opts.newton_max_steps} steps "
                                  f"(residual {residual:.3e}); try the Picard method", stats=stats, trace=trace)

        sandwich = self._sandwich(xi, barriers)
        left = bool(sandwich > self.tolerance)
        if left:
            logger.warning(f"Newton solution lies outside the barrier sandwich by {sandwich:.3e}")
        stats = SolveStats(iterations=len(trace), residual=residual,
                           wall_time=time.perf_counter() - started, method='newton')
        logger.info(f"Newton converged in {len(trace)} steps, residual {residual:.3e}")
        return SolveReport(xi=xi, method='newton', converged=True, trace=trace, stats=stats,
                           clamped=self.clamped, left_sandwich=left)


def apply_S(xi: np.ndarray, k: CoefficientSet, eta: np.ndarray, solver: EllipticSolver) -> np.ndarray:
    return TodaSolver(solver, k, eta).apply_S(xi)


def solve_picard(k: CoefficientSet, eta: np.ndarray, b: Optional[BarrierPair], solver: EllipticSolver,
                 start: Start = 'minus') -> SolveReport:
    return TodaSolver(solver, k, eta).picard(barriers=b, start=start)


def solve_newton(k: CoefficientSet, eta: np.ndarray, solver: EllipticSolver, R: Optional[np.ndarray] = None,
                 start: Start = None, barriers: Optional[BarrierPair] = None) -> SolveReport:
    return TodaSolver(solver, k, eta, R=R).newton(start=start, barriers=barriers)
