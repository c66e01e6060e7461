import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from services.grid import DiscreteDomain
from services.models import SolveStats
from utils.errors import SolverError

logger = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    """Tolerances and iteration caps shared by the linear and nonlinear solvers"""
    linear_tol: float = 1e-10
    linear_max_iter: int = 5000
    newton_tol: float = 1e-10
    newton_max_steps: int = 50
    min_damping: float = 2.0 ** -10
    direct_threshold: int = 10_000
    kw_method: str = 'newton'
    kw_max_iter: int = 500
    rho_floor: float = 50.0
    tol_res: float = 1e-8
    tol_fp: float = 1e-10
    max_iter: int = 2000
    damping: float = 1.0
    min_theta: float = 1.0 / 64.0
    tol_scale: float = 10.0

    def __post_init__(self):
        for name in ('linear_tol', 'newton_tol', 'tol_res', 'tol_fp', 'min_damping', 'min_theta'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        for name in ('linear_max_iter', 'newton_max_steps', 'kw_max_iter', 'max_iter', 'direct_threshold'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.tol_scale <= 0.0:
            raise ValueError(f"tol_scale must be positive, got {self.tol_scale}")
        if self.kw_method not in ('newton', 'monotone'):
            raise ValueError(f"unknown kw_method '{self.kw_method}'")


class EllipticSolver:
    """Dirichlet problems for the geometric Laplacian on one discrete domain

    Unknowns are the interior nodes; boundary nodes carry Dirichlet data.
    Every system is written in the symmetric form L_e u = λh²·rhs + (boundary
    neighbors), where L_e is the Euclidean 5-point matrix.
    """

    def __init__(self, dom: DiscreteDomain, options: Optional[SolverOptions] = None):
        self.dom = dom
        self.options = options or SolverOptions()
        self.index = dom.interior_index
        self.scale = (dom.lam * dom.h ** 2).ravel()[self.index]
        self.A, self.B = self._assemble()
        self._factor: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def _assemble(self) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
        dom = self.dom
        n = dom.n_interior
        size = dom.mask.size
        position = np.full(size, -1, dtype=np.int64)
        position[self.index] = np.arange(n)
        rows, cols, brows, bcols = [], [], [], []
        local = np.arange(n)
        for offset in (1, -1, dom.nx, -dom.nx):
            neighbor = self.index + offset
            neighbor_position = position[neighbor]
            coupled = neighbor_position >= 0
            rows.append(local[coupled])
            cols.append(neighbor_position[coupled])
            brows.append(local[~coupled])
            bcols.append(neighbor[~coupled])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        brows, bcols = np.concatenate(brows), np.concatenate(bcols)
        off = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        A = (4.0 * sp.identity(n, format='csr') - off).tocsr()
        B = sp.csr_matrix((np.ones(brows.size), (brows, bcols)), shape=(n, size))
        return A, B

    def interior_values(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float).ravel()[self.index]

    def to_field(self, interior: np.ndarray, boundary: Optional[np.ndarray] = None) -> np.ndarray:
        """Scatter interior unknowns into a full field with optional boundary values"""
        u = np.zeros(self.dom.mask.size)
        u[self.index] = interior
        u = u.reshape(self.dom.mask.shape)
        if boundary is not None:
            u = np.where(self.dom.boundary, boundary, u)
        return u

    def boundary_coupling(self, bc: np.ndarray) -> np.ndarray:
        return self.B @ np.where(self.dom.boundary, bc, 0.0).ravel()

    def _laplace_factor(self) -> Callable[[np.ndarray], np.ndarray]:
        if self._factor is None:
            self._factor = spla.factorized(self.A.tocsc())
        return self._factor

    def solve_linear(self, matrix: sp.spmatrix, rhs: np.ndarray,
                     factor: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Tuple[np.ndarray, SolveStats]:
        """Solve a symmetric positive definite system; direct below the size threshold, else Jacobi-CG"""
        start = time.perf_counter()
        if not np.all(np.isfinite(rhs)):
            raise SolverError("non-finite values in linear right-hand side")
        norm_b = float(np.linalg.norm(rhs))
        n = rhs.size
        if norm_b == 0.0:
            return np.zeros(n), SolveStats(iterations=0, residual=0.0, wall_time=time.perf_counter() - start, method='trivial')

        if n < self.options.direct_threshold:
            x = factor(rhs) if factor is not None else spla.spsolve(matrix.tocsc(), rhs)
            iterations, method = 1, 'direct'
        else:
            counter = [0]

            def count(_):
                counter[0] += 1

            preconditioner = sp.diags(1.0 / matrix.diagonal())
            x, info = spla.cg(matrix, rhs, rtol=self.options.linear_tol / 10.0,
                              maxiter=self.options.linear_max_iter, M=preconditioner, callback=count)
            iterations, method = counter[0], 'cg'
            if info != 0:
                stats = SolveStats(iterations=iterations, residual=float('nan'),
                                   wall_time=time.perf_counter() - start, method=method)
                raise SolverError(f"conjugate gradients did not converge within {iterations} iterations", stats=stats)

        x = np.asarray(x, dtype=float)
        stats = SolveStats(iterations=iterations, residual=float('nan'),
                           wall_time=time.perf_counter() - start, method=method)
        if not np.all(np.isfinite(x)):
            raise SolverError("NaN detected in linear solution", stats=stats)
        stats.residual = float(np.linalg.norm(matrix @ x - rhs)) / norm_b
        if stats.residual > self.options.linear_tol:
            raise SolverError(
                f"linear residual {stats.residual:.3e} exceeds tolerance {self.options.linear_tol:.1e}", stats=stats
            )
        return x, stats

    def solve_poisson(self, rhs: np.ndarray, bc: np.ndarray) -> Tuple[np.ndarray, SolveStats]:
        """Solve Δ_ω u = rhs in the interior with u = bc on boundary nodes"""
        dom = self.dom
        rhs = np.asarray(rhs, dtype=float)
        bc = np.asarray(bc, dtype=float) * np.ones(dom.mask.shape)
        if not np.all(np.isfinite(rhs[dom.interior])):
            raise SolverError("Poisson right-hand side is not finite on the interior")
        if not np.all(np.isfinite(bc[dom.boundary])):
            raise SolverError("Poisson boundary data is not finite")
        b = self.scale * self.interior_values(rhs) + self.boundary_coupling(bc)
        factor = self._laplace_factor() if dom.n_interior < self.options.direct_threshold else None
        u_int, stats = self.solve_linear(self.A, b, factor=factor)
        return self.to_field(u_int, bc), stats

    def harmonic_extension(self, bc: np.ndarray) -> np.ndarray:
        """Discrete harmonic function with the given boundary values"""
        u, _ = self.solve_poisson(np.zeros(self.dom.mask.shape), bc)
        return u

    def solve_semilinear_kw(self, f: np.ndarray, r: int) -> np.ndarray:
        """Solve Δ_ω ρ = f e^{-rρ}, ρ = 0 on the boundary, for f ≤ 0

        The solution is non-positive. With u = -rρ this is an exponential
        reaction problem that has a bounded solution only below a critical
        size of r·|f|; divergence is reported as an infeasible barrier problem.
        """
        dom = self.dom
        f = np.asarray(f, dtype=float)
        values = f[dom.active]
        if not np.all(np.isfinite(values)):
            raise ValueError("envelope f must be finite on the domain")
        if np.any(values > 0.0):
            raise ValueError(f"envelope f must be non-positive, max f = {values.max():.3e}")
        if self.options.kw_method == 'monotone':
            return self._kw_monotone(f, r)
        return self._kw_newton(f, r)

    def _kw_residual(self, rho: np.ndarray, f_int: np.ndarray, r: int) -> np.ndarray:
        with np.errstate(over='ignore', invalid='ignore'):
            return self.A @ rho - self.scale * f_int * np.exp(-r * rho)

    def _kw_newton(self, f: np.ndarray, r: int) -> np.ndarray:
        opts = self.options
        f_int = self.interior_values(f)
        rho = np.zeros(self.dom.n_interior)
        residual = self._kw_residual(rho, f_int, r)
        norm = float(np.max(np.abs(residual / self.scale), initial=0.0))
        start = time.perf_counter()

        for step in range(opts.newton_max_steps + 1):
            if norm <= opts.newton_tol:
                logger.debug(f"KW Newton converged in {step} steps, residual {norm:.3e}")
                break
            if step == opts.newton_max_steps:
                raise SolverError(
                    f"barrier problem infeasible: KW Newton did not converge in {step} steps (residual {norm:.3e})",
                    stats=SolveStats(iterations=step, residual=norm, wall_time=time.perf_counter() - start, method='kw-newton'),
                )
            jacobian = self.A + sp.diags(self.scale * r * f_int * np.exp(-r * rho))
            try:
                delta, _ = self.solve_linear(jacobian.tocsr(), -residual)
            except SolverError as e:
                raise SolverError(f"barrier problem infeasible: KW Newton linear solve failed ({e})", stats=e.stats) from e
            theta = 1.0
            while True:
                candidate = rho + theta * delta
                candidate_residual = self._kw_residual(candidate, f_int, r)
                candidate_norm = float(np.max(np.abs(candidate_residual / self.scale), initial=0.0))
                if np.isfinite(candidate_norm) and candidate_norm < norm:
                    break
                theta /= 2.0
                if theta < opts.min_damping:
                    raise SolverError(
                        f"barrier problem infeasible: KW Newton stagnated at residual {norm:.3e}",
                        stats=SolveStats(iterations=step, residual=norm, wall_time=time.perf_counter() - start, method='kw-newton'),
                    )
            rho, residual, norm = candidate, candidate_residual, candidate_norm
            if rho.min(initial=0.0) < -opts.rho_floor:
                raise SolverError(f"barrier problem infeasible: ρ fell below -{opts.rho_floor:g}")

        return self.to_field(rho, np.zeros(self.dom.mask.shape))

    def _kw_monotone(self, f: np.ndarray, r: int) -> np.ndarray:
        """Decreasing iteration Δ_ω ρ_{n+1} = f e^{-rρ_n} from the supersolution ρ_0 = 0"""
        opts = self.options
        dom = self.dom
        zero = np.zeros(dom.mask.shape)
        rho = zero
        f_int = self.interior_values(f)
        for step in range(1, opts.kw_max_iter + 1):
            with np.errstate(over='ignore'):
                forcing = f * np.exp(-r * rho)
            if not np.all(np.isfinite(forcing[dom.interior])):
                raise SolverError("barrier problem infeasible: monotone KW iterates overflowed")
            rho, _ = self.solve_poisson(forcing, zero)
            residual = self._kw_residual(self.interior_values(rho), f_int, r)
            norm = float(np.max(np.abs(residual / self.scale), initial=0.0))
            if norm <= opts.newton_tol:
                logger.debug(f"Monotone KW sweep converged in {step} steps")
                return rho
            if rho[dom.interior].min() < -opts.rho_floor:
                raise SolverError(f"barrier problem infeasible: ρ fell below -{opts.rho_floor:g}")
        raise SolverError(f"barrier problem infeasible: monotone KW sweep exhausted {opts.kw_max_iter} steps")
