import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from services.barriers import BarrierPair, build_barriers
from services.bundle import MetricWeights, PolynomialPower, coefficients, gauge_reduce
from services.elliptic import EllipticSolver, SolverOptions
from services.grid import DiscreteDomain
from services.solver import TodaSolver, mass_terms
from services.storage import StorageManager
from utils.errors import BenchError, ConfigError, SolverError

logger = logging.getLogger(__name__)

Roots = Tuple[Tuple[complex, int], ...]

SWEEP_COLUMNS = ['N', 'converged', 'iters', 'residual', 'l1_prev', 'linf_prev', 'mass_integral']
DETAIL_COLUMNS = ['N', 'sandwich_violation', 'mass_max', 'barrier_bound']


@dataclass(frozen=True)
class FamilySpec:
    """A family q_N of polynomial differentials indexed by N"""
    rule: str
    Ns: Tuple[int, ...]
    roots: Roots = ()
    sequence: Dict[int, Roots] = field(default_factory=dict)
    seed: int = 0
    root_radius: float = 0.8
    center: complex = 0j

    def __post_init__(self):
        if self.rule not in ('power', 'sequence', 'random'):
            raise ConfigError(f"unknown family rule '{self.rule}'")
        if not self.Ns:
            raise ConfigError("family needs at least one N")
        if any(n < 1 for n in self.Ns) or any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ConfigError(f"N list must be positive and strictly increasing, got {list(self.Ns)}")
        if self.rule == 'sequence':
            missing = [n for n in self.Ns if n not in self.sequence]
            if missing:
                raise ConfigError(f"root sequence has no entry for N = {missing}")
        if self.rule == 'random' and not self.root_radius > 0:
            raise ConfigError("random family needs a positive root radius")


def random_roots(r: int, N: int, seed: int, radius: float, center: complex = 0j) -> Roots:
    """r·N simple roots, uniform in the disk of given radius; stream keyed by (seed, N)"""
    rng = np.random.default_rng([seed, N])
    count = r * N
    rad = radius * np.sqrt(rng.random(count))
    angle = 2.0 * math.pi * rng.random(count)
    return tuple((complex(center + rad[i] * np.exp(1j * angle[i])), 1) for i in range(count))


def members(fam: FamilySpec, r: int) -> List[Tuple[int, PolynomialPower]]:
    out = []
    for N in fam.Ns:
        if fam.rule == 'power':
            roots = tuple((a, mult * N) for a, mult in fam.roots)
        elif fam.rule == 'sequence':
            roots = fam.sequence[N]
        else:
            roots = random_roots(r, N, fam.seed, fam.root_radius, fam.center)
        out.append((N, PolynomialPower(roots=roots, N=N)))
    return out


def _check_pair(a: np.ndarray, b: np.ndarray, dom: DiscreteDomain, dom_b: Optional[DiscreteDomain]):
    if dom_b is not None and not dom.same_lattice(dom_b):
        raise ConfigError("fields live on different domains")
    if a.shape != b.shape:
        raise ConfigError(f"field shapes differ: {a.shape} vs {b.shape}")


def l1_distance(a: np.ndarray, b: np.ndarray, dom: DiscreteDomain, dom_b: Optional[DiscreteDomain] = None) -> float:
    """Σ over nodes of |ξ_a - ξ_b|·λh², Euclidean norm in V"""
    _check_pair(a, b, dom, dom_b)
    pointwise = np.sqrt(np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=0))
    return float(np.sum(dom.area_weights * pointwise))


def linf_distance(a: np.ndarray, b: np.ndarray, dom: DiscreteDomain, dom_b: Optional[DiscreteDomain] = None) -> float:
    _check_pair(a, b, dom, dom_b)
    return float(np.abs(np.asarray(a) - np.asarray(b))[:, dom.active].max(initial=0.0))


@dataclass
class MemberResult:
    N: int
    converged: bool
    iterations: int
    residual: float
    xi: Optional[np.ndarray] = None
    mass: Optional[np.ndarray] = None
    sandwich_violation: float = float('nan')
    message: str = ''


@dataclass
class SweepResult:
    table: pd.DataFrame
    detail: pd.DataFrame
    members: List[MemberResult]
    barriers: Optional[BarrierPair] = None

    @property
    def all_converged(self) -> bool:
        return all(m.converged for m in self.members)


class SweepManager:
    """Solves every member of a family on a shared domain and tabulates observables"""

    def __init__(self, dom: DiscreteDomain, r: int, weights: MetricWeights, eta: np.ndarray,
                 options: Optional[SolverOptions] = None, convention: str = 'norm', method: str = 'newton'):
        if method not in ('newton', 'picard'):
            raise ConfigError(f"unknown solver method '{method}'")
        self.dom = dom
        self.r = r
        self.weights = weights
        self.eta = eta
        self.options = options or SolverOptions()
        self.convention = convention
        self.method = method

    def _reduced_coefficients(self, datum: PolynomialPower):
        solver = EllipticSolver(self.dom, self.options)
        k = coefficients(self.weights, datum, self.dom, self.convention)
        return solver, k, gauge_reduce(self.weights, k, self.eta, solver)

    def shared_barriers(self, family: List[Tuple[int, PolynomialPower]]) -> Optional[BarrierPair]:
        """One barrier pair for all members, built with k'_r replaced by max_N sup k̂'_r"""
        reduced = [self._reduced_coefficients(datum) for _, datum in family]
        bound = max(float(red.k_hat.k[-1][self.dom.active].max()) for _, _, red in reduced)
        solver, _, first = reduced[0]
        try:
            barriers = build_barriers(first.k_hat, self.eta, solver, k_r_sup=bound)
        except SolverError as e:
            logger.warning(f"Shared barriers unavailable: {e}")
            return None
        logger.info(f"Shared barriers built with sup k'_r bound {bound:.6g}")
        return barriers

    def solve_member(self, N: int, datum: PolynomialPower, barriers: Optional[BarrierPair]) -> MemberResult:
        try:
            solver, k, reduction = self._reduced_coefficients(datum)
            toda = TodaSolver(solver, reduction.k_hat, self.eta)
            if self.method == 'picard':
                if barriers is None:
                    raise SolverError("Picard iteration needs the shared barrier pair")
                report = toda.picard(barriers=barriers, start='minus')
            else:
                report = toda.newton(barriers=barriers)
            xi = reduction.restore(report.xi)
            mass, _ = mass_terms(xi, k)
            sandwich = barriers.sandwich_violation(report.xi, self.dom) if barriers is not None else float('nan')
            logger.info(f"Member N={N}: converged in {report.stats.iterations} steps, residual {report.residual:.3e}")
            return MemberResult(N=N, converged=True, iterations=report.stats.iterations, residual=report.residual,
                                xi=xi, mass=mass, sandwich_violation=sandwich)
        except (BenchError, ValueError) as e:
            stats = getattr(e, 'stats', None)
            logger.error(f"Member N={N} failed: {e}")
            return MemberResult(N=N, converged=False,
                                iterations=stats.iterations if stats is not None else 0,
                                residual=stats.residual if stats is not None else float('nan'),
                                message=str(e))

    def run(self, fam: FamilySpec, jobs: int = 1, storage: Optional[StorageManager] = None) -> SweepResult:
        family = members(fam, self.r)
        barriers = self.shared_barriers(family)
        logger.info(f"Sweep over N = {list(fam.Ns)} ({fam.rule} rule) with {jobs} worker(s)")
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            results = list(pool.map(lambda item: self.solve_member(item[0], item[1], barriers), family))

        rows, detail = [], []
        previous: Optional[MemberResult] = None
        for result in results:
            l1_prev = linf_prev = float('nan')
            if result.converged and previous is not None and previous.converged:
                l1_prev = l1_distance(result.xi, previous.xi, self.dom)
                linf_prev = linf_distance(result.xi, previous.xi, self.dom)
            total_mass = result.mass.sum(axis=0) if result.mass is not None else None
            rows.append({
                'N': result.N,
                'converged': int(result.converged),
                'iters': result.iterations,
                'residual': result.residual,
                'l1_prev': l1_prev,
                'linf_prev': linf_prev,
                'mass_integral': float(np.sum(self.dom.area_weights * total_mass)) if total_mass is not None else float('nan'),
            })
            detail.append({
                'N': result.N,
                'sandwich_violation': result.sandwich_violation,
                'mass_max': float(total_mass[self.dom.active].max()) if total_mass is not None else float('nan'),
                'barrier_bound': barriers.bound if barriers is not None else float('nan'),
            })
            if storage is not None and result.converged:
                storage.write_tdgrid(f'solution_N{result.N}.tdgrid', self.dom, result.xi)
                storage.write_tdgrid(f'density_N{result.N}.tdgrid', self.dom, result.mass / 4.0)
            previous = result

        table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        detail_table = pd.DataFrame(detail, columns=DETAIL_COLUMNS)
        if storage is not None:
            storage.write_table('sweep.csv', table)
            storage.write_table('sweep_detail.csv', detail_table)
        converged = sum(r.converged for r in results)
        logger.info(f"Sweep finished: {converged}/{len(results)} members converged")
        return SweepResult(table=table, detail=detail_table, members=results, barriers=barriers)


def sweep(fam: FamilySpec, dom: DiscreteDomain, r: int, weights: MetricWeights, eta: np.ndarray,
          options: Optional[SolverOptions] = None, convention: str = 'norm', method: str = 'newton',
          jobs: int = 1, storage: Optional[StorageManager] = None) -> SweepResult:
    manager = SweepManager(dom, r, weights, eta, options=options, convention=convention, method=method)
    return manager.run(fam, jobs=jobs, storage=storage)
