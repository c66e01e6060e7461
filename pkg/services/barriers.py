import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from services.bundle import CoefficientSet
from services.elliptic import EllipticSolver
from services.grid import DiscreteDomain, complete_vfield, laplacian
from services.models import Certificate
from utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BarrierPair:
    """Sub/supersolution pair ξ⁻ = ρ + φ, ξ⁺ = -ρ + φ on components 1..r-1"""
    xi_minus: np.ndarray
    xi_plus: np.ndarray
    rho: np.ndarray
    phis: np.ndarray
    f: np.ndarray

    @property
    def r(self) -> int:
        return self.xi_minus.shape[0]

    @property
    def gap(self) -> np.ndarray:
        return -2.0 * self.rho

    @property
    def bound(self) -> float:
        """C = sup|f e^{-rρ}| = sup|Δ_ω ρ|, the bound on |Δ_ω ξ±_j|"""
        with np.errstate(over='ignore'):
            return float(np.abs(self.f * np.exp(-self.r * self.rho)).max(initial=0.0))

    def sandwich_excess(self, xi: np.ndarray) -> np.ndarray:
        """Pointwise max(ξ⁻ - ξ, ξ - ξ⁺) over components 1..r-1"""
        lower = self.xi_minus[:-1] - xi[:-1]
        upper = xi[:-1] - self.xi_plus[:-1]
        return np.maximum(lower, upper).max(axis=0)

    def sandwich_violation(self, xi: np.ndarray, dom: DiscreteDomain) -> float:
        return float(max(self.sandwich_excess(xi)[dom.active].max(initial=0.0), 0.0))


@dataclass
class BarrierReport:
    certificates: List[Certificate] = field(default_factory=list)
    rho_max: float = float('nan')
    gap_min_interior: float = float('nan')

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.certificates)

    def table(self) -> pd.DataFrame:
        rows = []
        for cert in self.certificates:
            x, y = cert.location if cert.location is not None else (float('nan'), float('nan'))
            rows.append({'inequality': cert.name, 'violation': cert.violation, 'x': x, 'y': y})
        return pd.DataFrame(rows, columns=['inequality', 'violation', 'x', 'y'])

    def failures(self) -> List[Certificate]:
        return [c for c in self.certificates if not c.passed]


def boundary_harmonics(eta: np.ndarray, solver: EllipticSolver) -> np.ndarray:
    """Harmonic extensions φ_j of η_j; φ_r = -(φ_1 + … + φ_{r-1}) exactly"""
    dom = solver.dom
    eta = np.asarray(eta, dtype=float)
    defect = np.abs(eta.sum(axis=0))[dom.boundary]
    if defect.max(initial=0.0) > 1e-9 * max(1.0, float(np.abs(eta[:, dom.boundary]).max(initial=0.0))):
        raise ConfigError(f"boundary data is not zero-sum: max |Σ η_j| = {defect.max():.3e}")
    first = np.stack([solver.harmonic_extension(eta[j]) for j in range(eta.shape[0] - 1)])
    return complete_vfield(first)


def envelope_f(k: CoefficientSet, phis: np.ndarray, dom: DiscreteDomain) -> np.ndarray:
    """f = min over the cyclic terms -4k_{j-1}e^{φ_j - φ_{j-1}} and -4k_j e^{φ_{j+1} - φ_j}

    With cyclic closure the two families list the same r terms.
    """
    with np.errstate(over='ignore'):
        f1 = -4.0 * np.roll(k.k, 1, axis=0) * np.exp(phis - np.roll(phis, 1, axis=0))
        f2 = -4.0 * k.k * np.exp(np.roll(phis, -1, axis=0) - phis)
    f = np.minimum(f1.min(axis=0), f2.min(axis=0))
    return np.where(dom.active, f, 0.0)


def build_barriers(k: CoefficientSet, eta: np.ndarray, solver: EllipticSolver,
                   k_r_sup: Optional[float] = None) -> BarrierPair:
    """Barrier pair for the flat problem; ρ solves Δ_ω ρ = f e^{-rρ}, ρ|∂ = 0

    k_r_sup replaces k'_r by a constant upper bound, giving barriers valid
    for every coefficient set dominated by it.
    """
    dom = solver.dom
    if k_r_sup is not None:
        if k_r_sup < float(k.k[-1][dom.active].max()):
            raise ValueError(f"k_r bound {k_r_sup:g} is below sup k'_r")
        k = CoefficientSet(k=np.concatenate([k.k[:-1], np.full((1,) + dom.mask.shape, float(k_r_sup))]))
    r = k.r
    phis = boundary_harmonics(eta, solver)
    f = envelope_f(k, phis, dom)
    if not np.all(np.isfinite(f[dom.active])):
        raise ValueError("envelope f is not bounded on the domain")
    rho = solver.solve_semilinear_kw(f, r)
    xi_minus = complete_vfield(rho[np.newaxis] + phis[:-1])
    xi_plus = complete_vfield(-rho[np.newaxis] + phis[:-1])
    logger.info(f"Built barriers: min ρ = {rho[dom.interior].min():.6g}, sup|f| = {np.abs(f).max():.6g}")
    return BarrierPair(xi_minus=xi_minus, xi_plus=xi_plus, rho=rho, phis=phis, f=f)


def verify_barriers(b: BarrierPair, k: CoefficientSet, eta: np.ndarray, dom: DiscreteDomain,
                    tol_scale: float = 10.0) -> BarrierReport:
    """Check the defining inequalities of the pair with the discrete Laplacian

    Differential inequalities are compared after dividing by 1 + |coefficient
    term| at each node, against tol_scale·h².
    """
    tol = tol_scale * dom.h ** 2
    r = b.r
    lo, hi = b.xi_minus, b.xi_plus
    lap_lo, lap_hi = laplacian(lo, dom), laplacian(hi, dom)
    interior = dom.interior
    certs: List[Certificate] = []

    def differential(name: str, lap_term: np.ndarray, coupling: np.ndarray):
        values = (lap_term + coupling) / (1.0 + np.abs(coupling))
        certs.append(Certificate.from_field(name, values, interior, dom, tol))

    with np.errstate(over='ignore'):
        differential('sub_1', lap_lo[0], 4.0 * k.k[-1] * np.exp(hi[0] - hi[-1]))
        for j in range(1, r - 1):
            differential(f'sub_{j + 1}', lap_lo[j], 4.0 * k.k[j - 1] * np.exp(hi[j] - lo[j - 1]))
        for j in range(r - 1):
            coupling = 4.0 * k.k[j] * np.exp(hi[j + 1] - lo[j])
            values = (coupling - lap_hi[j]) / (1.0 + np.abs(coupling))
            certs.append(Certificate.from_field(f'super_{j + 1}', values, interior, dom, tol))

    for j in range(r - 1):
        certs.append(Certificate.from_field(f'gap_subharmonic_{j + 1}', laplacian(lo[j] - hi[j], dom), interior, dom, tol))
    certs.append(Certificate.from_field('ordered', (lo[:-1] - hi[:-1]).max(axis=0), dom.active, dom, tol))

    boundary_error = np.maximum(np.abs(lo - eta).max(axis=0), np.abs(hi - eta).max(axis=0))
    certs.append(Certificate.from_field('boundary_match', boundary_error, dom.boundary, dom, tol))

    bound = b.bound
    certs.append(Certificate.from_field(
        'lower_bound_minus', (-bound - lap_lo[:-1]).max(axis=0) / (1.0 + bound), interior, dom, tol))
    certs.append(Certificate.from_field(
        'upper_bound_plus', (lap_hi[:-1] - bound).max(axis=0) / (1.0 + bound), interior, dom, tol))
    certs.append(Certificate.from_field('rho_nonpositive', b.rho, dom.active, dom, tol))

    report = BarrierReport(
        certificates=certs,
        rho_max=float(b.rho[dom.active].max()),
        gap_min_interior=float(b.gap[interior].min()),
    )
    for cert in report.failures():
        logger.warning(f"Barrier inequality {cert.name} violated by {cert.violation:.3e} at {cert.location}")
    logger.info(f"Barrier verification: {'passed' if report.passed else 'FAILED'} "
                f"({len(certs)} inequalities, max ρ = {report.rho_max:.3e})")
    return report
