import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from services.elliptic import EllipticSolver
from services.grid import DiscreteDomain, Mollifier, laplacian, mollify, project_to_v, truncation_estimate
from services.models import Certificate
from utils.errors import CertificateError, ConfigError

logger = logging.getLogger(__name__)

CONVENTIONS = ('norm', 'norm-squared')


@dataclass(frozen=True, eq=False)
class RankData:
    """Rank r and the root vectors v_j = u_{j+1} - u_j (cyclic), stored as rows"""
    r: int
    vectors: np.ndarray

    def pair(self, xi: np.ndarray) -> np.ndarray:
        """(v_j, ξ) = ξ_{j+1} - ξ_j for every j, indices mod r"""
        return np.roll(xi, -1, axis=0) - xi

    def combine(self, m: np.ndarray) -> np.ndarray:
        """Σ_j m_j v_j; component j equals m_{j-1} - m_j"""
        return np.roll(m, 1, axis=0) - m


def root_vectors(r: int) -> RankData:
    if r < 2:
        raise ValueError(f"rank must be at least 2, got {r}")
    units = np.eye(r)
    return RankData(r=r, vectors=np.roll(units, -1, axis=0) - units)


@dataclass(frozen=True, eq=False)
class MetricWeights:
    """Log-weights w_j of the diagonal background metric and w_X = -log λ"""
    w: np.ndarray
    w_x: np.ndarray

    @property
    def r(self) -> int:
        return self.w.shape[0]

    @classmethod
    def flat(cls, r: int, dom: DiscreteDomain) -> "MetricWeights":
        return cls(w=np.zeros((r,) + dom.mask.shape), w_x=-np.log(dom.lam))

    @classmethod
    def from_polynomial(cls, dom: DiscreteDomain, a: Sequence[float], b: Sequence[float],
                        c: Sequence[float]) -> "MetricWeights":
        """w_j = a_j x + b_j y + c_j |z|²"""
        a, b, c = (np.asarray(v, dtype=float)[:, None, None] for v in (a, b, c))
        w = a * dom.X + b * dom.Y + c * (dom.X ** 2 + dom.Y ** 2)
        return cls(w=w, w_x=-np.log(dom.lam))

    def h_weights(self) -> np.ndarray:
        """w_{H_j} = -w_j + w_{j+1} + w_X, cyclic (the last one is w_1 - w_r + w_X)"""
        return np.roll(self.w, -1, axis=0) - self.w + self.w_x

    def flatness_defect(self, dom: DiscreteDomain) -> float:
        total = laplacian(self.w.sum(axis=0), dom)
        return float(np.abs(total[dom.interior]).max(initial=0.0))

    def check_flat(self, dom: DiscreteDomain):
        if not np.all(np.isfinite(self.w[:, dom.active])):
            raise ConfigError("metric weights must be finite on the domain")
        defect = self.flatness_defect(dom)
        limit = 1e-8 / dom.h ** 2
        if defect > limit:
            raise ConfigError(f"det h is not flat: |Δ Σ w_j| = {defect:.3e} exceeds {limit:.3e}")


@dataclass(frozen=True)
class PolynomialPower:
    """φ = (1/N) log|q_N|², q_N = lead·Π (z - a_i)^{m_i}"""
    roots: Tuple[Tuple[complex, int], ...] = ()
    N: int = 1
    lead: complex = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"power N must be at least 1, got {self.N}")
        if self.lead == 0:
            raise ValueError("leading coefficient must be non-zero")
        for _, mult in self.roots:
            if int(mult) != mult or mult < 1:
                raise ValueError(f"root multiplicities must be positive integers, got {mult}")


@dataclass(frozen=True, eq=False)
class LogPotential:
    """φ = Σ w_i log|z - a_i| + smooth"""
    masses: Tuple[Tuple[complex, float], ...] = ()
    smooth: Optional[np.ndarray] = None

    def __post_init__(self):
        for _, weight in self.masses:
            if not weight >= 0:
                raise ValueError(f"point masses must be non-negative, got {weight}")


@dataclass(frozen=True, eq=False)
class GridSampled:
    values: np.ndarray


SubharmonicDatum = Union[PolynomialPower, LogPotential, GridSampled]


def _log_distance(dom: DiscreteDomain, a: complex) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log(np.abs(dom.z - a))


def eval_phi(d: SubharmonicDatum, dom: DiscreteDomain, weights: Optional[MetricWeights] = None) -> np.ndarray:
    """Evaluate φ on the lattice; -inf exactly at point masses on nodes"""
    if isinstance(d, PolynomialPower):
        phi = np.full(dom.mask.shape, 2.0 * np.log(abs(d.lead)) / d.N)
        # Canonical order makes the sum independent of how roots were listed
        for a, mult in sorted(d.roots, key=lambda item: (complex(item[0]).real, complex(item[0]).imag, item[1])):
            phi = phi + (2.0 * mult / d.N) * _log_distance(dom, complex(a))
        if weights is not None:
            phi = phi + weights.h_weights()[-1]
    elif isinstance(d, LogPotential):
        phi = np.zeros(dom.mask.shape) if d.smooth is None else np.array(d.smooth, dtype=float)
        for a, weight in d.masses:
            if weight > 0:
                phi = phi + weight * _log_distance(dom, complex(a))
    elif isinstance(d, GridSampled):
        phi = np.array(d.values, dtype=float)
        if phi.shape != dom.mask.shape:
            raise ConfigError(f"sampled φ has shape {phi.shape}, domain lattice is {dom.mask.shape}")
    else:
        raise TypeError(f"unsupported subharmonic datum {type(d).__name__}")

    values = phi[dom.active]
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise ValueError("φ must be finite or -inf on the domain")
    if not np.any(np.isfinite(values)):
        raise ValueError("φ is identically -inf on the domain")
    return phi


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficient fields k'_1..k'_r stacked as (r, ny, nx)"""
    k: np.ndarray

    @property
    def r(self) -> int:
        return self.k.shape[0]

    @classmethod
    def constant(cls, r: int, dom: DiscreteDomain, value: float = 1.0) -> "CoefficientSet":
        return cls(k=np.full((r,) + dom.mask.shape, float(value)))

    def scaled(self, factor: float) -> "CoefficientSet":
        return CoefficientSet(k=self.k * factor)

    def validate(self, dom: DiscreteDomain):
        values = self.k[:, dom.active]
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficients must be finite on the domain")
        if np.any(values[:-1] <= 0):
            raise ValueError("coefficients k'_j for j < r must be positive")
        if np.any(values[-1] < 0):
            raise ValueError("coefficient k'_r must be non-negative")

    def sup(self, dom: DiscreteDomain) -> np.ndarray:
        """Per-component supremum over the closed domain"""
        return self.k[:, dom.active].max(axis=1)

    def is_symmetric(self, dom: DiscreteDomain, tol: float = 1e-12) -> bool:
        """k'_j = k'_{r-j} for j = 1..r-1"""
        inner = self.k[:-1, dom.active]
        return bool(np.all(np.abs(inner - inner[::-1]) <= tol * np.maximum(1.0, np.abs(inner))))


def coefficients(w: MetricWeights, d: SubharmonicDatum, dom: DiscreteDomain,
                 convention: str = 'norm') -> CoefficientSet:
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown coefficient convention '{convention}'")
    w.check_flat(dom)
    w_h = w.h_weights()
    exponent = 0.5 * w_h[:-1] if convention == 'norm' else w_h[:-1]
    phi = eval_phi(d, dom, w)
    with np.errstate(over='ignore'):
        k = np.concatenate([np.exp(exponent), np.exp(phi)[np.newaxis]], axis=0)
    k = np.where(dom.active[np.newaxis], k, 0.0)
    coeffs = CoefficientSet(k=k)
    coeffs.validate(dom)
    return coeffs


def curvature_term(w: MetricWeights, dom: DiscreteDomain) -> np.ndarray:
    """R_j = -Δ_ω w_j"""
    return -laplacian(w.w, dom)


class GaugeReduction(NamedTuple):
    k_hat: CoefficientSet
    delta: np.ndarray
    eta: np.ndarray

    def restore(self, xi_hat: np.ndarray) -> np.ndarray:
        """Solution of the original problem from the flat one"""
        return xi_hat - self.delta


def gauge_reduce(w: MetricWeights, k: CoefficientSet, eta: np.ndarray, solver: EllipticSolver) -> GaugeReduction:
    """Absorb the curvature term into the coefficients

    δ_j = w_j - (harmonic extension of w_j|∂), k̂'_j = k'_j e^{-(v_j, δ)}.
    δ vanishes on the boundary so η is unchanged.
    """
    dom = solver.dom
    delta = np.stack([w.w[j] - solver.harmonic_extension(w.w[j]) for j in range(w.r)])
    delta = np.where(dom.active[np.newaxis], project_to_v(delta), 0.0)
    rank = root_vectors(w.r)
    k_hat = CoefficientSet(k=k.k * np.exp(-rank.pair(delta)))
    logger.debug(f"Gauge reduction: sup|δ| = {np.abs(delta).max():.3e}")
    return GaugeReduction(k_hat=k_hat, delta=delta, eta=eta)


def _singular_split(d: SubharmonicDatum, dom: DiscreteDomain,
                    w: MetricWeights) -> Tuple[np.ndarray, Tuple[Tuple[complex, float], ...]]:
    """φ as smooth part plus point masses c·log|z - a|"""
    if isinstance(d, PolynomialPower):
        smooth = eval_phi(PolynomialPower(roots=(), N=d.N, lead=d.lead), dom, w)
        return smooth, tuple((complex(a), 2.0 * mult / d.N) for a, mult in d.roots)
    if isinstance(d, LogPotential):
        smooth = eval_phi(LogPotential(masses=(), smooth=d.smooth), dom)
        return smooth, tuple((complex(a), float(c)) for a, c in d.masses if c > 0)
    return eval_phi(d, dom, w), ()


def check_FH_subharmonic(d: SubharmonicDatum, w: MetricWeights, dom: DiscreteDomain,
                         eps: Optional[float] = None, tol_scale: float = 10.0,
                         tolerance: Optional[float] = None) -> Certificate:
    """Discrete Δ_ω(φ - w_{H_r}) ≤ 0 on φ mollified at scale ε (default 4h)

    Point masses are mollified in closed form (circle means of log|z - a|),
    the smooth remainder by discrete convolution. The 5-point stencil misses
    harmonicity of log|z - a| by O(h²/|z - a|⁴); that truncation, estimated
    from fourth differences, is discounted before comparing against the
    tolerance.
    """
    eps = 4.0 * dom.h if eps is None else eps
    tolerance = tol_scale * dom.h ** 2 if tolerance is None else tolerance
    eval_phi(d, dom, w)
    smooth, poles = _singular_split(d, dom, w)
    mollifier = Mollifier(eps)
    u = mollify(smooth - w.h_weights()[-1], mollifier, dom)
    for a, c in poles:
        u = u + c * mollifier.log_average(np.abs(dom.z - a))
    lap = laplacian(u, dom)
    excess = lap - tol_scale * np.abs(truncation_estimate(u, dom))
    testable = dom.interior & np.isfinite(excess)
    if not testable.any():
        raise CertificateError("F_H-subharmonicity check skipped every node; refine h or shrink ε")
    cert = Certificate.from_field('fh_subharmonic', excess, testable, dom, tolerance,
                                  eps=eps, tested=int(testable.sum()))
    if not cert.passed:
        logger.warning(f"φ fails the F_H-subharmonicity check by {cert.violation:.3e} at {cert.location}")
    return cert
