import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate, ndimage

from utils.errors import DomainError

logger = logging.getLogger(__name__)

OUTSIDE = 0
INTERIOR = 1
BOUNDARY = 2

# Edge-connectivity for interior components and boundary detection
FOUR_NEIGHBORS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# Scalar fields are (ny, nx) arrays, V-valued fields are (r, ny, nx) arrays.
ScalarField = np.ndarray
VField = np.ndarray

ConformalFactor = Callable[[np.ndarray, np.ndarray], np.ndarray]
Exhaustion = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DomainSpec:
    """Description of a planar domain before discretization"""
    shape: str
    h: float
    bounds: Optional[Tuple[float, float, float, float]] = None
    radius: float = 1.0
    center: Tuple[float, float] = (0.0, 0.0)
    exhaustion: Optional[Exhaustion] = None
    level: float = 0.0
    conformal_factor: Optional[ConformalFactor] = None


@dataclass(frozen=True, eq=False)
class DiscreteDomain:
    """Masked uniform lattice with Dirichlet boundary nodes and conformal factor"""
    shape: str
    h: float
    x0: float
    y0: float
    mask: np.ndarray
    lam: np.ndarray

    @property
    def ny(self) -> int:
        return self.mask.shape[0]

    @property
    def nx(self) -> int:
        return self.mask.shape[1]

    @cached_property
    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        xs = self.x0 + self.h * np.arange(self.nx)
        ys = self.y0 + self.h * np.arange(self.ny)
        return np.meshgrid(xs, ys)

    @property
    def X(self) -> np.ndarray:
        return self.coordinates[0]

    @property
    def Y(self) -> np.ndarray:
        return self.coordinates[1]

    @cached_property
    def z(self) -> np.ndarray:
        return self.X + 1j * self.Y

    @cached_property
    def interior(self) -> np.ndarray:
        return self.mask == INTERIOR

    @cached_property
    def boundary(self) -> np.ndarray:
        return self.mask == BOUNDARY

    @cached_property
    def active(self) -> np.ndarray:
        return self.mask != OUTSIDE

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.interior)

    @property
    def n_interior(self) -> int:
        return int(self.interior_index.size)

    @cached_property
    def area_weights(self) -> np.ndarray:
        """Quadrature weights λh² of the Kähler area form on active nodes"""
        return np.where(self.active, self.lam * self.h ** 2, 0.0)

    def same_lattice(self, other: "DiscreteDomain") -> bool:
        return (
            self.mask.shape == other.mask.shape
            and math.isclose(self.h, other.h, rel_tol=0.0, abs_tol=1e-15)
            and math.isclose(self.x0, other.x0, rel_tol=0.0, abs_tol=1e-12)
            and math.isclose(self.y0, other.y0, rel_tol=0.0, abs_tol=1e-12)
            and bool(np.array_equal(self.mask, other.mask))
        )

    def node_location(self, flat_index: int) -> Tuple[float, float]:
        i, j = np.unravel_index(flat_index, self.mask.shape)
        return float(self.X[i, j]), float(self.Y[i, j])


def _lattice_axis(lo: float, hi: float, h: float) -> Tuple[float, int]:
    count = int(round((hi - lo) / h)) + 1
    return lo, max(count, 0)


def _classify_sublevel(inside: np.ndarray) -> np.ndarray:
    """Boundary = inside nodes with an outside (or off-lattice) 4-neighbor"""
    padded = np.pad(inside, 1, constant_values=False)
    all_neighbors_inside = (
        padded[2:, 1:-1] & padded[:-2, 1:-1] & padded[1:-1, 2:] & padded[1:-1, :-2]
    )
    mask = np.full(inside.shape, OUTSIDE, dtype=np.int8)
    mask[inside] = BOUNDARY
    mask[inside & all_neighbors_inside] = INTERIOR
    return mask


def build_domain(spec: DomainSpec) -> DiscreteDomain:
    """Discretize a rectangle, disk or exhaustion sublevel set on a uniform lattice"""
    h = spec.h
    if not (h > 0 and math.isfinite(h)):
        raise DomainError(f"lattice spacing must be positive, got h={h}")

    if spec.shape == 'rectangle':
        if spec.bounds is None:
            raise DomainError("rectangle domain needs bounds xmin xmax ymin ymax")
        xmin, xmax, ymin, ymax = spec.bounds
        x0, nx = _lattice_axis(xmin, xmax, h)
        y0, ny = _lattice_axis(ymin, ymax, h)
        if nx < 3 or ny < 3:
            raise DomainError(f"rectangle {spec.bounds} has no interior nodes at h={h}")
        mask = np.full((ny, nx), BOUNDARY, dtype=np.int8)
        mask[1:-1, 1:-1] = INTERIOR

    elif spec.shape == 'disk':
        cx, cy = spec.center
        n = int(math.ceil(spec.radius / h)) + 1
        x0, y0 = cx - n * h, cy - n * h
        nx = ny = 2 * n + 1
        xs = x0 + h * np.arange(nx)
        ys = y0 + h * np.arange(ny)
        X, Y = np.meshgrid(xs, ys)
        inside = (X - cx) ** 2 + (Y - cy) ** 2 < spec.radius ** 2
        mask = _classify_sublevel(inside)

    elif spec.shape == 'sublevel':
        if spec.bounds is None or spec.exhaustion is None:
            raise DomainError("sublevel domain needs bounds and an exhaustion function")
        xmin, xmax, ymin, ymax = spec.bounds
        x0, nx = _lattice_axis(xmin, xmax, h)
        y0, ny = _lattice_axis(ymin, ymax, h)
        X, Y = np.meshgrid(x0 + h * np.arange(nx), y0 + h * np.arange(ny))
        inside = np.asarray(spec.exhaustion(X, Y)) < spec.level
        mask = _classify_sublevel(inside)

    else:
        raise DomainError(f"unknown domain shape '{spec.shape}'")

    interior = mask == INTERIOR
    if not interior.any():
        raise DomainError(f"{spec.shape} domain has an empty interior at h={h}")
    if not (mask == BOUNDARY).any():
        raise DomainError(f"{spec.shape} domain has no boundary nodes at h={h}")
    _, components = ndimage.label(interior, structure=FOUR_NEIGHBORS)
    if components != 1:
        raise DomainError(f"{spec.shape} domain interior splits into {components} components at h={h}")

    X, Y = np.meshgrid(x0 + h * np.arange(mask.shape[1]), y0 + h * np.arange(mask.shape[0]))
    if spec.conformal_factor is None:
        lam = np.ones(mask.shape)
    else:
        lam = np.asarray(spec.conformal_factor(X, Y), dtype=float) * np.ones(mask.shape)
    active = mask != OUTSIDE
    if not np.all(np.isfinite(lam[active])) or np.any(lam[active] <= 0):
        raise DomainError("conformal factor must be finite and positive on the domain")
    lam = np.where(active, lam, 1.0)

    dom = DiscreteDomain(shape=spec.shape, h=float(h), x0=float(x0), y0=float(y0), mask=mask, lam=lam)
    logger.info(
        f"Built {spec.shape} domain: {mask.shape[1]}x{mask.shape[0]} lattice, "
        f"{dom.n_interior} interior / {int(dom.boundary.sum())} boundary nodes, h={h:g}"
    )
    return dom


def laplacian(u: np.ndarray, dom: DiscreteDomain, euclidean: bool = False) -> np.ndarray:
    """Geometric 5-point Laplacian Δ_ω u = (4u - Σ neighbors)/(λh²) on interior nodes

    Works on scalar fields and on stacked fields (leading axes are kept).
    Subharmonic functions have Δ_ω u ≤ 0. Non-interior nodes are set to 0.
    """
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    with np.errstate(invalid='ignore', over='ignore'):
        stencil = (
            4.0 * u[..., 1:-1, 1:-1]
            - u[..., 2:, 1:-1] - u[..., :-2, 1:-1]
            - u[..., 1:-1, 2:] - u[..., 1:-1, :-2]
        )
        scale = dom.h ** 2 if euclidean else dom.lam[1:-1, 1:-1] * dom.h ** 2
        out[..., 1:-1, 1:-1] = stencil / scale
    return np.where(dom.interior, out, 0.0)


def complete_vfield(first: np.ndarray) -> np.ndarray:
    """Append the r-th component -(ξ_1+…+ξ_{r-1}) to r-1 components"""
    first = np.asarray(first, dtype=float)
    return np.concatenate([first, -first.sum(axis=0, keepdims=True)], axis=0)


def project_to_v(xi: np.ndarray) -> np.ndarray:
    return xi - xi.mean(axis=0, keepdims=True)


def zero_sum_defect(xi: np.ndarray, dom: DiscreteDomain) -> float:
    """Largest per-node |Σ_j ξ_j| relative to the field scale"""
    total = np.abs(xi.sum(axis=0))[dom.active]
    scale = max(1.0, float(np.abs(xi[:, dom.active]).max(initial=0.0)))
    return float(total.max(initial=0.0)) / scale


def standard_bump(t: np.ndarray) -> np.ndarray:
    """Unnormalized radial profile exp(-1/(1-t²)) supported in t < 1"""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = t < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Radial mollifier χ_ε(z) = χ(z/ε)/ε² with ∫χ = 1 and supp χ ⊆ B(0,1)"""
    eps: float
    profile: Callable[[np.ndarray], np.ndarray] = standard_bump

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"mollifier scale must be positive, got {self.eps}")

    @cached_property
    def normalization(self) -> float:
        radial_mass, _ = integrate.quad(lambda t: float(self.profile(np.atleast_1d(t))[0]) * 2.0 * math.pi * t, 0.0, 1.0)
        return 1.0 / radial_mass

    def mass(self) -> float:
        """∫ χ over the plane, numerically"""
        value, _ = integrate.quad(
            lambda t: self.normalization * float(self.profile(np.atleast_1d(t))[0]) * 2.0 * math.pi * t, 0.0, 1.0
        )
        return value

    def __call__(self, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        rho = np.hypot(dx, dy) / self.eps
        return self.normalization * self.profile(rho) / self.eps ** 2

    def log_average(self, s: np.ndarray) -> np.ndarray:
        """(χ_ε * log|·|) at distance s from the pole; equals log s for s ≥ ε"""
        s = np.asarray(s, dtype=float)
        out = np.log(np.maximum(s, self.eps))
        inner = s < self.eps
        if not inner.any():
            return out
        values, inverse = np.unique(s[inner], return_inverse=True)
        table = np.empty(values.size)
        for i, value in enumerate(values):
            breaks = [value / self.eps] if value > 0 else None
            table[i], _ = integrate.quad(
                lambda t: self.normalization * float(self.profile(np.atleast_1d(t))[0]) * 2.0 * math.pi * t
                * math.log(max(value, self.eps * t)) if t > 0 else 0.0,
                0.0, 1.0, points=breaks,
            )
        out[inner] = table[inverse.ravel()]
        return out

    def kernel(self, h: float) -> np.ndarray:
        """Sampled kernel on the lattice, renormalized to unit sum"""
        k = int(math.floor(self.eps / h))
        offsets = h * np.arange(-k, k + 1)
        DX, DY = np.meshgrid(offsets, offsets)
        weights = self(DX, DY)
        total = weights.sum()
        if total <= 0:
            raise ValueError(f"mollifier scale {self.eps} is not resolved at h={h}")
        return weights / total


def disk_footprint(radius: float, h: float) -> np.ndarray:
    k = int(math.floor(radius / h))
    offsets = np.arange(-k, k + 1)
    I, J = np.meshgrid(offsets, offsets)
    return (I ** 2 + J ** 2) * h ** 2 <= radius ** 2 + 1e-12 * h ** 2


def eroded_interior(dom: DiscreteDomain, radius: float) -> np.ndarray:
    """Interior nodes whose closed lattice disk of given radius stays in the domain"""
    footprint = disk_footprint(radius, dom.h)
    return ndimage.binary_erosion(dom.active, structure=footprint, border_value=0) & dom.interior


def mollify(u: np.ndarray, m: Mollifier, dom: DiscreteDomain) -> np.ndarray:
    """Discrete convolution with the sampled mollifier

    Defined on interior nodes whose kernel footprint lies inside the domain;
    NaN elsewhere. -inf entries of u propagate as non-finite values.
    """
    if m.eps < 2.0 * dom.h:
        raise ValueError(f"mollifier scale {m.eps:g} must be at least 2h = {2.0 * dom.h:g}")
    kernel = m.kernel(dom.h)
    values = np.where(dom.active, np.asarray(u, dtype=float), 0.0)
    with np.errstate(invalid='ignore'):
        smoothed = ndimage.convolve(values, kernel, mode='constant', cval=0.0)
    defined = ndimage.binary_erosion(dom.active, structure=kernel > 0, border_value=0) & dom.interior
    return np.where(defined, smoothed, np.nan)


def truncation_estimate(u: np.ndarray, dom: DiscreteDomain) -> np.ndarray:
    """Leading 5-point stencil truncation (δ⁴_x u + δ⁴_y u)/(12λh²) from fourth differences

    NaN wherever the 9-node cross leaves the domain or touches non-finite values.
    """
    v = np.where(dom.active, np.asarray(u, dtype=float), np.nan)
    out = np.full(v.shape, np.nan)
    c = v[2:-2, 2:-2]
    with np.errstate(invalid='ignore'):
        d4x = v[2:-2, 4:] - 4.0 * v[2:-2, 3:-1] + 6.0 * c - 4.0 * v[2:-2, 1:-3] + v[2:-2, :-4]
        d4y = v[4:, 2:-2] - 4.0 * v[3:-1, 2:-2] + 6.0 * c - 4.0 * v[1:-3, 2:-2] + v[:-4, 2:-2]
        out[2:-2, 2:-2] = (d4x + d4y) / (12.0 * dom.lam[2:-2, 2:-2] * dom.h ** 2)
    return np.where(dom.interior, out, np.nan)
