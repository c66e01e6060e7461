import math

import numpy as np
import pytest

from services.grid import (
    BOUNDARY, INTERIOR, OUTSIDE, DomainSpec, Mollifier, build_domain, complete_vfield, eroded_interior,
    laplacian, mollify, project_to_v, truncation_estimate, zero_sum_defect,
)
from utils.errors import DomainError


class TestBuildDomain:
    def test_rectangle_layout(self, square):
        assert square.mask.shape == (17, 17)
        assert square.n_interior == 15 * 15
        assert np.all(square.mask[0] == BOUNDARY)
        assert np.all(square.mask[1:-1, 1:-1] == INTERIOR)
        assert square.X[0, -1] == pytest.approx(1.0)
        assert square.Y[-1, 0] == pytest.approx(1.0)

    def test_disk_boundary_nodes_hug_the_circle(self, small_disk):
        radius = np.hypot(small_disk.X, small_disk.Y)
        ring = radius[small_disk.boundary]
        assert ring.size > 0
        assert np.all(ring < 0.3)
        assert np.all(ring > 0.3 - small_disk.h - 1e-12)
        assert np.all(small_disk.mask[radius >= 0.3] == OUTSIDE)

    def test_sublevel_ellipse(self):
        dom = build_domain(DomainSpec(shape='sublevel', h=0.05, bounds=(-1.2, 1.2, -1.2, 1.2),
                                      exhaustion=lambda X, Y: X ** 2 + 4.0 * Y ** 2, level=1.0))
        inside = dom.active
        assert np.all((dom.X ** 2 + 4.0 * dom.Y ** 2)[inside] < 1.0)
        assert dom.n_interior > 0

    def test_conformal_factor_sets_area_weights(self):
        dom = build_domain(DomainSpec(shape='rectangle', h=0.25, bounds=(0, 1, 0, 1),
                                      conformal_factor=lambda X, Y: np.full_like(X, 2.0)))
        assert np.allclose(dom.area_weights[dom.active], 2.0 * 0.25 ** 2)

    @pytest.mark.parametrize('spec', [
        DomainSpec(shape='rectangle', h=0.0, bounds=(0, 1, 0, 1)),
        DomainSpec(shape='rectangle', h=0.1, bounds=(0, 0.1, 0, 1)),
        DomainSpec(shape='hexagon', h=0.1),
        DomainSpec(shape='rectangle', h=0.1),
    ])
    def test_invalid_domains(self, spec):
        with pytest.raises(DomainError):
            build_domain(spec)

    def test_disconnected_interior_rejected(self):
        two_disks = lambda X, Y: np.minimum((X - 0.5) ** 2 + Y ** 2, (X + 0.5) ** 2 + Y ** 2)
        with pytest.raises(DomainError, match='components'):
            build_domain(DomainSpec(shape='sublevel', h=0.05, bounds=(-1, 1, -0.5, 0.5),
                                    exhaustion=two_disks, level=0.09))

    def test_nonpositive_conformal_factor_rejected(self):
        with pytest.raises(DomainError):
            build_domain(DomainSpec(shape='rectangle', h=0.25, bounds=(0, 1, 0, 1),
                                    conformal_factor=lambda X, Y: X - 0.5))


class TestLaplacian:
    def test_quadratic_is_subharmonic(self, square):
        lap = laplacian(square.X ** 2 + square.Y ** 2, square)
        assert np.allclose(lap[square.interior], -4.0)
        assert np.all(lap[~square.interior] == 0.0)

    def test_conformal_factor_divides(self):
        dom = build_domain(DomainSpec(shape='rectangle', h=0.125, bounds=(0, 1, 0, 1),
                                      conformal_factor=lambda X, Y: np.full_like(X, 2.0)))
        u = dom.X ** 2 + dom.Y ** 2
        assert np.allclose(laplacian(u, dom)[dom.interior], -2.0)
        assert np.allclose(laplacian(u, dom, euclidean=True)[dom.interior], -4.0)

    def test_stencil_exact_on_harmonic_cubic(self, square):
        u = square.X ** 3 - 3.0 * square.X * square.Y ** 2
        assert np.abs(laplacian(u, square)).max() < 1e-9

    def test_stacked_fields_keep_leading_axis(self, square):
        u = np.stack([square.X ** 2, square.Y ** 2, np.zeros_like(square.X)])
        lap = laplacian(u, square)
        assert lap.shape == u.shape
        assert np.allclose(lap[0][square.interior], -2.0)
        assert np.allclose(lap[2], 0.0)

    def test_truncation_estimate_recovers_quartic_defect(self, square):
        u = square.X ** 4
        tau = truncation_estimate(u, square)
        known = np.isfinite(tau)
        assert known.any()
        assert np.allclose(tau[known], 2.0 * square.h ** 2)
        # stencil value + estimated truncation equals the exact -Δ_eucl u
        assert np.allclose((laplacian(u, square) + tau)[known], -12.0 * square.X[known] ** 2, atol=1e-9)

    def test_truncation_estimate_undefined_next_to_boundary(self, square):
        tau = truncation_estimate(square.X ** 4, square)
        assert np.all(np.isnan(tau[1, :]))
        assert np.all(np.isnan(tau[:, 1]))


class TestVFields:
    def test_complete_vfield_sums_to_zero(self, square):
        first = np.stack([square.X, square.Y ** 2])
        xi = complete_vfield(first)
        assert xi.shape == (3,) + square.mask.shape
        assert np.allclose(xi.sum(axis=0), 0.0)
        assert zero_sum_defect(xi, square) < 1e-15

    def test_projection_and_defect(self, square):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(4,) + square.mask.shape)
        assert zero_sum_defect(raw, square) > 1e-3
        assert zero_sum_defect(project_to_v(raw), square) < 1e-14


class TestMollifier:
    def test_unit_mass(self):
        assert Mollifier(0.3).mass() == pytest.approx(1.0, rel=1e-8)

    def test_kernel_is_normalized_and_symmetric(self):
        kernel = Mollifier(0.25).kernel(1.0 / 16)
        assert kernel.sum() == pytest.approx(1.0)
        assert np.allclose(kernel, kernel.T)
        assert np.allclose(kernel, kernel[::-1])

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            Mollifier(0.0)

    def test_mollify_constant(self, square):
        smoothed = mollify(np.full(square.mask.shape, 3.0), Mollifier(4 * square.h), square)
        defined = np.isfinite(smoothed)
        assert defined.any()
        assert np.allclose(smoothed[defined], 3.0)
        assert not np.any(defined & square.boundary)
        assert np.all(eroded_interior(square, 4 * square.h) <= defined)

    def test_mollify_rejects_unresolved_scale(self, square):
        with pytest.raises(ValueError, match='2h'):
            mollify(square.X, Mollifier(square.h), square)

    def test_log_average_outside_support_is_log(self):
        m = Mollifier(0.2)
        s = np.array([0.2, 0.5, 1.0])
        assert np.allclose(m.log_average(s), np.log(s))

    def test_log_average_is_finite_and_above_log_inside(self):
        m = Mollifier(0.2)
        s = np.array([0.0, 0.05, 0.1, 0.15])
        values = m.log_average(s)
        assert np.all(np.isfinite(values))
        assert np.all(values[1:] >= np.log(s[1:]))
        assert np.all(np.diff(values) >= 0)
        assert values[0] < math.log(0.2)
