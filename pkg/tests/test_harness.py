import os

import numpy as np
import pandas as pd
import pytest

from conftest import constant_eta, flat_weights
from services.grid import DomainSpec, build_domain
from services.harness import (
    SWEEP_COLUMNS, FamilySpec, SweepManager, l1_distance, linf_distance, members, random_roots, sweep,
)
from services.storage import StorageManager
from utils.errors import ConfigError

SEQUENCE = {1: ((0.1 + 0j, 1),), 2: ((0.1 + 0j, 1), (-0.1 + 0.05j, 1))}


@pytest.fixture
def family():
    return FamilySpec(rule='sequence', Ns=(1, 2), sequence=SEQUENCE)


@pytest.fixture
def manager(small_disk):
    return SweepManager(small_disk, 2, flat_weights(2, small_disk), constant_eta(small_disk, [0.1, -0.1]))


class TestFamilySpec:
    @pytest.mark.parametrize('kwargs', [
        {'rule': 'geometric', 'Ns': (1,)},
        {'rule': 'power', 'Ns': ()},
        {'rule': 'power', 'Ns': (2, 1)},
        {'rule': 'power', 'Ns': (0, 1)},
        {'rule': 'sequence', 'Ns': (1, 3), 'sequence': SEQUENCE},
        {'rule': 'random', 'Ns': (1,), 'root_radius': 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            FamilySpec(**kwargs)

    def test_power_rule_scales_multiplicities(self):
        fam = FamilySpec(rule='power', Ns=(1, 3), roots=((0.2j, 1), (0.1 + 0j, 2)))
        (n1, d1), (n3, d3) = members(fam, 2)
        assert (n1, n3) == (1, 3)
        assert d3.roots == ((0.2j, 3), (0.1 + 0j, 6))
        assert d3.N == 3

    def test_random_roots_are_reproducible(self):
        first = random_roots(3, 2, seed=5, radius=0.25)
        assert first == random_roots(3, 2, seed=5, radius=0.25)
        assert first != random_roots(3, 2, seed=6, radius=0.25)
        assert len(first) == 6
        assert all(abs(a) <= 0.25 and mult == 1 for a, mult in first)

    def test_random_members_differ_per_n(self):
        fam = FamilySpec(rule='random', Ns=(1, 2), seed=3, root_radius=0.2)
        (_, d1), (_, d2) = members(fam, 2)
        assert len(d1.roots) == 2
        assert len(d2.roots) == 4


class TestDistances:
    def test_distances(self, small_disk):
        a = constant_eta(small_disk, [0.3, -0.3])
        b = constant_eta(small_disk, [0.0, 0.0])
        assert linf_distance(a, b, small_disk) == pytest.approx(0.3)
        expected = np.sqrt(2 * 0.09) * small_disk.area_weights[small_disk.active].sum()
        assert l1_distance(a, b, small_disk) == pytest.approx(expected)

    def test_mismatched_domains(self, small_disk):
        other = build_domain(DomainSpec(shape='disk', h=0.05, radius=0.3))
        a = constant_eta(small_disk, [0.3, -0.3])
        with pytest.raises(ConfigError):
            l1_distance(a, a, small_disk, other)
        with pytest.raises(ConfigError):
            linf_distance(a, a[:, :-1], small_disk)


class TestSweep:
    def test_sweep_table(self, manager, family, tmp_path):
        storage = StorageManager(str(tmp_path))
        result = manager.run(family, storage=storage)
        assert result.all_converged
        assert list(result.table.columns) == SWEEP_COLUMNS
        assert result.table['N'].tolist() == [1, 2]
        assert np.isnan(result.table['l1_prev'].iloc[0])
        assert result.table['l1_prev'].iloc[1] > 0.0
        assert result.table['residual'].max() <= 1e-8
        assert result.barriers is not None
        assert np.all(result.detail['barrier_bound'] == result.barriers.bound)
        for name in ('sweep.csv', 'sweep_detail.csv', 'solution_N1.tdgrid', 'density_N2.tdgrid'):
            assert os.path.exists(tmp_path / name)

    def test_power_family_is_constant_in_n(self, manager):
        result = manager.run(FamilySpec(rule='power', Ns=(1, 2, 4), roots=((0j, 1),)))
        assert result.all_converged
        area = float(manager.dom.area_weights[manager.dom.active].sum())
        assert np.all(result.table['l1_prev'].iloc[1:] <= 2.0 * 1e-8 * area)
        assert np.allclose(result.table['mass_integral'], result.table['mass_integral'].iloc[0])

    def test_random_family_is_sandwiched(self, manager, small_disk):
        result = manager.run(FamilySpec(rule='random', Ns=(1, 2, 4, 8), seed=7, root_radius=0.2))
        assert result.all_converged
        assert result.barriers is not None
        assert result.table['N'].tolist() == [1, 2, 4, 8]
        assert np.all(result.detail['sandwich_violation'] <= 10.0 * small_disk.h ** 2)
        assert np.all(np.isfinite(result.table['l1_prev'].iloc[1:]))

    def test_parallel_sweep_matches_serial(self, small_disk, family):
        kwargs = dict(fam=family, dom=small_disk, r=2, weights=flat_weights(2, small_disk),
                      eta=constant_eta(small_disk, [0.1, -0.1]))
        serial = sweep(jobs=1, **kwargs)
        parallel = sweep(jobs=2, **kwargs)
        pd.testing.assert_frame_equal(serial.table, parallel.table)

    def test_picard_sweep(self, small_disk, family):
        manager = SweepManager(small_disk, 2, flat_weights(2, small_disk), constant_eta(small_disk, [0.1, -0.1]),
                               method='picard')
        result = manager.run(family)
        assert result.all_converged
        assert np.all(result.detail['sandwich_violation'] <= 10.0 * small_disk.h ** 2)

    def test_unknown_method(self, small_disk):
        with pytest.raises(ConfigError):
            SweepManager(small_disk, 2, flat_weights(2, small_disk), constant_eta(small_disk, [0, 0]), method='sor')
