import os

import numpy as np
import pandas as pd
import pytest

from bench import EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from services.grid import DomainSpec, build_domain
from services.storage import StorageManager, read_tdgrid

DISK = """
domain.shape = disk
domain.radius = 0.3
domain.h = 0.025
rank = {rank}
boundary.values = {values}
"""


def write_config(directory, name='run.cfg', rank=2, values='0.1 -0.1', extra=''):
    path = directory / name
    path.write_text(DISK.format(rank=rank, values=values) + extra, encoding='utf-8')
    return str(path)


def report(out):
    return (out / 'report.txt').read_text(encoding='utf-8')


@pytest.fixture
def solved(tmp_path):
    out = tmp_path / 'solve'
    code = main(['solve', '--config', write_config(tmp_path), '--out', str(out)])
    return code, out


def test_solve_writes_artifacts(solved):
    code, out = solved
    assert code == EXIT_OK
    text = report(out)
    assert 'summary: all passed' in text
    assert 'method: newton' in text
    for name in ('solution.tdgrid', 'solution.csv', 'trace.csv', 'certificates.csv', 'barriers.csv'):
        assert os.path.exists(out / name)
    certificates = pd.read_csv(out / 'certificates.csv')
    assert {'residual', 'boundary', 'zero_sum', 'sandwich', 'barriers', 'apply_S_signs'} <= set(certificates['name'])


def test_solve_with_picard(tmp_path):
    out = tmp_path / 'picard'
    code = main(['solve', '--config', write_config(tmp_path), '--out', str(out), '--method', 'picard'])
    assert code == EXIT_OK
    assert 'method: picard' in report(out)


def test_solve_with_radial_check(tmp_path):
    extra = 'phi.roots = 0 0 1\noracle.check = true\noracle.n = 400\n'
    out = tmp_path / 'oracle'
    code = main(['solve', '--config', write_config(tmp_path, values='0 0', extra=extra), '--out', str(out)])
    assert code == EXIT_OK
    text = report(out)
    assert 'oracle_diff:' in text
    assert 'summary: all passed' in text


def test_solve_accepts_rounded_boundary_values(tmp_path):
    out = tmp_path / 'rounded'
    code = main(['solve', '--config', write_config(tmp_path, values='0.1 -0.1000000001'), '--out', str(out)])
    assert code == EXIT_OK
    assert 'summary: all passed' in report(out)


def test_failed_solve_keeps_its_trace(tmp_path):
    out = tmp_path / 'failed'
    config = write_config(tmp_path, extra='solver.newton_max_steps = 1\n')
    assert main(['solve', '--config', config, '--out', str(out)]) == EXIT_SOLVER
    trace = pd.read_csv(out / 'trace.csv')
    assert list(trace.columns) == ['step', 'update_norm', 'residual_norm', 'sandwich_violation']
    assert trace['step'].tolist() == [1]
    text = report(out)
    assert 'converged: False' in text
    assert 'summary: solver failed' in text


class TestValidate:
    def test_own_solution_passes(self, solved, tmp_path):
        _, out = solved
        target = tmp_path / 'validate'
        code = main(['validate', str(out / 'solution.tdgrid'), '--config', write_config(tmp_path),
                     '--out', str(target)])
        assert code == EXIT_OK
        assert 'solution:' in report(target)

    def test_perturbed_solution_fails(self, solved, tmp_path):
        _, out = solved
        grid = read_tdgrid(str(out / 'solution.tdgrid'))
        dom = build_domain(DomainSpec(shape='disk', h=0.025, radius=0.3))
        xi = grid.fields.copy()
        xi[0, dom.interior] += 0.1
        xi[1, dom.interior] -= 0.1
        path = StorageManager(str(tmp_path / 'bad')).write_tdgrid('bad.tdgrid', dom, xi)
        target = tmp_path / 'validate'
        code = main(['validate', path, '--config', write_config(tmp_path), '--out', str(target)])
        assert code == EXIT_CERTIFICATE
        assert 'failed:' in report(target)

    def test_rank_mismatch(self, solved, tmp_path):
        _, out = solved
        config = write_config(tmp_path, name='rank3.cfg', rank=3, values='0.1 0 -0.1')
        assert main(['validate', str(out / 'solution.tdgrid'), '--config', config,
                     '--out', str(tmp_path / 'v')]) == EXIT_CONFIG

    def test_needs_a_file(self, tmp_path):
        assert main(['validate', '--config', write_config(tmp_path)]) == EXIT_CONFIG


def test_missing_config(tmp_path):
    assert main(['solve', '--config', str(tmp_path / 'absent.cfg')]) == EXIT_CONFIG


def test_bad_jobs(tmp_path):
    assert main(['sweep', '--config', write_config(tmp_path), '--jobs', '0']) == EXIT_CONFIG


def test_barriers_command(tmp_path):
    out = tmp_path / 'barriers'
    assert main(['barriers', '--config', write_config(tmp_path), '--out', str(out)]) == EXIT_OK
    assert os.path.exists(out / 'barrier_minus.tdgrid')
    assert os.path.exists(out / 'barrier_plus.tdgrid')
    assert 'f_sup:' in report(out)


def test_oracle_command(tmp_path):
    out = tmp_path / 'profile'
    config = write_config(tmp_path, values='0 0', extra='phi.roots = 0 0 1\noracle.n = 200\n')
    assert main(['oracle', '--config', config, '--out', str(out)]) == EXIT_OK
    table = pd.read_csv(out / 'oracle.csv')
    assert list(table.columns) == ['t', 'comp1', 'comp2']
    assert table['t'].iloc[0] == 0.0
    assert np.allclose(table[['comp1', 'comp2']].iloc[-1], 0.0, atol=1e-9)


def test_oracle_needs_radial_instance(tmp_path):
    config = write_config(tmp_path, extra='phi.roots = 0.1 0 1\n')
    assert main(['oracle', '--config', config, '--out', str(tmp_path / 'o')]) == EXIT_CONFIG


def test_sweep_command(tmp_path):
    extra = 'sweep.rule = sequence\nsweep.N = 1 2\nsweep.roots.N1 = 0.1 0 1\nsweep.roots.N2 = 0.1 0 1; -0.1 0 1\n'
    out = tmp_path / 'sweep'
    assert main(['sweep', '--config', write_config(tmp_path, extra=extra), '--out', str(out),
                 '--jobs', '2']) == EXIT_OK
    table = pd.read_csv(out / 'sweep.csv')
    assert table['converged'].tolist() == [1, 1]


def test_sweep_member_failure(tmp_path):
    extra = ('sweep.rule = sequence\nsweep.N = 1 2\nsweep.roots.N1 = 0.1 0 1\nsweep.roots.N2 = 0.1 0 1; -0.1 0 1\n'
             'solver.newton_max_steps = 1\n')
    out = tmp_path / 'sweep'
    assert main(['sweep', '--config', write_config(tmp_path, extra=extra), '--out', str(out)]) == EXIT_SOLVER
    table = pd.read_csv(out / 'sweep.csv')
    assert table['N'].tolist() == [1, 2]
    assert table['converged'].tolist() == [0, 0]


def test_sweep_is_deterministic(tmp_path):
    extra = 'sweep.rule = random\nsweep.N = 1 2\nsweep.seed = 4\nsweep.root_radius = 0.2\n'
    config = write_config(tmp_path, extra=extra)
    for name in ('first', 'second'):
        assert main(['sweep', '--config', config, '--out', str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / 'first' / 'sweep.csv').read_bytes() == (tmp_path / 'second' / 'sweep.csv').read_bytes()


def test_infeasible_picard_is_a_solver_failure(tmp_path):
    path = tmp_path / 'big.cfg'
    path.write_text('domain.shape = disk\ndomain.radius = 1\ndomain.h = 0.1\nrank = 2\n'
                    'boundary.values = 0 0\nsolver.method = picard\n', encoding='utf-8')
    assert main(['solve', '--config', str(path), '--out', str(tmp_path / 'big')]) == EXIT_SOLVER


@pytest.mark.slow
def test_fine_disk_radial_check(tmp_path):
    config = tmp_path / 'fine.cfg'
    config.write_text('domain.shape = disk\ndomain.radius = 0.3\ndomain.h = 0.005\nrank = 3\n'
                      'boundary.values = 0 0 0\nphi.roots = 0 0 1\noracle.check = true\n', encoding='utf-8')
    out = tmp_path / 'fine'
    assert main(['solve', '--config', str(config), '--out', str(out)]) == EXIT_OK
    assert 'oracle_diff:' in report(out)
