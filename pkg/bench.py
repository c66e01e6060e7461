import argparse
import logging
import sys
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from services.barriers import BarrierPair, build_barriers, verify_barriers
from services.bundle import (
    CoefficientSet, GaugeReduction, LogPotential, MetricWeights, PolynomialPower, SubharmonicDatum,
    check_FH_subharmonic, coefficients, curvature_term, gauge_reduce,
)
from services.certify import (
    certificate_summary, check_boundary, check_prop2, check_prop3, check_residual, check_sandwich,
    check_oracle, check_symmetry, check_weak, radial_coefficients, radial_oracle,
)
from services.elliptic import EllipticSolver
from services.grid import DiscreteDomain, zero_sum_defect
from services.harness import SweepManager
from services.models import Certificate, SolveReport, certificate_table, trace_table
from services.solver import TodaSolver
from services.storage import StorageManager, read_tdgrid
from utils.config import RunConfig, Settings
from utils.errors import CertificateError, ConfigError, SolverError
from utils.helpers import format_duration, format_float, format_status, format_vector

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CERTIFICATE = 4


def setup_logging(settings: Settings):
    logging.basicConfig(
        level=settings.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(settings.LOG_FILE),
            logging.StreamHandler()
        ]
    )


@dataclass
class Problem:
    """Everything a run config describes, discretized"""
    config: RunConfig
    dom: DiscreteDomain
    r: int
    weights: MetricWeights
    datum: SubharmonicDatum
    eta: np.ndarray
    solver: EllipticSolver
    k: CoefficientSet
    R: np.ndarray
    reduction: GaugeReduction


class TodaBench:
    """Batch commands of the Toda verification bench"""

    def __init__(self, config: RunConfig, out_dir: str = '.', jobs: int = 1):
        self.config = config
        self.storage = StorageManager(out_dir)
        self.jobs = jobs

    # -- setup -----------------------------------------------------------

    def load_problem(self) -> Problem:
        config = self.config
        dom = config.build_domain()
        r = config.rank
        weights = config.weights(dom)
        datum = config.phi_datum(dom)
        eta = config.boundary(dom)
        solver = EllipticSolver(dom, config.solver_options())
        try:
            k = coefficients(weights, datum, dom, config.convention)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid coefficient data: {e}")
        R = curvature_term(weights, dom)
        reduction = gauge_reduce(weights, k, eta, solver)
        return Problem(config=config, dom=dom, r=r, weights=weights, datum=datum, eta=eta,
                       solver=solver, k=k, R=R, reduction=reduction)

    def build_verified_barriers(self, problem: Problem, required: bool) -> Tuple[Optional[BarrierPair], Optional[Certificate]]:
        """Barrier pair for the reduced problem with its verification summary"""
        try:
            barriers = build_barriers(problem.reduction.k_hat, problem.eta, problem.solver)
        except SolverError as e:
            if required:
                raise
            logger.warning(f"Barrier construction skipped: {e}")
            return None, None
        report = verify_barriers(barriers, problem.reduction.k_hat, problem.eta, problem.dom,
                                 tol_scale=self.tol_scale)
        self.storage.write_table('barriers.csv', report.table())
        worst = max(report.certificates, key=lambda c: c.violation if not c.skipped else -1.0)
        summary = Certificate(name='barriers', violation=worst.violation, tolerance=worst.tolerance,
                              location=worst.location, skipped=worst.skipped, details={'worst': worst.name})
        return barriers, summary

    @property
    def tol_scale(self) -> float:
        return self.config.get_float('certify.tol_scale')

    def weak_centers(self, datum: SubharmonicDatum, dom: DiscreteDomain) -> List[Tuple[float, float]]:
        """Point masses of φ that lie inside the domain"""
        if isinstance(datum, PolynomialPower):
            points = [complex(a) for a, _ in datum.roots]
        elif isinstance(datum, LogPotential):
            points = [complex(a) for a, w in datum.masses if w > 0]
        else:
            points = [complex(z) for z in dom.z[dom.interior & (datum.values == -np.inf)]]
        inside = []
        for z in points:
            i = int(round((z.imag - dom.y0) / dom.h))
            j = int(round((z.real - dom.x0) / dom.h))
            if 0 <= i < dom.ny and 0 <= j < dom.nx and dom.interior[i, j]:
                inside.append((z.real, z.imag))
        return inside

    def certificates(self, problem: Problem, xi: np.ndarray, barriers: Optional[BarrierPair]) -> List[Certificate]:
        config = self.config
        dom = problem.dom
        tol_res = config.get_float('solver.tol_res')
        xi_hat = xi + problem.reduction.delta
        k_hat = problem.reduction.k_hat
        res = TodaSolver(problem.solver, problem.k, problem.eta, R=problem.R).residual(xi)
        res_hat = TodaSolver(problem.solver, k_hat, problem.eta).residual(xi_hat)

        certs = [
            Certificate(name='zero_sum', violation=zero_sum_defect(xi, dom), tolerance=1e-12),
            check_residual(xi, problem.k, problem.R, dom, tol_res),
            check_boundary(xi, problem.eta, dom),
            check_prop2(xi, xi, res, res, dom, tol_scale=self.tol_scale),
        ]
        try:
            certs.append(check_prop3(xi_hat, k_hat, dom, res=res_hat, tol_scale=self.tol_scale))
        except CertificateError as e:
            certs.append(Certificate(name='prop3', violation=float('nan'), tolerance=float('nan'),
                                     skipped=True, details={'reason': str(e)}))
        certs.append(check_sandwich(xi_hat, barriers, dom, tol_scale=self.tol_scale))
        certs.append(TodaSolver(problem.solver, k_hat, problem.eta).sign_certificate(xi_hat))
        try:
            certs.append(check_FH_subharmonic(problem.datum, problem.weights, dom, tol_scale=self.tol_scale))
        except CertificateError as e:
            certs.append(Certificate(name='fh_subharmonic', violation=float('nan'), tolerance=float('nan'),
                                     skipped=True, details={'reason': str(e)}))
        eps = config.get_float('certify.weak_radius') * dom.h
        certs.append(check_weak(xi, problem.k, problem.R, dom, self.weak_centers(problem.datum, dom), eps))
        certs.append(check_symmetry(xi, problem.k, problem.eta, dom, 10.0 * tol_res))
        if config.get_bool('oracle.check'):
            certs.append(self.oracle_certificate(problem, xi))
        return certs

    def radial_setup(self, problem: Problem):
        """Radial coefficient profile, boundary constants and radius for a radial instance"""
        config = self.config
        dom = problem.dom
        if config.get('domain.shape') != 'disk' or config.get('domain.lambda') != 'flat' \
                or config.get('weights.kind') != 'zero' or not isinstance(problem.datum, PolynomialPower):
            raise ConfigError("radial oracle needs a flat disk with zero weights and polynomial φ")
        if config.get('boundary.kind') != 'constant':
            raise ConfigError("radial oracle needs constant boundary data")
        cx, cy = config.get_floats('domain.center', 2)
        try:
            profile = radial_coefficients(problem.datum, problem.r, complex(cx, cy))
        except ValueError as e:
            raise ConfigError(str(e))
        eta = problem.eta[:, dom.boundary][:, 0]
        return profile, eta, config.get_float('domain.radius'), (cx, cy)

    def oracle_certificate(self, problem: Problem, xi: np.ndarray) -> Certificate:
        profile, eta, radius, center = self.radial_setup(problem)
        reference = radial_oracle(problem.r, profile, eta, radius, n=self.config.get_int('oracle.n'))
        return check_oracle(xi, problem.k, problem.solver, reference, center,
                            tolerance=self.config.get_float('oracle.tol'))

    # -- artifacts -------------------------------------------------------

    def write_report(self, command: str, problem: Problem, certs: List[Certificate],
                     solve: Optional[SolveReport] = None, extra: Sequence[str] = ()):
        dom = problem.dom
        lines = [
            f"todabench {command}",
            f"config: {self.config.source}",
            f"domain: {dom.shape} {dom.nx}x{dom.ny} h={format_float(dom.h)} "
            f"interior={dom.n_interior} boundary={int(dom.boundary.sum())}",
            f"rank: {problem.r}",
        ]
        if solve is not None:
            lines += [
                f"method: {solve.method}",
                f"converged: {solve.converged}",
                f"iterations: {solve.stats.iterations}",
                f"residual: {format_float(solve.residual)}",
                f"wall_time: {format_duration(solve.stats.wall_time)}",
                f"exponent_clamped: {solve.clamped}",
                f"left_sandwich: {solve.left_sandwich}",
                f"sign_defect: {format_float(solve.sign_defect)}",
                f"sup_norm: {format_float(float(np.abs(solve.xi[:, dom.active]).max()))}",
            ]
        lines += list(extra)
        lines.append('certificates:')
        for cert in certs:
            status = 'SKIPPED' if cert.skipped else format_status(cert.passed)
            lines.append(f"  {cert.name}: {status} violation={format_float(cert.violation)} "
                         f"tolerance={format_float(cert.tolerance)}")
            if cert.name == 'oracle':
                lines.append(f"oracle_diff: {format_float(cert.violation)}")
        lines.append(f"summary: {certificate_summary(certs)}")
        self.storage.write_text('report.txt', lines)

    def write_failure(self, problem: Problem, method: str, error: SolverError):
        """Partial trace and a short report for a solve that did not converge"""
        self.storage.write_table('trace.csv', trace_table(error.trace))
        lines = [
            "todabench solve",
            f"config: {self.config.source}",
            f"rank: {problem.r}",
            f"method: {method}",
            "converged: False",
            f"iterations: {len(error.trace)}",
        ]
        if error.stats is not None:
            lines.append(f"residual: {format_float(error.stats.residual)}")
        lines += [f"error: {error}", "summary: solver failed"]
        self.storage.write_text('report.txt', lines)

    # -- commands --------------------------------------------------------

    def cmd_solve(self) -> int:
        started = time.perf_counter()
        problem = self.load_problem()
        method = self.config.method
        barriers, barrier_cert = self.build_verified_barriers(problem, required=(method == 'picard'))
        toda = TodaSolver(problem.solver, problem.reduction.k_hat, problem.eta)
        try:
            if method == 'picard':
                solve = toda.picard(barriers=barriers, start='minus')
            else:
                solve = toda.newton(barriers=barriers)
        except SolverError as e:
            self.write_failure(problem, method, e)
            raise
        xi = problem.reduction.restore(solve.xi)
        solve.xi = xi

        certs = self.certificates(problem, xi, barriers)
        if barrier_cert is not None:
            certs.insert(0, barrier_cert)
        solve.certificates = certs

        self.storage.write_tdgrid('solution.tdgrid', problem.dom, xi)
        self.storage.write_field_csv('solution.csv', problem.dom, xi)
        self.storage.write_table('trace.csv', solve.trace_table())
        self.storage.write_table('certificates.csv', certificate_table(certs))
        self.write_report('solve', problem, certs, solve=solve)

        passed = all(c.passed for c in certs)
        logger.info(f"Solve finished in {format_duration(time.perf_counter() - started)}: {certificate_summary(certs)}")
        return EXIT_OK if passed else EXIT_CERTIFICATE

    def cmd_validate(self, solution_path: str) -> int:
        problem = self.load_problem()
        grid = read_tdgrid(solution_path)
        if grid.r != problem.r:
            raise ConfigError(f"{solution_path}: file has {grid.r} fields, config rank is {problem.r}")
        if not grid.matches(problem.dom):
            raise ConfigError(f"{solution_path}: lattice header or mask does not match the configured domain")
        xi = grid.fields
        barriers, barrier_cert = self.build_verified_barriers(problem, required=False)
        certs = self.certificates(problem, xi, barriers)
        if barrier_cert is not None:
            certs.insert(0, barrier_cert)
        self.storage.write_table('certificates.csv', certificate_table(certs))
        self.write_report('validate', problem, certs, extra=[f"solution: {solution_path}"])
        passed = all(c.passed for c in certs)
        logger.info(f"Validation of {solution_path}: {certificate_summary(certs)}")
        return EXIT_OK if passed else EXIT_CERTIFICATE

    def cmd_sweep(self) -> int:
        config = self.config
        dom = config.build_domain()
        manager = SweepManager(dom, config.rank, config.weights(dom), config.boundary(dom),
                               options=config.solver_options(), convention=config.convention,
                               method=config.method)
        result = manager.run(config.family(), jobs=self.jobs, storage=self.storage)
        return EXIT_OK if result.all_converged else EXIT_SOLVER

    def cmd_barriers(self) -> int:
        problem = self.load_problem()
        barriers, summary = self.build_verified_barriers(problem, required=True)
        self.storage.write_tdgrid('barrier_minus.tdgrid', problem.dom, barriers.xi_minus)
        self.storage.write_tdgrid('barrier_plus.tdgrid', problem.dom, barriers.xi_plus)
        self.write_report('barriers', problem, [summary],
                          extra=[f"rho_min: {format_float(float(barriers.rho[problem.dom.active].min()))}",
                                 f"f_sup: {format_float(barriers.bound)}"])
        return EXIT_OK if summary.passed else EXIT_CERTIFICATE

    def cmd_oracle(self) -> int:
        problem = self.load_problem()
        profile, eta, radius, _ = self.radial_setup(problem)
        reference = radial_oracle(problem.r, profile, eta, radius, n=self.config.get_int('oracle.n'))
        columns = {'t': reference.t}
        for j in range(problem.r):
            columns[f'comp{j + 1}'] = reference.xi[j]
        self.storage.write_table('oracle.csv', pd.DataFrame(columns))
        logger.info(f"Radial oracle center values: {format_vector(reference.center)}")
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='bench.py', description='Dirichlet solver and certificate bench for the Toda system')
    parser.add_argument('command', choices=['solve', 'validate', 'sweep', 'barriers', 'oracle'])
    parser.add_argument('solution', nargs='?', help='TDGRID1 solution file (validate only)')
    parser.add_argument('--config', required=True, help='run configuration file')
    parser.add_argument('--out', default='.', help='output directory')
    parser.add_argument('--jobs', type=int, default=1, help='parallel sweep members')
    parser.add_argument('--method', choices=['newton', 'picard'], help='override solver.method')
    parser.add_argument('--tol-res', type=float, help='override solver.tol_res')
    parser.add_argument('--tol-fp', type=float, help='override solver.tol_fp')
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == 'validate' and not args.solution:
        raise ConfigError("validate needs a solution file")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    config = RunConfig.from_file(args.config).override(method=args.method, tol_res=args.tol_res, tol_fp=args.tol_fp)
    bench = TodaBench(config, out_dir=args.out, jobs=args.jobs)
    if args.command == 'solve':
        return bench.cmd_solve()
    if args.command == 'validate':
        return bench.cmd_validate(args.solution)
    if args.command == 'sweep':
        return bench.cmd_sweep()
    if args.command == 'barriers':
        return bench.cmd_barriers()
    return bench.cmd_oracle()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(Settings())
        return run(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except SolverError as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER
    except CertificateError as e:
        logger.error(f"Certificate could not be evaluated: {e}")
        return EXIT_CERTIFICATE
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
