import logging
import os
import re
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.bundle import GridSampled, LogPotential, MetricWeights, PolynomialPower, SubharmonicDatum
from services.elliptic import SolverOptions
from services.grid import DiscreteDomain, DomainSpec, build_domain, project_to_v
from services.harness import FamilySpec
from services.storage import read_tdgrid
from utils.errors import ConfigError
from utils.helpers import parse_bool, parse_float_list, parse_rows

logger = logging.getLogger(__name__)

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class Settings:
    """Process settings from environment variables (diagnostics only)"""

    def __init__(self):
        self.LOG_LEVEL = os.getenv('TODABENCH_LOG_LEVEL', 'INFO').upper()
        self.LOG_FILE = os.getenv('TODABENCH_LOG_FILE', 'todabench.log')
        self._validate_config()

    def _validate_config(self):
        if self.LOG_LEVEL not in LOG_LEVELS:
            raise ValueError(f"TODABENCH_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}")
        if not self.LOG_FILE:
            raise ValueError("TODABENCH_LOG_FILE must not be empty")

    @property
    def log_level(self) -> int:
        return getattr(logging, self.LOG_LEVEL)


# key -> default (None = no default)
DEFAULTS: Dict[str, Optional[str]] = {
    'domain.shape': None,
    'domain.bounds': None,
    'domain.radius': '1',
    'domain.center': '0 0',
    'domain.exhaustion': None,
    'domain.level': None,
    'domain.h': None,
    'domain.lambda': 'flat',
    'domain.lambda_a': '1',
    'rank': None,
    'weights.kind': 'zero',
    'weights.a': None,
    'weights.b': None,
    'weights.c': None,
    'convention': 'norm',
    'phi.kind': 'polynomial',
    'phi.roots': '',
    'phi.N': '1',
    'phi.lead': '1 0',
    'phi.masses': '',
    'phi.grid': None,
    'boundary.kind': 'constant',
    'boundary.values': None,
    'boundary.a': None,
    'boundary.b': None,
    'boundary.c': None,
    'boundary.file': None,
    'solver.method': 'newton',
    'solver.tol_res': '1e-8',
    'solver.tol_fp': '1e-10',
    'solver.max_iter': '2000',
    'solver.newton_max_steps': '50',
    'solver.linear_tol': '1e-12',
    'solver.linear_max_iter': '5000',
    'solver.damping': '1',
    'solver.kw_method': 'newton',
    'certify.tol_scale': '10',
    'certify.weak_radius': '4',
    'oracle.check': 'false',
    'oracle.n': '4096',
    'oracle.tol': '5e-3',
    'sweep.rule': None,
    'sweep.N': None,
    'sweep.roots': None,
    'sweep.seed': '0',
    'sweep.root_radius': '0.8',
}

SEQUENCE_KEY = re.compile(r'^sweep\.roots\.N(\d+)$')


class RunConfig:
    """Plain-text run configuration: `key = value` lines with dotted sections"""

    def __init__(self, values: Dict[str, str], base_dir: str = '.', source: str = '<config>'):
        self.values = values
        self.base_dir = base_dir
        self.source = source
        unknown = [key for key in values if key not in DEFAULTS and not SEQUENCE_KEY.match(key)]
        if unknown:
            raise ConfigError(f"{source}: unknown keys {', '.join(sorted(unknown))}")

    @classmethod
    def from_text(cls, text: str, base_dir: str = '.', source: str = '<config>') -> "RunConfig":
        values: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigError(f"{source}:{number}: empty key")
            if key in values:
                raise ConfigError(f"{source}:{number}: duplicate key '{key}'")
            values[key] = value
        return cls(values, base_dir=base_dir, source=source)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                text = handle.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        config = cls.from_text(text, base_dir=os.path.dirname(os.path.abspath(path)), source=path)
        logger.info(f"Loaded run config {path} ({len(config.values)} keys)")
        return config

    # -- typed accessors -------------------------------------------------

    def has(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str) -> str:
        value = self.values.get(key, DEFAULTS.get(key))
        if value is None:
            raise ConfigError(f"{self.source}: missing required key '{key}'")
        return value

    def _convert(self, key: str, kind, text: str):
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{self.source}: key '{key}' has invalid value '{text}'")

    def get_float(self, key: str) -> float:
        return self._convert(key, float, self.get(key))

    def get_int(self, key: str) -> int:
        return self._convert(key, int, self.get(key))

    def get_bool(self, key: str) -> bool:
        return self._convert(key, parse_bool, self.get(key))

    def get_floats(self, key: str, count: Optional[int] = None) -> List[float]:
        values = self._convert(key, parse_float_list, self.get(key))
        if count is not None and len(values) != count:
            raise ConfigError(f"{self.source}: key '{key}' needs {count} numbers, got {len(values)}")
        return values

    def get_rows(self, key: str, width: int) -> List[Tuple[float, ...]]:
        text = self.get(key)
        try:
            return parse_rows(text, width)
        except ValueError as e:
            raise ConfigError(f"{self.source}: key '{key}': {e}")

    def resolve(self, key: str) -> str:
        path = self.get(key)
        path = path if os.path.isabs(path) else os.path.join(self.base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"{self.source}: file for '{key}' not found: {path}")
        return path

    # -- builders --------------------------------------------------------

    @property
    def rank(self) -> int:
        r = self.get_int('rank')
        if r < 2:
            raise ConfigError(f"{self.source}: rank must be at least 2, got {r}")
        return r

    def domain_spec(self) -> DomainSpec:
        shape = self.get('domain.shape')
        lam_kind = self.get('domain.lambda')
        if lam_kind == 'flat':
            conformal = None
        elif lam_kind == 'exp_quadratic':
            a = self.get_float('domain.lambda_a')
            conformal = lambda X, Y: np.exp(a * (X ** 2 + Y ** 2))
        else:
            raise ConfigError(f"{self.source}: unknown domain.lambda '{lam_kind}'")

        bounds = tuple(self.get_floats('domain.bounds', 4)) if self.has('domain.bounds') else None
        exhaustion, level = None, 0.0
        if shape == 'sublevel':
            tokens = self.get('domain.exhaustion').split()
            if len(tokens) != 3 or tokens[0] != 'quadratic':
                raise ConfigError(f"{self.source}: domain.exhaustion must read 'quadratic a b'")
            ea, eb = self._convert('domain.exhaustion', float, tokens[1]), self._convert('domain.exhaustion', float, tokens[2])
            exhaustion = lambda X, Y: ea * X ** 2 + eb * Y ** 2
            level = self.get_float('domain.level')
        cx, cy = self.get_floats('domain.center', 2)
        return DomainSpec(shape=shape, h=self.get_float('domain.h'), bounds=bounds,
                          radius=self.get_float('domain.radius'), center=(cx, cy),
                          exhaustion=exhaustion, level=level, conformal_factor=conformal)

    def build_domain(self) -> DiscreteDomain:
        return build_domain(self.domain_spec())

    def _per_component(self, key: str, r: int) -> List[float]:
        return self.get_floats(key, r) if self.has(key) else [0.0] * r

    def weights(self, dom: DiscreteDomain) -> MetricWeights:
        r = self.rank
        kind = self.get('weights.kind')
        if kind == 'zero':
            weights = MetricWeights.flat(r, dom)
        elif kind == 'polynomial':
            weights = MetricWeights.from_polynomial(dom, self._per_component('weights.a', r),
                                                    self._per_component('weights.b', r),
                                                    self._per_component('weights.c', r))
        else:
            raise ConfigError(f"{self.source}: unknown weights.kind '{kind}'")
        weights.check_flat(dom)
        return weights

    @property
    def convention(self) -> str:
        value = self.get('convention')
        if value not in ('norm', 'norm-squared'):
            raise ConfigError(f"{self.source}: convention must be 'norm' or 'norm-squared'")
        return value

    def _roots(self, key: str) -> Tuple[Tuple[complex, int], ...]:
        rows = self.get_rows(key, 3)
        return tuple((complex(re_, im_), int(mult)) for re_, im_, mult in rows)

    def phi_datum(self, dom: DiscreteDomain) -> SubharmonicDatum:
        kind = self.get('phi.kind')
        try:
            if kind == 'polynomial':
                lead_re, lead_im = self.get_floats('phi.lead', 2)
                return PolynomialPower(roots=self._roots('phi.roots'), N=self.get_int('phi.N'),
                                       lead=complex(lead_re, lead_im))
            if kind == 'logpotential':
                rows = self.get_rows('phi.masses', 3)
                return LogPotential(masses=tuple((complex(a, b), w) for a, b, w in rows))
            if kind == 'grid':
                grid = read_tdgrid(self.resolve('phi.grid'))
                if not grid.matches(dom):
                    raise ConfigError(f"{self.source}: phi.grid lattice does not match the domain")
                return GridSampled(values=grid.fields[0])
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{self.source}: invalid φ datum: {e}")
        raise ConfigError(f"{self.source}: unknown phi.kind '{kind}'")

    def boundary(self, dom: DiscreteDomain) -> np.ndarray:
        """η as an (r, ny, nx) field; only boundary nodes are meaningful"""
        r = self.rank
        kind = self.get('boundary.kind')
        shape = (r,) + dom.mask.shape
        if kind == 'constant':
            values = self._per_component('boundary.values', r)
            eta = np.asarray(values, dtype=float)[:, None, None] * np.ones(shape)
        elif kind == 'affine':
            a, b, c = (np.asarray(self._per_component(key, r))[:, None, None]
                       for key in ('boundary.a', 'boundary.b', 'boundary.c'))
            eta = a * dom.X + b * dom.Y + c
        elif kind == 'file':
            grid = read_tdgrid(self.resolve('boundary.file'))
            if grid.r != r or not grid.matches(dom):
                raise ConfigError(f"{self.source}: boundary.file does not match rank {r} and the domain lattice")
            eta = grid.fields.copy()
        else:
            raise ConfigError(f"{self.source}: unknown boundary.kind '{kind}'")

        samples = eta[:, dom.boundary]
        defect = float(np.abs(samples.sum(axis=0)).max(initial=0.0))
        if defect > 1e-9:
            raise ConfigError(f"{self.source}: boundary data must sum to zero per sample (max |Σ η_j| = {defect:.3e})")
        return np.where(dom.active[np.newaxis], project_to_v(eta), 0.0)

    @property
    def method(self) -> str:
        value = self.get('solver.method')
        if value not in ('newton', 'picard'):
            raise ConfigError(f"{self.source}: solver.method must be 'newton' or 'picard'")
        return value

    def solver_options(self) -> SolverOptions:
        try:
            return SolverOptions(
                linear_tol=self.get_float('solver.linear_tol'),
                linear_max_iter=self.get_int('solver.linear_max_iter'),
                newton_max_steps=self.get_int('solver.newton_max_steps'),
                kw_method=self.get('solver.kw_method'),
                tol_res=self.get_float('solver.tol_res'),
                tol_fp=self.get_float('solver.tol_fp'),
                max_iter=self.get_int('solver.max_iter'),
                damping=self.get_float('solver.damping'),
                tol_scale=self.get_float('certify.tol_scale'),
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{self.source}: {e}")

    def override(self, method: Optional[str] = None, tol_res: Optional[float] = None,
                 tol_fp: Optional[float] = None) -> "RunConfig":
        """Copy with command-line overrides applied to solver keys"""
        values = dict(self.values)
        if method is not None:
            values['solver.method'] = method
        if tol_res is not None:
            values['solver.tol_res'] = repr(float(tol_res))
        if tol_fp is not None:
            values['solver.tol_fp'] = repr(float(tol_fp))
        return RunConfig(values, base_dir=self.base_dir, source=self.source)

    def family(self) -> FamilySpec:
        Ns = tuple(int(n) for n in self.get_floats('sweep.N'))
        rule = self.get('sweep.rule')
        sequence = {}
        for key in self.values:
            match = SEQUENCE_KEY.match(key)
            if match:
                sequence[int(match.group(1))] = self._roots(key)
        roots = self._roots('sweep.roots') if rule == 'power' else ()
        return FamilySpec(rule=rule, Ns=Ns, roots=roots, sequence=sequence,
                          seed=self.get_int('sweep.seed'), root_radius=self.get_float('sweep.root_radius'))
