import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from services.grid import DiscreteDomain
from utils.errors import ConfigError
from utils.helpers import format_float

logger = logging.getLogger(__name__)

TDGRID_MAGIC = 'TDGRID1'
FLOAT_FORMAT = '%.17g'


@dataclass(frozen=True, eq=False)
class TDGrid:
    """Contents of a TDGRID1 file"""
    nx: int
    ny: int
    r: int
    h: float
    x0: float
    y0: float
    mask: np.ndarray
    fields: np.ndarray

    def matches(self, dom: DiscreteDomain) -> bool:
        """Header and mask agree with a rebuilt domain"""
        return (
            (self.ny, self.nx) == dom.mask.shape
            and abs(self.h - dom.h) <= 1e-15
            and abs(self.x0 - dom.x0) <= 1e-12
            and abs(self.y0 - dom.y0) <= 1e-12
            and bool(np.array_equal(self.mask, dom.mask))
        )


def encode_tdgrid(dom: DiscreteDomain, fields: np.ndarray) -> bytes:
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 2:
        fields = fields[np.newaxis]
    r = fields.shape[0]
    header = ' '.join([
        TDGRID_MAGIC, str(dom.nx), str(dom.ny), str(r),
        format_float(dom.h), format_float(dom.x0), format_float(dom.y0),
    ]) + '\n'
    # Nodes outside the domain carry no data; store zeros so files are reproducible
    payload = np.where(dom.active[np.newaxis], fields, 0.0).astype('<f8')
    return header.encode('ascii') + dom.mask.astype(np.uint8).tobytes() + payload.tobytes()


def decode_tdgrid(raw: bytes, source: str = '<bytes>') -> TDGrid:
    newline = raw.find(b'\n')
    if newline < 0:
        raise ConfigError(f"{source}: missing TDGRID1 header line")
    try:
        parts = raw[:newline].decode('ascii').split()
    except UnicodeDecodeError:
        raise ConfigError(f"{source}: header is not ASCII")
    if len(parts) != 7 or parts[0] != TDGRID_MAGIC:
        raise ConfigError(f"{source}: expected '{TDGRID_MAGIC} nx ny r h x0 y0' header")
    try:
        nx, ny, r = int(parts[1]), int(parts[2]), int(parts[3])
        h, x0, y0 = float(parts[4]), float(parts[5]), float(parts[6])
    except ValueError:
        raise ConfigError(f"{source}: malformed header values {parts[1:]}")

    body = raw[newline + 1:]
    n_nodes = nx * ny
    expected = n_nodes + 8 * r * n_nodes
    if len(body) != expected:
        raise ConfigError(f"{source}: payload has {len(body)} bytes, header implies {expected}")
    mask = np.frombuffer(body[:n_nodes], dtype=np.uint8).astype(np.int8).reshape(ny, nx)
    fields = np.frombuffer(body[n_nodes:], dtype='<f8').astype(float).reshape(r, ny, nx)
    return TDGrid(nx=nx, ny=ny, r=r, h=h, x0=x0, y0=y0, mask=mask, fields=fields)


def read_tdgrid(path: str) -> TDGrid:
    """Read a TDGRID1 file from disk"""
    try:
        with open(path, 'rb') as handle:
            raw = handle.read()
    except OSError as e:
        raise ConfigError(f"cannot read grid file {path}: {e}")
    return decode_tdgrid(raw, source=path)


def field_table(dom: DiscreteDomain, fields: np.ndarray) -> pd.DataFrame:
    """CSV layout x,y,comp1,…,compr over interior and boundary nodes"""
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 2:
        fields = fields[np.newaxis]
    active = dom.active
    columns: Dict[str, np.ndarray] = {'x': dom.X[active], 'y': dom.Y[active]}
    for j in range(fields.shape[0]):
        columns[f'comp{j + 1}'] = fields[j][active]
    return pd.DataFrame(columns)


class StorageManager:
    """Writes run artifacts into an output directory"""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: List[str] = []

    def ensure(self):
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _record(self, path: str):
        self.written.append(path)
        logger.debug(f"Wrote {path}")

    def write_tdgrid(self, name: str, dom: DiscreteDomain, fields: np.ndarray) -> str:
        self.ensure()
        path = self.path(name)
        with open(path, 'wb') as handle:
            handle.write(encode_tdgrid(dom, fields))
        self._record(path)
        return path

    def write_field_csv(self, name: str, dom: DiscreteDomain, fields: np.ndarray) -> str:
        return self.write_table(name, field_table(dom, fields))

    def write_table(self, name: str, table: Any, columns: Optional[Sequence[str]] = None) -> str:
        """Write a DataFrame or list of row dicts with fixed %.17g float formatting"""
        self.ensure()
        if not isinstance(table, pd.DataFrame):
            table = pd.DataFrame(list(table), columns=columns)
        path = self.path(name)
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        self._record(path)
        return path

    def write_text(self, name: str, lines: Iterable[str]) -> str:
        self.ensure()
        path = self.path(name)
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            for line in lines:
                handle.write(line + '\n')
        self._record(path)
        return path
