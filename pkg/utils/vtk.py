# utils/vtk.py
"""Legacy ASCII VTK STRUCTURED_POINTS output (and a reader for checking it).

Point data is written with x varying fastest. Two-dimensional fields are
emitted as a single z-slice.
"""
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from modules.sparse_grid import DIFFUSION, PHI, U, GridGeometry, SparseBlockGrid
from utils.errors import InputError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = {8: '%.17g', 4: '%.9g'}


def _as_3d(values: Sequence, fill) -> Tuple:
    values = tuple(values)
    return values + (fill,) * (3 - len(values))


def write_vtk(path, geometry: GridGeometry, fields: Mapping[str, np.ndarray],
              mask: Optional[np.ndarray] = None, title: str = 'reaction-diffusion field',
              itemsize: int = 8) -> Path:
    """Write dense arrays of shape geometry.size as point data"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_points = geometry.dense_node_count
    fmt = FLOAT_FORMAT.get(itemsize, '%.17g')

    with open(path, 'w', encoding='ascii', newline='\n') as fh:
        fh.write('# vtk DataFile Version 3.0\n')
        fh.write(title.replace('\n', ' ')[:255] + '\n')
        fh.write('ASCII\n')
        fh.write('DATASET STRUCTURED_POINTS\n')
        fh.write('DIMENSIONS {} {} {}\n'.format(*_as_3d(geometry.size, 1)))
        fh.write('ORIGIN {} {} {}\n'.format(*(repr(float(v)) for v in _as_3d(geometry.origin, 0.0))))
        fh.write('SPACING {} {} {}\n'.format(*(repr(float(v)) for v in _as_3d(geometry.spacing, 1.0))))
        fh.write(f'POINT_DATA {n_points}\n')
        for name, values in fields.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != geometry.size:
                raise InputError(f"field '{name}' has shape {values.shape}, expected {geometry.size}")
            fh.write(f'SCALARS {name} double 1\nLOOKUP_TABLE default\n')
            np.savetxt(fh, values.transpose().ravel(), fmt=fmt)
        if mask is not None:
            fh.write('SCALARS mask int 1\nLOOKUP_TABLE default\n')
            np.savetxt(fh, np.asarray(mask).transpose().ravel().astype(int), fmt='%d')
    return path


def write_grid_vtk(grid: SparseBlockGrid, path, channels: Sequence[str] = (U, DIFFUSION, PHI),
                   blank: float = np.nan, title: Optional[str] = None) -> Path:
    """Scatter sparse channels onto the box; inactive nodes get `blank`"""
    fields = {name: grid.to_dense(name, blank) for name in channels if name in grid.properties}
    return write_vtk(path, grid.geometry, fields, mask=grid.dense_mask(),
                     title=title or f'sparse grid {grid.geometry.size}', itemsize=grid.dtype.itemsize)


def read_vtk(path) -> Tuple[GridGeometry, Dict[str, np.ndarray]]:
    """Parse files produced by write_vtk; arrays come back shaped geometry.size"""
    try:
        tokens = Path(path).read_text(encoding='ascii').split('\n')
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"cannot read VTK file {path}: {e}") from e
    if not tokens or not tokens[0].startswith('# vtk DataFile'):
        raise InputError(f"{path}: not a legacy VTK file")

    header = {}
    position = 4
    while position < len(tokens) and not tokens[position].startswith('POINT_DATA'):
        parts = tokens[position].split()
        if parts:
            header[parts[0]] = parts[1:]
        position += 1
    dims3 = [int(v) for v in header['DIMENSIONS']]
    dims = 2 if dims3[2] == 1 else 3
    geometry = GridGeometry(dims=dims, size=dims3[:dims],
                            spacing=[float(v) for v in header['SPACING']][:dims],
                            origin=[float(v) for v in header['ORIGIN']][:dims])
    n_points = int(tokens[position].split()[1])
    values = ' '.join(tokens[position + 1:]).split()

    fields = {}
    cursor = 0
    while cursor < len(values):
        if values[cursor] != 'SCALARS':
            raise InputError(f"{path}: unexpected token '{values[cursor]}'")
        name = values[cursor + 1]
        cursor += 6 if values[cursor + 3] == '1' else 5  # SCALARS name type [ncomp] LOOKUP_TABLE default
        raw = np.array(values[cursor:cursor + n_points], dtype=np.float64)
        cursor += n_points
        fields[name] = raw.reshape(tuple(reversed(dims3))).transpose().reshape(geometry.size)
    return geometry, fields
