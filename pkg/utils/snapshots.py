# utils/snapshots.py
"""Binary snapshots of sparse grids ("SBGR") and dense fields ("DNSF").

All numbers are little-endian. Layouts are documented in docs/FORMATS.md.
"""
import logging
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import BinaryIO, Dict

import numpy as np

from modules.levelset import DenseField
from modules.sparse_grid import CHUNK_EDGE, GridGeometry, SparseBlockGrid
from utils.errors import InputError

logger = logging.getLogger(__name__)

SPARSE_MAGIC = b'SBGR'
DENSE_MAGIC = b'DNSF'
FORMAT_VERSION = 1

_DTYPE_CODES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}


@contextmanager
def open_snapshot(path, mode: str):
    """Context manager for snapshot files; I/O failures become InputError"""
    fh = None
    try:
        fh = open(path, mode)
        yield fh
    except (OSError, struct.error, UnicodeDecodeError, ValueError) as e:
        raise InputError(f"snapshot {path}: {e}") from e
    finally:
        if fh:
            fh.close()


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise InputError(f"snapshot truncated: wanted {n} bytes, got {len(data)}")
    return data


def _write_geometry(fh: BinaryIO, magic: bytes, geometry: GridGeometry, itemsize: int):
    dims = geometry.dims
    fh.write(magic)
    fh.write(struct.pack('<II', FORMAT_VERSION, dims))
    fh.write(struct.pack(f'<{dims}I', *geometry.size))
    fh.write(struct.pack(f'<{dims}d', *geometry.spacing))
    fh.write(struct.pack(f'<{dims}d', *geometry.origin))
    fh.write(struct.pack('<B', itemsize))


def _read_geometry(fh: BinaryIO, magic: bytes):
    found = _read_exact(fh, 4)
    if found != magic:
        raise InputError(f"bad snapshot magic {found!r}, expected {magic!r}")
    version, dims = struct.unpack('<II', _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported snapshot version {version}")
    if dims not in (2, 3):
        raise InputError(f"snapshot has invalid dims {dims}")
    size = struct.unpack(f'<{dims}I', _read_exact(fh, 4 * dims))
    spacing = struct.unpack(f'<{dims}d', _read_exact(fh, 8 * dims))
    origin = struct.unpack(f'<{dims}d', _read_exact(fh, 8 * dims))
    (itemsize,) = struct.unpack('<B', _read_exact(fh, 1))
    if itemsize not in _DTYPE_CODES:
        raise InputError(f"snapshot has invalid precision code {itemsize}")
    return GridGeometry(dims, size, spacing, origin), _DTYPE_CODES[itemsize]


# ─── Sparse grid ─────────────────────────────────────────────────────────────

def write_sparse_snapshot(grid: SparseBlockGrid, path) -> int:
    """Write chunks in ascending key order; returns bytes written"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = grid.dtype.newbyteorder('<')
    with open_snapshot(path, 'wb') as fh:
        _write_geometry(fh, SPARSE_MAGIC, grid.geometry, grid.dtype.itemsize)
        fh.write(struct.pack('<I', len(grid.properties)))
        for name in grid.properties:
            encoded = name.encode('utf-8')
            fh.write(struct.pack('<H', len(encoded)))
            fh.write(encoded)
        fh.write(struct.pack('<Q', grid.chunk_count))

        keys = grid.keys_array()
        masks = grid.mask_array()
        channels = [grid.channel(name) for name in grid.properties]
        for slot in grid.ordered_slots():
            fh.write(keys[slot].astype('<i4').tobytes())
            fh.write(np.packbits(masks[slot].ravel(), bitorder='little').tobytes())
            for channel in channels:
                fh.write(channel[slot].astype(dtype, copy=False).tobytes())
        written = fh.tell()

    logger.info(f"Wrote sparse snapshot {path} ({written} bytes, {grid.chunk_count} chunks)")
    return written


def read_sparse_snapshot(path) -> SparseBlockGrid:
    with open_snapshot(path, 'rb') as fh:
        geometry, dtype = _read_geometry(fh, SPARSE_MAGIC)
        (n_props,) = struct.unpack('<I', _read_exact(fh, 4))
        names = []
        for _ in range(n_props):
            (length,) = struct.unpack('<H', _read_exact(fh, 2))
            names.append(_read_exact(fh, length).decode('utf-8'))
        (n_chunks,) = struct.unpack('<Q', _read_exact(fh, 8))

        dims = geometry.dims
        block = (CHUNK_EDGE,) * dims
        cells = CHUNK_EDGE ** dims
        grid = SparseBlockGrid(geometry, names, dtype.newbyteorder('='))
        grid.reserve(n_chunks)
        chunk_grid = geometry.chunk_grid
        for _ in range(n_chunks):
            key = tuple(int(k) for k in np.frombuffer(_read_exact(fh, 4 * dims), dtype='<i4'))
            if any(not 0 <= k < n for k, n in zip(key, chunk_grid)):
                raise InputError(f"snapshot chunk key {key} outside chunk grid {chunk_grid}")
            bits = np.frombuffer(_read_exact(fh, cells // 8), dtype=np.uint8)
            mask = np.unpackbits(bits, bitorder='little')[:cells].astype(bool).reshape(block)
            payload = {name: np.frombuffer(_read_exact(fh, cells * dtype.itemsize), dtype=dtype).reshape(block)
                       for name in names}
            grid.put_chunk(key, mask, payload)
    return grid


def snapshot_nbytes(grid: SparseBlockGrid) -> int:
    """Exact size of write_sparse_snapshot output"""
    dims = grid.dims
    cells = CHUNK_EDGE ** dims
    header = 4 + 8 + dims * (4 + 8 + 8) + 1 + 4 + 8
    header += sum(2 + len(name.encode('utf-8')) for name in grid.properties)
    record = 4 * dims + cells // 8 + len(grid.properties) * cells * grid.dtype.itemsize
    return header + grid.chunk_count * record


def dense_snapshot_nbytes(geometry: GridGeometry, n_properties: int = 1, itemsize: int = 8) -> int:
    """Size of a dense snapshot holding n_properties full-box channels"""
    header = 4 + 8 + geometry.dims * (4 + 8 + 8) + 1
    return header + n_properties * geometry.dense_node_count * itemsize


# ─── Dense field ─────────────────────────────────────────────────────────────

def write_dense_snapshot(field: DenseField, path, dtype=np.float64) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(dtype).newbyteorder('<')
    with open_snapshot(path, 'wb') as fh:
        _write_geometry(fh, DENSE_MAGIC, field.geometry, dtype.itemsize)
        fh.write(np.ascontiguousarray(field.data, dtype=dtype).tobytes())
        written = fh.tell()
    logger.info(f"Wrote dense snapshot {path} ({written} bytes)")
    return written


def read_dense_snapshot(path) -> DenseField:
    with open_snapshot(path, 'rb') as fh:
        geometry, dtype = _read_geometry(fh, DENSE_MAGIC)
        payload = _read_exact(fh, geometry.dense_node_count * dtype.itemsize)
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(geometry.size)
    return DenseField(geometry, data)


def describe_snapshot(path) -> Dict[str, object]:
    """Header summary of either snapshot kind"""
    with open_snapshot(path, 'rb') as fh:
        magic = _read_exact(fh, 4)
    if magic == SPARSE_MAGIC:
        grid = read_sparse_snapshot(path)
        return {'kind': 'sparse', 'geometry': grid.geometry.to_dict(), 'properties': list(grid.properties),
                'precision': grid.dtype.name, 'occupancy': grid.occupancy_stats().to_dict(),
                'snapshot_bytes': snapshot_nbytes(grid),
                'dense_snapshot_bytes': dense_snapshot_nbytes(grid.geometry, len(grid.properties),
                                                              grid.dtype.itemsize)}
    if magic == DENSE_MAGIC:
        field = read_dense_snapshot(path)
        return {'kind': 'dense', 'geometry': field.geometry.to_dict(),
                'min': float(field.data.min()), 'max': float(field.data.max())}
    raise InputError(f"{path}: not a snapshot file (magic {magic!r})")
