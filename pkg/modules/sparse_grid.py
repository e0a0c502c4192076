# modules/sparse_grid.py
"""Chunked sparse block grid.

Nodes are grouped into chunks of CHUNK_EDGE nodes per axis. A chunk is
stored only once at least one of its nodes is active. Each stored chunk
owns an occupancy mask and one payload block per property channel, all
channels sharing the same mask.

Node-to-chunk mapping: key = index // CHUNK_EDGE, offset = index % CHUNK_EDGE,
payload blocks are row-major over the in-chunk offsets.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils.errors import GridBoundsError, InputError, PropertyError

logger = logging.getLogger(__name__)

CHUNK_EDGE = 8

# Property channel names
PHI = 'phi'
U = 'u'
U_NEXT = 'u_next'
DIFFUSION = 'D'
REACTION = 'reaction'
DEFAULT_PROPERTIES = (PHI, U, U_NEXT, DIFFUSION, REACTION)

# Key of the occupancy mask in padded_blocks() results
MASK = '__mask__'

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ChunkKey = Tuple[int, ...]


class _Inactive:
    """Marker returned for reads of nodes that are not allocated"""
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return 'INACTIVE'

    def __bool__(self):
        return False


INACTIVE = _Inactive()


def resolve_dtype(dtype) -> np.dtype:
    """Normalize a precision name or dtype to float32/float64"""
    aliases = {'fp32': np.float32, 'float32': np.float32, 'single': np.float32,
               'fp64': np.float64, 'float64': np.float64, 'double': np.float64}
    if isinstance(dtype, str):
        if dtype.lower() not in aliases:
            raise InputError(f"unsupported precision '{dtype}'")
        dtype = aliases[dtype.lower()]
    resolved = np.dtype(dtype)
    if resolved not in SUPPORTED_DTYPES:
        raise InputError(f"unsupported precision '{resolved}'")
    return resolved


@dataclass(frozen=True)
class GridGeometry:
    """Box of nodes: counts, physical spacing and origin per axis"""
    dims: int
    size: Tuple[int, ...]
    spacing: Tuple[float, ...]
    origin: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise InputError(f"dims must be 2 or 3, got {self.dims}")
        size = tuple(int(s) for s in self.size)
        spacing = tuple(float(h) for h in self.spacing)
        origin = tuple(float(o) for o in self.origin) if self.origin is not None else (0.0,) * self.dims
        if len(size) != self.dims or len(spacing) != self.dims or len(origin) != self.dims:
            raise InputError("size, spacing and origin must have one entry per axis")
        if any(s < 1 for s in size):
            raise InputError(f"all size entries must be >= 1, got {size}")
        if any(not (h > 0) or not math.isfinite(h) for h in spacing):
            raise InputError(f"all spacing entries must be > 0, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise InputError(f"origin must be finite, got {origin}")
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', origin)

    @classmethod
    def isotropic(cls, size: Sequence[int], h: float, origin: Optional[Sequence[float]] = None) -> 'GridGeometry':
        return cls(dims=len(size), size=tuple(size), spacing=(h,) * len(size),
                   origin=tuple(origin) if origin is not None else None)

    @property
    def dense_node_count(self) -> int:
        return int(np.prod(self.size))

    @property
    def chunk_grid(self) -> Tuple[int, ...]:
        return tuple(-(-s // CHUNK_EDGE) for s in self.size)

    @property
    def dense_chunk_count(self) -> int:
        return int(np.prod(self.chunk_grid))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    @property
    def extent(self) -> Tuple[float, ...]:
        return tuple((s - 1) * h for s, h in zip(self.size, self.spacing))

    @property
    def diameter(self) -> float:
        return float(np.sqrt(sum(e * e for e in self.extent)))

    def contains(self, index: Sequence[int]) -> bool:
        return len(index) == self.dims and all(0 <= int(i) < s for i, s in zip(index, self.size))

    def coordinates(self, indices: np.ndarray) -> np.ndarray:
        """Physical coordinates of node indices, shape (..., dims)"""
        indices = np.asarray(indices)
        return np.asarray(self.origin) + indices * np.asarray(self.spacing)

    def node_coordinates(self) -> np.ndarray:
        """Coordinates of every node, shape size + (dims,)"""
        axes = [o + np.arange(s) * h for o, s, h in zip(self.origin, self.size, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    def to_dict(self):
        return asdict(self)


@dataclass
class Chunk:
    """View of one stored chunk: key, mask and per-channel payload blocks"""
    key: ChunkKey
    slot: int
    mask: np.ndarray
    payload: Dict[str, np.ndarray]

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())

    @property
    def origin_index(self) -> Tuple[int, ...]:
        return tuple(k * CHUNK_EDGE for k in self.key)


@dataclass
class OccupancyStats:
    """Node and chunk occupancy of a sparse grid"""
    chunk_count: int
    active_node_count: int
    dense_node_count: int
    dense_chunk_count: int
    fill_fraction: float
    chunk_fill_fraction: float

    def to_dict(self):
        return asdict(self)


def chunk_key_of(index: Sequence[int]) -> ChunkKey:
    return tuple(int(i) // CHUNK_EDGE for i in index)


class SparseBlockGrid:
    """Sparse Cartesian grid storing scalar channels only in allocated chunks"""

    def __init__(self, geometry: GridGeometry, properties: Sequence[str] = DEFAULT_PROPERTIES,
                 dtype=np.float64):
        properties = tuple(properties)
        if not properties:
            raise InputError("at least one property channel is required")
        if len(set(properties)) != len(properties):
            raise InputError(f"duplicate property names in {properties}")
        if MASK in properties:
            raise InputError(f"'{MASK}' is reserved")

        self.geometry = geometry
        self.dtype = resolve_dtype(dtype)
        self._properties = properties
        self._block = (CHUNK_EDGE,) * geometry.dims
        self._count = 0
        self._keys = np.zeros((0, geometry.dims), dtype=np.int64)
        self._mask = np.zeros((0,) + self._block, dtype=bool)
        self._data = {name: np.zeros((0,) + self._block, dtype=self.dtype) for name in properties}
        self._lookup: Dict[ChunkKey, int] = {}
        self._neighbors: Optional[np.ndarray] = None

    # ─── Introspection ──────────────────────────────────────────────────────
    @property
    def properties(self) -> Tuple[str, ...]:
        return self._properties

    @property
    def dims(self) -> int:
        return self.geometry.dims

    @property
    def chunk_count(self) -> int:
        return self._count

    @property
    def active_node_count(self) -> int:
        return int(self._mask[:self._count].sum())

    def __repr__(self):
        return (f"SparseBlockGrid(size={self.geometry.size}, chunks={self._count}, "
                f"active={self.active_node_count}, dtype={self.dtype.name})")

    def _check_property(self, name: str):
        if name not in self._data:
            raise PropertyError(f"unregistered property '{name}' (registered: {', '.join(self._properties)})")

    def _check_index(self, index) -> Tuple[int, ...]:
        index = tuple(int(i) for i in index)
        if not self.geometry.contains(index):
            raise GridBoundsError(f"node index {index} outside grid of size {self.geometry.size}")
        return index

    # ─── Storage management ────────────────────────────────────────────────
    def _reserve(self, needed: int):
        capacity = self._mask.shape[0]
        if needed <= capacity:
            return
        new_capacity = max(needed, 2 * capacity, 16)
        grow = new_capacity - capacity
        self._keys = np.concatenate([self._keys, np.zeros((grow, self.dims), dtype=np.int64)])
        self._mask = np.concatenate([self._mask, np.zeros((grow,) + self._block, dtype=bool)])
        for name in self._properties:
            self._data[name] = np.concatenate(
                [self._data[name], np.zeros((grow,) + self._block, dtype=self.dtype)])

    def _slot_for(self, key: ChunkKey) -> int:
        slot = self._lookup.get(key)
        if slot is None:
            self._reserve(self._count + 1)
            slot = self._count
            self._keys[slot] = key
            self._lookup[key] = slot
            self._count += 1
            self._neighbors = None
        return slot

    # ─── Insertion ─────────────────────────────────────────────────────────
    def insert_node(self, index: Sequence[int], values: Optional[Mapping[str, float]] = None,
                    **kwargs) -> 'SparseBlockGrid':
        """Activate one node and write its channel values (unspecified channels get 0)"""
        values = dict(values or {}, **kwargs)
        for name in values:
            self._check_property(name)
        index = self._check_index(index)

        slot = self._slot_for(chunk_key_of(index))
        offset = tuple(i % CHUNK_EDGE for i in index)
        self._mask[(slot,) + offset] = True
        for name in self._properties:
            self._data[name][(slot,) + offset] = values.get(name, 0.0)
        return self

    def insert_nodes(self, indices: np.ndarray, values: Optional[Mapping[str, object]] = None) -> 'SparseBlockGrid':
        """Vectorized insertion of many nodes; values are arrays or scalars per channel"""
        values = dict(values or {})
        for name in values:
            self._check_property(name)
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.dims)
        if len(indices) == 0:
            return self
        size = np.asarray(self.geometry.size)
        if (indices < 0).any() or (indices >= size).any():
            bad = indices[((indices < 0) | (indices >= size)).any(axis=1)][0]
            raise GridBoundsError(f"node index {tuple(bad)} outside grid of size {self.geometry.size}")

        keys = indices // CHUNK_EDGE
        offsets = indices % CHUNK_EDGE
        unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        slots = np.array([self._slot_for(tuple(int(k) for k in key)) for key in unique_keys], dtype=np.int64)

        target = (slots[inverse],) + tuple(offsets.T)
        self._mask[target] = True
        for name in self._properties:
            self._data[name][target] = values.get(name, 0.0)
        return self

    def reserve(self, n_chunks: int) -> None:
        self._reserve(self._count + int(n_chunks))

    def put_chunk(self, key: ChunkKey, mask: np.ndarray, payload: Mapping[str, np.ndarray]) -> int:
        """Store a whole chunk at once; returns its slot"""
        mask = np.asarray(mask, dtype=bool).reshape(self._block)
        if not mask.any():
            raise InputError(f"chunk {tuple(key)} has no active node")
        for name in payload:
            self._check_property(name)
        key = tuple(int(k) for k in key)
        self._check_index(tuple(k * CHUNK_EDGE for k in key))
        slot = self._slot_for(key)
        self._mask[slot] = mask
        for name in self._properties:
            self._data[name][slot] = np.asarray(payload[name]).reshape(self._block) if name in payload else 0.0
        return slot

    # ─── Access ────────────────────────────────────────────────────────────
    def get(self, index: Sequence[int], name: str):
        """Stored value at an active node, or INACTIVE"""
        self._check_property(name)
        index = self._check_index(index)
        slot = self._lookup.get(chunk_key_of(index))
        if slot is None:
            return INACTIVE
        offset = tuple(i % CHUNK_EDGE for i in index)
        if not self._mask[(slot,) + offset]:
            return INACTIVE
        return self._data[name][(slot,) + offset].item()

    def is_active(self, index: Sequence[int]) -> bool:
        index = self._check_index(index)
        slot = self._lookup.get(chunk_key_of(index))
        return slot is not None and bool(self._mask[(slot,) + tuple(i % CHUNK_EDGE for i in index)])

    def channel(self, name: str) -> np.ndarray:
        """Live payload array of one channel, shape (chunk_count,) + block"""
        self._check_property(name)
        return self._data[name][:self._count]

    def mask_array(self) -> np.ndarray:
        return self._mask[:self._count]

    def keys_array(self) -> np.ndarray:
        return self._keys[:self._count]

    def chunk(self, slot: int) -> Chunk:
        return Chunk(key=tuple(int(k) for k in self._keys[slot]), slot=slot, mask=self._mask[slot],
                     payload={name: self._data[name][slot] for name in self._properties})

    def active_indices(self) -> np.ndarray:
        """Global indices of active nodes, ordered by slot then in-chunk row-major"""
        found = np.nonzero(self.mask_array())
        slots, offsets = found[0], np.stack(found[1:], axis=1)
        return self.keys_array()[slots] * CHUNK_EDGE + offsets

    def active_values(self, name: str) -> np.ndarray:
        return self.channel(name)[self.mask_array()]

    def set_active_values(self, name: str, values) -> None:
        self.channel(name)[self.mask_array()] = values

    def active_coordinates(self) -> np.ndarray:
        return self.geometry.coordinates(self.active_indices())

    def iter_active_nodes(self) -> Iterator[Tuple[int, ...]]:
        for index in self.active_indices():
            yield tuple(int(i) for i in index)

    def swap_channels(self, first: str, second: str) -> None:
        self._check_property(first)
        self._check_property(second)
        self._data[first], self._data[second] = self._data[second], self._data[first]

    def ordered_slots(self) -> np.ndarray:
        """Slots sorted by chunk key; fixed order for reductions"""
        keys = self.keys_array()
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.lexsort(keys.T[::-1])

    def copy(self) -> 'SparseBlockGrid':
        clone = SparseBlockGrid(self.geometry, self._properties, self.dtype)
        clone._reserve(self._count)
        clone._count = self._count
        clone._keys[:self._count] = self.keys_array()
        clone._mask[:self._count] = self.mask_array()
        for name in self._properties:
            clone._data[name][:self._count] = self.channel(name)
        clone._lookup = dict(self._lookup)
        return clone

    def to_dense(self, name: str, blank: float = np.nan) -> np.ndarray:
        """Scatter one channel onto the full box; inactive nodes get `blank`"""
        dense = np.full(self.geometry.size, blank, dtype=np.float64)
        indices = self.active_indices()
        if len(indices):
            dense[tuple(indices.T)] = self.active_values(name)
        return dense

    def dense_mask(self) -> np.ndarray:
        dense = np.zeros(self.geometry.size, dtype=bool)
        indices = self.active_indices()
        if len(indices):
            dense[tuple(indices.T)] = True
        return dense

    # ─── Chunk iteration ───────────────────────────────────────────────────
    def for_each_active_chunk(self, visitor: Callable[[Chunk], None], workers: int = 1) -> None:
        """Invoke visitor once per stored chunk; order is unspecified"""
        chunks = [self.chunk(slot) for slot in range(self._count)]
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(visitor, chunks))
        else:
            for chunk in chunks:
                visitor(chunk)

    def partition_slots(self, workers: int) -> list:
        """Split stored chunks into contiguous, non-empty slot ranges"""
        workers = max(1, min(int(workers), self._count or 1))
        return [part for part in np.array_split(np.arange(self._count), workers) if len(part)]

    # ─── Neighbor access ───────────────────────────────────────────────────
    def neighbor_table(self) -> np.ndarray:
        """Face-neighbor chunk slots, shape (chunk_count, 2*dims); -1 where absent.

        Column 2*axis holds the minus-side neighbor, 2*axis+1 the plus side.
        """
        if self._neighbors is not None and len(self._neighbors) == self._count:
            return self._neighbors

        chunk_grid = np.asarray(self.geometry.chunk_grid)
        lookup = np.full(int(np.prod(chunk_grid)), -1, dtype=np.int64)
        keys = self.keys_array()
        lookup[np.ravel_multi_index(tuple(keys.T), tuple(chunk_grid))] = np.arange(self._count)

        table = np.full((self._count, 2 * self.dims), -1, dtype=np.int64)
        for axis in range(self.dims):
            for side, step in enumerate((-1, 1)):
                shifted = keys.copy()
                shifted[:, axis] += step
                inside = (shifted[:, axis] >= 0) & (shifted[:, axis] < chunk_grid[axis])
                if inside.any():
                    linear = np.ravel_multi_index(tuple(shifted[inside].T), tuple(chunk_grid))
                    table[inside, 2 * axis + side] = lookup[linear]
        self._neighbors = table
        return table

    def padded_blocks(self, names: Sequence[str], slots: Optional[np.ndarray] = None,
                      fill: float = 0.0) -> Dict[str, np.ndarray]:
        """Chunk blocks with a one-node face halo gathered from neighbor chunks.

        Returns arrays of shape (len(slots),) + (CHUNK_EDGE + 2,) * dims per
        channel plus the padded occupancy mask under MASK. Halo nodes without
        a stored neighbor chunk read `fill` and mask False.
        """
        if slots is None:
            slots = np.arange(self._count)
        slots = np.asarray(slots, dtype=np.int64)
        table = self.neighbor_table()[slots]
        edge = CHUNK_EDGE
        inner = (slice(None),) + (slice(1, edge + 1),) * self.dims
        padded_shape = (len(slots),) + (edge + 2,) * self.dims

        sources = {name: self.channel(name) for name in names}
        sources[MASK] = self.mask_array()

        result = {}
        for name, source in sources.items():
            padded = np.full(padded_shape, False if name == MASK else fill, dtype=source.dtype)
            padded[inner] = source[slots]
            for axis in range(self.dims):
                for side, (halo, layer) in enumerate(((0, edge - 1), (edge + 1, 0))):
                    neighbor = table[:, 2 * axis + side]
                    rows = np.nonzero(neighbor >= 0)[0]
                    if len(rows) == 0:
                        continue
                    dst = [slice(1, edge + 1)] * self.dims
                    dst[axis] = halo
                    src = [slice(None)] * self.dims
                    src[axis] = layer
                    padded[(rows,) + tuple(dst)] = source[(neighbor[rows],) + tuple(src)]
            result[name] = padded
        return result

    # ─── Occupancy ─────────────────────────────────────────────────────────
    def occupancy_stats(self) -> OccupancyStats:
        dense_nodes = self.geometry.dense_node_count
        dense_chunks = self.geometry.dense_chunk_count
        active = self.active_node_count
        return OccupancyStats(
            chunk_count=self._count,
            active_node_count=active,
            dense_node_count=dense_nodes,
            dense_chunk_count=dense_chunks,
            fill_fraction=active / dense_nodes,
            chunk_fill_fraction=self._count / dense_chunks
        )


def insert_node(grid: SparseBlockGrid, index: Sequence[int], values: Optional[Mapping[str, float]] = None) -> SparseBlockGrid:
    return grid.insert_node(index, values)


def get(grid: SparseBlockGrid, index: Sequence[int], name: str):
    return grid.get(index, name)


def for_each_active_chunk(grid: SparseBlockGrid, visitor: Callable[[Chunk], None], workers: int = 1) -> None:
    grid.for_each_active_chunk(visitor, workers=workers)


def occupancy_stats(grid: SparseBlockGrid) -> OccupancyStats:
    return grid.occupancy_stats()
