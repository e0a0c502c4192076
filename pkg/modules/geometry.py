# modules/geometry.py
"""Geometry ingestion: masks, indicators, thin-feature filtering, grid build.

Also hosts the synthetic porous geometries used as fixtures (sphere
packings, periodic disk arrays and an RPC-like strut lattice).
"""
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.special import expit

from modules.levelset import DenseField
from modules.sparse_grid import (
    DEFAULT_PROPERTIES, DIFFUSION, PHI, GridGeometry, SparseBlockGrid, resolve_dtype
)
from utils.errors import GeometryError, InputError

logger = logging.getLogger(__name__)


@dataclass
class VoxelMask:
    """Binary segmentation; True marks the transport phase"""
    size: Tuple[int, ...]
    voxel_size: Tuple[float, ...]
    bits: np.ndarray

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if isinstance(self.voxel_size, (int, float)):
            self.voxel_size = (float(self.voxel_size),) * len(self.size)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if any(s < 1 for s in self.size):
            raise InputError(f"mask has a zero-sized axis: {self.size}")
        if len(self.voxel_size) != len(self.size):
            raise InputError("voxel_size needs one entry per axis")
        bits = np.asarray(self.bits).astype(bool)
        if bits.size != int(np.prod(self.size)):
            raise InputError(f"mask has {bits.size} voxels, size {self.size} needs {int(np.prod(self.size))}")
        self.bits = bits.reshape(self.size)

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(dims=len(self.size), size=self.size, spacing=self.voxel_size)


@dataclass(frozen=True)
class PhaseBand:
    """Open interval of phi values that makes up the transport phase"""
    b_low: float = 0.0
    b_up: float = math.inf

    def __post_init__(self):
        if math.isnan(self.b_low) or math.isnan(self.b_up) or not self.b_low < self.b_up:
            raise InputError(f"phase band needs b_low < b_up, got ({self.b_low}, {self.b_up})")

    def to_dict(self):
        return {'b_low': self.b_low, 'b_up': None if math.isinf(self.b_up) else self.b_up}


@dataclass(frozen=True)
class DiffusionProfile:
    """Smooth diffusion coefficient D_min + D_max * sigmoid(gamma1 + gamma2*phi)"""
    D_min: float
    D_max: float
    gamma1: float
    gamma2: float

    def __post_init__(self):
        if not self.D_min >= 0:
            raise InputError(f"D_min must be >= 0, got {self.D_min}")
        if not self.D_max > 0:
            raise InputError(f"D_max must be > 0, got {self.D_max}")
        if not (math.isfinite(self.gamma1) and math.isfinite(self.gamma2)):
            raise InputError("gamma1 and gamma2 must be finite")

    @classmethod
    def from_sdf(cls, phi_min: float, h: float, D_min: float = 0.0, D_max: float = 1.0,
                 gamma2: Optional[float] = None, literal_gamma2: bool = False) -> 'DiffusionProfile':
        """Transition a few cells wide with its midpoint at phi_min.

        gamma2 defaults to 4/h; literal_gamma2 uses 4*h instead.
        """
        if gamma2 is None:
            gamma2 = 4.0 * h if literal_gamma2 else 4.0 / h
        return cls(D_min=D_min, D_max=D_max, gamma1=-gamma2 * phi_min, gamma2=gamma2)

    @property
    def upper_bound(self) -> float:
        return self.D_min + self.D_max

    def to_dict(self):
        return asdict(self)


# ─── Indicator and filtering ─────────────────────────────────────────────────

def mask_to_indicator(mask: VoxelMask) -> DenseField:
    """True -> +1, False -> -1"""
    if any(s < 1 for s in mask.size):
        raise InputError(f"mask has a zero-sized axis: {mask.size}")
    return DenseField(mask.geometry, np.where(mask.bits, 1.0, -1.0))


def indicator_to_mask(indicator: DenseField) -> VoxelMask:
    return VoxelMask(size=indicator.geometry.size, voxel_size=indicator.geometry.spacing,
                     bits=indicator.data > 0)


def filter_thin_features(indicator: DenseField, min_thickness_cells: int = 2) -> DenseField:
    """Morphological opening of the positive phase.

    The structuring element is the full 3^dims neighbourhood, iterated
    min_thickness_cells // 2 times (at least once). The box is edge-padded
    by twice that radius first, so the result is the opening of the
    edge-extended phase: faces keep their thickness and a second pass
    changes nothing.
    """
    if min_thickness_cells < 1:
        raise InputError(f"min_thickness_cells must be >= 1, got {min_thickness_cells}")
    positive = indicator.data > 0
    if positive.all() or not positive.any():
        return indicator.copy()

    iterations = max(1, int(min_thickness_cells) // 2)
    structure = ndimage.generate_binary_structure(positive.ndim, positive.ndim)
    pad = 2 * iterations
    padded = np.pad(positive, pad, mode='edge')
    opened = ndimage.binary_opening(padded, structure=structure, iterations=iterations)
    opened = opened[tuple(slice(pad, -pad) for _ in range(positive.ndim))]

    removed = int(positive.sum() - opened.sum())
    if removed:
        logger.info(f"Thin-feature filter flipped {removed} voxels to the solid phase")
    return DenseField(indicator.geometry, np.where(opened, 1.0, -1.0))


# ─── Sparse grid construction ────────────────────────────────────────────────

def build_sparse_grid(sdf: DenseField, band: PhaseBand = PhaseBand(),
                      channels: Sequence[str] = DEFAULT_PROPERTIES, dtype=np.float64,
                      allocate_all: bool = False) -> SparseBlockGrid:
    """Insert every node with b_low + eps < phi < b_up - eps.

    eps is the machine epsilon of the grid precision. With allocate_all the
    whole box is allocated instead; the solver then masks non-phase nodes
    by the same phi test.
    """
    dtype = resolve_dtype(dtype)
    if PHI not in channels:
        raise InputError(f"channel '{PHI}' is required to build a grid")
    data = np.asarray(sdf.data)
    if not np.isfinite(data).all():
        raise InputError("SDF contains non-finite values")

    phi = data.astype(dtype)
    eps = np.finfo(dtype).eps
    inside = (phi > dtype.type(band.b_low) + eps) & (phi < dtype.type(band.b_up) - eps)
    if not inside.any():
        raise GeometryError(f"no node of the SDF lies inside the phase band ({band.b_low}, {band.b_up})")

    selected = np.ones_like(inside) if allocate_all else inside
    indices = np.argwhere(selected)
    grid = SparseBlockGrid(sdf.geometry, channels, dtype)
    grid.insert_nodes(indices, {PHI: phi[selected]})

    stats = grid.occupancy_stats()
    logger.info(f"Built sparse grid: {stats.active_node_count} nodes in {stats.chunk_count} chunks "
                f"(node fill {stats.fill_fraction:.3f}, chunk fill {stats.chunk_fill_fraction:.3f})",
                extra={'chunks': stats.chunk_count, 'active_nodes': stats.active_node_count})
    return grid


def smooth_diffusion_coefficient(phi, profile: DiffusionProfile):
    """D_min + D_max / (1 + exp(-(gamma1 + gamma2*phi)))"""
    value = profile.D_min + profile.D_max * expit(profile.gamma1 + profile.gamma2 * np.asarray(phi, dtype=np.float64))
    return float(value) if np.ndim(value) == 0 else value


def populate_diffusion_channel(grid: SparseBlockGrid, profile: DiffusionProfile) -> SparseBlockGrid:
    values = smooth_diffusion_coefficient(grid.active_values(PHI), profile)
    grid.set_active_values(DIFFUSION, values)
    return grid


def fill_uniform_diffusion(grid: SparseBlockGrid, value: float) -> SparseBlockGrid:
    if not value > 0:
        raise InputError(f"diffusion coefficient must be > 0, got {value}")
    grid.set_active_values(DIFFUSION, value)
    return grid


def phase_phi_min(grid: SparseBlockGrid, band: PhaseBand = PhaseBand()) -> float:
    """Smallest phi among phase nodes (the surface-nearest node)"""
    phi = grid.active_values(PHI)
    phi = phi[phi > band.b_low]
    if phi.size == 0:
        raise GeometryError("grid has no phase nodes")
    return float(phi.min())


def porosity(obj: Union[VoxelMask, SparseBlockGrid]) -> float:
    """Transport-phase fraction of a mask, or node fill of a grid"""
    if isinstance(obj, VoxelMask):
        return float(obj.bits.mean())
    if isinstance(obj, SparseBlockGrid):
        return obj.active_node_count / obj.geometry.dense_node_count
    raise InputError(f"porosity is undefined for {type(obj).__name__}")


# ─── Synthetic geometries ────────────────────────────────────────────────────

@dataclass
class SpherePacking:
    """Randomly placed (overlapping) solid spheres in a box; fluid is the phase"""
    geometry: GridGeometry
    centers: np.ndarray
    radius: float
    seed: Optional[int] = None
    distance: np.ndarray = field(default=None, repr=False)

    def mask(self) -> VoxelMask:
        return VoxelMask(self.geometry.size, self.geometry.spacing, self.distance > 0)

    def sdf(self) -> DenseField:
        """Minimum over spheres of |x - c| - r; exact in the fluid phase"""
        return DenseField(self.geometry, self.distance.copy())


def sphere_packing(size: Sequence[int], radius: float, target_porosity: float, seed: int = 0,
                   voxel_size: float = 1.0, max_spheres: int = 100000) -> SpherePacking:
    """Add spheres at uniform random centers until porosity drops to target"""
    if not 0 < target_porosity < 1:
        raise InputError(f"target_porosity must lie in (0, 1), got {target_porosity}")
    if not radius > 0:
        raise InputError(f"radius must be > 0, got {radius}")
    geometry = GridGeometry.isotropic(size, voxel_size)
    coords = geometry.node_coordinates()
    upper = np.asarray(geometry.extent)
    rng = np.random.default_rng(seed)

    distance = np.full(geometry.size, np.inf)
    centers = []
    while float((distance > 0).mean()) > target_porosity:
        if len(centers) >= max_spheres:
            raise GeometryError(f"porosity {target_porosity} not reached with {max_spheres} spheres")
        center = rng.uniform(0.0, upper)
        centers.append(center)
        np.minimum(distance, np.linalg.norm(coords - center, axis=-1) - radius, out=distance)

    logger.info(f"Sphere packing: {len(centers)} spheres, porosity {float((distance > 0).mean()):.3f}")
    return SpherePacking(geometry, np.asarray(centers), float(radius), seed, distance)


def sphere_packing_mask(size: Sequence[int], radius: float, target_porosity: float, seed: int = 0,
                        voxel_size: float = 1.0) -> VoxelMask:
    return sphere_packing(size, radius, target_porosity, seed, voxel_size).mask()


def sphere_packing_sdf(size: Sequence[int], radius: float, target_porosity: float, seed: int = 0,
                       voxel_size: float = 1.0) -> DenseField:
    return sphere_packing(size, radius, target_porosity, seed, voxel_size).sdf()


def disk_radius_for_porosity(period: float, porosity_value: float) -> float:
    """Radius of one disk per square cell of side `period` leaving the given fluid fraction"""
    if not 0 < porosity_value < 1:
        raise InputError(f"porosity must lie in (0, 1), got {porosity_value}")
    radius = period * math.sqrt((1.0 - porosity_value) / math.pi)
    if radius >= period / 2:
        raise InputError(f"porosity {porosity_value} makes neighbouring disks overlap")
    return radius


def periodic_disk_array_sdf(size: Sequence[int], period: int, porosity_value: float,
                            voxel_size: float = 1.0) -> DenseField:
    """Square lattice of solid disks centred in each period x period cell (2D).

    Node i sits at (i + 0.5) * voxel_size; positive values are fluid.
    """
    if len(size) != 2:
        raise InputError("periodic disk arrays are two-dimensional")
    if period < 2:
        raise InputError(f"period must be >= 2 nodes, got {period}")
    cell = period * voxel_size
    radius = disk_radius_for_porosity(cell, porosity_value)
    geometry = GridGeometry.isotropic(size, voxel_size, origin=(0.5 * voxel_size,) * 2)
    coords = geometry.node_coordinates()
    local = np.mod(coords, cell) - 0.5 * cell
    return DenseField(geometry, np.linalg.norm(local, axis=-1) - radius)


def periodic_disk_array_mask(size: Sequence[int], period: int, porosity_value: float,
                             voxel_size: float = 1.0) -> VoxelMask:
    sdf = periodic_disk_array_sdf(size, period, porosity_value, voxel_size)
    return VoxelMask(sdf.geometry.size, sdf.geometry.spacing, sdf.data > 0)


def rpc_like_mask(size: Sequence[int], period: int = 32, radius: float = 3.2, offset: int = 4,
                  voxel_size: float = 1.0) -> VoxelMask:
    """Thin struts along the edges of a cubic lattice (reticulated foam stand-in).

    Strut axes run through lattice points offset + k*period on every axis;
    the struts are the transport phase.
    """
    if len(size) != 3:
        raise InputError("RPC-like lattices are three-dimensional")
    geometry = GridGeometry.isotropic(size, voxel_size)
    index = np.indices(geometry.size).astype(np.float64)
    # distance to the nearest strut line per axis pair
    offsets = np.abs(np.mod(index - offset + period / 2, period) - period / 2)
    bits = np.zeros(geometry.size, dtype=bool)
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        bits |= offsets[a] ** 2 + offsets[b] ** 2 <= radius ** 2
    return VoxelMask(geometry.size, geometry.spacing, bits)


def box_sdf(size: Sequence[int], voxel_size: float = 1.0) -> DenseField:
    """Field that is +1 everywhere (whole box is phase)"""
    geometry = GridGeometry.isotropic(size, voxel_size)
    return DenseField(geometry, np.ones(geometry.size))


def mask_from_config(spec: dict, seed: int = 0) -> VoxelMask:
    """Synthetic mask described by an input config section"""
    kind = spec.get('kind')
    size = spec.get('size')
    voxel = spec.get('voxel_size', 1.0)
    if kind == 'spheres':
        return sphere_packing_mask(size, spec.get('radius', 4.0), spec.get('porosity', 0.6),
                                   spec.get('seed', seed), voxel)
    if kind == 'disk_array':
        return periodic_disk_array_mask(size, spec.get('period', 16), spec.get('porosity', 0.6), voxel)
    if kind == 'rpc':
        return rpc_like_mask(size, spec.get('period', 32), spec.get('radius', 3.2),
                             spec.get('offset', 4), voxel)
    if kind == 'box':
        geometry = GridGeometry.isotropic(size, voxel)
        return VoxelMask(geometry.size, geometry.spacing, np.ones(geometry.size, dtype=bool))
    raise InputError(f"unknown synthetic geometry kind '{kind}'")
