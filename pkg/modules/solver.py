# modules/solver.py
"""Explicit FTCS reaction-diffusion on the sparse block grid.

Each step reads u, D and phi of the current level and writes u_next, then
swaps the two buffers. Faces toward inactive or out-of-phase neighbours
carry zero flux: the neighbour's u and D are replaced by the centre's.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.geometry import PhaseBand
from modules.sparse_grid import (
    CHUNK_EDGE, DIFFUSION, MASK, PHI, REACTION, U, U_NEXT, GridGeometry, SparseBlockGrid
)
from utils.errors import ConfigError, InputError, NumericalError, StabilityError

logger = logging.getLogger(__name__)

AXIS_NAMES = 'xyz'


def face_names(dims: int) -> List[str]:
    return [f"{AXIS_NAMES[axis]}{side}" for axis in range(dims) for side in '-+']


class ReactionKind(str, Enum):
    NONE = 'none'
    SURFACE_SINK = 'surface_sink'
    VOLUMETRIC = 'volumetric'


@dataclass
class ReactionSpec:
    """Pointwise reaction term.

    surface_sink: rate -k*u on nodes with |phi| <= w*h.
    volumetric: rate source(coords, t), or the reaction channel if no
    callable is given.
    """
    kind: ReactionKind = ReactionKind.NONE
    k: float = 0.0
    w: float = 1.0
    source: Optional[Callable[[np.ndarray, float], np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = ReactionKind(self.kind)
        if not self.k >= 0:
            raise InputError(f"reaction rate k must be >= 0, got {self.k}")
        if not self.w > 0:
            raise InputError(f"reaction band half-width w must be > 0, got {self.w}")

    def to_dict(self):
        return {'kind': self.kind.value, 'k': self.k, 'w': self.w,
                'source': None if self.source is None else getattr(self.source, '__name__', 'callable')}


@dataclass(frozen=True)
class FaceCondition:
    kind: str = 'no_flux'
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ('no_flux', 'dirichlet'):
            raise InputError(f"unknown face condition '{self.kind}'")

    @classmethod
    def no_flux(cls) -> 'FaceCondition':
        return cls('no_flux')

    @classmethod
    def dirichlet(cls, value: float) -> 'FaceCondition':
        return cls('dirichlet', float(value))


@dataclass
class SimulationConfig:
    dt: float
    n_steps: int
    phase_band: PhaseBand = field(default_factory=PhaseBand)
    boundary_epsilon: Optional[float] = None
    reaction: ReactionSpec = field(default_factory=ReactionSpec)
    outer_box_bc: Dict[str, FaceCondition] = field(default_factory=dict)
    record_every: int = 1
    force_dt: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InputError(f"dt must be a finite value > 0, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InputError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise InputError(f"record_every must be an integer >= 1, got {self.record_every}")
        if self.boundary_epsilon is not None and not self.boundary_epsilon >= 0:
            raise InputError(f"boundary_epsilon must be >= 0, got {self.boundary_epsilon}")
        for face in self.outer_box_bc:
            if face not in face_names(3):
                raise InputError(f"unknown box face '{face}'")
        self.n_steps = int(self.n_steps)
        self.record_every = int(self.record_every)

    def face(self, name: str) -> FaceCondition:
        return self.outer_box_bc.get(name, FaceCondition.no_flux())

    def to_dict(self):
        return {
            'dt': self.dt, 'n_steps': self.n_steps, 'phase_band': self.phase_band.to_dict(),
            'boundary_epsilon': self.boundary_epsilon, 'reaction': self.reaction.to_dict(),
            'outer_box_bc': {k: asdict(v) for k, v in sorted(self.outer_box_bc.items())},
            'record_every': self.record_every, 'force_dt': self.force_dt
        }


@dataclass
class StepDiagnostics:
    step: int
    time: float
    total_mass: float
    min_u: float
    max_u: float
    wall_time: float = 0.0

    CSV_COLUMNS = ('step', 'time', 'total_mass', 'min_u', 'max_u')

    def to_row(self) -> Dict[str, float]:
        return {column: getattr(self, column) for column in self.CSV_COLUMNS}

    def to_dict(self):
        return asdict(self)


def stability_dt(geometry: GridGeometry, D_max: float, sink_rate: float = 0.0) -> float:
    """Strict upper bound 1 / (2 D_max sum_axis h_axis^-2 + k) for explicit steps.

    k is the surface-sink rate; with it the diagonal coefficient of every
    update stays positive, so u stays non-negative.
    """
    if not D_max > 0:
        raise InputError(f"D_max must be > 0, got {D_max}")
    if not sink_rate >= 0:
        raise InputError(f"sink rate must be >= 0, got {sink_rate}")
    return 1.0 / (2.0 * D_max * sum(1.0 / (h * h) for h in geometry.spacing) + sink_rate)


def sink_rate(reaction: ReactionSpec) -> float:
    return reaction.k if reaction.kind is ReactionKind.SURFACE_SINK else 0.0


def apply_reaction(node, u, phi, spec: ReactionSpec, h: float, t: float = 0.0, channel_value=None):
    """Reaction rate at node(s); node holds physical coordinates"""
    if spec.kind is ReactionKind.NONE:
        rate = np.zeros_like(np.asarray(u, dtype=np.float64))
    elif spec.kind is ReactionKind.SURFACE_SINK:
        u = np.asarray(u)
        rate = np.where(np.abs(np.asarray(phi)) <= spec.w * h, -spec.k * u, 0.0)
    elif spec.source is not None:
        rate = np.asarray(spec.source(np.asarray(node), t))
    else:
        if channel_value is None:
            raise InputError("volumetric reaction without a source needs the reaction channel value")
        rate = np.asarray(channel_value)
    return float(rate) if np.ndim(rate) == 0 else rate


def total_mass(grid: SparseBlockGrid, name: str = U) -> float:
    """Discrete integral of a channel over active nodes, chunk-ordered, FP64"""
    if grid.chunk_count == 0:
        return 0.0
    values = np.where(grid.mask_array(), grid.channel(name), 0)
    per_chunk = values.reshape(grid.chunk_count, -1).sum(axis=1, dtype=np.float64)
    return float(np.sum(per_chunk[grid.ordered_slots()])) * grid.geometry.cell_volume


@dataclass
class _Partition:
    """Precomputed stencil coefficients for a contiguous range of chunks"""
    slots: np.ndarray
    update: np.ndarray
    walls: List[Tuple[np.ndarray, np.ndarray]]
    dhalf: List[Tuple[np.ndarray, np.ndarray]]
    dirichlet: List[Tuple[Optional[Tuple[np.ndarray, float]], Optional[Tuple[np.ndarray, float]]]]
    coords: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None


class DiffusionSolver:
    """Stateful FTCS integrator bound to one grid.

    Geometry-dependent coefficients (wall faces, half-point D, Dirichlet
    faces) are computed once; call refresh() after editing D or phi.
    """

    def __init__(self, grid: SparseBlockGrid, config: SimulationConfig, workers: int = 1,
                 start_time: float = 0.0, start_step: int = 0):
        for name in (U, U_NEXT, DIFFUSION, PHI):
            if name not in grid.properties:
                raise InputError(f"solver needs channel '{name}'")
        if grid.chunk_count == 0:
            raise InputError("grid has no active nodes")
        if config.reaction.kind is ReactionKind.VOLUMETRIC and config.reaction.source is None \
                and REACTION not in grid.properties:
            raise InputError(f"volumetric reaction needs channel '{REACTION}' or a source callable")
        for face in config.outer_box_bc:
            if face not in face_names(grid.dims):
                raise ConfigError(f"outer_box_bc.{face}", f"grid has only {grid.dims} axes")

        self.grid = grid
        self.config = config
        self.workers = max(1, int(workers))
        self.time = float(start_time)
        self._start = (float(start_time), int(start_step))
        self.step_index = int(start_step)
        self.dtype = grid.dtype
        eps = np.finfo(self.dtype).eps if config.boundary_epsilon is None else config.boundary_epsilon
        self.low_threshold = self.dtype.type(config.phase_band.b_low + eps)
        self.refresh()

    def refresh(self):
        grid, config = self.grid, self.config
        self.D_max = float(grid.active_values(DIFFUSION).max())
        if not self.D_max > 0:
            raise InputError("D channel has no positive value on active nodes")
        self.dt_bound = stability_dt(grid.geometry, self.D_max, sink_rate(config.reaction))
        if config.dt >= self.dt_bound:
            if not config.force_dt:
                raise StabilityError(config.dt, self.dt_bound)
            logger.warning(f"dt={config.dt:.6g} exceeds the stability bound {self.dt_bound:.6g} (forced)")

        self.phase_mask = grid.mask_array() & (grid.channel(PHI) > self.low_threshold)
        if not self.phase_mask.any():
            raise InputError("grid has no node inside the phase band")
        self._partitions = [self._prepare(slots) for slots in grid.partition_slots(self.workers)]
        self._order = grid.ordered_slots()
        if config.reaction.kind is ReactionKind.SURFACE_SINK and REACTION in grid.properties:
            band = np.abs(grid.channel(PHI)) <= config.reaction.w * grid.geometry.min_spacing
            grid.channel(REACTION)[...] = np.where(grid.mask_array() & band, -config.reaction.k, 0.0)

    def _prepare(self, slots: np.ndarray) -> _Partition:
        grid, config = self.grid, self.config
        dims = grid.dims
        blocks = grid.padded_blocks((DIFFUSION, PHI), slots)
        inner = (slice(None),) + (slice(1, CHUNK_EDGE + 1),) * dims
        D_c = blocks[DIFFUSION][inner]
        phi_c = blocks[PHI][inner]
        active_c = blocks[MASK][inner]
        keys = grid.keys_array()[slots]

        walls, dhalf, dirichlet = [], [], []
        for axis in range(dims):
            pair_walls, pair_dhalf, pair_dir = [], [], []
            for side, shift in ((0, slice(0, CHUNK_EDGE)), (1, slice(2, CHUNK_EDGE + 2))):
                neighbor = (slice(None),) + tuple(shift if a == axis else slice(1, CHUNK_EDGE + 1)
                                                  for a in range(dims))
                wall = ~blocks[MASK][neighbor] | (blocks[PHI][neighbor] <= self.low_threshold)
                D_nb = np.where(wall, D_c, blocks[DIFFUSION][neighbor])

                face = f"{AXIS_NAMES[axis]}{'-+'[side]}"
                condition = config.face(face)
                face_nodes = None
                if condition.kind == 'dirichlet':
                    shape = [1] * (dims + 1)
                    shape[axis + 1] = CHUNK_EDGE
                    along = keys[:, axis].reshape((-1,) + (1,) * dims) * CHUNK_EDGE \
                        + np.arange(CHUNK_EDGE).reshape(shape)
                    target = 0 if side == 0 else grid.geometry.size[axis] - 1
                    face_nodes = np.broadcast_to(along == target, D_c.shape)
                    wall = wall & ~face_nodes
                    D_nb = np.where(face_nodes, D_c, D_nb)
                    face_nodes = (face_nodes, self.dtype.type(condition.value))

                pair_walls.append(wall)
                pair_dhalf.append((D_c + D_nb) / self.dtype.type(2.0))
                pair_dir.append(face_nodes)
            walls.append(tuple(pair_walls))
            dhalf.append(tuple(pair_dhalf))
            dirichlet.append(tuple(pair_dir))

        partition = _Partition(slots=slots, update=active_c & (phi_c > self.low_threshold),
                               walls=walls, dhalf=dhalf, dirichlet=dirichlet)
        reaction = config.reaction
        if reaction.kind is ReactionKind.SURFACE_SINK:
            partition.phi = phi_c
        elif reaction.kind is ReactionKind.VOLUMETRIC and reaction.source is not None:
            offsets = np.stack(np.meshgrid(*[np.arange(CHUNK_EDGE)] * dims, indexing='ij'), axis=-1)
            indices = keys.reshape((-1,) + (1,) * dims + (dims,)) * CHUNK_EDGE + offsets
            partition.coords = grid.geometry.coordinates(indices)
        return partition

    def _advance(self, partition: _Partition):
        grid, config = self.grid, self.config
        dims = grid.dims
        dt = self.dtype.type(config.dt)
        u = grid.padded_blocks((U,), partition.slots)[U]
        inner = (slice(None),) + (slice(1, CHUNK_EDGE + 1),) * dims
        u_c = u[inner]

        acc = None
        for axis in range(dims):
            inv_h2 = self.dtype.type(1.0 / (grid.geometry.spacing[axis] ** 2))
            neighbors = []
            for side, shift in ((0, slice(0, CHUNK_EDGE)), (1, slice(2, CHUNK_EDGE + 2))):
                index = (slice(None),) + tuple(shift if a == axis else slice(1, CHUNK_EDGE + 1)
                                               for a in range(dims))
                u_nb = np.where(partition.walls[axis][side], u_c, u[index])
                fixed = partition.dirichlet[axis][side]
                if fixed is not None:
                    u_nb = np.where(fixed[0], fixed[1], u_nb)
                neighbors.append(u_nb)
            u_m, u_p = neighbors
            d_m, d_p = partition.dhalf[axis]
            term = inv_h2 * (d_p * (u_p - u_c) - d_m * (u_c - u_m))
            acc = term if acc is None else acc + term

        u_new = u_c + dt * acc
        reaction = config.reaction
        if reaction.kind is ReactionKind.SURFACE_SINK:
            rate = apply_reaction(None, u_c, partition.phi, reaction, grid.geometry.min_spacing)
            u_new = u_new + dt * rate.astype(self.dtype, copy=False)
        elif reaction.kind is ReactionKind.VOLUMETRIC:
            rate = apply_reaction(partition.coords, u_c, None, reaction, grid.geometry.min_spacing,
                                  self.time, grid.channel(REACTION)[partition.slots] if reaction.source is None else None)
            u_new = u_new + dt * np.asarray(rate, dtype=self.dtype)

        grid.channel(U_NEXT)[partition.slots] = np.where(partition.update, u_new, u_c)

    def diagnostics(self, wall_time: float = 0.0) -> StepDiagnostics:
        u = self.grid.channel(U)
        phase = self.phase_mask
        values = np.where(phase, u, 0).reshape(len(u), -1).sum(axis=1, dtype=np.float64)
        mass = float(np.sum(values[self._order])) * self.grid.geometry.cell_volume
        phase_values = u[phase]
        return StepDiagnostics(step=self.step_index, time=self.time, total_mass=mass,
                               min_u=float(phase_values.min()), max_u=float(phase_values.max()),
                               wall_time=wall_time)

    def step(self, pool: Optional[ThreadPoolExecutor] = None) -> StepDiagnostics:
        started = time.perf_counter()
        if pool is not None and len(self._partitions) > 1:
            list(pool.map(self._advance, self._partitions))
        else:
            for partition in self._partitions:
                self._advance(partition)

        u_next = self.grid.channel(U_NEXT)
        if not np.isfinite(u_next[self.phase_mask]).all():
            bad = np.argwhere(self.phase_mask & ~np.isfinite(u_next))[0]
            node = tuple(int(k) for k in self.grid.keys_array()[bad[0]] * CHUNK_EDGE + bad[1:])
            raise NumericalError(f"non-finite u at step {self.step_index + 1}, node {node}")

        self.grid.swap_channels(U, U_NEXT)
        self.step_index += 1
        self.time = self._start[0] + (self.step_index - self._start[1]) * self.config.dt
        return self.diagnostics(time.perf_counter() - started)

    def run(self, observers: Sequence = ()) -> List[StepDiagnostics]:
        """Advance n_steps; observers see the initial state and every record_every steps"""
        config = self.config
        history = [self.diagnostics()]
        for observer in observers:
            observer.observe(history[0], self.grid)

        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        try:
            for n in range(1, config.n_steps + 1):
                try:
                    diag = self.step(pool)
                except NumericalError:
                    raise
                except Exception as e:
                    raise NumericalError(f"step {self.step_index + 1} failed: {e}") from e
                if n % config.record_every == 0 or n == config.n_steps:
                    history.append(diag)
                    for observer in observers:
                        observer.observe(diag, self.grid)
                    logger.debug(f"Step {diag.step}: mass {diag.total_mass:.17g}",
                                 extra={'step': diag.step, 'total_mass': diag.total_mass})
        finally:
            if pool is not None:
                pool.shutdown()
            for observer in observers:
                observer.close()

        final = history[-1]
        drift = (final.total_mass - history[0].total_mass) / history[0].total_mass \
            if history[0].total_mass else 0.0
        logger.info(f"Completed {config.n_steps} steps to t={final.time:.6g} "
                    f"(relative mass change {drift:.3e})")
        return history


def ftcs_step(grid: SparseBlockGrid, config: SimulationConfig, workers: int = 1,
              start_time: float = 0.0, start_step: int = 0) -> Tuple[SparseBlockGrid, StepDiagnostics]:
    """Advance the grid by one explicit step"""
    solver = DiffusionSolver(grid, config, workers, start_time, start_step)
    return grid, solver.step()


def run_simulation(grid: SparseBlockGrid, config: SimulationConfig, observers: Sequence = (),
                   workers: int = 1) -> Tuple[SparseBlockGrid, List[StepDiagnostics]]:
    solver = DiffusionSolver(grid, config, workers)
    return grid, solver.run(observers)


# ─── Initial conditions and diagnostics ──────────────────────────────────────

def set_initial_condition(grid: SparseBlockGrid, value: Union[float, Callable[[np.ndarray], np.ndarray]],
                          name: str = U) -> SparseBlockGrid:
    """Write a constant or a function of node coordinates to a channel"""
    if callable(value):
        values = np.asarray(value(grid.active_coordinates()), dtype=np.float64)
    else:
        values = float(value)
    grid.set_active_values(name, values)
    return grid


def sphere_initial_condition(center: Sequence[float], radius: float, inside: float = 1.0,
                             outside: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """Background value plus a different value inside a ball"""
    center = np.asarray(center, dtype=np.float64)

    def initial(coords):
        return np.where(np.linalg.norm(coords - center, axis=-1) <= radius, inside, outside)

    return initial


def front_position(grid: SparseBlockGrid, axis: int, threshold: float = 0.5,
                   from_high_side: bool = False) -> int:
    """Farthest node index along axis reached by u >= threshold; -1 if none"""
    indices = grid.active_indices()
    reached = grid.active_values(U) >= threshold
    if not reached.any():
        return -1
    along = indices[reached, axis]
    if from_high_side:
        return int(grid.geometry.size[axis] - 1 - along.min())
    return int(along.max())
