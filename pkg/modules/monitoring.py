# modules/monitoring.py
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from modules.solver import StepDiagnostics
from modules.sparse_grid import DIFFUSION, PHI, U, SparseBlockGrid
from utils.snapshots import write_sparse_snapshot
from utils.vtk import write_grid_vtk

logger = logging.getLogger(__name__)


class SimulationObserver(ABC):
    """Receives the grid state at every recorded step of a run"""

    def __init__(self, name: str):
        self.name = name

    @abstractmethod
    def observe(self, diagnostics: StepDiagnostics, grid: SparseBlockGrid) -> None:
        pass

    def close(self) -> None:
        """Called once after the last step"""


class MassRecorder(SimulationObserver):
    """Keeps the diagnostics time series"""

    def __init__(self):
        super().__init__('mass')
        self.records: List[StepDiagnostics] = []

    def observe(self, diagnostics, grid):
        self.records.append(diagnostics)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([d.to_row() for d in self.records], columns=list(StepDiagnostics.CSV_COLUMNS))

    def relative_drift(self) -> float:
        """Relative change of total mass between first and last record"""
        if len(self.records) < 2 or self.records[0].total_mass == 0:
            return 0.0
        first = self.records[0].total_mass
        return (self.records[-1].total_mass - first) / first


@dataclass
class RegionSample:
    step: int
    time: float
    mass: float

    def to_dict(self):
        return asdict(self)


class RegionIntegrator(SimulationObserver):
    """Integrates u over a fixed set of nodes (a FRAP bleach box)"""

    def __init__(self, region_mask: np.ndarray, name: str = 'region'):
        super().__init__(name)
        self.region_mask = region_mask
        self.samples: List[RegionSample] = []

    @classmethod
    def for_box(cls, grid: SparseBlockGrid, contains: Callable[[np.ndarray], np.ndarray],
                phase_mask: Optional[np.ndarray] = None) -> 'RegionIntegrator':
        """Select nodes by a predicate over global node indices (chunk layout)"""
        mask = np.zeros(grid.mask_array().shape, dtype=bool)
        mask[grid.mask_array()] = contains(grid.active_indices())
        if phase_mask is not None:
            mask &= phase_mask
        return cls(mask)

    @property
    def node_count(self) -> int:
        return int(self.region_mask.sum())

    def observe(self, diagnostics, grid):
        values = np.where(self.region_mask, grid.channel(U), 0)
        per_chunk = values.reshape(len(values), -1).sum(axis=1, dtype=np.float64)
        mass = float(np.sum(per_chunk[grid.ordered_slots()])) * grid.geometry.cell_volume
        self.samples.append(RegionSample(diagnostics.step, diagnostics.time, mass))


class VtkSeriesWriter(SimulationObserver):
    """Writes <prefix>_<step>.vtk whenever step is a multiple of `every`"""

    def __init__(self, directory, every: int, prefix: str = 'u',
                 channels: Sequence[str] = (U, DIFFUSION, PHI), blank: float = np.nan):
        super().__init__('vtk')
        self.directory = Path(directory)
        self.every = every
        self.prefix = prefix
        self.channels = tuple(channels)
        self.blank = blank
        self.written: List[Path] = []

    def observe(self, diagnostics, grid):
        if self.every <= 0 or diagnostics.step % self.every:
            return
        path = self.directory / f'{self.prefix}_{diagnostics.step:06d}.vtk'
        write_grid_vtk(grid, path, self.channels, self.blank,
                       title=f'step {diagnostics.step} t={diagnostics.time:.17g}')
        self.written.append(path)
        logger.debug(f"Wrote {path}")


class SnapshotWriter(SimulationObserver):
    """Writes the last observed state as a sparse snapshot on close"""

    def __init__(self, path):
        super().__init__('snapshot')
        self.path = Path(path)
        self._grid: Optional[SparseBlockGrid] = None
        self.bytes_written = 0

    def observe(self, diagnostics, grid):
        self._grid = grid

    def close(self):
        if self._grid is not None:
            self.bytes_written = write_sparse_snapshot(self._grid, self.path)
