# modules/analysis.py
import logging
import math
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from modules.geometry import PhaseBand, fill_uniform_diffusion
from modules.monitoring import RegionIntegrator
from modules.solver import DiffusionSolver, SimulationConfig, stability_dt
from modules.sparse_grid import DIFFUSION, PHI, U, GridGeometry, SparseBlockGrid
from utils.errors import AnalysisError, InputError

logger = logging.getLogger(__name__)

DEFAULT_BETA = 1.65


@dataclass(frozen=True)
class BleachRegion:
    """Axis-aligned box of node indices, lo inclusive, hi exclusive"""
    lo: Tuple[int, ...]
    hi: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'lo', tuple(int(v) for v in self.lo))
        object.__setattr__(self, 'hi', tuple(int(v) for v in self.hi))
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InputError(f"bleach region needs lo < hi per axis, got {self.lo}..{self.hi}")

    def contains(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        return np.all((indices >= np.asarray(self.lo)) & (indices < np.asarray(self.hi)), axis=-1)

    def to_dict(self):
        return {'lo': list(self.lo), 'hi': list(self.hi)}


def default_bleach_region(geometry: GridGeometry, fraction: float = 0.1) -> BleachRegion:
    """Central box spanning `fraction` of the node count per axis (at least one node)"""
    if not 0 < fraction <= 1:
        raise InputError(f"bleach fraction must lie in (0, 1], got {fraction}")
    width = [max(1, int(round(fraction * s))) for s in geometry.size]
    lo = [(s - w) // 2 for s, w in zip(geometry.size, width)]
    return BleachRegion(tuple(lo), tuple(l + w for l, w in zip(lo, width)))


@dataclass
class FrapSchedule:
    """Recording plan: run to t_final, keep about n_samples curve points.

    dt defaults to safety * stability bound, so it scales as 1/D.
    """
    t_final: float
    n_samples: int = 200
    dt: Optional[float] = None
    safety: float = 0.45

    def __post_init__(self):
        if not self.t_final > 0:
            raise InputError(f"t_final must be > 0, got {self.t_final}")
        if self.n_samples < 2:
            raise InputError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.dt is not None and not self.dt > 0:
            raise InputError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.safety < 1:
            raise InputError(f"safety must lie in (0, 1), got {self.safety}")


@dataclass
class FrapExperiment:
    """Bleach region plus recovery fraction sampled at increasing times"""
    bleach_region: BleachRegion
    D_molecular: float
    times: np.ndarray
    recovery: np.ndarray
    equilibrium_mass: float = 0.0
    region_node_count: int = 0
    phase_node_count: int = 0
    dt: float = 0.0

    @property
    def curve(self) -> List[Tuple[float, float]]:
        return list(zip(self.times.tolist(), self.recovery.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'time': self.times, 'recovery_fraction': self.recovery})

    def to_dict(self):
        return {
            'bleach_region': self.bleach_region.to_dict(),
            'D_molecular': self.D_molecular,
            'equilibrium_mass': self.equilibrium_mass,
            'region_node_count': self.region_node_count,
            'phase_node_count': self.phase_node_count,
            'dt': self.dt,
            'samples': len(self.times)
        }


@dataclass
class TortuosityResult:
    D_eff: float
    tau_d: float
    fit_residual: float
    D_molecular: float
    bracket_edge: bool = False
    evaluations: int = 0
    search_interval: Tuple[float, float] = (0.0, 0.0)

    def to_dict(self):
        d = asdict(self)
        d['search_interval'] = list(self.search_interval)
        return d


def _phase_mask(grid: SparseBlockGrid, band: PhaseBand) -> np.ndarray:
    eps = np.finfo(grid.dtype).eps
    return grid.mask_array() & (grid.channel(PHI) > grid.dtype.type(band.b_low + eps))


def default_schedule(geometry: GridGeometry, D_molecular: float, n_samples: int = 200) -> FrapSchedule:
    """Run long enough to diffuse over a quarter of the shortest box edge"""
    length = 0.25 * min(e for e in geometry.extent if e > 0)
    return FrapSchedule(t_final=length * length / D_molecular, n_samples=n_samples)


def run_frap(grid: SparseBlockGrid, bleach_region: BleachRegion, D_molecular: float,
             schedule: Optional[FrapSchedule] = None, workers: int = 1,
             band: PhaseBand = PhaseBand(), use_grid_diffusion: bool = False) -> FrapExperiment:
    """Bleach a box in a sealed domain and record its mass recovery.

    u starts at 1 in the phase and 0 inside the box. The recorded region
    mass is divided by the box's equilibrium share of the total mass,
    so the recovery fraction tends to 1.
    """
    if not D_molecular > 0:
        raise InputError(f"D_molecular must be > 0, got {D_molecular}")
    if len(bleach_region.lo) != grid.dims:
        raise InputError(f"bleach region has {len(bleach_region.lo)} axes, grid has {grid.dims}")
    schedule = schedule or default_schedule(grid.geometry, D_molecular)

    work = grid.copy()
    if not use_grid_diffusion:
        fill_uniform_diffusion(work, D_molecular)

    phase = _phase_mask(work, band)
    integrator = RegionIntegrator.for_box(work, bleach_region.contains, phase)
    n_region, n_phase = integrator.node_count, int(phase.sum())
    if n_region == 0:
        raise AnalysisError(f"bleach region {bleach_region.lo}..{bleach_region.hi} contains no active phase node")
    if n_region == n_phase:
        raise AnalysisError("bleach region covers whole phase")

    work.channel(U)[...] = np.where(phase & ~integrator.region_mask, 1.0, 0.0)

    D_max = float(work.active_values(DIFFUSION).max())
    dt = schedule.dt or schedule.safety * stability_dt(work.geometry, D_max)
    n_steps = max(1, math.ceil(schedule.t_final / dt))
    record_every = max(1, n_steps // schedule.n_samples)
    config = SimulationConfig(dt=dt, n_steps=n_steps, phase_band=band, record_every=record_every)

    history = DiffusionSolver(work, config, workers).run([integrator])
    equilibrium = history[0].total_mass * n_region / n_phase
    times = np.array([s.time for s in integrator.samples])
    recovery = np.array([s.mass for s in integrator.samples]) / equilibrium

    logger.info(f"FRAP with D={D_molecular:.6g}: {n_steps} steps of dt={dt:.3e}, "
                f"final recovery {recovery[-1]:.4f}")
    return FrapExperiment(bleach_region=bleach_region, D_molecular=D_molecular, times=times,
                          recovery=recovery, equilibrium_mass=equilibrium,
                          region_node_count=n_region, phase_node_count=n_phase, dt=dt)


def recovery_curve_interpolant(experiment: FrapExperiment) -> Callable[[np.ndarray], np.ndarray]:
    """Piecewise-linear recovery fraction as a function of time"""
    times, recovery = experiment.times, experiment.recovery
    return lambda t: np.interp(t, times, recovery)


class TortuosityAnalyzer:
    """Fits the free-space D whose FRAP curve matches a porous reference"""

    def __init__(self, reference: FrapExperiment, candidate_grid: SparseBlockGrid,
                 workers: int = 1, n_samples: Optional[int] = None):
        region = reference.bleach_region
        if len(region.hi) != candidate_grid.dims or \
                any(h > s for h, s in zip(region.hi, candidate_grid.geometry.size)):
            raise InputError("bleach region does not fit inside the candidate geometry")
        self.reference = reference
        self.candidate_grid = candidate_grid
        self.workers = workers
        self.n_samples = n_samples or max(200, len(reference.times))
        self._cache: Dict[float, float] = {}

    def candidate(self, D: float) -> FrapExperiment:
        schedule = FrapSchedule(t_final=float(self.reference.times[-1]), n_samples=self.n_samples)
        return run_frap(self.candidate_grid, self.reference.bleach_region, D, schedule, self.workers)

    def objective(self, D: float) -> float:
        """Sum over reference samples of squared recovery differences"""
        D = float(D)
        if D not in self._cache:
            curve = recovery_curve_interpolant(self.candidate(D))
            residual = curve(self.reference.times) - self.reference.recovery
            self._cache[D] = float(np.sum(residual * residual))
            logger.debug(f"Objective at D={D:.6g}: {self._cache[D]:.6e}")
        return self._cache[D]

    @property
    def evaluations(self) -> int:
        return len(self._cache)

    def fit(self, search_interval: Tuple[float, float], rtol: float = 1e-3) -> TortuosityResult:
        lo, hi = (float(v) for v in search_interval)
        if not 0 < lo < hi:
            raise InputError(f"search interval needs 0 < lo < hi, got ({lo}, {hi})")
        # absolute tolerance scaled by the smallest admissible D_eff
        xatol = rtol * lo
        result = minimize_scalar(self.objective, bounds=(lo, hi), method='bounded',
                                 options={'xatol': xatol})
        D_eff = float(result.x)
        tau_d = self.reference.D_molecular / D_eff
        assert math.isclose(tau_d * D_eff, self.reference.D_molecular, rel_tol=1e-12)

        at_edge = D_eff - lo <= 2 * xatol or hi - D_eff <= 2 * xatol
        if at_edge:
            logger.warning(f"Fitted D_eff={D_eff:.6g} lies at the edge of ({lo}, {hi}); widen the interval")
        logger.info(f"Fitted D_eff={D_eff:.6g}, tau_d={tau_d:.4f} after {self.evaluations} FRAP runs")
        return TortuosityResult(D_eff=D_eff, tau_d=tau_d, fit_residual=self.objective(D_eff),
                                D_molecular=self.reference.D_molecular, bracket_edge=at_edge,
                                evaluations=self.evaluations, search_interval=(lo, hi))

    def ladder(self, center: float, n: int = 9, spread: float = 0.2) -> List[Tuple[float, float]]:
        """Objective on n evenly spaced D values within center*(1 +/- spread)"""
        values = np.linspace(center * (1 - spread), center * (1 + spread), n)
        return [(float(D), self.objective(D)) for D in values]


def fit_effective_D(reference: FrapExperiment, candidate_grid: SparseBlockGrid,
                    search_interval: Tuple[float, float] = (0.05, 2.0), workers: int = 1,
                    rtol: float = 1e-3) -> TortuosityResult:
    return TortuosityAnalyzer(reference, candidate_grid, workers).fit(search_interval, rtol)


def objective_ladder(reference: FrapExperiment, candidate_grid: SparseBlockGrid, center: float,
                     n: int = 9, spread: float = 0.2, workers: int = 1) -> List[Tuple[float, float]]:
    return TortuosityAnalyzer(reference, candidate_grid, workers).ladder(center, n, spread)


def is_unimodal(values: Sequence[float]) -> bool:
    """Non-increasing then non-decreasing"""
    values = list(values)
    turn = int(np.argmin(values))
    return all(a >= b for a, b in zip(values[:turn], values[1:turn + 1])) and \
        all(a <= b for a, b in zip(values[turn:], values[turn + 1:]))


# ─── Porosity-tortuosity correlations ────────────────────────────────────────

def tortuosity_power_law(psi: float, N: float) -> float:
    """tau_d = psi^-N"""
    if not psi > 0:
        raise InputError(f"porosity must be > 0 for the power law, got {psi}")
    return psi ** (-N)


def tortuosity_linear(psi: float, beta: float = DEFAULT_BETA) -> float:
    """tau_d = psi + beta (1 - psi)"""
    return psi + beta * (1.0 - psi)
