# modules/verification.py
"""Convergence studies against analytic solutions.

The solver case is a manufactured radial solution on the unit disk with
a no-flux rim; the redistancing case compares against exact distances to
a sphere or circle.
"""
import logging
import math
from dataclasses import dataclass, asdict, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules.geometry import PhaseBand, build_sparse_grid, fill_uniform_diffusion
from modules.levelset import DenseField, LevelSetOptions, ball_sdf, band_error_norms, sussman_redistance
from modules.solver import (
    DiffusionSolver, ReactionKind, ReactionSpec, SimulationConfig, set_initial_condition
)
from modules.sparse_grid import U, GridGeometry
from utils.errors import InputError
from utils.helpers import fit_loglog_slope

logger = logging.getLogger(__name__)

DISK_BOX_HALF_WIDTH = 1.28
REDISTANCE_BOX_HALF_WIDTH = 1.6

SOLVER_SLOPE_WINDOW = (1.2, 1.8)
REDISTANCE_SLOPE_WINDOW = (0.75, 1.25)


@dataclass(frozen=True)
class ManufacturedCase:
    """U(r, t) = (r^3/3 - r^4/4) exp(-B t) on a disk of radius R"""
    B: float = 20.0
    R: float = 1.0
    D: float = 1.0
    t_final: float = 0.025

    def __post_init__(self):
        if not self.B > 0:
            raise InputError(f"B must be > 0, got {self.B}")
        if not self.R > 0:
            raise InputError(f"R must be > 0, got {self.R}")
        if not self.D > 0:
            raise InputError(f"D must be > 0, got {self.D}")
        if not self.t_final >= 0:
            raise InputError(f"t_final must be >= 0, got {self.t_final}")


def exact_solution(r, t, case: ManufacturedCase = ManufacturedCase()):
    r = np.asarray(r, dtype=np.float64)
    value = (r ** 3 / 3.0 - r ** 4 / 4.0) * np.exp(-case.B * t)
    return float(value) if value.ndim == 0 else value


def source_term(r, t, case: ManufacturedCase = ManufacturedCase()):
    """f = dU/dt - D laplacian(U) in two dimensions"""
    r = np.asarray(r, dtype=np.float64)
    B, D = case.B, case.D
    value = (B / 4.0 * r ** 4 - B / 3.0 * r ** 3 + D * (4.0 * r ** 2 - 3.0 * r)) * np.exp(-B * t)
    return float(value) if value.ndim == 0 else value


@dataclass
class ConvergenceReport:
    kind: str
    resolutions: List[int]
    spacings: List[float]
    L2_errors: List[float]
    Linf_errors: List[float]
    fitted_slopes: Optional[Tuple[float, float]] = None
    non_monotone: bool = False
    warnings: List[str] = field(default_factory=list)

    def finalize(self) -> 'ConvergenceReport':
        """Fit slopes (L2, Linf) and flag irregular error sequences"""
        if len(self.resolutions) < 2:
            self.warnings.append("a single resolution cannot be fitted")
        elif min(self.L2_errors + self.Linf_errors) <= 0:
            self.warnings.append("zero error at some resolution; slopes are undefined")
        else:
            self.fitted_slopes = (fit_loglog_slope(self.spacings, self.L2_errors),
                                  fit_loglog_slope(self.spacings, self.Linf_errors))
        if len(self.resolutions) >= 3:
            for errors in (self.L2_errors, self.Linf_errors):
                if any(b >= a for a, b in zip(errors, errors[1:])):
                    self.non_monotone = True
            if self.non_monotone:
                self.warnings.append("error does not decrease monotonically with resolution")
        for warning in self.warnings:
            logger.warning(f"{self.kind} convergence: {warning}")
        return self

    def passes(self, window: Tuple[float, float]) -> bool:
        if self.fitted_slopes is None:
            return False
        lo, hi = window
        return all(lo <= s <= hi for s in self.fitted_slopes)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'resolution': self.resolutions, 'h': self.spacings,
                             'L2': self.L2_errors, 'Linf': self.Linf_errors})

    def to_dict(self):
        d = asdict(self)
        d['fitted_slopes'] = list(self.fitted_slopes) if self.fitted_slopes else None
        return d


def _check_resolutions(resolutions: Sequence[int], minimum: int) -> List[int]:
    resolutions = [int(n) for n in resolutions]
    if not resolutions:
        raise InputError("at least one resolution is required")
    if any(n < minimum for n in resolutions):
        raise InputError(f"resolutions must be >= {minimum}, got {resolutions}")
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise InputError(f"resolutions must be strictly ascending, got {resolutions}")
    return resolutions


def disk_geometry(n: int) -> GridGeometry:
    """n x n cell-centred nodes on [-1.28, 1.28]^2"""
    h = 2.0 * DISK_BOX_HALF_WIDTH / n
    return GridGeometry.isotropic((n, n), h, origin=(-DISK_BOX_HALF_WIDTH + h / 2,) * 2)


def disk_time_step(h: float, t_final: float) -> Tuple[float, int]:
    """(dt, n_steps) landing exactly on t_final with dt <= h^2/8"""
    n_steps = math.ceil(t_final / (h * h / 8.0))
    return (t_final / n_steps if n_steps else 0.0), n_steps


def disk_errors(n: int, case: ManufacturedCase = ManufacturedCase(), workers: int = 1,
                start_at_final: bool = False, dtype=np.float64) -> Tuple[float, float, float]:
    """(h, L2, Linf) of the manufactured disk run at one resolution"""
    geometry = disk_geometry(n)
    h = geometry.min_spacing
    sdf = DenseField.from_function(geometry, ball_sdf((0.0, 0.0), case.R))
    grid = build_sparse_grid(sdf, PhaseBand(), dtype=dtype)
    fill_uniform_diffusion(grid, case.D)

    def radius(coords):
        return np.linalg.norm(coords, axis=-1)

    t0 = case.t_final if start_at_final else 0.0
    set_initial_condition(grid, lambda x: exact_solution(radius(x), t0, case))

    dt, n_steps = (0.0, 0) if start_at_final else disk_time_step(h, case.t_final)
    if n_steps:
        reaction = ReactionSpec(kind=ReactionKind.VOLUMETRIC,
                                source=lambda x, t: source_term(radius(x), t, case))
        config = SimulationConfig(dt=dt, n_steps=n_steps, reaction=reaction, record_every=n_steps)
        DiffusionSolver(grid, config, workers).run()

    exact = exact_solution(radius(grid.active_coordinates()), case.t_final, case)
    errors = np.abs(grid.active_values(U) - exact)
    return h, float(np.sqrt(np.mean(errors ** 2))), float(errors.max())


def run_disk_convergence(resolutions: Sequence[int], case: ManufacturedCase = ManufacturedCase(),
                         workers: int = 1, start_at_final: bool = False) -> ConvergenceReport:
    """Solver errors at t_final for each resolution with dt <= h^2/8"""
    resolutions = _check_resolutions(resolutions, 32)
    report = ConvergenceReport('disk', resolutions, [], [], [])
    for n in resolutions:
        h, l2, linf = disk_errors(n, case, workers, start_at_final)
        report.spacings.append(h)
        report.L2_errors.append(l2)
        report.Linf_errors.append(linf)
        logger.info(f"Disk N={n}: h={h:.4g} L2={l2:.4e} Linf={linf:.4e}")
    return report.finalize()


def redistance_geometry(n: int, shape: str) -> GridGeometry:
    """n nodes per axis on [-1.6, 1.6]^dims including both faces"""
    dims = {'ball3d': 3, 'disk2d': 2}.get(shape)
    if dims is None:
        raise InputError(f"unknown shape '{shape}' (expected ball3d or disk2d)")
    h = 2.0 * REDISTANCE_BOX_HALF_WIDTH / (n - 1)
    return GridGeometry.isotropic((n,) * dims, h, origin=(-REDISTANCE_BOX_HALF_WIDTH,) * dims)


def run_redistance_convergence(resolutions: Sequence[int], shape: str = 'ball3d',
                               opts: Optional[LevelSetOptions] = None, assume_exact: bool = False,
                               workers: int = 1) -> ConvergenceReport:
    """Band errors of the redistanced unit sphere/circle indicator per resolution"""
    resolutions = _check_resolutions(resolutions, 8)
    opts = opts or LevelSetOptions()
    exact = ball_sdf(np.zeros(3 if shape == 'ball3d' else 2), 1.0)
    report = ConvergenceReport(f'redistance-{shape}', resolutions, [], [], [])
    for n in resolutions:
        geometry = redistance_geometry(n, shape)
        field_in = DenseField.from_function(geometry, exact)
        if not assume_exact:
            field_in = DenseField(geometry, np.where(field_in.data > 0, 1.0, -1.0))
        phi, diagnostics = sussman_redistance(field_in, opts, initial_is_sdf=assume_exact, workers=workers)
        norms = band_error_norms(phi, exact, opts.band_width_for_error)
        report.spacings.append(geometry.min_spacing)
        report.L2_errors.append(norms['L2'])
        report.Linf_errors.append(norms['Linf'])
        logger.info(f"Redistance {shape} N={n}: {diagnostics.iterations} iterations, "
                    f"L2={norms['L2']:.4e} Linf={norms['Linf']:.4e}")
    return report.finalize()
