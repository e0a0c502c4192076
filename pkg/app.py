# ───────────────────────────────────────────────────────── app.py ───────────
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from config.pipeline import PipelineConfig, load_pipeline_config
from config.settings import get_config
from data_sources import mask_source_for
from modules.analysis import (
    BleachRegion, FrapSchedule, default_bleach_region, default_schedule, fit_effective_D, run_frap
)
from modules.geometry import (
    DiffusionProfile, VoxelMask, build_sparse_grid, fill_uniform_diffusion, filter_thin_features,
    mask_from_config, mask_to_indicator, phase_phi_min, populate_diffusion_channel, porosity
)
from modules.levelset import DenseField, LevelSetOptions, RedistanceDiagnostics, sussman_redistance
from modules.monitoring import MassRecorder, SnapshotWriter, VtkSeriesWriter
from modules.reporting import RunReport, write_convergence_csvs, write_diagnostics_csv, write_frap_csv, write_json
from modules.solver import (
    DiffusionSolver, SimulationConfig, set_initial_condition, sink_rate, sphere_initial_condition, stability_dt
)
from modules.sparse_grid import DIFFUSION, SparseBlockGrid
from modules.verification import (
    REDISTANCE_SLOPE_WINDOW, SOLVER_SLOPE_WINDOW, run_disk_convergence, run_redistance_convergence
)
from utils.errors import InputError, PipelineError
from utils.helpers import format_bytes
from utils.log_setup import configure_logging
from utils.snapshots import (
    dense_snapshot_nbytes, describe_snapshot, read_dense_snapshot,
    write_dense_snapshot, write_sparse_snapshot
)

logger = logging.getLogger('app')

DEFAULT_RESOLUTIONS = {'disk': [32, 64, 128], 'ball3d': [16, 32, 64], 'disk2d': [32, 64, 128]}


# ─── Geometry helpers ───────────────────────────────────────────────────────
def load_mask(config: PipelineConfig) -> VoxelMask:
    source = config.input
    if source.kind in ('raw', 'pgm'):
        return mask_source_for(source.path, source.kind, source.voxel_size).load()
    return mask_from_config(source.synthetic)


def require_interface(indicator: DenseField):
    positive = indicator.data > 0
    if positive.all() or not positive.any():
        raise InputError("no interface found: the mask contains a single phase")


def redistance_mask(mask: VoxelMask, options: LevelSetOptions, apply_filter: bool, min_thickness: int,
                    workers: int) -> Tuple[DenseField, RedistanceDiagnostics]:
    indicator = mask_to_indicator(mask)
    if apply_filter:
        indicator = filter_thin_features(indicator, min_thickness)
    require_interface(indicator)
    return sussman_redistance(indicator, options, workers=workers)


def build_sdf(config: PipelineConfig, workers: int) -> Tuple[DenseField, Optional[RedistanceDiagnostics]]:
    """SDF for the configured input: read, constant (free box) or redistanced"""
    source = config.input
    if source.kind == 'sdf':
        return read_dense_snapshot(source.path), None
    mask = load_mask(config)
    if source.kind == 'box':
        return DenseField(mask.geometry, np.ones(mask.size)), None
    return redistance_mask(mask, config.levelset, source.filter_thin_features,
                           source.min_thickness_cells, workers)


def diffusion_profile(config: PipelineConfig, grid: SparseBlockGrid) -> DiffusionProfile:
    settings = config.diffusion
    h = grid.geometry.min_spacing
    gamma2 = settings.gamma2
    if gamma2 is None:
        gamma2 = 4.0 * h if settings.literal_gamma2 else 4.0 / h
    gamma1 = settings.gamma1
    if gamma1 is None:
        gamma1 = -gamma2 * phase_phi_min(grid, config.phase_band)
    return DiffusionProfile(D_min=settings.D_min, D_max=settings.D_max, gamma1=gamma1, gamma2=gamma2)


def build_grid(config: PipelineConfig, sdf: DenseField) -> SparseBlockGrid:
    grid = build_sparse_grid(sdf, config.phase_band, dtype=config.precision)
    if config.diffusion.mode == 'uniform':
        fill_uniform_diffusion(grid, config.diffusion.value)
    else:
        populate_diffusion_channel(grid, diffusion_profile(config, grid))
    return grid


def apply_initial_condition(config: PipelineConfig, grid: SparseBlockGrid):
    condition = config.simulation.initial_condition
    if condition.kind == 'sphere':
        if len(condition.center) != grid.dims:
            raise InputError(f"initial condition center needs {grid.dims} coordinates")
        set_initial_condition(grid, sphere_initial_condition(condition.center, condition.radius,
                                                             condition.inside, condition.value))
    else:
        set_initial_condition(grid, condition.value if condition.kind == 'uniform' else 0.0)


# ─── Application ────────────────────────────────────────────────────────────
class PipelineApp:
    """Runs one subcommand with process settings and an optional pipeline config"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.settings = get_config()
        ceiling = self.settings.THREADS
        self.workers = min(args.threads, ceiling) if args.threads else ceiling
        self.output_dir = Path(args.output or self.settings.OUTPUT_DIR)

    def load_config(self, check_paths: bool = True) -> PipelineConfig:
        raw_source = self.args.config
        overrides = list(self.args.set or [])
        if raw_source is None and not overrides:
            raise InputError("this command needs --config or --set input.kind=...")
        config = load_pipeline_config(raw_source, overrides, check_paths)
        if 'precision' not in config.raw:
            config.precision = self.settings.PRECISION
        if self.args.output:
            config.outputs.directory = self.args.output
        self.output_dir = Path(config.outputs.directory)
        return config

    def report(self, command: str, config: dict, results: dict, outputs: List[Path]) -> RunReport:
        report = RunReport.create(command, config, results)
        report.outputs = [str(p) for p in outputs]
        write_json(report, self.output_dir / f'{command}_run.json')
        print(json.dumps(results, indent=2, sort_keys=True, default=str))
        return report

    # ─── redistance ─────────────────────────────────────────────────────────
    def redistance(self) -> int:
        args = self.args
        options = LevelSetOptions()
        apply_filter, min_thickness = not args.no_filter, 2
        if args.mask:
            path = Path(args.mask)
            config_dict = {'mask': str(path), 'assume_sdf': args.assume_sdf}
        else:
            config = self.load_config()
            options = config.levelset
            apply_filter = apply_filter and config.input.filter_thin_features
            min_thickness = config.input.min_thickness_cells
            path = Path(config.input.path) if config.input.path else None
            config_dict = config.to_dict()

        if args.assume_sdf:
            if path is None:
                raise InputError("--assume-sdf needs an SDF snapshot via --mask or input.path")
            sdf, diagnostics = sussman_redistance(read_dense_snapshot(path), options,
                                                  initial_is_sdf=True, workers=self.workers)
        else:
            mask = mask_source_for(path).load() if args.mask else load_mask(config)
            sdf, diagnostics = redistance_mask(mask, options, apply_filter, min_thickness, self.workers)

        sdf_path = self.output_dir / (config.outputs.sdf_snapshot if not args.mask else 'sdf.dnsf')
        write_dense_snapshot(sdf, sdf_path)
        diag_path = write_json(diagnostics, self.output_dir / 'redistance.json')
        self.report('redistance', config_dict, diagnostics.to_dict(), [sdf_path, diag_path])
        return 0

    # ─── build-grid ─────────────────────────────────────────────────────────
    def build_grid(self) -> int:
        if self.args.sdf:
            self.args.set = list(self.args.set or []) + ['input.kind=sdf', f'input.path={Path(self.args.sdf).resolve()}']
        config = self.load_config()
        sdf, _ = build_sdf(config, self.workers)

        grid = build_grid(config, sdf)
        stats = grid.occupancy_stats()
        grid_path = self.output_dir / config.outputs.grid_snapshot
        written = write_sparse_snapshot(grid, grid_path)
        dense = dense_snapshot_nbytes(grid.geometry, len(grid.properties), grid.dtype.itemsize)
        results = {'occupancy': stats.to_dict(), 'snapshot_bytes': written, 'dense_snapshot_bytes': dense,
                   'D_range': [float(grid.active_values(DIFFUSION).min()),
                               float(grid.active_values(DIFFUSION).max())]}
        self.report('build-grid', config.to_dict(), results, [grid_path])
        return 0

    # ─── simulate ───────────────────────────────────────────────────────────
    def simulate(self) -> int:
        config = self.load_config()
        settings = config.simulation
        sdf, _ = build_sdf(config, self.workers)
        grid = build_grid(config, sdf)
        apply_initial_condition(config, grid)

        D_max = float(grid.active_values(DIFFUSION).max())
        bound = stability_dt(grid.geometry, D_max, sink_rate(settings.reaction))
        dt = settings.dt if settings.dt is not None else settings.dt_safety * bound
        n_steps = self.args.steps if self.args.steps is not None else settings.n_steps
        sim_config = SimulationConfig(
            dt=dt, n_steps=max(n_steps, 1), phase_band=config.phase_band,
            boundary_epsilon=settings.boundary_epsilon, reaction=settings.reaction,
            outer_box_bc=settings.outer_box_bc, record_every=settings.record_every,
            force_dt=settings.force_dt or self.args.force_dt
        )
        solver = DiffusionSolver(grid, sim_config, self.workers)

        outputs = config.outputs
        recorder = MassRecorder()
        observers = [recorder, SnapshotWriter(self.output_dir / outputs.snapshot)]
        if outputs.vtk_every:
            observers.append(VtkSeriesWriter(self.output_dir / 'vtk', outputs.vtk_every, blank=outputs.blank_value))

        if n_steps == 0:
            initial = solver.diagnostics()
            for observer in observers:
                observer.observe(initial, grid)
                observer.close()
            logger.info("Zero steps requested; wrote the initial state only")
        else:
            solver.run(observers)

        mass_path = write_diagnostics_csv(recorder.records, self.output_dir / outputs.mass_csv)
        written = [mass_path, self.output_dir / outputs.snapshot]
        written += [p for o in observers if isinstance(o, VtkSeriesWriter) for p in o.written]
        results = {'steps': n_steps, 'dt': dt, 'stability_bound': bound,
                   'relative_mass_change': recorder.relative_drift(),
                   'final': recorder.records[-1].to_dict(), 'occupancy': grid.occupancy_stats().to_dict()}
        self.report('simulate', config.to_dict(), results, written)
        return 0

    # ─── frap ───────────────────────────────────────────────────────────────
    def frap(self) -> int:
        config = self.load_config()
        settings = config.frap
        sdf, _ = build_sdf(config, self.workers)
        box = DenseField(sdf.geometry, np.ones(sdf.geometry.size))
        candidate = build_sparse_grid(box, dtype=config.precision)
        reference_grid = candidate if self.args.self_fit else build_sparse_grid(sdf, config.phase_band,
                                                                                 dtype=config.precision)

        if settings.bleach_lo is not None:
            if len(settings.bleach_lo) != sdf.geometry.dims:
                raise InputError(f"frap.bleach_region needs {sdf.geometry.dims} coordinates per corner")
            region = BleachRegion(tuple(settings.bleach_lo), tuple(settings.bleach_hi))
        else:
            region = default_bleach_region(sdf.geometry, settings.fraction)
        schedule = FrapSchedule(t_final=settings.t_final, n_samples=settings.n_samples) \
            if settings.t_final else default_schedule(sdf.geometry, settings.D_molecular, settings.n_samples)

        reference = run_frap(reference_grid, region, settings.D_molecular, schedule, self.workers,
                             config.phase_band)
        result = fit_effective_D(reference, candidate, tuple(settings.search_interval), self.workers)

        curve_path = write_frap_csv(reference, self.output_dir / 'frap_reference.csv')
        result_path = write_json(result, self.output_dir / 'tortuosity.json')
        results = {'tortuosity': result.to_dict(), 'experiment': reference.to_dict(),
                   'porosity': porosity(reference_grid)}
        self.report('frap', config.to_dict(), results, [curve_path, result_path])
        return 0

    # ─── verify ─────────────────────────────────────────────────────────────
    def verify(self) -> int:
        case = self.args.case
        resolutions = self.args.resolutions or DEFAULT_RESOLUTIONS[case]
        if case == 'disk':
            report = run_disk_convergence(resolutions, workers=self.workers)
            window = SOLVER_SLOPE_WINDOW
        else:
            report = run_redistance_convergence(resolutions, case, workers=self.workers)
            window = REDISTANCE_SLOPE_WINDOW
        if self.args.window:
            window = tuple(self.args.window)

        passed = report.passes(window)
        json_path = write_json(report, self.output_dir / f'verify_{case}.json')
        csv_paths = write_convergence_csvs(report, self.output_dir, f'verify_{case}')
        summary = 'PASS' if passed else 'FAIL'
        results = {'case': case, 'slopes': report.fitted_slopes, 'window': list(window), 'summary': summary,
                   'warnings': report.warnings}
        self.report('verify', {'case': case, 'resolutions': list(resolutions)}, results,
                    [json_path] + list(csv_paths.values()))
        print(summary)
        if not passed:
            logger.error(f"Convergence slopes {report.fitted_slopes} outside window {window}")
            return 4
        return 0

    # ─── stats ──────────────────────────────────────────────────────────────
    def stats(self) -> int:
        path = Path(self.args.path)
        if path.suffix in ('.sbgr', '.dnsf'):
            summary = describe_snapshot(path)
            if summary['kind'] == 'sparse':
                summary['snapshot_size'] = format_bytes(summary['snapshot_bytes'])
                summary['dense_snapshot_size'] = format_bytes(summary['dense_snapshot_bytes'])
        else:
            mask = mask_source_for(path).load()
            summary = {'kind': 'mask', 'size': list(mask.size), 'voxel_size': list(mask.voxel_size),
                       'porosity': porosity(mask)}
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0


# ─── Command line ───────────────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='app.py', description='Porous-media reaction-diffusion pipeline')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='pipeline JSON document')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='override a config value (repeatable)')
    common.add_argument('--output', help='output directory')
    common.add_argument('--threads', type=int, help='worker threads (capped by RD_THREADS)')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    common.add_argument('--log-format', choices=('text', 'json'))

    commands = parser.add_subparsers(dest='command', required=True)

    redistance = commands.add_parser('redistance', parents=[common], help='mask -> signed distance snapshot')
    redistance.add_argument('--mask', help='raw volume, PGM file or PGM directory (or SDF with --assume-sdf)')
    redistance.add_argument('--assume-sdf', action='store_true', help='input is already a distance snapshot')
    redistance.add_argument('--no-filter', action='store_true', help='skip the thin-feature filter')

    build = commands.add_parser('build-grid', parents=[common], help='SDF -> sparse grid snapshot')
    build.add_argument('--sdf', help='dense SDF snapshot to build from')

    simulate = commands.add_parser('simulate', parents=[common], help='run a reaction-diffusion simulation')
    simulate.add_argument('--steps', type=int, help='override simulation.n_steps (0 writes the initial state)')
    simulate.add_argument('--force-dt', action='store_true', help='allow dt above the stability bound')

    frap = commands.add_parser('frap', parents=[common], help='FRAP fit of effective diffusivity')
    frap.add_argument('--self-fit', action='store_true', help='use the free box as reference (identity check)')

    verify = commands.add_parser('verify', parents=[common], help='convergence studies')
    verify.add_argument('--case', choices=sorted(DEFAULT_RESOLUTIONS), default='disk')
    verify.add_argument('--resolutions', type=int, nargs='+')
    verify.add_argument('--window', type=float, nargs=2, metavar=('LOW', 'HIGH'))

    stats = commands.add_parser('stats', parents=[common], help='occupancy of a snapshot or mask')
    stats.add_argument('path')
    return parser


HANDLERS = {
    'redistance': PipelineApp.redistance,
    'build-grid': PipelineApp.build_grid,
    'simulate': PipelineApp.simulate,
    'frap': PipelineApp.frap,
    'verify': PipelineApp.verify,
    'stats': PipelineApp.stats,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_config()
    configure_logging(args.log_level or settings.LOG_LEVEL, args.log_format or settings.LOG_FORMAT)
    if args.threads is not None and args.threads < 1:
        logger.error("--threads must be >= 1")
        return 2

    try:
        return HANDLERS[args.command](PipelineApp(args))
    except PipelineError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 4


# ─── Main ───────────────────────────────────────────────────────────────────
if __name__ == "__main__":
    sys.exit(main())
