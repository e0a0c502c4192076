# config/pipeline.py
"""Pipeline configuration: one JSON document validated into dataclasses.

Every problem with a document is reported as a ConfigError naming the
offending field (dotted path). The schema is described in docs/CONFIG.md.
"""
import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from modules.geometry import PhaseBand
from modules.levelset import LevelSetOptions
from modules.solver import FaceCondition, ReactionKind, ReactionSpec, face_names
from utils.errors import ConfigError, InputError
from utils.helpers import split_override

logger = logging.getLogger(__name__)

FILE_INPUTS = ('raw', 'pgm', 'sdf')
SYNTHETIC_INPUTS = ('spheres', 'disk_array', 'rpc', 'box')
PRECISIONS = ('float64', 'float32')


class _Section:
    """Typed accessors over one JSON object at a dotted path"""

    def __init__(self, data: Any, path: str, allowed: Sequence[str]):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path or '<root>', f"expected an object, got {type(data).__name__}")
        unknown = sorted(str(key) for key in set(data) - set(allowed))
        if unknown:
            raise ConfigError(self._join(path, str(unknown[0])), "unknown key")
        self.data = data
        self.path = path

    @staticmethod
    def _join(path: str, key: str) -> str:
        return f"{path}.{key}" if path else key

    def name(self, key: str) -> str:
        return self._join(self.path, key)

    def has(self, key: str) -> bool:
        return self.data.get(key) is not None

    def number(self, key: str, default=None, minimum: Optional[float] = None, exclusive: bool = False,
               maximum: Optional[float] = None, optional: bool = False) -> Optional[float]:
        value = self.data.get(key, default)
        if value is None:
            if optional:
                return None
            raise ConfigError(self.name(key), "is required")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(self.name(key), f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(self.name(key), "must be finite")
        if minimum is not None and (value <= minimum if exclusive else value < minimum):
            raise ConfigError(self.name(key), f"must be {'>' if exclusive else '>='} {minimum}, got {value}")
        if maximum is not None and value > maximum:
            raise ConfigError(self.name(key), f"must be <= {maximum}, got {value}")
        return value

    def integer(self, key: str, default=None, minimum: Optional[int] = None,
                optional: bool = False) -> Optional[int]:
        value = self.data.get(key, default)
        if value is None:
            if optional:
                return None
            raise ConfigError(self.name(key), "is required")
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(self.name(key), f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(self.name(key), f"must be >= {minimum}, got {value}")
        return value

    def boolean(self, key: str, default: bool) -> bool:
        value = self.data.get(key, default)
        if not isinstance(value, bool):
            raise ConfigError(self.name(key), f"expected true or false, got {value!r}")
        return value

    def choice(self, key: str, options: Sequence[str], default: Optional[str] = None) -> str:
        value = self.data.get(key, default)
        if value not in options:
            raise ConfigError(self.name(key), f"expected one of {', '.join(options)}, got {value!r}")
        return value

    def string(self, key: str, default: Optional[str] = None, optional: bool = False) -> Optional[str]:
        value = self.data.get(key, default)
        if value is None and optional:
            return None
        if not isinstance(value, str) or not value:
            raise ConfigError(self.name(key), f"expected a non-empty string, got {value!r}")
        return value

    def numbers(self, key: str, length: Optional[int] = None, integer: bool = False,
                minimum: Optional[float] = None, exclusive: bool = False,
                optional: bool = False) -> Optional[List[float]]:
        value = self.data.get(key)
        if value is None:
            if optional:
                return None
            raise ConfigError(self.name(key), "is required")
        if not isinstance(value, list) or not value:
            raise ConfigError(self.name(key), f"expected a non-empty list, got {value!r}")
        if length is not None and len(value) != length:
            raise ConfigError(self.name(key), f"expected {length} entries, got {len(value)}")
        probe = _Section({str(i): v for i, v in enumerate(value)}, self.name(key), [str(i) for i in range(len(value))])
        if integer:
            return [probe.integer(str(i), minimum=None if minimum is None else int(minimum))
                    for i in range(len(value))]
        return [probe.number(str(i), minimum=minimum, exclusive=exclusive) for i in range(len(value))]

    def section(self, key: str, allowed: Sequence[str]) -> '_Section':
        return _Section(self.data.get(key), self.name(key), allowed)


def _build(field_name: str, factory, *args, **kwargs):
    """Construct a domain object, reporting its validation errors against field_name"""
    try:
        return factory(*args, **kwargs)
    except ConfigError:
        raise
    except InputError as e:
        raise ConfigError(field_name, str(e)) from e


@dataclass
class InputSettings:
    kind: str
    path: Optional[str] = None
    size: Optional[List[int]] = None
    voxel_size: float = 1.0
    radius: Optional[float] = None
    porosity: Optional[float] = None
    period: Optional[int] = None
    offset: int = 4
    seed: int = 0
    filter_thin_features: bool = True
    min_thickness_cells: int = 2

    @property
    def synthetic(self) -> Dict[str, Any]:
        spec = {'kind': self.kind, 'size': self.size, 'voxel_size': self.voxel_size, 'seed': self.seed,
                'offset': self.offset}
        for key in ('radius', 'porosity', 'period'):
            if getattr(self, key) is not None:
                spec[key] = getattr(self, key)
        return spec


@dataclass
class DiffusionSettings:
    mode: str = 'profile'
    value: float = 1.0
    D_min: float = 0.0
    D_max: float = 1.0
    gamma1: Optional[float] = None
    gamma2: Optional[float] = None
    literal_gamma2: bool = False


@dataclass
class InitialCondition:
    kind: str = 'zero'
    value: float = 0.0
    center: Optional[List[float]] = None
    radius: float = 0.0
    inside: float = 1.0


@dataclass
class SimulationSettings:
    dt: Optional[float] = None
    dt_safety: float = 0.9
    n_steps: int = 100
    record_every: int = 1
    boundary_epsilon: Optional[float] = None
    force_dt: bool = False
    reaction: ReactionSpec = field(default_factory=ReactionSpec)
    outer_box_bc: Dict[str, FaceCondition] = field(default_factory=dict)
    initial_condition: InitialCondition = field(default_factory=InitialCondition)


@dataclass
class FrapSettings:
    D_molecular: float = 1.0
    bleach_lo: Optional[List[int]] = None
    bleach_hi: Optional[List[int]] = None
    fraction: float = 0.1
    t_final: Optional[float] = None
    n_samples: int = 200
    search_interval: List[float] = field(default_factory=lambda: [0.05, 2.0])


@dataclass
class OutputSettings:
    directory: str = 'output'
    vtk_every: int = 0
    mass_csv: str = 'mass.csv'
    snapshot: str = 'final.sbgr'
    sdf_snapshot: str = 'sdf.dnsf'
    grid_snapshot: str = 'grid.sbgr'
    blank_value: float = float('nan')


@dataclass
class PipelineConfig:
    input: InputSettings
    precision: str = 'float64'
    levelset: LevelSetOptions = field(default_factory=LevelSetOptions)
    phase_band: PhaseBand = field(default_factory=PhaseBand)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    frap: FrapSettings = field(default_factory=FrapSettings)
    outputs: OutputSettings = field(default_factory=OutputSettings)
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    def to_dict(self):
        return copy.deepcopy(self.raw)


# ─── Parsing ─────────────────────────────────────────────────────────────────

def _parse_input(root: _Section, base_dir: Path, check_paths: bool) -> InputSettings:
    section = root.section('input', ['kind', 'path', 'size', 'voxel_size', 'radius', 'porosity', 'period',
                                     'offset', 'seed', 'filter_thin_features', 'min_thickness_cells'])
    if not section.data:
        raise ConfigError('input', "is required")
    kind = section.choice('kind', FILE_INPUTS + SYNTHETIC_INPUTS)
    settings = InputSettings(kind=kind,
                             voxel_size=section.number('voxel_size', 1.0, minimum=0, exclusive=True),
                             seed=section.integer('seed', 0, minimum=0),
                             offset=section.integer('offset', 4, minimum=0),
                             filter_thin_features=section.boolean('filter_thin_features', True),
                             min_thickness_cells=section.integer('min_thickness_cells', 2, minimum=1))
    if kind in FILE_INPUTS:
        path = Path(section.string('path'))
        if not path.is_absolute():
            path = base_dir / path
        if check_paths and not path.exists():
            raise ConfigError('input.path', f"{path} does not exist")
        settings.path = str(path)
    else:
        dims = 2 if kind == 'disk_array' else 3 if kind == 'rpc' else None
        size = section.numbers('size', integer=True, minimum=1)
        if len(size) not in (2, 3) or (dims is not None and len(size) != dims):
            raise ConfigError('input.size', f"expected {dims or '2 or 3'} entries, got {len(size)}")
        settings.size = size
        settings.radius = section.number('radius', minimum=0, exclusive=True, optional=True)
        settings.porosity = section.number('porosity', minimum=0, exclusive=True, maximum=1, optional=True)
        if settings.porosity is not None and settings.porosity >= 1:
            raise ConfigError('input.porosity', "must be < 1")
        settings.period = section.integer('period', minimum=2, optional=True)
    return settings


def _parse_diffusion(root: _Section) -> DiffusionSettings:
    section = root.section('diffusion', ['mode', 'value', 'D_min', 'D_max', 'gamma1', 'gamma2', 'literal_gamma2'])
    return DiffusionSettings(
        mode=section.choice('mode', ('profile', 'uniform'), 'profile'),
        value=section.number('value', 1.0, minimum=0, exclusive=True),
        D_min=section.number('D_min', 0.0, minimum=0),
        D_max=section.number('D_max', 1.0, minimum=0, exclusive=True),
        gamma1=section.number('gamma1', optional=True),
        gamma2=section.number('gamma2', optional=True),
        literal_gamma2=section.boolean('literal_gamma2', False)
    )


def _parse_faces(section: _Section) -> Dict[str, FaceCondition]:
    faces = {}
    for face, spec in section.data.items():
        name = section.name(face)
        if spec == 'no_flux':
            faces[face] = FaceCondition.no_flux()
        elif isinstance(spec, dict):
            entry = _Section(spec, name, ['dirichlet'])
            faces[face] = FaceCondition.dirichlet(entry.number('dirichlet'))
        else:
            raise ConfigError(name, f"expected \"no_flux\" or {{\"dirichlet\": value}}, got {spec!r}")
    return faces


def _parse_simulation(root: _Section) -> SimulationSettings:
    section = root.section('simulation', ['dt', 'dt_safety', 'n_steps', 'record_every', 'boundary_epsilon',
                                          'force_dt', 'reaction', 'outer_box_bc', 'initial_condition'])
    reaction = section.section('reaction', ['kind', 'rate', 'band_width'])
    kind = reaction.choice('kind', [k.value for k in ReactionKind], 'none')
    reaction_spec = _build('simulation.reaction', ReactionSpec, kind=kind,
                           k=reaction.number('rate', 0.0, minimum=0),
                           w=reaction.number('band_width', 1.0, minimum=0, exclusive=True))

    initial = section.section('initial_condition', ['kind', 'value', 'center', 'radius', 'inside'])
    ic_kind = initial.choice('kind', ('zero', 'uniform', 'sphere'), 'zero')
    condition = InitialCondition(kind=ic_kind, value=initial.number('value', 0.0),
                                 inside=initial.number('inside', 1.0))
    if ic_kind == 'sphere':
        condition.center = initial.numbers('center')
        condition.radius = initial.number('radius', minimum=0, exclusive=True)

    return SimulationSettings(
        dt=section.number('dt', minimum=0, exclusive=True, optional=True),
        dt_safety=section.number('dt_safety', 0.9, minimum=0, exclusive=True, maximum=1.0),
        n_steps=section.integer('n_steps', 100, minimum=0),
        record_every=section.integer('record_every', 1, minimum=1),
        boundary_epsilon=section.number('boundary_epsilon', minimum=0, optional=True),
        force_dt=section.boolean('force_dt', False),
        reaction=reaction_spec,
        outer_box_bc=_parse_faces(section.section('outer_box_bc', face_names(3))),
        initial_condition=condition
    )


def _parse_frap(root: _Section) -> FrapSettings:
    section = root.section('frap', ['D_molecular', 'bleach_region', 'fraction', 't_final', 'n_samples',
                                    'search_interval'])
    settings = FrapSettings(
        D_molecular=section.number('D_molecular', 1.0, minimum=0, exclusive=True),
        fraction=section.number('fraction', 0.1, minimum=0, exclusive=True, maximum=1.0),
        t_final=section.number('t_final', minimum=0, exclusive=True, optional=True),
        n_samples=section.integer('n_samples', 200, minimum=2)
    )
    if section.has('search_interval'):
        interval = section.numbers('search_interval', length=2, minimum=0, exclusive=True)
        if not interval[0] < interval[1]:
            raise ConfigError('frap.search_interval', "lower end must be below upper end")
        settings.search_interval = interval
    if section.has('bleach_region'):
        region = section.section('bleach_region', ['lo', 'hi'])
        settings.bleach_lo = region.numbers('lo', integer=True, minimum=0)
        settings.bleach_hi = region.numbers('hi', integer=True, minimum=1)
        if len(settings.bleach_lo) != len(settings.bleach_hi) or \
                any(h <= l for l, h in zip(settings.bleach_lo, settings.bleach_hi)):
            raise ConfigError('frap.bleach_region', "needs lo < hi on every axis")
    return settings


def _parse_outputs(root: _Section, base_dir: Path) -> OutputSettings:
    section = root.section('outputs', ['directory', 'vtk_every', 'mass_csv', 'snapshot', 'sdf_snapshot',
                                       'grid_snapshot', 'blank_value'])
    blank = section.data.get('blank_value', 'nan')
    if blank == 'nan':
        blank = float('nan')
    else:
        blank = section.number('blank_value')
    directory = Path(section.string('directory', 'output'))
    return OutputSettings(
        directory=str(directory if directory.is_absolute() else base_dir / directory),
        vtk_every=section.integer('vtk_every', 0, minimum=0),
        mass_csv=section.string('mass_csv', 'mass.csv'),
        snapshot=section.string('snapshot', 'final.sbgr'),
        sdf_snapshot=section.string('sdf_snapshot', 'sdf.dnsf'),
        grid_snapshot=section.string('grid_snapshot', 'grid.sbgr'),
        blank_value=blank
    )


def parse_pipeline_config(raw: Any, base_dir: Optional[Path] = None, check_paths: bool = True) -> PipelineConfig:
    base_dir = Path(base_dir or '.')
    root = _Section(raw, '', ['input', 'precision', 'levelset', 'phase_band', 'diffusion', 'simulation',
                              'frap', 'outputs'])

    levelset = root.section('levelset', ['max_iterations', 'convergence_tolerance', 'pseudo_time_step',
                                         'band_width_for_error', 'stop_band_width'])
    levelset_options = _build('levelset', LevelSetOptions,
                              max_iterations=levelset.integer('max_iterations', 1000, minimum=1),
                              convergence_tolerance=levelset.number('convergence_tolerance', 1e-3,
                                                                    minimum=0, exclusive=True),
                              pseudo_time_step=levelset.number('pseudo_time_step', 0.5, minimum=0,
                                                               exclusive=True, maximum=1.0),
                              band_width_for_error=levelset.number('band_width_for_error', 4.0,
                                                                   minimum=0, exclusive=True),
                              stop_band_width=levelset.number('stop_band_width', 6.0, minimum=0, exclusive=True))

    band = root.section('phase_band', ['b_low', 'b_up'])
    b_up = band.number('b_up', optional=True)
    phase_band = _build('phase_band', PhaseBand, band.number('b_low', 0.0),
                        math.inf if b_up is None else b_up)

    config = PipelineConfig(
        input=_parse_input(root, base_dir, check_paths),
        precision=root.choice('precision', PRECISIONS, 'float64'),
        levelset=levelset_options,
        phase_band=phase_band,
        diffusion=_parse_diffusion(root),
        simulation=_parse_simulation(root),
        frap=_parse_frap(root),
        outputs=_parse_outputs(root, base_dir),
        raw=copy.deepcopy(raw)
    )
    if config.outputs.vtk_every and config.outputs.vtk_every % config.simulation.record_every:
        raise ConfigError('outputs.vtk_every', "must be a multiple of simulation.record_every")
    dims = len(config.input.size) if config.input.size else None
    if dims is not None:
        center = config.simulation.initial_condition.center
        if center is not None and len(center) != dims:
            raise ConfigError('simulation.initial_condition.center', f"expected {dims} coordinates")
        for face in config.simulation.outer_box_bc:
            if face not in face_names(dims):
                raise ConfigError(f'simulation.outer_box_bc.{face}', f"grid has only {dims} axes")
    return config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Any, overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply key.path=value overrides; values are JSON literals or plain strings"""
    raw = copy.deepcopy(raw) if raw is not None else {}
    if not isinstance(raw, dict):
        raise ConfigError('<root>', f"expected an object, got {type(raw).__name__}")
    for text in overrides:
        try:
            path, value = split_override(text)
        except ValueError as e:
            raise ConfigError('--set', str(e)) from e
        target = raw
        for depth, key in enumerate(path[:-1]):
            node = target.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError('.'.join(path[:depth + 1]), "cannot override inside a non-object value")
            target = node
        target[path[-1]] = _parse_value(value)
    return raw


def load_pipeline_config(source: Union[str, Path, Dict, None] = None, overrides: Sequence[str] = (),
                         check_paths: bool = True) -> PipelineConfig:
    """Read (path or dict), apply overrides, validate"""
    base_dir = Path('.')
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError as e:
            raise ConfigError('--config', f"{path} does not exist") from e
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError('--config', f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError('<root>', f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        base_dir = path.parent
    else:
        raw = source if source is not None else {}
    raw = apply_overrides(raw, overrides)
    config = parse_pipeline_config(raw, base_dir, check_paths)
    logger.debug(f"Loaded pipeline config (input kind {config.input.kind})")
    return config
