# modules/reporting.py
import hashlib
import json
import logging
from dataclasses import dataclass, asdict, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from modules.solver import StepDiagnostics

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = '%.17g'


@dataclass
class RunReport:
    """Manifest of one CLI run: configuration, results and files written"""
    id: str
    command: str
    config: Dict
    results: Dict
    outputs: List[str] = field(default_factory=list)
    generated_at: datetime = field(default_factory=datetime.now)

    @classmethod
    def create(cls, command: str, config: Dict, results: Optional[Dict] = None) -> 'RunReport':
        """The id is a hash of the command and configuration, so reruns share it"""
        digest = hashlib.md5(json.dumps([command, config], sort_keys=True, default=str).encode())
        return cls(id=digest.hexdigest()[:12], command=command, config=config, results=results or {})

    def to_dict(self):
        d = asdict(self)
        d['generated_at'] = d['generated_at'].isoformat()
        return d


def _jsonable(value):
    if hasattr(value, 'to_dict'):
        return _jsonable(value.to_dict())
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write('\n')
    logger.info(f"Wrote {path}")
    return path


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def diagnostics_frame(records: Sequence[StepDiagnostics]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=list(StepDiagnostics.CSV_COLUMNS))


def write_diagnostics_csv(records: Sequence[StepDiagnostics], path) -> Path:
    """CSV with header step,time,total_mass,min_u,max_u"""
    return write_csv(diagnostics_frame(records), path)


def write_frap_csv(experiment, path) -> Path:
    """CSV with header time,recovery_fraction"""
    return write_csv(experiment.to_frame(), path)


def write_convergence_csvs(report, directory, stem: str = 'convergence') -> Dict[str, Path]:
    """One two-column (h, error) CSV per norm"""
    directory = Path(directory)
    frame = report.to_frame()
    paths = {}
    for norm in ('L2', 'Linf'):
        paths[norm] = write_csv(frame[['h', norm]].rename(columns={norm: 'error'}),
                                directory / f'{stem}_{norm}.csv')
    return paths
