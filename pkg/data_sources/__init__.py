# data_sources/__init__.py
from pathlib import Path
from typing import Optional

from utils.errors import InputError
from .base import BaseMaskSource
from .pgm_stack import PgmStackSource
from .raw_volume import RawVolumeSource


def mask_source_for(path, kind: Optional[str] = None, voxel_size: float = 1.0) -> BaseMaskSource:
    """Pick a reader from an explicit kind or the path's suffix"""
    path = Path(path)
    if kind is None:
        kind = 'pgm' if path.is_dir() or path.suffix.lower() == '.pgm' else 'raw'
    if kind == 'raw':
        return RawVolumeSource(path)
    if kind == 'pgm':
        return PgmStackSource(path, voxel_size)
    raise InputError(f"unknown mask format '{kind}'")
