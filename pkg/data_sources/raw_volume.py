# data_sources/raw_volume.py
import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from modules.geometry import VoxelMask
from utils.errors import ConfigError, InputError
from .base import BaseMaskSource

AXIS_ORDERS = {3: 'zyx', 2: 'yx'}


class RawVolumeSource(BaseMaskSource):
    """One byte per voxel (nonzero = phase) plus a JSON sidecar.

    Sidecar: {"size": [nx, ny, nz], "voxel_size": h or [hx, hy, hz],
    "axis_order": "zyx"}. With axis order "zyx" the byte stream runs x
    fastest, i.e. C order over (z, y, x).
    """

    def __init__(self, path, sidecar: Optional[str] = None):
        super().__init__('raw', path)
        self.sidecar = Path(sidecar) if sidecar else self.path.with_suffix('.json')

    def fetch_data(self) -> Dict:
        if not self.sidecar.exists():
            raise InputError(f"raw: sidecar {self.sidecar} does not exist")
        try:
            meta = json.loads(self.sidecar.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError('sidecar', f"invalid JSON in {self.sidecar}: {e}") from e
        return {'meta': meta, 'payload': self.path.read_bytes()}

    def process_data(self, raw_data: Dict) -> VoxelMask:
        meta = raw_data['meta']
        if not isinstance(meta, dict):
            raise ConfigError('sidecar', "must be a JSON object")

        size = meta.get('size')
        if not isinstance(size, list) or len(size) not in (2, 3) or \
                not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in size):
            raise ConfigError('size', f"expected 2 or 3 positive integers, got {size!r}")

        voxel_size = meta.get('voxel_size', 1.0)
        if isinstance(voxel_size, (int, float)) and not isinstance(voxel_size, bool):
            voxel_size = [float(voxel_size)] * len(size)
        if not isinstance(voxel_size, list) or len(voxel_size) != len(size) or \
                not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in voxel_size):
            raise ConfigError('voxel_size', f"expected a positive number per axis, got {meta.get('voxel_size')!r}")

        axis_order = meta.get('axis_order', AXIS_ORDERS[len(size)])
        if axis_order != AXIS_ORDERS[len(size)]:
            raise ConfigError('axis_order', f"only '{AXIS_ORDERS[len(size)]}' is supported, got {axis_order!r}")

        payload = raw_data['payload']
        expected = int(np.prod(size))
        if len(payload) != expected:
            raise ConfigError('size', f"{size} needs {expected} bytes, file has {len(payload)}")

        stored = np.frombuffer(payload, dtype=np.uint8).reshape(tuple(reversed(size)))
        return VoxelMask(tuple(size), tuple(voxel_size), stored.transpose() != 0)

    @staticmethod
    def write(mask: VoxelMask, path, sidecar: Optional[str] = None) -> Path:
        """Write a mask in the same layout; returns the raw path"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(mask.bits.transpose()).astype(np.uint8).tobytes())
        meta = {'size': list(mask.size), 'voxel_size': list(mask.voxel_size),
                'axis_order': AXIS_ORDERS[len(mask.size)]}
        Path(sidecar or path.with_suffix('.json')).write_text(json.dumps(meta, indent=2), encoding='utf-8')
        return path
