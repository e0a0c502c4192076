# data_sources/pgm_stack.py
from pathlib import Path
from typing import Dict, List

import numpy as np

from modules.geometry import VoxelMask
from utils.errors import InputError
from .base import BaseMaskSource


def parse_pgm(text: str) -> np.ndarray:
    """ASCII P2 image as an array indexed [x, y]"""
    tokens: List[str] = []
    for line in text.splitlines():
        tokens.extend(line.split('#', 1)[0].split())
    if not tokens or tokens[0] != 'P2':
        raise InputError("not an ASCII PGM (P2) image")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        pixels = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as e:
        raise InputError(f"malformed PGM header or pixel data: {e}") from e
    if width < 1 or height < 1 or maxval < 1:
        raise InputError(f"invalid PGM dimensions {width}x{height} (maxval {maxval})")
    if pixels.size != width * height:
        raise InputError(f"PGM declares {width}x{height} pixels, found {pixels.size}")
    return pixels.reshape(height, width).transpose()


def format_pgm(image: np.ndarray) -> str:
    """Inverse of parse_pgm for 0/1 images"""
    image = np.asarray(image, dtype=np.int64)
    width, height = image.shape
    rows = [' '.join(str(v) for v in image[:, y]) for y in range(height)]
    return '\n'.join(['P2', f'{width} {height}', '1'] + rows) + '\n'


class PgmStackSource(BaseMaskSource):
    """A single .pgm (2D) or a directory of .pgm slices sorted by name (z)"""

    def __init__(self, path, voxel_size: float = 1.0):
        super().__init__('pgm', path)
        self.voxel_size = float(voxel_size)

    def fetch_data(self) -> Dict:
        files = sorted(self.path.glob('*.pgm')) if self.path.is_dir() else [self.path]
        if not files:
            raise InputError(f"pgm: no .pgm files in {self.path}")
        return {'stack': self.path.is_dir(), 'slices': [f.read_text(encoding='ascii') for f in files]}

    def process_data(self, raw_data: Dict) -> VoxelMask:
        slices = [parse_pgm(text) for text in raw_data['slices']]
        if any(s.shape != slices[0].shape for s in slices):
            raise InputError("pgm: slices differ in size")
        bits = np.stack(slices, axis=-1) if raw_data['stack'] else slices[0]
        return VoxelMask(bits.shape, (self.voxel_size,) * bits.ndim, bits != 0)

    @staticmethod
    def write(mask: VoxelMask, directory) -> Path:
        """Write one slice per z index as slice_0000.pgm, ..."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for z in range(mask.size[2]):
            (directory / f'slice_{z:04d}.pgm').write_text(format_pgm(mask.bits[:, :, z]), encoding='ascii')
        return directory
