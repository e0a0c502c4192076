# data_sources/base.py
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict

from modules.geometry import VoxelMask
from utils.errors import InputError

logger = logging.getLogger(__name__)


class BaseMaskSource(ABC):
    """Base class for segmented-volume readers"""

    def __init__(self, name: str, path):
        self.name = name
        self.path = Path(path)

    @abstractmethod
    def fetch_data(self) -> Dict:
        """Read the raw file contents and metadata"""
        pass

    @abstractmethod
    def process_data(self, raw_data: Dict) -> VoxelMask:
        """Turn raw contents into a VoxelMask"""
        pass

    def load(self) -> VoxelMask:
        """Main read method; any failure becomes an InputError naming the file"""
        if not self.path.exists():
            raise InputError(f"{self.name}: {self.path} does not exist")
        try:
            mask = self.process_data(self.fetch_data())
        except InputError:
            raise
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise InputError(f"{self.name}: cannot read {self.path}: {e}") from e
        logger.info(f"Loaded {self.name} mask {self.path} with size {mask.size} "
                    f"(phase fraction {mask.bits.mean():.3f})")
        return mask
