# conftest.py
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from modules.geometry import PhaseBand, build_sparse_grid, fill_uniform_diffusion  # noqa: E402
from modules.levelset import DenseField, ball_sdf  # noqa: E402
from modules.sparse_grid import GridGeometry  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run acceptance-scale tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-scale run, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def box_geometry():
    """12 x 10 x 9 nodes, h = 0.5; not chunk-aligned on any axis"""
    return GridGeometry.isotropic((12, 10, 9), 0.5)


@pytest.fixture
def ball_grid():
    """Sparse grid of the fluid inside a ball of radius 7 in a 20^3 box, D = 1"""
    geometry = GridGeometry.isotropic((20, 20, 20), 1.0)
    sdf = DenseField.from_function(geometry, ball_sdf((9.5, 9.5, 9.5), 7.0))
    grid = build_sparse_grid(sdf, PhaseBand())
    return fill_uniform_diffusion(grid, 1.0)


@pytest.fixture
def free_box_grid():
    """Whole 16 x 16 x 16 box is phase, D = 1"""
    geometry = GridGeometry.isotropic((16, 16, 16), 1.0)
    grid = build_sparse_grid(DenseField(geometry, np.ones(geometry.size)))
    return fill_uniform_diffusion(grid, 1.0)
