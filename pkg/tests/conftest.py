import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from delaysmp.drivers import BinaryLattice
from delaysmp.grids import TimeGrid
from delaysmp.measures import RegularMeasure


@pytest.fixture
def grid10():
    return TimeGrid(1.0, 10, 3)


@pytest.fixture
def lattice10(grid10):
    return BinaryLattice(grid10)


@pytest.fixture
def grid8():
    return TimeGrid(1.0, 8, 2)


@pytest.fixture
def lattice8(grid8):
    return BinaryLattice(grid8)


def random_window_measure(rng, a, b, max_atoms=3, cells=4):
    """Mixed atoms + density on [a, b] with signed weights."""
    n_atoms = rng.integers(1, max_atoms + 1)
    locs = np.sort(rng.uniform(a, b, n_atoms))
    wts = rng.uniform(-1.0, 1.0, n_atoms)
    dens = rng.uniform(-1.0, 1.5, cells)
    return RegularMeasure(a, b, locs, wts, density=dens)


def random_delay_measure(rng, d, max_atoms=2, with_density=True):
    n_atoms = rng.integers(1, max_atoms + 1)
    locs = np.sort(rng.uniform(-d, 0.0, n_atoms))
    wts = rng.uniform(-0.8, 0.8, n_atoms)
    dens = rng.uniform(-0.5, 0.8, 2) if with_density else None
    return RegularMeasure(-d, 0.0, locs, wts, density=dens)


def adapted_from_brownian(fn, w, rows):
    """Adapted process rows 0..rows-1 built pathwise from Brownian values."""
    return np.stack([fn(w[k], k) for k in range(rows)])
