import numpy as np
import pytest

from lscm import DataCube, Location


def line_locations(n, spacing=1.0):
    return tuple(Location(f"p{i:03d}", 1.0 + i * spacing, 0.0) for i in range(n))


def grid_locations(nx, ny, spacing=1.0):
    out = []
    for i in range(nx):
        for j in range(ny):
            out.append(Location(f"g{i + 1:02d}_{j + 1:02d}",
                                1.0 + i * spacing, 1.0 + j * spacing))
    return tuple(out)


def random_cube(rng, nx=4, ny=3, m=6, binary=False, n_covariates=0, missing=0.0):
    """A random cube on a regular grid, optionally with missing cells."""
    locs = grid_locations(nx, ny)
    n = len(locs)
    if binary:
        x = rng.integers(0, 2, size=(n, m)).astype(float)
    else:
        x = rng.standard_normal((n, m))
    y = rng.standard_normal((n, m))
    w = rng.standard_normal((n, m, n_covariates)) if n_covariates else None
    if missing > 0:
        y = np.where(rng.random((n, m)) < missing, np.nan, y)
    return DataCube.from_arrays(locs, y, x, w)


def series_cube(x_rows, y_rows, w_rows=None):
    """Cube from explicit per-location series (lists of equal length)."""
    x = np.asarray(x_rows, dtype=float)
    y = np.asarray(y_rows, dtype=float)
    locs = line_locations(x.shape[0])
    w = None if w_rows is None else np.asarray(w_rows, dtype=float)
    return DataCube.from_arrays(locs, y, x, w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
