import numpy as np
import pytest

from gainmap.environment import (
    Building,
    Environment,
    GridSpec,
    PathLossParams,
    Region,
    rasterize_buildings,
)


@pytest.fixture
def region():
    return Region()


@pytest.fixture
def grid():
    return GridSpec()


@pytest.fixture
def free_space_env(region, grid):
    return Environment(
        region=region,
        buildings=(),
        loss_field=rasterize_buildings([], region, grid),
        path_loss=PathLossParams(),
        id=0,
    )


def make_env(buildings, region=None, grid=None, env_id=0):
    region = region or Region()
    grid = grid or GridSpec()
    return Environment(
        region=region,
        buildings=tuple(buildings),
        loss_field=rasterize_buildings(buildings, region, grid),
        path_loss=PathLossParams(),
        id=env_id,
    )


def voxel_aligned_building(grid=None, region=None, i0=8, i1=12, j0=8, j1=12, loss_density=1.0):
    """Building whose footprint lands exactly on voxel boundaries, so the
    rasterized field is the exact indicator of the rectangle."""
    grid = grid or GridSpec()
    region = region or Region()
    sx, sy, _ = grid.voxel_sizes(region)
    x0, x1 = i0 * sx, i1 * sx
    y0, y1 = j0 * sy, j1 * sy
    return Building(
        center_xy=((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        width=x1 - x0,
        depth=y1 - y0,
        loss_density=loss_density,
    )


def rect_chord_length(a, b, x0, x1, y0, y1):
    """Liang-Barsky: length of segment [a, b] inside the x/y rectangle (the
    slab spans all z).  Independent oracle for building attenuation."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    t_lo, t_hi = 0.0, 1.0
    for axis, (lo, hi) in ((0, (x0, x1)), (1, (y0, y1))):
        if d[axis] == 0.0:
            if not lo <= a[axis] <= hi:
                return 0.0
            continue
        t1 = (lo - a[axis]) / d[axis]
        t2 = (hi - a[axis]) / d[axis]
        t1, t2 = min(t1, t2), max(t1, t2)
        t_lo, t_hi = max(t_lo, t1), min(t_hi, t2)
    if t_hi <= t_lo:
        return 0.0
    return (t_hi - t_lo) * float(np.linalg.norm(d))
