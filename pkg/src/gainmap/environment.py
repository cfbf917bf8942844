"""Randomized propagation environments and the tomographic forward model.

An environment is a box-shaped region with a voxelized spatial loss field
(dB/m) rasterized from axis-aligned rectangular buildings.  The channel gain
between two points is a log-distance path-loss term minus the line integral
of the loss field along the connecting segment.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Region",
    "GridSpec",
    "Building",
    "LossField",
    "PathLossParams",
    "Environment",
    "LinkParams",
    "OutOfRegionError",
    "sample_environment",
    "rasterize_buildings",
    "segment_voxel_lengths",
    "channel_gain",
    "free_space_gain",
    "capacity_from_gain",
    "save_environment",
    "load_environment",
]

SPEED_OF_LIGHT = 299_792_458.0


class OutOfRegionError(ValueError):
    """A query point lies outside the environment region."""


@dataclass(frozen=True)
class Region:
    """Axis-aligned box [0, x_extent] x [0, y_extent] x [0, z_extent], meters."""

    x_extent: float = 350.0
    y_extent: float = 350.0
    z_extent: float = 20.0

    def __post_init__(self):
        if min(self.x_extent, self.y_extent, self.z_extent) <= 0:
            raise ValueError("region extents must be positive")

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.x_extent, self.y_extent, self.z_extent])

    def contains(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= 0.0) and np.all(p <= self.extents))


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts per axis; voxel sizes derive from the region extents."""

    nx: int = 32
    ny: int = 32
    nz: int = 1

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    def voxel_sizes(self, region: Region) -> np.ndarray:
        return region.extents / np.array([self.nx, self.ny, self.nz], dtype=float)


@dataclass(frozen=True)
class Building:
    """Axis-aligned rectangular footprint with a uniform absorption density."""

    center_xy: tuple[float, float]
    width: float = 40.0
    depth: float = 40.0
    loss_density: float = 1.0  # dB/m

    def __post_init__(self):
        if self.loss_density < 0:
            raise ValueError("loss_density must be >= 0")
        if self.width <= 0 or self.depth <= 0:
            raise ValueError("footprint dimensions must be positive")

    @property
    def x_range(self) -> tuple[float, float]:
        cx = self.center_xy[0]
        return (cx - self.width / 2.0, cx + self.width / 2.0)

    @property
    def y_range(self) -> tuple[float, float]:
        cy = self.center_xy[1]
        return (cy - self.depth / 2.0, cy + self.depth / 2.0)


@dataclass(frozen=True)
class LossField:
    """Per-voxel absorption density in dB/m, shape (nx, ny, nz)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if values.shape != self.grid.shape:
            raise ValueError(f"loss field shape {values.shape} != grid {self.grid.shape}")
        if np.any(values < 0):
            raise ValueError("loss field values must be >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class PathLossParams:
    """Log-distance path loss: l0 + 10*gamma*log10(d/d0) dB, d clamped below d0.

    Defaults are free-space-at-1m values for 2.4 GHz.
    """

    l0: float = 40.05
    gamma: float = 2.0
    d0: float = 1.0

    def __post_init__(self):
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def loss_db(self, distance: float) -> float:
        d = max(float(distance), self.d0)
        return self.l0 + 10.0 * self.gamma * math.log10(d / self.d0)


@dataclass(frozen=True)
class LinkParams:
    """Link-budget constants used to turn gains into Shannon capacities."""

    bandwidth: float = 20e6  # Hz
    tx_power: float = 0.3  # W
    noise_power_dbm: float = -96.0
    frequency: float = 2.4e9  # informational

    def __post_init__(self):
        if self.bandwidth <= 0 or self.tx_power <= 0:
            raise ValueError("bandwidth and tx_power must be positive")

    @property
    def noise_power_watts(self) -> float:
        return 10.0 ** ((self.noise_power_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class Environment:
    region: Region
    buildings: tuple[Building, ...]
    loss_field: LossField
    path_loss: PathLossParams
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))


def free_space_l0(frequency: float = 2.4e9, d0: float = 1.0) -> float:
    """Friis free-space loss at the reference distance, in dB."""
    return 20.0 * math.log10(4.0 * math.pi * d0 * frequency / SPEED_OF_LIGHT)


def rasterize_buildings(buildings, region: Region, grid: GridSpec) -> LossField:
    """Voxelize building footprints: a voxel gets a building's density iff its
    center lies in the footprint.  Overlaps resolve to the maximum density so
    the field stays two-level for equal-density buildings.
    """
    sizes = grid.voxel_sizes(region)
    centers_x = (np.arange(grid.nx) + 0.5) * sizes[0]
    centers_y = (np.arange(grid.ny) + 0.5) * sizes[1]
    values = np.zeros(grid.shape)
    for b in buildings:
        x0, x1 = b.x_range
        y0, y1 = b.y_range
        # Half-open footprint so buildings tiled edge to edge do not double-claim.
        in_x = (centers_x >= x0) & (centers_x < x1)
        in_y = (centers_y >= y0) & (centers_y < y1)
        mask = np.outer(in_x, in_y)[:, :, None]
        values = np.maximum(values, np.where(mask, b.loss_density, 0.0))
    return LossField(grid=grid, values=values)


def sample_environment(
    rng_seed: int,
    max_buildings: int,
    region: Region | None = None,
    grid: GridSpec | None = None,
    building_size: tuple[float, float] = (40.0, 40.0),
    loss_density: float = 1.0,
    path_loss: PathLossParams | None = None,
    env_id: int | None = None,
) -> Environment:
    """Draw an environment: building count uniform on {0..max_buildings},
    centers uniform over the region footprint.  Deterministic per seed.
    """
    if max_buildings < 0:
        raise ValueError("max_buildings must be >= 0")
    region = region or Region()
    grid = grid or GridSpec()
    path_loss = path_loss or PathLossParams()
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0xE2A1]))
    count = int(rng.integers(0, max_buildings + 1))
    w, d = building_size
    buildings = []
    for _ in range(count):
        cx = rng.uniform(0.0, region.x_extent)
        cy = rng.uniform(0.0, region.y_extent)
        buildings.append(Building(center_xy=(cx, cy), width=w, depth=d, loss_density=loss_density))
    loss_field = rasterize_buildings(buildings, region, grid)
    return Environment(
        region=region,
        buildings=tuple(buildings),
        loss_field=loss_field,
        path_loss=path_loss,
        id=int(env_id if env_id is not None else rng_seed),
    )


def _check_in_region(p: np.ndarray, region: Region, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not region.contains(p):
        raise OutOfRegionError(f"{name} {p.tolist()} is out of region")
    return p


def segment_voxel_lengths(tx, rx, grid: GridSpec, region: Region) -> np.ndarray:
    """Exact per-voxel intersection lengths of the segment [tx, rx], meters.

    Parametric traversal: collect every grid-plane crossing parameter in (0, 1),
    then classify each sub-interval by its midpoint.  Voxels are half-open along
    each axis (index clamped at the far region boundary), so the sub-interval
    lengths partition the segment length exactly up to rounding.

    Returns an array of shape grid.shape.
    """
    a = _check_in_region(tx, region, "tx")
    b = _check_in_region(rx, region, "rx")
    out = np.zeros(grid.shape)
    delta = b - a
    seg_len = float(np.linalg.norm(delta))
    if seg_len == 0.0:
        return out

    sizes = grid.voxel_sizes(region)
    counts = np.array(grid.shape)
    ts = [0.0, 1.0]
    for ax in range(3):
        if delta[ax] == 0.0:
            continue
        # Interior plane indices whose crossing parameter falls in (0, 1).
        lo = min(a[ax], b[ax]) / sizes[ax]
        hi = max(a[ax], b[ax]) / sizes[ax]
        first = int(math.floor(lo)) + 1
        last = int(math.ceil(hi)) - 1
        for i in range(first, last + 1):
            t = (i * sizes[ax] - a[ax]) / delta[ax]
            if 0.0 < t < 1.0:
                ts.append(float(t))
    ts = np.unique(np.asarray(ts))

    mids = a[None, :] + np.multiply.outer((ts[:-1] + ts[1:]) / 2.0, delta)
    idx = np.floor(mids / sizes[None, :]).astype(int)
    np.clip(idx, 0, counts[None, :] - 1, out=idx)
    lengths = (ts[1:] - ts[:-1]) * seg_len
    np.add.at(out, (idx[:, 0], idx[:, 1], idx[:, 2]), lengths)
    return out


def _canonical_pair(tx, rx) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(tx, dtype=np.float64).reshape(3)
    b = np.asarray(rx, dtype=np.float64).reshape(3)
    if tuple(b) < tuple(a):
        a, b = b, a
    return a, b


def channel_gain(env: Environment, tx, rx) -> float:
    """Ground-truth gain in dB: minus path loss minus the field line integral.

    Arguments are ordered canonically before any arithmetic, which makes
    reciprocity hold bit-exactly.
    """
    a, b = _canonical_pair(tx, rx)
    d = float(np.linalg.norm(b - a))
    weights = segment_voxel_lengths(a, b, env.loss_field.grid, env.region)
    attenuation = float(np.sum(weights * env.loss_field.values))
    return -env.path_loss.loss_db(d) - attenuation


def free_space_gain(env: Environment, tx, rx) -> float:
    """Gain ignoring the loss field (path-loss term only)."""
    a, b = _canonical_pair(tx, rx)
    _check_in_region(a, env.region, "tx")
    _check_in_region(b, env.region, "rx")
    return -env.path_loss.loss_db(float(np.linalg.norm(b - a)))


def capacity_from_gain(gain_db: float, link: LinkParams | None = None) -> float:
    """Shannon capacity in bits/s for a link with the given channel gain."""
    link = link or LinkParams()
    snr = link.tx_power * 10.0 ** (float(gain_db) / 10.0) / link.noise_power_watts
    return link.bandwidth * math.log2(1.0 + snr)


# ---------------------------------------------------------------------------
# Serialization: ASCII header terminated by an "end" line, then the loss field
# as row-major (x-major) little-endian float64.
# ---------------------------------------------------------------------------

_ENV_MAGIC = "GAINMAP-ENV v1"


def save_environment(env: Environment, path) -> None:
    header = io.StringIO()
    header.write(_ENV_MAGIC + "\n")
    header.write(f"id = {env.id}\n")
    header.write(f"region = {env.region.x_extent!r} {env.region.y_extent!r} {env.region.z_extent!r}\n")
    g = env.loss_field.grid
    header.write(f"grid = {g.nx} {g.ny} {g.nz}\n")
    p = env.path_loss
    header.write(f"path_loss = {p.l0!r} {p.gamma!r} {p.d0!r}\n")
    header.write(f"buildings = {len(env.buildings)}\n")
    for b in env.buildings:
        header.write(
            f"building = {b.center_xy[0]!r} {b.center_xy[1]!r} {b.width!r} {b.depth!r} {b.loss_density!r}\n"
        )
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(np.ascontiguousarray(env.loss_field.values, dtype="<f8").tobytes())


def _read_header_lines(fh) -> list[str]:
    lines = []
    while True:
        raw = fh.readline()
        if not raw:
            raise ValueError("truncated header: missing 'end'")
        line = raw.decode("ascii").rstrip("\n")
        if line == "end":
            return lines
        lines.append(line)


def _header_fields(lines, key) -> list[str]:
    vals = [ln.split("=", 1)[1].split() for ln in lines if ln.startswith(key + " =")]
    if not vals:
        raise ValueError(f"missing header field {key!r}")
    return vals[0]


def load_environment(path) -> Environment:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != _ENV_MAGIC:
            raise ValueError(f"not an environment file (magic {magic!r})")
        lines = _read_header_lines(fh)
        env_id = int(_header_fields(lines, "id")[0])
        rx, ry, rz = (float(v) for v in _header_fields(lines, "region"))
        nx, ny, nz = (int(v) for v in _header_fields(lines, "grid"))
        l0, gamma, d0 = (float(v) for v in _header_fields(lines, "path_loss"))
        n_buildings = int(_header_fields(lines, "buildings")[0])
        buildings = []
        for ln in lines:
            if ln.startswith("building ="):
                cx, cy, w, d, rho = (float(v) for v in ln.split("=", 1)[1].split())
                buildings.append(Building(center_xy=(cx, cy), width=w, depth=d, loss_density=rho))
        if len(buildings) != n_buildings:
            raise ValueError("building count mismatch in header")
        grid = GridSpec(nx, ny, nz)
        raw = fh.read(grid.num_voxels * 8)
        values = np.frombuffer(raw, dtype="<f8").reshape(grid.shape)
    return Environment(
        region=Region(rx, ry, rz),
        buildings=tuple(buildings),
        loss_field=LossField(grid=grid, values=values),
        path_loss=PathLossParams(l0=l0, gamma=gamma, d0=d0),
        id=env_id,
    )
