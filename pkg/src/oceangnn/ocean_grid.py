"""Latitude-longitude ocean grid, channel-stacked fields, normalization and regridding."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _binio
from .sphere_mesh import latlon_to_xyz

OGF_MAGIC = b"OGF1"
OGF_VERSION = 1

STD_FLOOR = 1e-6

# Integer day stamps count days since this date.
EPOCH = dt.date(1993, 1, 1)


def day_to_date(day: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(day))


def day_of_year(day: int) -> int:
    return day_to_date(day).timetuple().tm_yday


OCEAN_VARIABLES = ("temperature", "eastward_current", "northward_current", "salinity")
SSH = "sea_surface_height"

# GLORYS12 levels in metres, shallow to deep.
DEPTH_LEVELS = (
    0.49, 2.65, 5.08, 7.93, 11.41, 15.81, 21.60, 29.44, 40.34, 55.76, 77.85, 92.32,
    109.73, 130.67, 155.85, 186.13, 222.48, 266.04, 318.13, 380.21, 453.94, 541.09, 643.57,
)

FORCING_VARIABLES = (
    "u10",  # 10 m eastward wind
    "v10",  # 10 m northward wind
    "precipitation",
    "t2m",
    "d2m",
    "shortwave_flux",
    "longwave_flux",
    "latent_heat_flux",
    "sensible_heat_flux",
    "sea_level_pressure",
)

STATIC_VARIABLES = ("latitude", "longitude", "depth")


def level_channel(variable: str, depth: float) -> str:
    return f"{variable}@{depth:g}"


def parse_channel(name: str) -> tuple[str, float | None]:
    """Split "temperature@0.49" into ("temperature", 0.49); surface fields give None."""
    var, sep, depth = name.partition("@")
    return (var, float(depth)) if sep else (var, None)


@dataclass(frozen=True)
class ChannelSchema:
    """Fixed channel ordering for the ocean state, forcing and static fields."""

    levels: tuple[float, ...] = DEPTH_LEVELS
    forcing: tuple[str, ...] = FORCING_VARIABLES
    statics: tuple[str, ...] = STATIC_VARIABLES
    ocean_variables: tuple[str, ...] = OCEAN_VARIABLES
    with_ssh: bool = True

    @classmethod
    def full(cls) -> "ChannelSchema":
        return cls()

    @classmethod
    def toy(cls) -> "ChannelSchema":
        """Two levels and the three forcing fields the synthetic generator couples to."""
        return cls(levels=(0.49, 40.34), forcing=("u10", "v10", "t2m"))

    @property
    def ocean(self) -> tuple[str, ...]:
        names = [level_channel(v, d) for v in self.ocean_variables for d in self.levels]
        if self.with_ssh:
            names.append(SSH)
        return tuple(names)

    @property
    def c_x(self) -> int:
        return len(self.ocean)

    @property
    def c_a(self) -> int:
        return len(self.forcing)

    @property
    def c_s(self) -> int:
        return len(self.statics)

    @property
    def c_in(self) -> int:
        return 2 * self.c_x + 3 * self.c_a + self.c_s

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "forcing": list(self.forcing),
            "statics": list(self.statics),
            "ocean_variables": list(self.ocean_variables),
            "with_ssh": self.with_ssh,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelSchema":
        return cls(
            levels=tuple(float(x) for x in d["levels"]),
            forcing=tuple(d["forcing"]),
            statics=tuple(d.get("statics", STATIC_VARIABLES)),
            ocean_variables=tuple(d.get("ocean_variables", OCEAN_VARIABLES)),
            with_ssh=bool(d.get("with_ssh", True)),
        )


@dataclass(frozen=True, eq=False)
class OceanGrid:
    """Global regular grid: cell-centred latitudes, longitudes from 0 in equal steps."""

    mask: np.ndarray  # (n_lat, n_lon) bool, True = ocean
    depth: np.ndarray  # (n_lat, n_lon) metres, 0 on land

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or min(mask.shape) < 1:
            raise ValueError("mask must be a non-empty 2-D array")
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != mask.shape:
            raise ValueError("depth and mask shapes differ")
        if not mask.any():
            raise ValueError("grid has no ocean cells")
        if (depth < 0).any() or (depth[~mask] > 0).any():
            raise ValueError("depth must be >= 0 and zero on land")
        mask.setflags(write=False)
        depth.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "depth", depth)

    @classmethod
    def regular(cls, n_lat: int, n_lon: int, mask=None, depth=None) -> "OceanGrid":
        if n_lat < 1 or n_lon < 1:
            raise ValueError("grid dimensions must be positive")
        mask = np.ones((n_lat, n_lon), bool) if mask is None else np.asarray(mask, bool)
        if depth is None:
            depth = np.where(mask, 1.0, 0.0)
        return cls(mask=mask, depth=depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def n_lat(self) -> int:
        return self.mask.shape[0]

    @property
    def n_lon(self) -> int:
        return self.mask.shape[1]

    @property
    def dlat(self) -> float:
        return 180.0 / self.n_lat

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    @property
    def lat(self) -> np.ndarray:
        return -90.0 + (np.arange(self.n_lat) + 0.5) * self.dlat

    @property
    def lon(self) -> np.ndarray:
        return np.arange(self.n_lon) * self.dlon

    @property
    def ocean_index(self) -> np.ndarray:
        """Flat row-major (lat, lon) indices of ocean cells."""
        return np.flatnonzero(self.mask.ravel())

    @property
    def n_ocean(self) -> int:
        return int(self.mask.sum())

    def cell_latlon(self) -> tuple[np.ndarray, np.ndarray]:
        lon2, lat2 = np.meshgrid(self.lon, self.lat)
        return lat2, lon2

    def ocean_latlon(self) -> tuple[np.ndarray, np.ndarray]:
        lat2, lon2 = self.cell_latlon()
        return lat2[self.mask], lon2[self.mask]

    def ocean_xyz(self) -> np.ndarray:
        return latlon_to_xyz(*self.ocean_latlon())

    def same_layout(self, other: "OceanGrid") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.mask, other.mask))

    def with_mask(self, mask) -> "OceanGrid":
        mask = np.asarray(mask, bool)
        return OceanGrid(mask=mask, depth=np.where(mask, self.depth, 0.0))


@dataclass(frozen=True, eq=False)
class FieldSet:
    """Channel-stacked fields [channels, n_lat, n_lon] valid on one day."""

    grid: OceanGrid
    channels: tuple[str, ...]
    values: np.ndarray
    day: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (len(self.channels), *self.grid.shape):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(self.channels)} channels on grid {self.grid.shape}"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("duplicate channel names")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "day", int(self.day))

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.channels.index(name)]

    def select(self, names: Sequence[str]) -> "FieldSet":
        idx = [self.channels.index(n) for n in names]
        return FieldSet(self.grid, tuple(names), self.values[idx], self.day)

    def rows(self, dtype=np.float64) -> np.ndarray:
        """Ocean-cell rows [n_ocean, channels] in row-major cell order."""
        flat = self.values.reshape(len(self.channels), -1)
        return np.ascontiguousarray(flat[:, self.grid.ocean_index].T, dtype=dtype)

    @classmethod
    def from_rows(cls, grid: OceanGrid, channels, rows: np.ndarray, day: int, fill=np.nan, dtype=np.float32):
        rows = np.asarray(rows)
        values = np.full((len(channels), grid.n_lat * grid.n_lon), fill, dtype=dtype)
        values[:, grid.ocean_index] = rows.T
        return cls(grid, tuple(channels), values.reshape(len(channels), *grid.shape), day)

    def replace(self, values=None, day=None) -> "FieldSet":
        return FieldSet(
            self.grid,
            self.channels,
            self.values if values is None else values,
            self.day if day is None else day,
        )


def with_land_fill(fields: FieldSet, fill=np.nan) -> FieldSet:
    values = np.array(fields.values, copy=True)
    values[:, ~fields.grid.mask] = fill
    return fields.replace(values=values)


# ----------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]
    diff_std: dict[str, float] = field(default_factory=dict)

    def arrays(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        missing = [n for n in names if n not in self.mean]
        if missing:
            raise KeyError(f"no statistics for channels {missing}")
        return (
            np.array([self.mean[n] for n in names]),
            np.array([self.std[n] for n in names]),
        )

    def diff_array(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.diff_std]
        if missing:
            raise KeyError(f"no difference statistics for channels {missing}")
        return np.array([self.diff_std[n] for n in names])

    def to_json(self) -> str:
        chans = {}
        for name in self.mean:
            entry = {"mean": self.mean[name], "std": self.std[name]}
            if name in self.diff_std:
                entry["diff_std"] = self.diff_std[name]
            chans[name] = entry
        return json.dumps({"std_floor": STD_FLOOR, "channels": chans}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        chans = json.loads(text)["channels"]
        return cls(
            mean={k: float(v["mean"]) for k, v in chans.items()},
            std={k: float(v["std"]) for k, v in chans.items()},
            diff_std={k: float(v["diff_std"]) for k, v in chans.items() if "diff_std" in v},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def _channel_moments(stack: np.ndarray, cells: np.ndarray | None):
    """Mean and std per channel of [time, channel, lat, lon], optionally over a cell mask."""
    flat = stack.reshape(stack.shape[0], stack.shape[1], -1)
    if cells is not None:
        flat = flat[:, :, cells.ravel()]
    x = np.moveaxis(flat, 1, 0).reshape(stack.shape[1], -1).astype(np.float64)
    mean = x.mean(axis=1)
    std = np.sqrt(((x - mean[:, None]) ** 2).mean(axis=1))
    return mean, std


def compute_norm_stats(
    ocean: Sequence[FieldSet],
    forcing: Sequence[FieldSet] = (),
    statics: FieldSet | None = None,
) -> NormStats:
    """Per-channel level statistics plus one-step difference spread of the ocean state.

    Ocean-state statistics use ocean cells only; forcing and statics use every
    cell. Difference statistics pair each state with the one valid on the next
    day, so the ocean sequence needs at least one consecutive pair.
    """
    ocean = sorted(ocean, key=lambda f: f.day)
    if not ocean:
        raise ValueError("empty dataset")
    grid = ocean[0].grid
    names = ocean[0].channels
    pairs = [(a, b) for a, b in zip(ocean, ocean[1:]) if b.day == a.day + 1]
    if not pairs:
        raise ValueError("need at least two consecutive days to estimate difference statistics")

    stack = np.stack([f.values for f in ocean])
    mean, std = _channel_moments(stack, grid.mask)
    diffs = np.stack([b.values.astype(np.float64) - a.values for a, b in pairs])
    d_mean, d_std = _channel_moments(diffs, grid.mask)
    del d_mean

    out_mean = dict(zip(names, mean.tolist()))
    out_std = dict(zip(names, np.maximum(std, STD_FLOOR).tolist()))
    out_diff = dict(zip(names, np.maximum(d_std, STD_FLOOR).tolist()))

    if forcing:
        f_names = forcing[0].channels
        m, s = _channel_moments(np.stack([f.values for f in forcing]), None)
        out_mean.update(zip(f_names, m.tolist()))
        out_std.update(zip(f_names, np.maximum(s, STD_FLOOR).tolist()))
    if statics is not None:
        m, s = _channel_moments(statics.values[None], None)
        out_mean.update(zip(statics.channels, m.tolist()))
        out_std.update(zip(statics.channels, np.maximum(s, STD_FLOOR).tolist()))
    return NormStats(out_mean, out_std, out_diff)


def normalize(fields: FieldSet, stats: NormStats) -> FieldSet:
    """(value - mean) / std per channel; land sentinels become 0."""
    mean, std = stats.arrays(fields.channels)
    out = (fields.values - mean[:, None, None]) / std[:, None, None]
    out = np.where(np.isnan(out), 0.0, out)
    return fields.replace(values=out)


def denormalize(fields: FieldSet, stats: NormStats) -> FieldSet:
    mean, std = stats.arrays(fields.channels)
    return fields.replace(values=fields.values * std[:, None, None] + mean[:, None, None])


def denormalize_delta(delta: np.ndarray, stats: NormStats, channels: Sequence[str]) -> np.ndarray:
    """Scale a normalized tendency [..., channels] to physical units."""
    return np.asarray(delta) * stats.diff_array(channels)


# ----------------------------------------------------------------------------
# regridding


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            0.5 * (-t3 + 2 * t2 - t),
            0.5 * (3 * t3 - 5 * t2 + 2),
            0.5 * (-3 * t3 + 4 * t2 + t),
            0.5 * (t3 - t2),
        ]
    )


def _lagrange4(t: np.ndarray) -> np.ndarray:
    # nodes at -1, 0, 1, 2
    return np.stack(
        [
            -t * (t - 1) * (t - 2) / 6,
            (t + 1) * (t - 1) * (t - 2) / 2,
            -(t + 1) * t * (t - 2) / 2,
            (t + 1) * t * (t - 1) / 6,
        ]
    )


_KERNELS = {"catmull_rom": _catmull_rom, "lagrange": _lagrange4}


def _stencil(pos: np.ndarray, kernel) -> tuple[np.ndarray, np.ndarray]:
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    base = np.floor(pos)
    w = kernel(pos - base)
    idx = base.astype(np.int64)[None, :] + np.arange(-1, 3)[:, None]
    return idx, w


def regrid_bicubic(src_grid: OceanGrid, src: np.ndarray, dst_grid: OceanGrid, kernel: str = "catmull_rom") -> np.ndarray:
    """Cubic-convolution interpolation of [..., n_lat, n_lon] fields onto ``dst_grid``.

    Periodic in longitude, edge-clamped in latitude. ``kernel`` selects the
    Catmull-Rom weights (default) or four-point Lagrange weights.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.shape[-2:] != src_grid.shape:
        raise ValueError("source array does not match source grid")
    weights = _KERNELS[kernel]
    s_lat, d_lat = src_grid.lat, dst_grid.lat
    lo, hi = s_lat[0] - 0.5 * src_grid.dlat, s_lat[-1] + 0.5 * src_grid.dlat
    if d_lat.min() < lo - 1e-9 or d_lat.max() > hi + 1e-9:
        raise ValueError("destination latitudes outside the source span")

    i_idx, i_w = _stencil((d_lat - s_lat[0]) / src_grid.dlat, weights)
    i_idx = np.clip(i_idx, 0, src_grid.n_lat - 1)
    j_idx, j_w = _stencil((dst_grid.lon - src_grid.lon[0]) / src_grid.dlon, weights)
    j_idx = j_idx % src_grid.n_lon

    rows = np.zeros(src.shape[:-2] + (dst_grid.n_lat, src_grid.n_lon))
    for k in range(4):
        rows += i_w[k][:, None] * src[..., i_idx[k], :]
    out = np.zeros(src.shape[:-2] + dst_grid.shape)
    for k in range(4):
        out += j_w[k] * rows[..., j_idx[k]]
    return out


# ----------------------------------------------------------------------------
# model input


def check_consecutive(x_prev: FieldSet, x_cur: FieldSet, a_prev: FieldSet, a_cur: FieldSet, a_next: FieldSet) -> None:
    t = x_cur.day
    got = (x_prev.day, a_prev.day, a_cur.day, a_next.day)
    if got != (t - 1, t - 1, t, t + 1):
        raise ValueError(
            f"inputs are not consecutive around day {t}: "
            f"x_prev={x_prev.day} a_prev={a_prev.day} a_cur={a_cur.day} a_next={a_next.day}"
        )


def assemble_grid_input(
    x_prev: FieldSet,
    x_cur: FieldSet,
    a_prev: FieldSet,
    a_cur: FieldSet,
    a_next: FieldSet,
    statics: FieldSet,
    stats: NormStats,
    dtype=np.float64,
) -> np.ndarray:
    """Normalized grid-node features [n_ocean, 2*C_X + 3*C_A + C_S].

    Column order is X(t-1), X(t), A(t-1), A(t), A(t+1), S; rows enumerate ocean
    cells in row-major (lat, lon) order.
    """
    check_consecutive(x_prev, x_cur, a_prev, a_cur, a_next)
    grid = x_cur.grid
    for f in (x_prev, a_prev, a_cur, a_next, statics):
        if f.grid.shape != grid.shape:
            raise ValueError("all inputs must share one grid")
    if x_prev.channels != x_cur.channels or not (a_prev.channels == a_cur.channels == a_next.channels):
        raise ValueError("inconsistent channel schemas across time")
    blocks = []
    for f in (x_prev, x_cur, a_prev, a_cur, a_next, statics):
        mean, std = stats.arrays(f.channels)
        blocks.append((f.rows(np.float64) - mean) / std)
    return np.concatenate(blocks, axis=1).astype(dtype)


# ----------------------------------------------------------------------------
# OGF1 files


def save_fields(fields: FieldSet, path) -> None:
    g = fields.grid
    with open(path, "wb") as f:
        _binio.write_magic(f, OGF_MAGIC, OGF_VERSION)
        f.write(np.array([g.n_lat, g.n_lon, len(fields.channels)], "<u4").tobytes())
        f.write(np.array([fields.day], "<i8").tobytes())
        for name in fields.channels:
            _binio.write_str(f, name)
        f.write(np.packbits(g.mask.ravel(), bitorder="little").tobytes())
        _binio.write_array(f, fields.values, "<f4")


def load_fields(path, depth: np.ndarray | None = None) -> FieldSet:
    with open(Path(path), "rb") as f:
        _binio.read_magic(f, OGF_MAGIC, (OGF_VERSION,))
        n_lat, n_lon, n_chan = _binio.read(f, "<III")
        (day,) = _binio.read(f, "<q")
        names = tuple(_binio.read_str(f) for _ in range(n_chan))
        n_cells = n_lat * n_lon
        bits = _binio.read_array(f, "u1", (n_cells + 7) // 8)
        mask = np.unpackbits(bits, bitorder="little")[:n_cells].astype(bool).reshape(n_lat, n_lon)
        values = _binio.read_array(f, "<f4", n_chan * n_cells).reshape(n_chan, n_lat, n_lon)
    if depth is None and "depth" in names:
        depth = np.where(mask, values[names.index("depth")], 0.0).astype(np.float64)
    grid = OceanGrid.regular(n_lat, n_lon, mask=mask, depth=depth)
    return FieldSet(grid, names, values.astype(np.float32), day)
