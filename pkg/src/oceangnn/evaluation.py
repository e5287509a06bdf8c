"""Verification: masked RMSE by channel/depth/region, surface KE spectra, baselines."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ocean_grid import FieldSet, OceanGrid, parse_channel


@dataclass(frozen=True)
class Region:
    """Longitude/latitude box in degrees; longitudes may be given in [-180, 360) and may wrap."""

    name: str
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValueError(f"region {self.name}: lat_min must be < lat_max")

    def _lon_bounds(self):
        return self.lon_min % 360.0, self.lon_max % 360.0

    def contains(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, np.float64)
        lon = np.asarray(lon, np.float64) % 360.0
        in_lat = (lat >= self.lat_min) & (lat <= self.lat_max)
        if self.lon_max - self.lon_min >= 360.0:
            return in_lat & np.ones_like(lon, bool)
        lo, hi = self._lon_bounds()
        in_lon = (lon >= lo) & (lon <= hi) if lo <= hi else (lon >= lo) | (lon <= hi)
        return in_lat & in_lon

    def cell_mask(self, grid: OceanGrid) -> np.ndarray:
        lat2, lon2 = grid.cell_latlon()
        return self.contains(lat2, lon2)

    def columns(self, grid: OceanGrid) -> np.ndarray:
        """Grid longitude indices inside the box, ordered eastward from the western edge."""
        lon = grid.lon
        if self.lon_max - self.lon_min >= 360.0:
            return np.arange(grid.n_lon)
        lo, _ = self._lon_bounds()
        idx = np.flatnonzero(self.contains(np.full(lon.shape, 0.5 * (self.lat_min + self.lat_max)), lon))
        return idx[np.argsort((lon[idx] - lo) % 360.0, kind="stable")]

    def rows(self, grid: OceanGrid) -> np.ndarray:
        lat = grid.lat
        return np.flatnonzero((lat >= self.lat_min) & (lat <= self.lat_max))


# Degrees east; negative values are west.
REGIONS = {
    "gulf_stream": Region("gulf_stream", -76.0, -40.0, 35.0, 45.0),
    "kuroshio_extension": Region("kuroshio_extension", 120.0, 179.0, 20.0, 55.0),
    "south_china_sea": Region("south_china_sea", 100.0, 122.0, 0.0, 27.0),
    "yellow_sea": Region("yellow_sea", 118.0, 127.0, 30.0, 42.0),
}

SPECTRAL_REGIONS = {
    "north_pacific": Region("north_pacific", 145.0, 175.0, 10.0, 40.0),
    "north_atlantic": Region("north_atlantic", -60.0, -30.0, 10.0, 40.0),
}


def get_region(name: str | None) -> Region | None:
    """Look up a built-in box; ``None`` or "global" selects the whole grid."""
    if name is None or name == "global":
        return None
    table = {**REGIONS, **SPECTRAL_REGIONS}
    if name not in table:
        raise KeyError(f"unknown region {name!r}; known: {sorted(table)}")
    return table[name]


# ----------------------------------------------------------------------------
# RMSE


def _eval_mask(grid: OceanGrid, region: Region | None) -> np.ndarray:
    mask = grid.mask.copy()
    if region is not None:
        mask &= region.cell_mask(grid)
    if not mask.any():
        raise ValueError(f"region {region.name if region else 'global'} contains no ocean cells")
    return mask


def rmse(
    pred: FieldSet,
    truth: FieldSet,
    channels: Sequence[str] | None = None,
    region: Region | None = None,
    cos_lat: bool = False,
) -> dict[str, float]:
    """Root-mean-square error per channel over ocean cells (inside ``region``) in physical units.

    Cells are equally weighted unless ``cos_lat`` is set.
    """
    if not pred.grid.same_layout(truth.grid):
        raise ValueError("prediction and truth grids differ")
    channels = list(truth.channels if channels is None else channels)
    mask = _eval_mask(truth.grid, region)
    if cos_lat:
        w = np.cos(np.deg2rad(truth.grid.cell_latlon()[0]))[mask]
    else:
        w = np.ones(int(mask.sum()))
    w = w / w.sum()
    out = {}
    for name in channels:
        e = np.asarray(pred.channel(name), np.float64)[mask] - np.asarray(truth.channel(name), np.float64)[mask]
        out[name] = float(np.sqrt(np.dot(w, e * e)))
    return out


def depth_channels(channels: Sequence[str], variable: str) -> list[tuple[float, str]]:
    out = []
    for name in channels:
        var, depth = parse_channel(name)
        if var == variable and depth is not None:
            out.append((depth, name))
    return sorted(out)


def rmse_depth_profile(pred: FieldSet, truth: FieldSet, variable: str, region: Region | None = None, cos_lat: bool = False) -> list[tuple[float, float]]:
    """(depth, rmse) per level of ``variable``, shallow to deep."""
    levels = depth_channels(truth.channels, variable)
    if not levels:
        raise ValueError(f"{variable!r} has no depth-resolved channels")
    values = rmse(pred, truth, [n for _, n in levels], region, cos_lat)
    return [(d, values[n]) for d, n in levels]


# ----------------------------------------------------------------------------
# spectra


@dataclass
class SpectrumResult:
    wavenumber: np.ndarray  # cycles per degree longitude
    amplitude: np.ndarray
    region: str
    lead: int | None = None
    meta: dict = field(default_factory=dict)


def _row_spectrum(x: np.ndarray, window: np.ndarray | None) -> np.ndarray:
    """One-sided mean-square spectrum per row of x [rows, N], bins k = 0..N//2."""
    n = x.shape[1]
    x = x - x.mean(axis=1, keepdims=True)
    if window is not None:
        x = x * window
    p = np.abs(np.fft.rfft(x, axis=1)) ** 2 / (n * n)
    p[:, 1 : (n + 1) // 2] *= 2.0
    return p


def ke_spectrum(
    u: np.ndarray,
    v: np.ndarray,
    grid: OceanGrid,
    region: Region,
    window: str = "hann",
    lead: int | None = None,
) -> SpectrumResult:
    """Zonal kinetic-energy spectrum averaged over latitude rows of ``region``.

    Each row is detrended (mean removed), optionally Hann-windowed with the
    window rescaled to unit mean square, transformed along longitude and
    turned into a one-sided mean-square spectrum; KE(k) = (E_u + E_v) / 2.
    Rows with any land or non-finite value are dropped. Bins k >= 1 are
    reported in cycles per degree longitude.
    """
    if window not in ("hann", "none"):
        raise ValueError("window must be 'hann' or 'none'")
    cols = region.columns(grid)
    if len(cols) < 8:
        raise ValueError(f"region {region.name} spans {len(cols)} longitude samples, need at least 8")
    rows = region.rows(grid)
    u = np.asarray(u, np.float64)[np.ix_(rows, cols)]
    v = np.asarray(v, np.float64)[np.ix_(rows, cols)]
    ok = grid.mask[np.ix_(rows, cols)].all(axis=1) & np.isfinite(u).all(axis=1) & np.isfinite(v).all(axis=1)
    if not ok.any():
        raise ValueError(f"region {region.name} has no all-ocean latitude rows")
    n = len(cols)
    w = None
    if window == "hann":
        w = np.hanning(n)
        w = w / np.sqrt(np.mean(w * w))
    ke = 0.5 * (_row_spectrum(u[ok], w) + _row_spectrum(v[ok], w)).mean(axis=0)
    k = np.arange(len(ke))
    meta = {
        "estimator": "row-wise rfft along longitude, mean removed, one-sided mean-square normalization, row average",
        "window": window,
        "rows_used": int(ok.sum()),
        "rows_dropped": int((~ok).sum()),
        "n_lon": n,
        "units": "cycles per degree longitude",
    }
    return SpectrumResult(k[1:] / (n * grid.dlon), ke[1:], region.name, lead, meta)


def surface_channels(fields: FieldSet) -> tuple[str, str]:
    """Names of the shallowest eastward and northward current channels."""
    u = depth_channels(fields.channels, "eastward_current")
    v = depth_channels(fields.channels, "northward_current")
    if not u or not v:
        raise ValueError("fields carry no current channels")
    return u[0][1], v[0][1]


def surface_ke_spectrum(fields: FieldSet, region: Region, window: str = "hann", lead: int | None = None) -> SpectrumResult:
    cu, cv = surface_channels(fields)
    return ke_spectrum(fields.channel(cu), fields.channel(cv), fields.grid, region, window, lead)


# ----------------------------------------------------------------------------
# baselines


@dataclass
class BaselineCurves:
    leads: list[int]
    channels: list[str]
    persistence: np.ndarray  # [lead, channel]
    climatology: np.ndarray


def baselines(
    initial: FieldSet,
    truth: Sequence[FieldSet],
    climatology: Callable[[int], FieldSet],
    channels: Sequence[str] | None = None,
    region: Region | None = None,
    cos_lat: bool = False,
) -> BaselineCurves:
    """Per-lead RMSE of persistence (repeat ``initial``) and of the day-of-year climatology.

    ``truth`` lists the verifying states; the lead of each is its day minus ``initial.day``.
    """
    channels = list(initial.channels if channels is None else channels)
    leads, pers, clim = [], [], []
    for t in truth:
        leads.append(t.day - initial.day)
        p = rmse(initial, t, channels, region, cos_lat)
        c = rmse(climatology(t.day), t, channels, region, cos_lat)
        pers.append([p[n] for n in channels])
        clim.append([c[n] for n in channels])
    return BaselineCurves(leads, channels, np.array(pers), np.array(clim))


# ----------------------------------------------------------------------------
# CSV outputs

RMSE_FIELDS = ("case", "lead", "variable", "depth", "region", "value")
SPECTRUM_FIELDS = ("source", "region", "lead", "wavenumber", "amplitude")


def rmse_rows(case, lead: int, values: dict[str, float], region: Region | None) -> list[dict]:
    out = []
    for name, value in values.items():
        var, depth = parse_channel(name)
        out.append({
            "case": case,
            "lead": lead,
            "variable": var,
            "depth": "" if depth is None else depth,
            "region": "global" if region is None else region.name,
            "value": value,
        })
    return out


def write_rmse_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, RMSE_FIELDS)
        w.writeheader()
        w.writerows(rows)


def write_spectrum_csv(results: Sequence[tuple[str, SpectrumResult]], path) -> None:
    """``results`` pairs a source label (e.g. prediction, truth) with a spectrum."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, SPECTRUM_FIELDS)
        w.writeheader()
        for source, r in results:
            for k, a in zip(r.wavenumber, r.amplitude):
                w.writerow({"source": source, "region": r.region, "lead": "" if r.lead is None else r.lead,
                            "wavenumber": repr(float(k)), "amplitude": repr(float(a))})
