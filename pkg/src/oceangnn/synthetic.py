"""Analytic, wind-coupled toy ocean used for training and tests.

Ocean state = drifting Gaussian eddies (SSH with geostrophic-style currents)
+ smooth temperature/salinity backgrounds with a seasonal cycle + a
surface-trapped wind-driven current ``coupling * wind``. Wind = rotating
seasonal pattern + large-scale AR(1) weather anomalies. Everything is a closed
form of the day index, so any day can be produced on demand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .ocean_grid import EPOCH, ChannelSchema, FieldSet, OceanGrid, SSH, day_of_year, level_channel, save_fields

_STREAM_EDDIES = 1
_STREAM_WIND = 2
_STREAM_NOISE = 3
_STREAM_FORECAST = 4

# Idealized continents as (lat_min, lat_max, lon_min, lon_max) boxes, degrees east.
CONTINENTS = (
    (10.0, 62.0, 255.0, 295.0),
    (-55.0, 10.0, 280.0, 320.0),
    (-35.0, 35.0, 0.0, 40.0),
    (-35.0, 35.0, 350.0, 360.0),
    (35.0, 70.0, 0.0, 60.0),
    (20.0, 70.0, 60.0, 115.0),
    (-38.0, -12.0, 115.0, 150.0),
    (-90.0, -70.0, 0.0, 360.0),
)


def land_mask(kind: str, lat2: np.ndarray, lon2: np.ndarray) -> np.ndarray:
    """True on land."""
    if kind == "none":
        return np.zeros(lat2.shape, bool)
    if kind == "hemisphere":
        return lon2 >= 180.0
    if kind == "continents":
        land = np.zeros(lat2.shape, bool)
        for la0, la1, lo0, lo1 in CONTINENTS:
            land |= (lat2 >= la0) & (lat2 <= la1) & (lon2 >= lo0) & (lon2 < lo1)
        return land
    raise ValueError(f"unknown land mask kind {kind!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    n_lat: int = 90
    n_lon: int = 180
    schema: str = "toy"
    seed: int = 0
    wind_seed: int | None = None
    land: str = "continents"
    n_eddies: int = 48
    eddy_radius: tuple[float, float] = (4.0, 9.0)
    eddy_amplitude: float = 0.3
    drift_speed: tuple[float, float] = (0.3, 1.0)
    geostrophic_scale: float = 6.0
    coupling: float = 0.03
    sst_coupling: float = 10.0
    wind_modes: int = 12
    wind_anomaly_std: float = 4.0
    wind_memory: float = 0.6
    forecast_timescale: float = 3.0
    forecast_noise: float = 0.5
    noise: float = 0.0
    max_days: int = 8000

    def __post_init__(self):
        if self.n_lat < 4 or self.n_lon < 8:
            raise ValueError("degenerate grid: need at least 4 x 8 cells")
        if self.coupling < 0:
            raise ValueError("coupling must be >= 0")
        if self.schema not in ("toy", "full"):
            raise ValueError("schema must be 'toy' or 'full'")
        object.__setattr__(self, "eddy_radius", tuple(self.eddy_radius))
        object.__setattr__(self, "drift_speed", tuple(self.drift_speed))

    def channel_schema(self) -> ChannelSchema:
        return ChannelSchema.toy() if self.schema == "toy" else ChannelSchema.full()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eddy_radius"] = list(self.eddy_radius)
        d["drift_speed"] = list(self.drift_speed)
        return d


class SyntheticOcean:
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        self.config = config
        self.schema = config.channel_schema()
        c = config
        lat = -90.0 + (np.arange(c.n_lat) + 0.5) * 180.0 / c.n_lat
        lon = np.arange(c.n_lon) * 360.0 / c.n_lon
        self.lon2, self.lat2 = np.meshgrid(lon, lat)
        land = land_mask(c.land, self.lat2, self.lon2)
        if land.all():
            raise ValueError("land mask covers the whole grid")
        rad = np.deg2rad(self.lat2)
        depth = 1200.0 + 2800.0 * (0.5 + 0.5 * np.cos(3 * rad) * np.cos(np.deg2rad(2 * self.lon2)))
        self.grid = OceanGrid(mask=~land, depth=np.where(land, 0.0, depth))
        self._init_eddies()
        self._init_wind()

    # setup ------------------------------------------------------------------
    def _init_eddies(self):
        c = self.config
        rng = np.random.default_rng([c.seed, _STREAM_EDDIES])
        n = c.n_eddies
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        self.eddies = {
            "lat0": rng.uniform(-60.0, 60.0, n),
            "lon0": rng.uniform(0.0, 360.0, n),
            "radius": rng.uniform(*c.eddy_radius, n),
            "amplitude": sign * rng.uniform(0.4, 1.0, n) * c.eddy_amplitude,
            "drift": rng.uniform(*c.drift_speed, n),
            "wobble": rng.uniform(0.5, 2.0, n),
            "wobble_period": rng.uniform(20.0, 60.0, n),
            "phase": rng.uniform(0.0, 2 * np.pi, n),
            "life_period": rng.uniform(40.0, 120.0, n),
        }

    def _init_wind(self):
        c = self.config
        wseed = c.seed if c.wind_seed is None else c.wind_seed
        rng = np.random.default_rng([wseed, _STREAM_WIND])
        k = c.wind_modes
        rad_lat = np.deg2rad(self.lat2)
        rad_lon = np.deg2rad(self.lon2)
        m = rng.integers(1, 5, k)
        n = rng.integers(1, 4, k)
        ph = rng.uniform(0, 2 * np.pi, (k, 2))
        # streamfunction modes -> non-divergent wind patterns of unit rms
        pu, pv = [], []
        for i in range(k):
            psi_lat = np.cos(rad_lat) * np.sin(n[i] * rad_lat * 2 + ph[i, 0])
            dpsi_lat = -np.sin(rad_lat) * np.sin(n[i] * rad_lat * 2 + ph[i, 0]) + 2 * n[i] * np.cos(rad_lat) * np.cos(n[i] * rad_lat * 2 + ph[i, 0])
            u = -dpsi_lat * np.cos(m[i] * rad_lon + ph[i, 1])
            v = -psi_lat * m[i] * np.sin(m[i] * rad_lon + ph[i, 1])
            s = np.sqrt(np.mean(u * u + v * v) / 2)
            pu.append(u / s)
            pv.append(v / s)
        self._wind_u = np.stack(pu)
        self._wind_v = np.stack(pv)
        t_modes = []
        for i in range(k):
            t = np.cos(rad_lat) * np.cos((i % 3 + 1) * rad_lon + ph[i, 1]) * np.cos((i % 2 + 1) * rad_lat + ph[i, 0])
            t_modes.append(t / np.sqrt(np.mean(t * t)))
        self._air_t = np.stack(t_modes)

        # AR(1) amplitudes, one row per day
        rho = c.wind_memory
        shocks = rng.standard_normal((c.max_days, 2, k))
        amp = np.empty_like(shocks)
        amp[0] = shocks[0]
        scale = np.sqrt(1 - rho * rho)
        for t in range(1, c.max_days):
            amp[t] = rho * amp[t - 1] + scale * shocks[t]
        self._amp = amp  # [:, 0] wind, [:, 1] air temperature

    # forcing ----------------------------------------------------------------
    def _season(self, day: int) -> float:
        return 2 * np.pi * (day_of_year(day) - 1) / 365.25

    def _check_day(self, day: int):
        if not 0 <= day < self.config.max_days:
            raise IndexError(f"day {day} outside generated range [0, {self.config.max_days})")

    def _forcing_from_amplitudes(self, day: int, wind_amp: np.ndarray, air_amp: np.ndarray) -> FieldSet:
        c = self.config
        theta = self._season(day)
        rad_lat = np.deg2rad(self.lat2)
        rad_lon = np.deg2rad(self.lon2)
        u10, v10 = self._wind(day, wind_amp)
        t_anom = 1.5 * np.tensordot(air_amp, self._air_t, axes=1)
        t2m = self._air_background(theta) + t_anom
        speed = np.hypot(u10, v10)
        fields = {
            "u10": u10,
            "v10": v10,
            "t2m": t2m,
            "d2m": t2m - 2.0 - 0.1 * speed,
            "precipitation": np.maximum(0.0, 2.0 + 3.0 * np.cos(2 * rad_lat) * np.cos(rad_lon - theta) + 0.5 * t_anom),
            "shortwave_flux": 200.0 + 120.0 * np.cos(rad_lat) * (1 + 0.3 * np.sin(theta) * np.sign(rad_lat)),
            "longwave_flux": 50.0 + 2.0 * (t2m - 273.15),
            "latent_heat_flux": 10.0 * speed + 2.0 * t_anom,
            "sensible_heat_flux": 1.5 * speed - 3.0 * t_anom,
            "sea_level_pressure": 101325.0 + 800.0 * np.sin(2 * rad_lat) * np.cos(rad_lon - theta) + 50.0 * np.tensordot(wind_amp, self._air_t, axes=1),
        }
        values = np.stack([fields[name] for name in self.schema.forcing]).astype(np.float32)
        return FieldSet(self.grid, self.schema.forcing, values, day)

    def _air_background(self, theta: float) -> np.ndarray:
        rad_lat = np.deg2rad(self.lat2)
        return 273.15 + 28.0 * np.cos(rad_lat) ** 2 - 8.0 + 6.0 * np.sin(rad_lat) * np.cos(theta)

    def forcing(self, day: int) -> FieldSet:
        """Reanalysis-like forcing valid on ``day``."""
        self._check_day(day)
        return self._forcing_from_amplitudes(day, self._amp[day, 0], self._amp[day, 1])

    def forecast(self, t0: int, day: int) -> FieldSet:
        """Forcing for ``day`` as a forecast issued on ``t0``.

        Days up to ``t0`` are analyses. Beyond it the anomaly relaxes toward the
        seasonal (climatological) state with e-folding ``forecast_timescale`` days,
        plus noise whose variance s(1-s) keeps the error below climatology's.
        """
        self._check_day(day)
        lead = day - t0
        if lead <= 0:
            return self.forcing(day)
        c = self.config
        s = 1.0 - np.exp(-lead / c.forecast_timescale)
        rng = np.random.default_rng([c.seed if c.wind_seed is None else c.wind_seed, _STREAM_FORECAST, t0, day])
        noise = c.forecast_noise * np.sqrt(s * (1 - s)) * rng.standard_normal((2, c.wind_modes))
        amp = (1 - s) * self._amp[day] + noise
        return self._forcing_from_amplitudes(day, amp[0], amp[1])

    def wind_anomaly_amplitudes(self, day: int) -> np.ndarray:
        return self._amp[day].copy()

    # ocean ----------------------------------------------------------------
    def eddy_centres(self, day: int) -> tuple[np.ndarray, np.ndarray]:
        e = self.eddies
        lat = e["lat0"] + e["wobble"] * np.sin(2 * np.pi * day / e["wobble_period"] + e["phase"])
        lon = (e["lon0"] - e["drift"] * day) % 360.0
        return lat, lon

    def _eddy_fields(self, day: int):
        e = self.eddies
        clat, clon = self.eddy_centres(day)
        amp = e["amplitude"] * (0.8 + 0.2 * np.sin(2 * np.pi * day / e["life_period"] + e["phase"]))
        lat = self.lat2.ravel()[None, :]
        lon = self.lon2.ravel()[None, :]
        dx = ((lon - clon[:, None] + 180.0) % 360.0 - 180.0) * np.cos(np.deg2rad(clat))[:, None]
        dy = lat - clat[:, None]
        r2 = e["radius"][:, None] ** 2
        eta = amp[:, None] * np.exp(-(dx * dx + dy * dy) / (2 * r2))
        deta_dx = (-eta * dx / r2).sum(axis=0)
        deta_dy = (-eta * dy / r2).sum(axis=0)
        shape = self.lat2.shape
        return eta.sum(axis=0).reshape(shape), deta_dx.reshape(shape), deta_dy.reshape(shape)

    def ocean(self, day: int) -> FieldSet:
        self._check_day(day)
        c = self.config
        theta = self._season(day)
        rad_lat = np.deg2rad(self.lat2)
        eta, ex, ey = self._eddy_fields(day)
        u_g = -c.geostrophic_scale * ey
        v_g = c.geostrophic_scale * ex
        u10, v10 = self._wind(day, self._amp[day, 0])
        t_anom = 1.5 * np.tensordot(self._amp[day, 1], self._air_t, axes=1)

        z0 = self.schema.levels[0]
        ssh = eta + 0.05 * np.sin(rad_lat) * np.cos(theta)
        seasonal_sst = 3.0 * np.sin(rad_lat) * np.cos(theta)
        out = {SSH: ssh}
        for z in self.schema.levels:
            ekman = np.exp(-(z - z0) / 25.0)
            geo = np.exp(-z / 500.0)
            thermo = np.exp(-z / 400.0)
            out[level_channel("eastward_current", z)] = u_g * geo + c.coupling * u10 * ekman
            out[level_channel("northward_current", z)] = v_g * geo + c.coupling * v10 * ekman
            t_bg = (2.0 + 26.0 * np.cos(rad_lat) ** 2) * thermo + 4.0 * (1 - thermo)
            out[level_channel("temperature", z)] = (
                t_bg + seasonal_sst * np.exp(-z / 50.0) + 8.0 * eta * np.exp(-z / 300.0)
                + c.coupling * c.sst_coupling * t_anom * ekman
            )
            out[level_channel("salinity", z)] = (
                34.6 + 1.0 * np.cos(2 * rad_lat) * np.exp(-z / 600.0) + 1.5 * eta * np.exp(-z / 300.0)
                + 0.1 * np.sin(theta) * np.exp(-z / 50.0)
            )
        values = np.stack([out[name] for name in self.schema.ocean])
        if c.noise > 0:
            rng = np.random.default_rng([c.seed, _STREAM_NOISE, day])
            values = values + c.noise * values.std(axis=(1, 2), keepdims=True) * rng.standard_normal(values.shape)
        values = values.astype(np.float32)
        values[:, ~self.grid.mask] = np.nan
        return FieldSet(self.grid, self.schema.ocean, values, day)

    def _wind(self, day: int, amp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Seasonal rotating pattern plus anomaly modes weighted by ``amp``."""
        theta = self._season(day)
        rad_lat = np.deg2rad(self.lat2)
        rad_lon = np.deg2rad(self.lon2)
        s = self.config.wind_anomaly_std
        u = -6.0 * np.cos(3 * rad_lat) + 2.5 * np.cos(rad_lat) * np.cos(rad_lon - theta)
        v = 2.0 * np.cos(rad_lat) * np.sin(rad_lon - theta)
        return u + s * np.tensordot(amp, self._wind_u, axes=1), v + s * np.tensordot(amp, self._wind_v, axes=1)

    def statics(self) -> FieldSet:
        g = self.grid
        values = np.stack([self.lat2, self.lon2, g.depth]).astype(np.float32)
        return FieldSet(g, ("latitude", "longitude", "depth"), values, 0)

    @cached_property
    def _manifest(self) -> dict:
        return {
            "generator": self.config.to_dict(),
            "coupling": self.config.coupling,
            "epoch": EPOCH.isoformat(),
            "eddies": {k: v.tolist() for k, v in self.eddies.items()},
        }

    def manifest(self) -> dict:
        return json.loads(json.dumps(self._manifest))


def generate(config: GeneratorConfig, n_days: int, start_day: int = 0):
    """Materialize ``n_days`` consecutive days: (ocean, forcing, statics, truth manifest)."""
    if n_days < 3:
        raise ValueError("n_days must be >= 3")
    gen = SyntheticOcean(config)
    days = range(start_day, start_day + n_days)
    ocean = [gen.ocean(d) for d in days]
    forcing = [gen.forcing(d) for d in days]
    return ocean, forcing, gen.statics(), gen.manifest()


def write_dataset(gen: SyntheticOcean, days, out_dir, forecast_inits=()) -> Path:
    """Write OGF1 files in the directory layout read by ``DayDataset.from_directory``."""
    out = Path(out_dir)
    (out / "ocean").mkdir(parents=True, exist_ok=True)
    (out / "forcing").mkdir(parents=True, exist_ok=True)
    save_fields(gen.statics(), out / "statics.ogf")
    days = list(days)
    for d in days:
        save_fields(gen.ocean(d), out / "ocean" / f"{d:06d}.ogf")
        save_fields(gen.forcing(d), out / "forcing" / f"{d:06d}.ogf")
    for t0, horizon in forecast_inits:
        fdir = out / "forecast" / f"{t0:06d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for d in range(t0 - 1, t0 + horizon + 1):
            save_fields(gen.forecast(t0, d), fdir / f"{d:06d}.ogf")
    manifest = gen.manifest()
    manifest["days"] = [days[0], days[-1]] if days else []
    (out / "truth_manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
