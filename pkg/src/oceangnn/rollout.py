"""Autoregressive multi-day forecasts with interchangeable forcing sources."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DataError, DayDataset
from .gnn_model import MultiScaleGNN, NumericalError
from .ocean_grid import FieldSet, day_of_year, load_fields, save_fields

FORCING_KINDS = ("forecast", "reanalysis", "climatology")


class ForcingGapError(DataError):
    """A forcing source cannot supply a day the run needs."""


def day_of_year_key(day: int) -> int:
    """Climatology slot for a day; the leap day slot 366 reuses 365."""
    return min(day_of_year(day), 365)


def day_of_year_mean(fields: Sequence[FieldSet]) -> dict[int, np.ndarray]:
    """Per day-of-year mean of a field sequence, accumulated in float64.

    Samples falling on day-of-year 366 are left out; lookups for that slot use 365.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for f in fields:
        doy = day_of_year(f.day)
        if doy == 366:
            continue
        v = np.asarray(f.values, np.float64)
        if doy in sums:
            sums[doy] += v
            counts[doy] += 1
        else:
            sums[doy] = v.copy()
            counts[doy] = 1
    return {k: sums[k] / counts[k] for k in sorted(sums)}


@dataclass
class ForcingSource:
    """Supplies A(t) for a run initialized at ``t0``.

    ``reanalysis`` returns the dataset's analyses; ``forecast`` returns the
    dataset's forecast product issued on ``t0`` (analyses for days <= t0);
    ``climatology`` returns day-of-year means restamped to the requested day.
    """

    kind: str
    dataset: DayDataset | None = None
    table: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    channels: tuple[str, ...] = ()
    grid: object = None

    def __post_init__(self):
        if self.kind not in FORCING_KINDS:
            raise ValueError(f"forcing kind must be one of {FORCING_KINDS}, got {self.kind!r}")
        if self.kind == "climatology":
            if not self.table:
                raise ValueError("climatology forcing needs a day-of-year table")
        elif self.dataset is None:
            raise ValueError(f"{self.kind} forcing needs a dataset")

    def fields(self, day: int, t0: int) -> FieldSet:
        try:
            if self.kind == "reanalysis":
                return self.dataset.forcing(day)
            if self.kind == "forecast":
                return self.dataset.forcing(day) if day <= t0 else self.dataset.forecast(t0, day)
        except DataError as exc:
            raise ForcingGapError(f"{self.kind} forcing missing for day {day}: {exc}") from None
        key = day_of_year_key(day)
        if key not in self.table:
            raise ForcingGapError(f"climatology has no entry for day-of-year {key}")
        return FieldSet(self.grid, self.channels, self.table[key].astype(np.float32), day)

    def prefetch(self, t0: int, days: Sequence[int]) -> dict[int, FieldSet]:
        """Resolve every day up front so gaps surface before any compute."""
        return {d: self.fields(d, t0) for d in days}


def build_climatology(forcing: Sequence[FieldSet] | DayDataset, require_full_year: bool = True) -> ForcingSource:
    """Climatological forcing: per day-of-year mean over all supplied days."""
    if isinstance(forcing, DayDataset):
        forcing = [forcing.forcing(d) for d in forcing.forcing_days]
    forcing = list(forcing)
    if not forcing:
        raise ValueError("cannot build a climatology from no data")
    table = day_of_year_mean(forcing)
    if require_full_year and len(table) < 365:
        raise ValueError(f"climatology needs at least one full year, got {len(table)} days of year")
    return ForcingSource("climatology", table=table, channels=forcing[0].channels, grid=forcing[0].grid)


@dataclass
class ForecastRun:
    t0: int
    horizon: int
    states: list[FieldSet]  # lead 1..horizon
    forcing_kind: str
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.states) != self.horizon:
            raise ValueError("a run holds exactly one state per lead")
        for k, s in enumerate(self.states, start=1):
            if s.day != self.t0 + k:
                raise ValueError(f"lead {k} state stamped {s.day}, expected {self.t0 + k}")

    def lead(self, k: int) -> FieldSet:
        return self.states[k - 1]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, s in enumerate(self.states, start=1):
            name = f"lead_{k:03d}.ogf"
            save_fields(s, out / name)
            paths.append(name)
        manifest = {
            "t0": self.t0,
            "stamps": {"init": [self.t0 - 1, self.t0], "leads": [s.day for s in self.states]},
            "horizon": self.horizon,
            "forcing": self.forcing_kind,
            "outputs": paths,
            **self.record,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, out_dir, depth=None) -> "ForecastRun":
        out = Path(out_dir)
        m = json.loads((out / "manifest.json").read_text())
        states = [load_fields(out / p, depth) for p in m["outputs"]]
        record = {k: v for k, v in m.items() if k not in ("t0", "stamps", "horizon", "forcing", "outputs")}
        return cls(m["t0"], m["horizon"], states, m["forcing"], record)


def run_forecast(
    x_m1: FieldSet,
    x_0: FieldSet,
    forcing: ForcingSource,
    horizon: int,
    model: MultiScaleGNN,
    params,
    record: dict | None = None,
) -> ForecastRun:
    """Feed predictions back for ``horizon`` daily steps.

    Step k uses the two most recent states and forcing at t0+k-1, t0+k, t0+k+1.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    t0 = x_0.day
    if x_m1.day != t0 - 1:
        raise ValueError(f"initial conditions must be consecutive, got days {x_m1.day} and {t0}")
    a = forcing.prefetch(t0, range(t0 - 1, t0 + horizon + 1))
    prev, cur = x_m1, x_0
    states = []
    for k in range(horizon):
        t = t0 + k
        try:
            nxt = model.step(params, prev, cur, a[t - 1], a[t], a[t + 1])
        except NumericalError as exc:
            raise NumericalError(f"lead {k + 1}: {exc}") from None
        if not np.isfinite(nxt.rows()).all():
            raise NumericalError(f"non-finite state at lead {k + 1}")
        states.append(nxt)
        prev, cur = cur, nxt
    return ForecastRun(t0, horizon, states, forcing.kind, dict(record or {}))
