"""Day-indexed access to ocean states, forcing and statics."""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Sequence

from .ocean_grid import FieldSet, load_fields


class DataError(ValueError):
    """Missing or inconsistent input data."""


class _LRU:
    def __init__(self, size: int):
        self.size = size
        self._d: OrderedDict = OrderedDict()

    def get(self, key, make):
        if key in self._d:
            self._d.move_to_end(key)
            return self._d[key]
        value = make()
        if self.size:
            self._d[key] = value
            if len(self._d) > self.size:
                self._d.popitem(last=False)
        return value


class DayDataset:
    """Ocean and forcing FieldSets keyed by integer day, loaded lazily and cached.

    ``forecast_fn(t0, day)`` optionally supplies a degraded forecast-like forcing
    product issued on ``t0``.
    """

    def __init__(
        self,
        days: Sequence[int],
        statics: FieldSet,
        ocean_fn: Callable[[int], FieldSet],
        forcing_fn: Callable[[int], FieldSet],
        forecast_fn: Callable[[int, int], FieldSet] | None = None,
        forcing_days: Sequence[int] | None = None,
        cache: int = 256,
    ):
        self.days = tuple(sorted(int(d) for d in days))
        self.forcing_days = self.days if forcing_days is None else tuple(sorted(int(d) for d in forcing_days))
        self._day_set = set(self.days)
        self._forcing_set = set(self.forcing_days)
        self.statics = statics
        self._ocean_fn = ocean_fn
        self._forcing_fn = forcing_fn
        self._forecast_fn = forecast_fn
        self._cache = _LRU(cache)

    @property
    def grid(self):
        return self.statics.grid

    @property
    def has_forecast(self) -> bool:
        return self._forecast_fn is not None

    def ocean(self, day: int) -> FieldSet:
        if day not in self._day_set:
            raise DataError(f"no ocean state for day {day}")
        return self._cache.get(("o", day), lambda: self._ocean_fn(day))

    def forcing(self, day: int) -> FieldSet:
        if day not in self._forcing_set:
            raise DataError(f"no forcing for day {day}")
        return self._cache.get(("a", day), lambda: self._forcing_fn(day))

    def forecast(self, t0: int, day: int) -> FieldSet:
        if self._forecast_fn is None:
            raise DataError("dataset has no forecast forcing product")
        return self._cache.get(("f", t0, day), lambda: self._forecast_fn(t0, day))

    def has_days(self, days) -> bool:
        return all(d in self._day_set for d in days)

    def subset(self, days) -> "DayDataset":
        days = [d for d in days if d in self._day_set]
        return DayDataset(days, self.statics, self.ocean, self.forcing, self._forecast_fn, self.forcing_days, cache=0)

    # constructors ---------------------------------------------------------
    @classmethod
    def from_generator(cls, gen, days, cache: int = 256) -> "DayDataset":
        return cls(days, gen.statics(), gen.ocean, gen.forcing, gen.forecast, cache=cache)

    @classmethod
    def from_sequences(cls, ocean: Sequence[FieldSet], forcing: Sequence[FieldSet], statics: FieldSet) -> "DayDataset":
        o = {f.day: f for f in ocean}
        a = {f.day: f for f in forcing}
        return cls(o, statics, o.__getitem__, a.__getitem__, forcing_days=a, cache=0)

    @classmethod
    def from_directory(cls, path, cache: int = 256) -> "DayDataset":
        """Read the layout written by ``synthetic.write_dataset``.

        ``statics.ogf``, ``ocean/<day>.ogf``, ``forcing/<day>.ogf`` and optional
        ``forecast/<t0>/<day>.ogf``. Without forecast files, a generator config in
        ``truth_manifest.json`` is used to reproduce the forecast product.
        """
        root = Path(path)
        if not (root / "statics.ogf").exists():
            raise DataError(f"{root} is not a dataset directory (statics.ogf missing)")
        statics = load_fields(root / "statics.ogf")
        depth = statics.grid.depth

        def days_in(sub):
            d = root / sub
            return sorted(int(p.stem) for p in d.glob("*.ogf")) if d.is_dir() else []

        forecast_fn = None
        manifest = root / "truth_manifest.json"
        if (root / "forecast").is_dir():
            def forecast_fn(t0, day):
                p = root / "forecast" / f"{t0:06d}" / f"{day:06d}.ogf"
                if not p.exists():
                    raise DataError(f"no forecast forcing for init {t0} day {day}")
                return load_fields(p, depth)
        elif manifest.exists():
            from .synthetic import GeneratorConfig, SyntheticOcean

            cfg = json.loads(manifest.read_text()).get("generator")
            if cfg is not None:
                gen = SyntheticOcean(GeneratorConfig(**cfg))
                forecast_fn = gen.forecast

        return cls(
            days_in("ocean"),
            statics,
            lambda d: load_fields(root / "ocean" / f"{d:06d}.ogf", depth),
            lambda d: load_fields(root / "forcing" / f"{d:06d}.ogf", depth),
            forecast_fn,
            forcing_days=days_in("forcing"),
            cache=cache,
        )
