import json

import numpy as np
import pytest

from oceangnn.dataset import DataError, DayDataset
from oceangnn.evaluation import REGIONS
from oceangnn.synthetic import GeneratorConfig, SyntheticOcean, generate, write_dataset

SMALL = dict(n_lat=18, n_lon=36)


def surface(fields, var):
    return fields.channel(f"{var}@0.49").astype(np.float64)


class TestDeterminism:
    def test_same_config_same_fields(self):
        a, b = SyntheticOcean(GeneratorConfig(**SMALL)), SyntheticOcean(GeneratorConfig(**SMALL))
        for d in (0, 17, 400):
            np.testing.assert_array_equal(a.ocean(d).values, b.ocean(d).values)
            np.testing.assert_array_equal(a.forcing(d).values, b.forcing(d).values)
            np.testing.assert_array_equal(a.forecast(d, d + 3).values, b.forecast(d, d + 3).values)

    def test_seed_changes_fields(self):
        a = SyntheticOcean(GeneratorConfig(**SMALL)).ocean(3).values
        b = SyntheticOcean(GeneratorConfig(seed=1, **SMALL)).ocean(3).values
        assert not np.array_equal(a, b, equal_nan=True)


class TestCoupling:
    def test_reseeded_wind_leaves_uncoupled_ocean_unchanged(self):
        a = SyntheticOcean(GeneratorConfig(coupling=0.0, **SMALL))
        b = SyntheticOcean(GeneratorConfig(coupling=0.0, wind_seed=99, **SMALL))
        for d in (0, 5, 50):
            np.testing.assert_array_equal(a.ocean(d).values, b.ocean(d).values)
            assert not np.array_equal(a.forcing(d).values, b.forcing(d).values)

    def test_analytic_wind_response(self):
        c = 0.05
        coupled = SyntheticOcean(GeneratorConfig(coupling=c, **SMALL))
        free = SyntheticOcean(GeneratorConfig(coupling=0.0, **SMALL))
        m = coupled.grid.mask
        for d in (3, 30):
            a = coupled.forcing(d)
            du = surface(coupled.ocean(d), "eastward_current") - surface(free.ocean(d), "eastward_current")
            dv = surface(coupled.ocean(d), "northward_current") - surface(free.ocean(d), "northward_current")
            np.testing.assert_allclose(du[m], c * a.channel("u10")[m], atol=1e-5)
            np.testing.assert_allclose(dv[m], c * a.channel("v10")[m], atol=1e-5)
            deep = coupled.ocean(d).channel("eastward_current@40.34") - free.ocean(d).channel("eastward_current@40.34")
            np.testing.assert_allclose(deep[m], c * a.channel("u10")[m] * np.exp(-(40.34 - 0.49) / 25.0), atol=1e-5)

    def test_regression_recovers_coupling(self):
        cfg = GeneratorConfig(n_lat=36, n_lon=72, coupling=0.03)
        gen = SyntheticOcean(cfg)
        m = gen.grid.mask
        days = range(0, 120)
        u = np.array([surface(gen.ocean(d), "eastward_current")[m] for d in days])
        w = np.array([gen.forcing(d).channel("u10")[m] for d in days], np.float64)
        u -= u.mean(axis=0)
        w -= w.mean(axis=0)
        slope = float((u * w).sum() / (w * w).sum())
        assert abs(slope - 0.03) < 0.1 * 0.03


@pytest.fixture(scope="module")
def gen():
    return SyntheticOcean(GeneratorConfig(n_lat=45, n_lon=90))


class TestFields:
    def test_physical_bounds(self, gen):
        for d in (0, 90, 180, 270):
            o = gen.ocean(d)
            m = gen.grid.mask
            for name in o.channels:
                v = o.channel(name)[m]
                assert np.all(np.isfinite(v))
                if name.startswith("temperature"):
                    assert -2 < v.min() and v.max() < 35
                elif name.startswith("salinity"):
                    assert 30 < v.min() and v.max() < 40
                elif "current" in name:
                    assert np.abs(v).max() < 3
                else:
                    assert np.abs(v).max() < 2
            assert np.all(np.isnan(o.values[:, ~m]))

    def test_land_layout(self, gen):
        lat2, lon2 = gen.grid.cell_latlon()
        for name in ("yellow_sea", "gulf_stream", "kuroshio_extension", "south_china_sea"):
            assert (REGIONS[name].cell_mask(gen.grid) & gen.grid.mask).any(), name
        assert not gen.grid.mask[lat2 < -70].any()

    def test_statics(self, gen):
        s = gen.statics()
        assert s.channels == ("latitude", "longitude", "depth")
        assert np.all(s.channel("depth")[gen.grid.mask] > 0)

    def test_day_range(self, gen):
        with pytest.raises(IndexError):
            gen.ocean(-1)
        with pytest.raises(IndexError):
            gen.forcing(gen.config.max_days)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_lat=2)
        with pytest.raises(ValueError):
            GeneratorConfig(coupling=-1.0)

    def test_generate(self):
        ocean, forcing, statics, manifest = generate(GeneratorConfig(**SMALL), 3, start_day=10)
        assert [f.day for f in ocean] == [10, 11, 12] and len(forcing) == 3
        assert manifest["coupling"] == 0.03 and len(manifest["eddies"]["lat0"]) == 48
        with pytest.raises(ValueError):
            generate(GeneratorConfig(**SMALL), 2)


class TestForecastProduct:
    def test_analysis_up_to_issue_day(self):
        gen = SyntheticOcean(GeneratorConfig(**SMALL))
        for d in (8, 10):
            np.testing.assert_array_equal(gen.forecast(10, d).values, gen.forcing(d).values)

    def test_error_grows_but_stays_below_climatology(self):
        gen = SyntheticOcean(GeneratorConfig(**SMALL))
        err = np.zeros(10)
        clim = 0.0
        inits = range(20, 400, 7)
        for t0 in inits:
            for lead in range(1, 11):
                f = gen.forecast(t0, t0 + lead).channel("u10").astype(np.float64)
                a = gen.forcing(t0 + lead).channel("u10").astype(np.float64)
                err[lead - 1] += np.mean((f - a) ** 2)
            amp = np.zeros_like(gen.wind_anomaly_amplitudes(t0 + 10))
            c = gen._forcing_from_amplitudes(t0 + 10, amp[0], amp[1]).channel("u10").astype(np.float64)
            clim += np.mean((c - gen.forcing(t0 + 10).channel("u10")) ** 2)
        # leads 1, 2, 4, 8 verify on different days, so only well-separated leads are compared
        assert err[0] < err[1] < err[3] < err[7]
        # same verifying day as the climatology reference
        assert err[9] < clim


class TestDatasetFiles:
    def test_roundtrip_and_regenerated_forecast(self, tmp_path):
        gen = SyntheticOcean(GeneratorConfig(**SMALL))
        write_dataset(gen, range(0, 6), tmp_path / "d")
        ds = DayDataset.from_directory(tmp_path / "d")
        assert ds.days == tuple(range(6)) and ds.has_forecast
        np.testing.assert_array_equal(ds.ocean(4).values, gen.ocean(4).values)
        np.testing.assert_array_equal(ds.forecast(2, 5).values, gen.forecast(2, 5).values)
        manifest = json.loads((tmp_path / "d" / "truth_manifest.json").read_text())
        assert manifest["days"] == [0, 5] and manifest["generator"]["n_lat"] == 18

    def test_explicit_forecast_files(self, tmp_path):
        gen = SyntheticOcean(GeneratorConfig(**SMALL))
        write_dataset(gen, range(0, 6), tmp_path / "d", forecast_inits=[(2, 3)])
        ds = DayDataset.from_directory(tmp_path / "d")
        np.testing.assert_array_equal(ds.forecast(2, 5).values, gen.forecast(2, 5).values)
        with pytest.raises(DataError):
            ds.forecast(3, 5)

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(DataError):
            DayDataset.from_directory(tmp_path)
