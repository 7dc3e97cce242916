import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_dispatch.scenarios import (
    DegenerateDataError,
    ScenarioParseError,
    ScenarioSeries,
    SyntheticGenConfig,
    compute_netload,
    lognormal_sigma,
    load_timeseries,
    netload_stats,
    perturb_forecast,
    realized_mape,
    scarcity_window,
    synthesize_scenarios,
    write_timeseries,
)


def _csv(path, rows, header="t,load_kw,renewable_kw"):
    path.write_text(header + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n")
    return path


def test_load_three_rows(tmp_path):
    s = load_timeseries(_csv(tmp_path / "a.csv", [(0, 10, 5), (1, 11, 6), (2, 12, 0)]), T=3)
    assert s.T == 3
    np.testing.assert_array_equal(s.load, [10, 11, 12])
    np.testing.assert_array_equal(s.renewable, [5, 6, 0])


def test_negative_value_names_row(tmp_path):
    rows = [(t, 10, 5) for t in range(10)]
    rows[6] = (6, -1, 5)
    with pytest.raises(ScenarioParseError, match="row 7"):
        load_timeseries(_csv(tmp_path / "a.csv", rows))


def test_length_mismatch(tmp_path):
    rows = [(t, 10, 5) for t in range(8759)]
    with pytest.raises(ScenarioParseError, match="expected 8760"):
        load_timeseries(_csv(tmp_path / "a.csv", rows), T=8760)


def test_missing_column(tmp_path):
    with pytest.raises(ScenarioParseError, match="renewable_kw"):
        load_timeseries(_csv(tmp_path / "a.csv", [(0, 1)], header="t,load_kw"))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4, allow_subnormal=True), st.floats(0, 1e4)),
                min_size=1, max_size=30))
def test_csv_round_trip_bit_exact(tmp_path_factory, pairs):
    s = ScenarioSeries("x", [p[0] for p in pairs], [p[1] for p in pairs])
    path = write_timeseries(s, tmp_path_factory.mktemp("rt") / "x.csv")
    back = load_timeseries(path, T=len(pairs))
    assert back.load.tobytes() == s.load.tobytes()
    assert back.renewable.tobytes() == s.renewable.tobytes()


def test_no_noise_gives_identical_scenarios():
    a, b = synthesize_scenarios(SyntheticGenConfig(seed=1, horizon=500, noise_level=0.0), 2)
    np.testing.assert_array_equal(a.load, b.load)
    np.testing.assert_array_equal(a.renewable, b.renewable)


def test_seeded_determinism():
    gen = SyntheticGenConfig(seed=9, horizon=400)
    a = synthesize_scenarios(gen, 3)
    b = synthesize_scenarios(gen, 3)
    for x, y in zip(a, b):
        assert x.load.tobytes() == y.load.tobytes()
        assert x.renewable.tobytes() == y.renewable.tobytes()
    c = synthesize_scenarios(SyntheticGenConfig(seed=10, horizon=400), 1)[0]
    assert not np.array_equal(a[0].load, c.load)


def test_diurnal_period():
    s = synthesize_scenarios(SyntheticGenConfig(horizon=24 * 20, noise_level=0.0,
                                                seasonal_amplitude=0.0), 1)[0]
    np.testing.assert_allclose(s.load[:24], s.load[24:48], rtol=1e-12)


def test_scarcity_window_raises_netload():
    gen = SyntheticGenConfig(seed=2, horizon=2160, scarcity_start=400, scarcity_length=336)
    for i, s in enumerate(synthesize_scenarios(gen, 3)):
        a, b = scarcity_window(gen, i)
        inside = np.zeros(s.T, bool)
        inside[a:b] = True
        assert s.netload[inside].mean() - s.netload[~inside].mean() >= gen.scarcity_amplitude


def test_scarcity_window_validation():
    with pytest.raises(ValueError):
        SyntheticGenConfig(horizon=100, scarcity_start=90, scarcity_length=20)


def test_equal_load_and_renewable_is_degenerate():
    s = ScenarioSeries("z", np.full(10, 3.0), np.full(10, 3.0))
    with pytest.raises(DegenerateDataError):
        compute_netload(s)


def test_normalised_mean_and_std():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(1000)
    s = ScenarioSeries("n", 100 + 5 + noise, np.full(1000, 100.0))
    nl = compute_netload(s)
    assert abs(nl.values.mean()) < 1e-9
    assert abs(nl.values.std() - 1) < 1e-9


def test_training_stats_round_trip():
    gen = SyntheticGenConfig(seed=3, horizon=300)
    train, test = synthesize_scenarios(gen, 4)[:3], synthesize_scenarios(gen, 4)[3]
    stats = netload_stats(train)
    nl = compute_netload(test, stats)
    assert nl.stats == stats
    np.testing.assert_allclose(nl.denormalize(), test.netload, atol=1e-9)


def test_zero_mape_forecast_is_truth():
    s = synthesize_scenarios(SyntheticGenConfig(horizon=200), 1)[0]
    f = perturb_forecast(s, 0.0)
    np.testing.assert_array_equal(f.load, s.load)
    np.testing.assert_array_equal(f.renewable, s.renewable)


@pytest.mark.parametrize("mape", [0.1, 0.2, 0.3])
def test_realised_mape_near_nominal(mape):
    s = synthesize_scenarios(SyntheticGenConfig(horizon=8760), 1)[0]
    f = perturb_forecast(s, mape, window=8760, seed=5)
    for fc, tr in ((f.load, s.load), (f.renewable, s.renewable)):
        assert 0.8 * mape <= realized_mape(fc, tr) <= 1.2 * mape


def test_lognormal_sigma_hits_mape_by_quadrature():
    from scipy import integrate, stats
    for mape in (0.05, 0.2, 0.5):
        sig = lognormal_sigma(mape)
        val, _ = integrate.quad(lambda z: abs(np.exp(sig * z - sig**2 / 2) - 1) * stats.norm.pdf(z), -12, 12)
        assert val == pytest.approx(mape, rel=1e-6)


def test_zero_truth_gives_zero_forecast():
    load = np.full(50, 20.0)
    ren = np.full(50, 7.0)
    ren[10] = 0.0
    f = perturb_forecast(ScenarioSeries("z", load, ren), 0.3, seed=1)
    assert f.renewable[10] == 0.0
    assert np.all(f.load >= 0) and np.all(f.renewable >= 0)


def test_forecast_rejects_bad_mape():
    s = ScenarioSeries("z", np.ones(5), np.ones(5))
    with pytest.raises(ValueError):
        perturb_forecast(s, 1.0)
