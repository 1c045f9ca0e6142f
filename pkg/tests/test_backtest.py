from datetime import date

import numpy as np
import pytest

from loadanon.backtest import (
    RAW, ExperimentConfig, Window, aggregate_anonymized, aggregate_raw, config_from_dict,
    default_k_ladder, default_windows, model_seed, run_experiment, sample_seed, score,
)
from loadanon.errors import ConfigError, LoadAnonError, OutOfRange, ShapeMismatch
from loadanon.forecast import ModelSpec
from loadanon.ingest import SynthConfig, synth_panel
from loadanon.mdav import anonymize
from loadanon.panel import TimeIndex

from conftest import make_panel


def test_default_ladder():
    ladder = default_k_ladder()
    assert ladder == [2, 3, 5, 10, 15, 20, 25, 30, 40, 50, 70, 100, 200, 500, 1000]
    assert all(a < b for a, b in zip(ladder, ladder[1:]))


def test_top_level_gives_one_group():
    panel = synth_panel(SynthConfig(n_households=1000, days=1))
    assert anonymize(panel, default_k_ladder()[-1]).assignment.n_groups == 1


def test_default_windows():
    ws = default_windows(2013)
    assert len(ws) == 5 and [w.label for w in ws] == [1, 2, 3, 4, 5]
    assert ws[0].train_end == date(2013, 8, 28) and ws[0].forecast_day == date(2013, 8, 29)
    assert ws[-1].forecast_day == date(2013, 12, 31)
    index = TimeIndex("2013-01-01T00:00:00", 365 * 48)
    for w in ws:
        lo, hi = w.bounds(index)
        assert hi - lo == 48
    with pytest.raises(OutOfRange):
        ws[-1].bounds(TimeIndex("2013-01-01T00:00:00", 300 * 48))


def test_window_invariant():
    with pytest.raises(LoadAnonError):
        Window(date(2013, 1, 1), date(2013, 1, 3), 1)


def test_aggregate_raw_examples():
    np.testing.assert_array_equal(aggregate_raw([[1, 1], [2, 2]]), [3, 3])
    np.testing.assert_array_equal(aggregate_raw([[4, 5]]), [4, 5])
    np.testing.assert_array_equal(aggregate_raw([[2, 2], [1, 1]]), aggregate_raw([[1, 1], [2, 2]]))


def test_aggregate_anonymized_examples():
    np.testing.assert_array_equal(aggregate_anonymized([[0.5, 1.5]], [1000]), [500, 1500])
    f = np.random.default_rng(0).random((4, 48))
    np.testing.assert_array_equal(aggregate_anonymized(f, [1, 1, 1, 1]), aggregate_raw(f))
    np.testing.assert_array_equal(aggregate_anonymized([[2, 3]], [2]), [4, 6])
    with pytest.raises(ShapeMismatch):
        aggregate_anonymized([[1, 2]], [1, 2])


def test_observed_day_conservation():
    panel = synth_panel(SynthConfig(n_households=57, days=2, seed=4))
    raw = aggregate_raw(panel.values)
    for k in (2, 3, 5, 10, 20, 57):
        anon = anonymize(panel, k)
        np.testing.assert_allclose(aggregate_anonymized(anon.centroids, anon.sizes), raw, rtol=1e-12)


def test_score_examples():
    perfect = score([1.0, 2.0], [1.0, 2.0])
    assert all(v == 0 for v in perfect.as_dict().values())
    s = score([2.0], [1.0])
    assert (s.mae, s.mape, s.mse, s.rmse) == (1.0, 0.5, 1.0, 1.0)
    assert s.smape == pytest.approx(2 / 3)


def test_score_exclusions():
    s = score([0.0, 2.0], [1.0, 2.0])
    assert s.mape == 0.0 and s.mape_excluded == 1
    assert s.smape == pytest.approx(1.0)  # |0-1| / 0.5 averaged with 0
    assert score([0.0, 1.0], [0.0, 1.0]).smape_excluded == 1
    with pytest.raises(LoadAnonError):
        score([0.0], [0.0])
    with pytest.raises(ShapeMismatch):
        score([1.0], [1.0, 2.0])


# ---------------------------------------------------------------- config


def minimal(**extra):
    return {"input": {"synthetic": {"n_households": 4, "days": 10}}, "k_ladder": [RAW],
            "models": [{"kind": "seasonal-naive"}], "seed": 1, **extra}


def test_config_from_dict_minimal():
    cfg = config_from_dict(minimal())
    assert cfg.levels == [RAW] and cfg.repeats == 2 and cfg.windows is None


def test_config_levels_put_raw_first():
    cfg = config_from_dict(minimal(k_ladder=[5, RAW, 2]))
    assert cfg.levels == [RAW, 5, 2]
    assert config_from_dict(minimal(k_ladder="default")).levels == [RAW, *default_k_ladder()]


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d.pop("seed"), ".seed"),
    (lambda d: d.update(seed="x"), ".seed"),
    (lambda d: d.update(k_ladder=[1]), ".k_ladder[0]"),
    (lambda d: d["models"].append({"kind": "arima"}), ".models[1].kind"),
    (lambda d: d.update(repeats=0), ".repeats"),
    (lambda d: d.update(extra=1), "."),
    (lambda d: d.update(windows=[{"train_end": "2013-13-01", "forecast_day": "2013-01-02",
                                  "label": 1}]), ".windows"),
])
def test_config_schema_errors_name_the_field(mutate, path):
    raw = minimal()
    mutate(raw)
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.path.startswith(path)


def test_config_rejects_both_inputs():
    raw = minimal()
    raw["input"]["panel"] = "x.csv"
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.path == ".input"


def test_config_windows_forms():
    cfg = config_from_dict(minimal(windows={"year": 2014}))
    assert cfg.windows[0].train_end == date(2014, 8, 28)
    cfg = config_from_dict(minimal(windows=[{"train_end": "2013-01-05", "forecast_day": "2013-01-06",
                                             "label": 1}]))
    assert cfg.windows[0].forecast_day == date(2013, 1, 6)


# ---------------------------------------------------------------- experiment


def periodic_panel(n=5, days=20):
    rng = np.random.default_rng(0)
    day = 1 + rng.random((n, 1)) * np.sin(2 * np.pi * np.arange(48) / 48 + rng.random((n, 1)))
    return make_panel(np.tile(day, days))


def two_windows():
    return [Window(date(2013, 1, 15), date(2013, 1, 16), 1), Window(date(2013, 1, 18), date(2013, 1, 19), 2)]


def test_seasonal_naive_on_periodic_panel_is_exact():
    cfg = ExperimentConfig([RAW], [ModelSpec("seasonal-naive")], seed=0, windows=two_windows(), repeats=1)
    report = run_experiment(cfg, periodic_panel())
    assert len(report.records) == 2 and not report.failures
    assert all(r["smape"] == 0 and r["mae"] == 0 for r in report.records)


def test_report_cardinality_and_determinism():
    panel = synth_panel(SynthConfig(n_households=12, days=20, seed=2))
    models = [ModelSpec("seasonal-naive"), ModelSpec("decomposition")]
    cfg = ExperimentConfig([2, 5], models, seed=3, windows=two_windows(), repeats=2)
    a = run_experiment(cfg, panel)
    assert len(a.records) == 3 * 2 * 2 * 2 == a.meta["expected_records"]
    b = run_experiment(cfg, panel, workers=2)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "k,model,window,repeat,metric,value"
    for row in a.summary:
        assert row["n"] == 4 and row["mae_sd"] >= 0
    assert all(np.isfinite(r[m]) and r[m] >= 0 for r in a.records for m in ("mae", "mse", "smape"))


def test_actual_target_independent_of_k():
    panel = synth_panel(SynthConfig(n_households=10, days=20, seed=2))
    cfg = ExperimentConfig([2, 10], [ModelSpec("seasonal-naive")], seed=0, windows=two_windows(),
                           repeats=1)
    report = run_experiment(cfg, panel)
    # seasonal naive at k=N forecasts the total exactly as the raw level does
    by_level = {r["k"]: r["mae"] for r in report.records if r["window"] == 1}
    assert by_level[10] == pytest.approx(by_level[RAW], rel=1e-12)


def test_failing_cells_are_recorded():
    panel = synth_panel(SynthConfig(n_households=4, days=20, seed=2))
    spec = ModelSpec("mlp", hyperparameters={"input_size": 2000})
    cfg = ExperimentConfig([RAW], [spec, ModelSpec("seasonal-naive")], seed=0, windows=two_windows(),
                           repeats=1)
    report = run_experiment(cfg, panel)
    assert len(report.failures) == 2 and len(report.records) == 2
    assert "TooShort" in report.failures[0]["error"]


def test_sampling_repeats_and_history_cap():
    panel = synth_panel(SynthConfig(n_households=20, days=20, seed=2))
    cfg = ExperimentConfig([2], [ModelSpec("seasonal-naive")], seed=0, windows=two_windows(),
                           repeats=2, sample_size=10, history_days=3)
    report = run_experiment(cfg, panel)
    assert report.meta["n_households"] == 10
    maes = {(r["k"], r["repeat"]): r["mae"] for r in report.records if r["window"] == 1}
    assert maes[(RAW, 1)] != maes[(RAW, 2)]


def test_seed_derivation_is_stable():
    assert model_seed(0, 0, 0, 0, 0, 0) == model_seed(0, 0, 0, 0, 0, 0)
    assert model_seed(0, 0, 0, 0, 0, 0) != model_seed(0, 0, 0, 0, 0, 1)
    assert sample_seed(7, 1) != sample_seed(7, 0)
