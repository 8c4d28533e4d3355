import numpy as np
import pytest

from elpq import driver
from elpq.driver import (
    MethodologyConfig,
    count_macs,
    layer_output_mse,
    load_quantized_model,
    rows_csv,
    run_pipeline,
    save_quantized_model,
    search_cbwa,
    stored_fixed_point,
    sweep,
)
from elpq.engine import QuantizedModel, calibrate, evaluate_accuracy
from elpq.quantizer import quantize_model

# Accuracies below are on the bundled 500-image test split and are frozen
# characterisations of the fixture, not tunable thresholds.


def test_config_validation(formats):
    f = formats["F1"].spec
    with pytest.raises(ValueError):
        MethodologyConfig(f, bw_min=8, bw_max=6)
    with pytest.raises(ValueError):
        MethodologyConfig(f, ac=-0.1)
    MethodologyConfig(f, ac=1.0)


def test_search_no_constraint_reaches_minimum(model, testset, calibset, formats):
    cfg = MethodologyConfig(formats["F1"].spec, ac=1.0, bw_max=8, bw_min=3)
    res = search_cbwa(model, testset, cfg, calibset)
    assert res.cbwa == 3 and res.constraint_met
    assert [b for b, _ in res.trace] == [8, 7, 6, 5, 4, 3]


def test_search_fixture_characterisation(model, testset, calibset, formats):
    spec = formats["F1"].spec
    strict = search_cbwa(model, testset, MethodologyConfig(spec, ac=0.0), calibset)
    assert strict.cbwa == 8 and [b for b, _ in strict.trace] == [8, 7]
    loose = search_cbwa(model, testset, MethodologyConfig(spec, ac=0.002), calibset)
    assert loose.cbwa == 6


def test_search_uses_first_crossing(monkeypatch, model, testset, formats):
    curve = {None: 0.90, 8: 0.90, 7: 0.85, 6: 0.90, 5: 0.90}
    monkeypatch.setattr(driver, "float_accuracy", lambda m, d, act_bits=None, **kw: curve[act_bits])
    res = search_cbwa(model, testset, MethodologyConfig(formats["F1"].spec, ac=0.01, bw_min=5))
    assert res.cbwa == 8 and [b for b, _ in res.trace] == [8, 7]


def test_search_flags_failure_at_max(monkeypatch, model, testset, formats):
    monkeypatch.setattr(driver, "float_accuracy", lambda m, d, act_bits=None, **kw: 0.9 if act_bits is None else 0.5)
    res = search_cbwa(model, testset, MethodologyConfig(formats["F1"].spec, ac=0.01))
    assert res.cbwa == 8 and not res.constraint_met


@pytest.fixture(scope="module")
def f1_run(model, testset, calibset, formats):
    return run_pipeline(model, testset, MethodologyConfig(formats["F1"].spec, ac=0.02), calibset)


def test_pipeline_report(f1_run, model, formats):
    qmodel, report = f1_run
    assert report.constraint_met and report.baseline_acc - report.final_acc <= 0.02
    assert report.bits_per_weight == 4 and report.cbwa == 4
    assert len(report.scale_factors) == len(model.weighted_indices()) == len(report.flips)
    assert report.evaluations <= 8 - report.initial_cbwa + 1


def test_pipeline_deterministic(f1_run, model, testset, calibset, formats, tmp_path):
    q2, r2 = run_pipeline(model, testset, MethodologyConfig(formats["F1"].spec, ac=0.02), calibset)
    assert r2.to_json() == f1_run[1].to_json()
    save_quantized_model(f1_run[0], tmp_path / "a" / "m.json", driver.final_fixed_point(f1_run[1]))
    save_quantized_model(q2, tmp_path / "b" / "m.json", driver.final_fixed_point(r2))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_pipeline_no_constraint_single_pass(model, testset, calibset, formats):
    _, report = run_pipeline(model, testset, MethodologyConfig(formats["F2"].spec, ac=1.0, bw_min=3), calibset)
    assert report.evaluations == 1 and report.cbwa == 3


def test_pipeline_unmet_stops_at_max(model, testset, calibset, formats):
    _, report = run_pipeline(model, testset, MethodologyConfig(formats["F2"].spec, ac=0.0, bw_max=6), calibset)
    assert not report.constraint_met and report.cbwa == 6
    assert report.evaluations == 6 - report.initial_cbwa + 1


def test_quantized_round_trip_accuracy(f1_run, testset, tmp_path):
    qmodel, report = f1_run
    path = tmp_path / "q" / "model.json"
    save_quantized_model(qmodel, path, driver.final_fixed_point(report))
    back = load_quantized_model(path)
    fp = stored_fixed_point(path)
    assert fp == driver.final_fixed_point(report)
    for i, qt in qmodel.weights.items():
        assert back.weights[i] == qt
    assert evaluate_accuracy(back, testset, fp) == report.final_acc


def test_uniform_round_trip(model, testset, calibset, tmp_path):
    qw, _ = quantize_model(model, 8)
    qmodel = QuantizedModel(model, qw)
    save_quantized_model(qmodel, tmp_path / "u.json")
    back = load_quantized_model(tmp_path / "u.json")
    cfg = calibrate(model, calibset.images, 8)
    for i in qw:
        assert np.array_equal(back.weights[i].int_levels, qw[i].int_levels)
        assert back.weights[i].scale == qw[i].scale
    assert evaluate_accuracy(back, testset, cfg) == evaluate_accuracy(qmodel, testset, cfg)


@pytest.fixture(scope="module")
def sweep_rows(model, testset, calibset, formats, cost_table):
    chosen = [f for f in formats.values() if f.design][:4]
    return sweep(model, testset, chosen, [8, 7, 6, 5, 4], cost_table, calibset)


def test_sweep_shape_and_order(sweep_rows):
    assert len(sweep_rows) == 20
    assert [(r["format"], r["act_bits"]) for r in sweep_rows[:6]] == [
        ("F1", 8), ("F1", 7), ("F1", 6), ("F1", 5), ("F1", 4), ("F2", 8)]
    assert all(r["pdp_pj"] > 0 for r in sweep_rows)


def test_sweep_deterministic(sweep_rows, model, testset, calibset, formats, cost_table):
    chosen = [f for f in formats.values() if f.design][:4]
    again = sweep(model, testset, chosen, [8, 7, 6, 5, 4], cost_table, calibset)
    assert rows_csv(again).encode() == rows_csv(sweep_rows).encode()


def test_sweep_wider_activations_not_worse(sweep_rows):
    # two binomial standard errors at p ~ 0.97, n = 500
    tol = 2 * np.sqrt(0.97 * 0.03 / 500)
    by_fmt = {}
    for r in sweep_rows:
        by_fmt.setdefault(r["format"], {})[r["act_bits"]] = r["accuracy"]
    for accs in by_fmt.values():
        for hi in accs:
            for lo in accs:
                if hi > lo:
                    assert accs[hi] >= accs[lo] - tol


def test_count_macs(model):
    # conv1 16*16*8*9 + conv2 8*8*16*72 + conv3 4*4*32*144 + fc 10*128
    assert count_macs(model) == 18432 + 73728 + 73728 + 1280


def test_layer_mse_zero_for_exact_weights(model, testset):
    from elpq.quantizer import QuantizedTensor

    exact = {i: QuantizedTensor(model.layers[i].weights, model.layers[i].weights, 1.0) for i in model.weighted_indices()}
    mse = layer_output_mse(model, exact, testset.images[:10])
    assert set(mse) == {"conv1", "conv2", "conv3", "fc1"} and all(v == 0 for v in mse.values())
