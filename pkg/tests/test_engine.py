import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elpq.cli import fixture_path
from elpq.elpbsd import DigitSpec, FormatSpec, enumerate_levels, join_code, valid_codes
from elpq.engine import (
    AccumulatorOverflow,
    FixedPointConfig,
    IntActivation,
    QuantizedModel,
    accuracy_from_logits,
    calibrate,
    conv_forward,
    evaluate_accuracy,
    fc_forward,
    float_forward,
    im2col,
    infer,
    layer_forward_float,
    maxpool,
    relu,
    requantize,
    required_acc_bits,
    shift_mac,
)
from elpq.quantizer import QuantizedTensor, quantize_model
from elpq.tensorio import Dataset, Layer, LayerDef, Model, read_tensor

S07 = FormatSpec((DigitSpec(True, range(8)),))
S13_S03 = FormatSpec((DigitSpec(True, (1, 3)), DigitSpec(True, range(4))))


def qt_from_levels(levels, spec=S07, scale=1.0):
    """QuantizedTensor whose integer levels are exactly ``levels``."""
    table = enumerate_levels(spec.with_scale(scale))
    levels = np.asarray(levels)
    idx = np.searchsorted(table.int_levels, levels)
    assert np.array_equal(table.int_levels[idx], levels)
    return QuantizedTensor.from_indices(idx, table)


def layer(kind, w, b=None, stride=1, pad=0):
    spec = LayerDef("L", kind, "w.ctns", None if b is None else "b.ctns", stride, pad)
    return Layer(spec, np.asarray(w, dtype=np.float64), None if b is None else np.asarray(b, dtype=np.float64))


def test_shift_mac_examples():
    code = join_code([(0, 1), (1, 0)], S13_S03)  # +2^3 - 2^0
    assert shift_mac(0, 13, code, S13_S03) == 91 == 13 * 7
    one = join_code([(0, 0)], S07)
    assert shift_mac(17, -9, one, S07) == 8
    four = join_code([(0, 2)], S07)
    assert shift_mac(0, -5, four, S07) == -20


def test_shift_mac_overflow():
    big = join_code([(0, 7)], S07)
    with pytest.raises(AccumulatorOverflow):
        shift_mac(0, 127, big, S07, acc_bits=8)
    assert required_acc_bits(8, 7, 288) == 8 + 7 + 9 + 1


@given(st.integers(-128, 127), st.data())
@settings(max_examples=200)
def test_shift_mac_matches_multiply(a, data):
    code = data.draw(st.sampled_from(list(valid_codes(S13_S03))))
    from elpq.elpbsd import integer_value

    assert shift_mac(5, a, code, S13_S03) == 5 + a * integer_value(code, S13_S03)


def test_conv_single_element():
    qt = qt_from_levels(np.full((1, 1, 1, 1), 4))
    x = IntActivation(np.array([[[[2]]]]), 0)
    acc = conv_forward(x, layer("conv", qt.values), qt)
    assert acc.tolist() == [[[[8]]]]


def test_conv_zero_input_gives_bias():
    qt = qt_from_levels(np.full((2, 1, 3, 3), 2), scale=0.5)
    x = IntActivation(np.zeros((1, 1, 4, 4), dtype=np.int64), 3)
    acc = conv_forward(x, layer("conv", qt.values, [0.25, -1.0], pad=1), qt)
    # bias * 2**frac / scale
    assert np.all(acc[0, 0] == 4) and np.all(acc[0, 1] == -16)


def test_conv_matches_float_reference(g):
    w = g.normal(0, 0.3, size=(2, 3, 3, 3))
    qts, _ = quantize_model(Model((layer("conv", w),), (3, 6, 6)), S13_S03)
    qt = qts[0]
    b = g.normal(0, 0.2, size=2)
    x_int = g.integers(-100, 100, size=(1, 3, 6, 6))
    frac = 5
    lay = layer("conv", qt.values, b, pad=1)
    acc = conv_forward(IntActivation(x_int, frac), lay, qt)
    acc_scale = qt.scale * 2.0**-frac
    ref = layer_forward_float(lay, np.ldexp(x_int.astype(float), -frac))
    # only the bias is rounded to the accumulator grid
    assert np.max(np.abs(acc * acc_scale - ref)) <= 0.5 * acc_scale + 1e-12


def test_fc_examples():
    # levels {-2, 0, 2} at scale 0.5 give real weights {-1, 0, 1}
    pair = FormatSpec((DigitSpec(True, (0,)), DigitSpec(True, (0,))))
    eye = qt_from_levels(np.eye(3, dtype=np.int64) * 2, spec=pair, scale=0.5)
    x = IntActivation(np.array([[4, -2, 7]]), 0)
    acc = fc_forward(x, layer("fc", eye.values), eye)
    assert (acc * eye.scale).tolist() == [[4, -2, 7]]
    w = qt_from_levels(np.array([[2, -1]]))
    assert fc_forward(IntActivation(np.array([[3, 5]]), 0), layer("fc", w.values), w).tolist() == [[1]]


def test_fc_zero_weights_gives_bias():
    zero_fmt = FormatSpec((DigitSpec(True, (0,)), DigitSpec(True, (0,))))  # levels -2, 0, 2
    w = qt_from_levels(np.zeros((2, 4), dtype=np.int64), spec=zero_fmt)
    acc = fc_forward(IntActivation(np.ones((1, 4), dtype=np.int64), 0), layer("fc", w.values, [3.0, -2.0]), w)
    assert acc.tolist() == [[3, -2]]


def test_requantize_examples():
    # 3.14159 * 16 = 50.27 rounds to 50, i.e. 3.125
    r = requantize(np.array([314159]), 1e-5, 4, 8)
    assert r.values.tolist() == [50] and r.real.tolist() == [3.125]
    assert requantize(np.array([10**9]), 1.0, 4, 8).values.tolist() == [127]
    assert requantize(np.array([0]), 0.3, 4, 8).values.tolist() == [0]


def test_relu_and_maxpool():
    assert relu(np.array([-3, 5])).tolist() == [0, 5]
    x = np.array([-1.0, 2.0, -0.5])
    assert np.array_equal(relu(relu(x)), relu(x))
    assert maxpool(np.array([[[[1, 2], [3, 4]]]]), 2, 2).tolist() == [[[[4]]]]


def test_im2col_order():
    x = np.arange(2 * 3 * 3).reshape(1, 2, 3, 3)
    cols = im2col(x, 2, 2, 1, 0)
    # first patch: (kh, kw) outer, channel inner
    assert cols[0, 0, 0].tolist() == [0, 9, 1, 10, 3, 12, 4, 13]


@pytest.fixture(scope="module")
def q_f1(model, formats):
    return QuantizedModel(model, quantize_model(model, formats["F1"].spec)[0])


def test_golden_logits(q_f1, testset, calibset):
    meta = json.loads(fixture_path("digits_cnn", "golden_F1_a8.json").read_text())
    golden = read_tensor(fixture_path("digits_cnn", meta["logits"])).array
    cfg = calibrate(q_f1.model, calibset.images, meta["act_bits"])
    assert list(cfg.frac_bits) == meta["frac_bits"]
    logits = infer(q_f1, testset.images[: meta["count"]], cfg).astype(np.float32)
    assert logits.tobytes() == golden.tobytes()


def test_sixteen_bit_activations_track_float(q_f1, testset, calibset):
    cfg = calibrate(q_f1.model, calibset.images, 16, acc_bits=48)
    eng = infer(q_f1, testset.images, cfg)
    weights = {i: qt.values for i, qt in q_f1.weights.items()}
    ref = float_forward(q_f1.model, testset.images, weights=weights)
    agree = np.mean(np.argmax(eng, 1) == np.argmax(ref, 1))
    assert agree >= 0.99
    # logits reach ~27 here, so the bound is taken relative to each sample's range
    span = np.maximum(1.0, np.abs(ref).max(axis=1, keepdims=True))
    assert np.max(np.abs(eng - ref) / span) <= 2.0**-10


def test_engine_equals_fake_quant_float(q_f1, testset, calibset):
    cfg = calibrate(q_f1.model, calibset.images, 6)
    weights = {i: qt.values for i, qt in q_f1.weights.items()}
    eng = infer(q_f1, testset.images[:100], cfg)
    ref = float_forward(q_f1.model, testset.images[:100], weights, act_bits=6, frac_bits=cfg.frac_bits)
    assert np.mean(np.argmax(eng, 1) == np.argmax(ref, 1)) >= 0.99


def test_batch_order_irrelevant(q_f1, testset, calibset):
    cfg = calibrate(q_f1.model, calibset.images, 8)
    x = testset.images[:20]
    perm = np.random.Generator(np.random.PCG64(9)).permutation(20)
    assert np.array_equal(infer(q_f1, x, cfg)[perm], infer(q_f1, x[perm], cfg))
    single = infer(q_f1, x[3], cfg)
    assert np.array_equal(single[0], infer(q_f1, x, cfg)[3])


def test_accuracy_examples(q_f1, testset, calibset):
    cfg = calibrate(q_f1.model, calibset.images, 8)
    logits = infer(q_f1, testset.images[:50], cfg)
    one = Dataset(testset.images[:1], np.array([np.argmax(logits[0])]))
    assert evaluate_accuracy(q_f1, one, cfg) == 1.0
    a1 = evaluate_accuracy(q_f1, testset, cfg)
    assert a1 == evaluate_accuracy(q_f1, testset, cfg, batch=7)
    with pytest.raises(ValueError):
        evaluate_accuracy(q_f1, Dataset(testset.images[:0], testset.labels[:0]), cfg)


def test_random_labels_near_chance(g):
    n = 5000
    logits = g.normal(size=(n, 10))
    labels = g.integers(0, 10, size=n)
    sigma = np.sqrt(0.1 * 0.9 / n)
    assert abs(accuracy_from_logits(logits, labels) - 0.1) < 3 * sigma


def test_overflow_detected_in_layer(g):
    qt = qt_from_levels(np.full((1, 64), 128))
    x = IntActivation(np.full((1, 64), 127), 0)
    with pytest.raises(AccumulatorOverflow):
        fc_forward(x, layer("fc", qt.values), qt, acc_bits=16)


def test_config_validation():
    with pytest.raises(ValueError):
        FixedPointConfig(1, (0,))
