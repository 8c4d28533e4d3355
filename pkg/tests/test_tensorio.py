import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elpq.tensorio import (
    Dataset,
    Layer,
    LayerDef,
    LoadError,
    Model,
    ShapeError,
    Tensor,
    decode_tensor,
    encode_tensor,
    load_dataset,
    load_model,
    read_tensor,
    save_dataset,
    save_model,
    write_tensor,
)

DTYPES = {"f32": np.float32, "i32": np.int32, "u8": np.uint8}


@st.composite
def tensors(draw):
    dtype = draw(st.sampled_from(sorted(DTYPES)))
    dims = tuple(draw(st.lists(st.integers(1, 5), min_size=1, max_size=4)))
    n = int(np.prod(dims))
    if dtype == "f32":
        elems = st.floats(width=32, allow_nan=False)
    elif dtype == "i32":
        elems = st.integers(-(2**31), 2**31 - 1)
    else:
        elems = st.integers(0, 255)
    data = np.array(draw(st.lists(elems, min_size=n, max_size=n)), dtype=DTYPES[dtype])
    return Tensor(dtype, dims, data)


@given(tensors())
@settings(max_examples=300)
def test_round_trip_bytes(t):
    assert decode_tensor(encode_tensor(t)) == t


def test_round_trip_many_files(tmp_path):
    g = np.random.Generator(np.random.PCG64(7))
    path = tmp_path / "t.ctns"
    for _ in range(10_000):
        dims = tuple(int(d) for d in g.integers(1, 4, size=g.integers(1, 5)))
        t = Tensor.from_array(g.standard_normal(dims).astype(np.float32))
        write_tensor(t, path)
        assert read_tensor(path) == t


def test_two_by_two_f32():
    t = decode_tensor(b"CTNS" + struct.pack("<HBB2I4f", 1, 0, 2, 2, 2, 1, 2, 3, 4))
    assert t.dims == (2, 2) and t.array.size == 4
    assert t.array.tolist() == [[1, 2], [3, 4]]


def test_one_element_file_size(tmp_path):
    # magic 4 + version 2 + dtype 1 + rank 1 + one u32 dim + one f32
    write_tensor(Tensor.from_array(np.array([1.5], np.float32)), tmp_path / "a.ctns")
    assert (tmp_path / "a.ctns").stat().st_size == 16


def test_six_f32_payload_is_24_bytes():
    buf = encode_tensor(Tensor.from_array(np.arange(6, dtype=np.float32)))
    assert len(buf) - (8 + 4) == 24


def test_rank_zero_rejected():
    with pytest.raises(ValueError):
        Tensor("f32", (), np.zeros(0, np.float32))


@pytest.mark.parametrize(
    "buf, field",
    [
        (b"XXXX" + struct.pack("<HBB1I", 1, 0, 1, 1) + b"\0" * 4, "magic"),
        (b"CTNS" + struct.pack("<HBB1I", 1, 9, 1, 1) + b"\0" * 4, "dtype"),
        (b"CTNS" + struct.pack("<HBB", 1, 0, 5) + b"\0" * 40, "rank"),
        (b"CTNS" + struct.pack("<HBB2I", 1, 0, 2, 3, 3) + b"\0" * 32, "payload"),
    ],
)
def test_load_errors_name_field(buf, field):
    with pytest.raises(LoadError) as e:
        decode_tensor(buf)
    assert e.value.field == field


def test_truncated_payload_three_by_three():
    buf = b"CTNS" + struct.pack("<HBB2I", 1, 0, 2, 3, 3) + struct.pack("<8f", *range(8))
    with pytest.raises(LoadError, match="truncated"):
        decode_tensor(buf)


def _write_tiny_model(base, conv_out=4, fc_in=None):
    g = np.random.Generator(np.random.PCG64(0))
    w1 = g.standard_normal((conv_out, 1, 3, 3)).astype(np.float32)
    fc_in = fc_in if fc_in is not None else conv_out * 2 * 2
    w2 = g.standard_normal((3, fc_in)).astype(np.float32)
    write_tensor(Tensor.from_array(w1), base / "c.w.ctns")
    write_tensor(Tensor.from_array(w2), base / "f.w.ctns")
    doc = {
        "input_dims": [1, 4, 4],
        "layers": [
            {"name": "c", "kind": "conv", "weights": "c.w.ctns", "pad": 1},
            {"name": "r", "kind": "relu"},
            {"name": "p", "kind": "maxpool", "pool_size": 2, "stride": 2},
            {"name": "f", "kind": "fc", "weights": "f.w.ctns"},
        ],
    }
    (base / "m.json").write_text(json.dumps(doc))
    return base / "m.json"


def test_load_four_layer_model(tmp_path):
    m = load_model(_write_tiny_model(tmp_path))
    assert [l.kind for l in m.layers] == ["conv", "relu", "maxpool", "fc"]
    assert load_model(tmp_path / "m.json") == m


def test_shape_mismatch(tmp_path):
    with pytest.raises(ShapeError):
        load_model(_write_tiny_model(tmp_path, fc_in=7))


def test_conv_channel_mismatch(tmp_path):
    g = np.random.Generator(np.random.PCG64(0))
    write_tensor(Tensor.from_array(g.standard_normal((16, 1, 3, 3)).astype(np.float32)), tmp_path / "a.ctns")
    write_tensor(Tensor.from_array(g.standard_normal((4, 8, 3, 3)).astype(np.float32)), tmp_path / "b.ctns")
    doc = {"input_dims": [1, 6, 6], "layers": [
        {"name": "a", "kind": "conv", "weights": "a.ctns"},
        {"name": "b", "kind": "conv", "weights": "b.ctns"},
    ]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ShapeError):
        load_model(tmp_path / "m.json")


def test_missing_file_names_path(tmp_path):
    path = _write_tiny_model(tmp_path)
    (tmp_path / "f.w.ctns").unlink()
    with pytest.raises(FileNotFoundError, match="f.w.ctns"):
        load_model(path)


def test_layer_refs_validated():
    with pytest.raises(ValueError):
        LayerDef("r", "relu", weights_ref="x.ctns")
    with pytest.raises(ValueError):
        LayerDef("c", "conv")


def test_save_load_model(tmp_path, model):
    save_model(model, tmp_path / "copy" / "model.json")
    again = load_model(tmp_path / "copy" / "model.json")
    assert again == model


def test_dataset_round_trip(tmp_path, testset):
    small = testset.subset(10)
    save_dataset(small, tmp_path / "d.json", stem="d")
    back = load_dataset(tmp_path / "d.json")
    assert np.array_equal(back.images, small.images) and np.array_equal(back.labels, small.labels)


def test_loaded_arrays_are_read_only(model):
    with pytest.raises(ValueError):
        model.layers[0].weights[0, 0, 0, 0] = 1.0
