import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_checkpoint, write_raw_container
from mergelens.checkpoint import (
    Checkpoint,
    decode_container,
    encode_container,
    load_checkpoint,
    save_checkpoint,
    validate_compatibility,
)
from mergelens.errors import DuplicateTensorName, IoFailure, MalformedContainer, NonFiniteWeights


def test_authored_fixture_loads(tmp_path):
    path = tmp_path / "w.safetensors"
    write_raw_container(path, {"w": ("F32", [2], np.array([1.0, 2.0], "<f4").tobytes())})
    ck = load_checkpoint(path)
    assert list(ck) == ["w"]
    np.testing.assert_array_equal(ck["w"], [1.0, 2.0])


def test_empty_file_is_malformed(tmp_path):
    path = tmp_path / "empty.safetensors"
    path.write_bytes(b"")
    with pytest.raises(MalformedContainer):
        load_checkpoint(path)


def test_shape_payload_contradiction(tmp_path):
    path = tmp_path / "short.safetensors"
    write_raw_container(path, {"w": ("F32", [2, 2], np.zeros(3, "<f4").tobytes())})
    with pytest.raises(MalformedContainer):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "blob",
    [
        struct.pack("<Q", 100) + b"{}",
        struct.pack("<Q", 4) + b"[1]x",
        struct.pack("<Q", 2) + b"{}" + b"\x00" * 4,
    ],
    ids=["length-past-eof", "not-an-object", "trailing-bytes"],
)
def test_malformed_headers(blob):
    with pytest.raises(MalformedContainer):
        decode_container(blob)


def test_unknown_dtype_rejected(tmp_path):
    path = tmp_path / "i32.safetensors"
    write_raw_container(path, {"w": ("I32", [1], b"\x00" * 4)})
    with pytest.raises(MalformedContainer):
        load_checkpoint(path)


def test_overlapping_offsets_rejected():
    header = {
        "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
        "b": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
    }
    raw = json.dumps(header).encode()
    with pytest.raises(MalformedContainer):
        decode_container(struct.pack("<Q", len(raw)) + raw + b"\x00" * 4)


def test_duplicate_names_rejected():
    entry = '{"dtype":"F32","shape":[1],"data_offsets":[0,4]}'
    raw = ('{"w":' + entry + ',"w":' + entry + "}").encode()
    with pytest.raises(DuplicateTensorName):
        decode_container(struct.pack("<Q", len(raw)) + raw + b"\x00" * 4)


def test_non_finite_rejected_on_load(tmp_path):
    path = tmp_path / "nan.safetensors"
    write_raw_container(path, {"w": ("F32", [2], np.array([1.0, np.nan], "<f4").tobytes())})
    with pytest.raises(NonFiniteWeights) as info:
        load_checkpoint(path)
    assert info.value.names == ["w"]


def test_non_finite_rejected_on_construction():
    with pytest.raises(NonFiniteWeights):
        Checkpoint({"w": [np.inf]})


def test_f16_upcast(tmp_path):
    values = np.array([0.5, -1.25, 65504.0, 2.0**-24], dtype="<f2")
    path = tmp_path / "half.safetensors"
    write_raw_container(path, {"h": ("F16", [2, 2], values.tobytes())})
    ck = load_checkpoint(path)
    assert ck["h"].dtype == np.float32
    np.testing.assert_array_equal(ck["h"].ravel(), values.astype(np.float32))


def test_metadata_round_trip(tmp_path):
    ck = Checkpoint({"w": [1.0]}, {"architecture": "mlp", "lineage": "base"})
    save_checkpoint(ck, tmp_path / "m.safetensors")
    assert load_checkpoint(tmp_path / "m.safetensors").metadata == ck.metadata


def test_header_keys_sorted_and_aligned():
    blob = encode_container(Checkpoint({"b": [1.0], "a": [2.0, 3.0]}, {"k": "v"}))
    (n,) = struct.unpack("<Q", blob[:8])
    assert n % 8 == 0
    keys = list(json.loads(blob[8 : 8 + n]))
    assert keys == sorted(keys)


def test_save_twice_is_byte_identical(tmp_path):
    ck = random_checkpoint(np.random.default_rng(3))
    save_checkpoint(ck, tmp_path / "a")
    save_checkpoint(ck, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_save_to_unwritable_path(tmp_path):
    with pytest.raises(IoFailure):
        save_checkpoint(Checkpoint({"w": [1.0]}), tmp_path / "missing-dir" / "x.safetensors")


def test_load_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.safetensors")


def test_tensors_are_read_only():
    ck = Checkpoint({"w": [1.0, 2.0]})
    with pytest.raises(ValueError):
        ck["w"][0] = 5.0


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@st.composite
def checkpoints(draw):
    names = draw(st.lists(st.text("abcxyz._0123", min_size=1, max_size=6), min_size=1, max_size=4, unique=True))
    tensors = {}
    for name in names:
        shape = draw(st.lists(st.integers(1, 3), min_size=0, max_size=3))
        size = int(np.prod(shape)) if shape else 1
        values = draw(st.lists(finite_f32, min_size=size, max_size=size))
        tensors[name] = np.array(values, dtype=np.float32).reshape(shape)
    return Checkpoint(tensors)


@settings(max_examples=100, deadline=None)
@given(checkpoints())
def test_round_trip_property(ck):
    back = decode_container(encode_container(ck))
    assert back == ck
    for name in ck:
        assert back[name].tobytes() == ck[name].tobytes()


def test_compatibility_examples():
    a = Checkpoint({"w": [1.0, 2.0]})
    b = Checkpoint({"w": [1.0, 2.0, 3.0]})
    c = Checkpoint({"w": [1.0, 2.0], "b": [0.0]})
    assert validate_compatibility([a, a]).compatible
    [m] = validate_compatibility([a, b]).mismatches
    assert (m.name, m.kind) == ("w", "shape")
    [m] = validate_compatibility([a, c]).mismatches
    assert (m.name, m.kind) == ("b", "extra")


@settings(max_examples=50, deadline=None)
@given(checkpoints(), checkpoints())
def test_compatibility_symmetric_and_reflexive(a, b):
    assert validate_compatibility([a, a]).compatible
    assert validate_compatibility([a, b]).compatible == validate_compatibility([b, a]).compatible
    names = lambda r: sorted(m.name for m in r.mismatches)
    assert names(validate_compatibility([a, b])) == names(validate_compatibility([b, a]))
