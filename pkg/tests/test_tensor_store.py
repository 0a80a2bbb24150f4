import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from taskforge.tensor_store import (
    Checkpoint,
    CheckpointError,
    ShapeConflictError,
    align_keys,
    canonical_json,
    config_hash,
    config_hash_of,
    content_hash,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
    save_debug,
    verify_config_hash,
)

# FIPS 180-2 SHA-256 test vectors
SHA256_VECTORS = {
    b"": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
    b"abc": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
    b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq":
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
}


def random_checkpoint(n_tensors, seed=0):
    g = np.random.default_rng(seed)
    tensors = {}
    for i in range(n_tensors):
        shape = tuple(int(s) for s in g.integers(0, 6, size=g.integers(0, 4)))
        tensors[f"block.{i}.w"] = g.standard_normal(shape).astype(np.float32)
    return Checkpoint(tensors, {"model_id": "rand", "config_hash": "ab" * 32})


@pytest.mark.parametrize("data,digest", SHA256_VECTORS.items())
def test_sha256_vectors(data, digest):
    assert config_hash(data) == digest


def test_round_trip_250_tensors_byte_identical(tmp_path):
    ck = random_checkpoint(250)
    p = tmp_path / "a.safetensors"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back == ck
    save_checkpoint(back, tmp_path / "b.safetensors")
    assert p.read_bytes() == (tmp_path / "b.safetensors").read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abcxyz._0123", min_size=1, max_size=12),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)),
                       max_size=6))
def test_round_trip_property(tensors):
    ck = Checkpoint(tensors, {"model_id": "h"})
    raw = dumps(ck)
    back = loads(raw)
    assert back == ck
    assert dumps(back) == raw


def test_signed_zero_and_bits_preserved():
    x = np.array([0.0, -0.0, 1e-45, np.float32(3.4e38)], dtype=np.float32)
    back = loads(dumps(Checkpoint({"x": x})))
    assert back.tensors["x"].tobytes() == x.tobytes()


def test_header_layout():
    raw = dumps(Checkpoint({"b": np.ones(2, np.float32), "a": np.zeros((1, 1), np.float32)}, {"model_id": "m"}))
    (n,) = struct.unpack("<Q", raw[:8])
    assert n % 8 == 0
    header = json.loads(raw[8 : 8 + n])
    assert header["a"] == {"dtype": "F32", "shape": [1, 1], "data_offsets": [0, 4]}
    assert header["b"]["data_offsets"] == [4, 12]
    assert header["__metadata__"] == {"model_id": "m"}
    assert len(raw) == 8 + n + 12


def test_interop_with_safetensors_library(tmp_path):
    st_np = pytest.importorskip("safetensors.numpy")
    g = np.random.default_rng(3)
    tensors = {f"t{i}": g.standard_normal((3, i + 1)).astype(np.float32) for i in range(5)}
    # theirs -> ours
    p = tmp_path / "theirs.safetensors"
    st_np.save_file(tensors, str(p), metadata={"model_id": "x"})
    ck = load_checkpoint(p)
    assert ck.metadata["model_id"] == "x"
    for k, v in tensors.items():
        assert ck.tensors[k].tobytes() == v.tobytes()
    # ours -> theirs
    q = tmp_path / "ours.safetensors"
    save_checkpoint(Checkpoint(tensors, {"model_id": "y"}), q)
    back = st_np.load_file(str(q))
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()


def test_f16_is_widened(tmp_path):
    st_np = pytest.importorskip("safetensors.numpy")
    h = np.array([1.5, -2.25, 65504.0], dtype=np.float16)
    p = tmp_path / "h.safetensors"
    st_np.save_file({"h": h}, str(p))
    ck = load_checkpoint(p)
    assert ck.tensors["h"].dtype == np.float32
    assert ck.tensors["h"].tolist() == [1.5, -2.25, 65504.0]


def _with_header(header: dict, payload: bytes = b"") -> bytes:
    text = json.dumps(header).encode()
    return struct.pack("<Q", len(text)) + text + payload


@pytest.mark.parametrize("data,msg", [
    (b"\x01\x02", "malformed header"),
    (struct.pack("<Q", 1000) + b"{}", "malformed header"),
    (struct.pack("<Q", 4) + b"{{{{", "malformed header"),
    (_with_header({"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8), "shape/data mismatch"),
    (_with_header({"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 8), "shape/data mismatch"),
    (_with_header({"a": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\0"), "malformed header entry"),
])
def test_malformed_inputs(data, msg):
    with pytest.raises(CheckpointError, match=msg):
        loads(data)


def test_duplicate_names_rejected():
    text = b'{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}'
    with pytest.raises(CheckpointError, match="duplicate tensor name"):
        loads(struct.pack("<Q", len(text)) + text + b"\0" * 4)


def test_nonfinite_strict_and_lenient():
    raw = dumps(Checkpoint({"x": np.array([1.0, np.nan], np.float32)}))
    with pytest.raises(CheckpointError, match="NaN or Inf"):
        loads(raw)
    assert np.isnan(loads(raw, strict=False).tensors["x"][1])


def test_loaded_tensors_are_read_only():
    ck = loads(dumps(Checkpoint({"x": np.ones(3, np.float32)})))
    with pytest.raises(ValueError):
        ck.tensors["x"][0] = 2.0


def test_align_keys():
    a = {"x": np.zeros(2), "y": np.zeros(3)}
    b = {"x": np.zeros(2), "z": np.zeros(1)}
    rep = align_keys([a, b])
    assert rep.common == ["x"]
    assert rep.missing == [["z"], ["y"]]
    c = {"x": np.zeros(4)}
    with pytest.raises(ShapeConflictError):
        align_keys([a, c])
    rep = align_keys([a, c], strict=False)
    assert rep.common == [] and "x" in rep.conflicts


def test_config_hash_canonical():
    a = {"b": 1, "a": [1, 2, {"z": "é"}]}
    b = json.loads(json.dumps(a, indent=4))
    assert canonical_json(a) == b'{"a":[1,2,{"z":"\xc3\xa9"}],"b":1}'
    assert config_hash_of(a) == config_hash_of(b)
    ck = Checkpoint({}, {"config_hash": config_hash_of(a)})
    assert verify_config_hash(ck, canonical_json(a))


def test_content_hash_sensitive_to_every_bit():
    x = np.ones(4, np.float32)
    y = x.copy()
    y.view(np.uint32)[2] ^= 1
    assert content_hash({"a": x}) != content_hash({"a": y})
    assert content_hash({"a": x}) != content_hash({"b": x})
    assert content_hash({"a": x}) != content_hash({"a": x.reshape(2, 2)})


def test_save_debug(tmp_path):
    ck = random_checkpoint(3)
    js, bn = save_debug(ck, tmp_path / "dbg")
    manifest = json.loads(js.read_text())
    assert len(manifest["tensors"]) == 3
    assert bn.stat().st_size == sum(t.nbytes for t in ck.tensors.values())
