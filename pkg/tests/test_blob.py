import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dance import blob


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_is_exact(arr):
    header, (out,) = blob.decode(blob.encode({"k": 1}, [arr]))
    assert header == {"k": 1}
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


def test_layout():
    data = blob.encode({}, [np.array([1.5])])
    assert data[:4] == b"DNCW"
    version, hlen = struct.unpack("<HI", data[4:10])
    assert version == blob.VERSION
    assert struct.unpack("<d", data[10 + hlen:18 + hlen]) == (1.5,)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_encoding_is_canonical():
    a = blob.encode({"b": 1, "a": [1, 2]}, [np.zeros(2)])
    b = blob.encode({"a": [1, 2], "b": 1}, [np.zeros(2)])
    assert a == b


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<H", 99) + d[6:], "version"),
    (lambda d: d[:-1] + bytes([d[-1] ^ 1]), "checksum"),
])
def test_bad_files_raise(mutate, msg):
    data = blob.encode({}, [np.arange(3.0)])
    with pytest.raises(blob.BlobError, match=msg):
        blob.decode(mutate(data))


def test_truncated_payload_raises():
    header = blob.canonical_json({"arrays": [[10]]}).encode()
    body = b"DNCW" + struct.pack("<HI", blob.VERSION, len(header)) + header + b"\0" * 8
    data = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(blob.BlobError, match="truncated"):
        blob.decode(data)


def test_tensor_helpers(tmp_path):
    blob.write_tensor(tmp_path / "t.dncw", np.eye(2), note="x")
    assert np.array_equal(blob.read_tensor(tmp_path / "t.dncw"), np.eye(2))
    header, _ = blob.read(tmp_path / "t.dncw")
    assert header["note"] == "x"


def test_numpy_scalars_serialize():
    assert blob.canonical_json({"a": np.int64(3), "b": np.float64(0.5)}) == '{"a":3,"b":0.5}'
