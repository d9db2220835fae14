import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from regionfeat.tensorio import (
    BadMagicError,
    DimOverflowError,
    TensorFormatError,
    TruncatedPayloadError,
    decode_tensor,
    encode_tensor,
    read_mask,
    read_rois,
    read_tensor,
    write_rois,
    write_tensor,
)
from regionfeat.types import RoI


def oracle_bytes(dims, values):
    """Independent encoder built only from struct."""
    out = b"RFT1" + struct.pack("<I", len(dims))
    out += b"".join(struct.pack("<I", d) for d in dims)
    out += b"".join(struct.pack("<f", v) for v in values)
    return out


def test_zero_scalar_matrix(tmp_path):
    path = tmp_path / "z.rft"
    write_tensor(path, [[0.0]])
    raw = path.read_bytes()
    assert len(raw) == 4 + 4 + 2 * 4 + 4
    assert raw == oracle_bytes([1, 1], [0.0])
    out = read_tensor(path)
    assert out.shape == (1, 1)
    assert out[0, 0] == 0.0


def test_two_by_three_matches_byte_oracle(tmp_path):
    path = tmp_path / "a.rft"
    path.write_bytes(oracle_bytes([2, 3], [1, 2, 3, 4, 5, 6]))
    out = read_tensor(path)
    np.testing.assert_array_equal(out, np.arange(1, 7, dtype=np.float32).reshape(2, 3))
    write_tensor(tmp_path / "b.rft", out)
    assert (tmp_path / "b.rft").read_bytes() == path.read_bytes()


def test_rewrite_is_byte_identical(tmp_path, rng):
    a = tmp_path / "a.rft"
    write_tensor(a, rng.standard_normal((3, 4, 5)))
    b = tmp_path / "b.rft"
    write_tensor(b, read_tensor(a))
    assert a.read_bytes() == b.read_bytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


def test_error_kinds_are_distinct():
    good = oracle_bytes([2, 2], [1, 2, 3, 4])
    with pytest.raises(BadMagicError):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(TruncatedPayloadError):
        decode_tensor(good[:-1])
    with pytest.raises(TruncatedPayloadError):
        decode_tensor(good[:6])
    with pytest.raises(DimOverflowError):
        decode_tensor(b"RFT1" + struct.pack("<I", 1000))
    with pytest.raises(DimOverflowError):
        decode_tensor(oracle_bytes([2 ** 31, 2 ** 31], []))
    with pytest.raises(TensorFormatError):
        decode_tensor(good + b"\0")
    assert not issubclass(BadMagicError, TruncatedPayloadError)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        encode_tensor(np.array([1.0, np.nan]))


def test_rois_roundtrip(tmp_path):
    rois = [RoI(0, 0, 4, 4), RoI(1.5, 2.25, 3.0, 7.0)]
    path = tmp_path / "r.json"
    write_rois(path, rois)
    assert read_rois(path) == rois
    assert json.loads(path.read_text())[1] == {"x1": 1.5, "y1": 2.25, "x2": 3.0, "y2": 7.0}


def test_bad_rois(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps([{"x1": 0, "y1": 0, "x2": 1}]))
    with pytest.raises(ValueError):
        read_rois(path)
    path.write_text(json.dumps([{"x1": 3, "y1": 0, "x2": 1, "y2": 1}]))
    with pytest.raises(ValueError):
        read_rois(path)


def test_mask_values_checked(tmp_path):
    path = tmp_path / "m.rft"
    write_tensor(path, [[0.0, 1.0], [1.0, 0.5]])
    with pytest.raises(ValueError):
        read_mask(path)
    write_tensor(path, [[0.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(read_mask(path, (2, 2)), [[0, 1], [1, 1]])
    with pytest.raises(ValueError):
        read_mask(path, (3, 2))
