import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpd import tensorio


def test_scalar_file_is_19_bytes(tmp_path):
    p = tmp_path / "x.stp"
    tensorio.write_tensor(np.array([0.0], dtype=np.float32), p)
    assert p.stat().st_size == 4 + 1 + 1 + 1 + 8 + 4


def test_exact_byte_layout_row_major(tmp_path):
    # Independent byte-level construction of the expected file.
    p = tmp_path / "x.stp"
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    tensorio.write_tensor(arr, p)
    expected = b"STEN" + struct.pack("<BBB", 1, 1, 2) + struct.pack("<QQ", 2, 3)
    for v in [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]:
        expected += struct.pack("<f", v)
    assert p.read_bytes() == expected


def test_hand_built_scalar_file(tmp_path):
    p = tmp_path / "hand.stp"
    p.write_bytes(b"STEN" + struct.pack("<BBB", 1, 2, 1)
                  + struct.pack("<Q", 1) + struct.pack("<d", 1.0))
    arr = tensorio.read_tensor(p)
    assert arr.dtype == np.float64
    assert arr.shape == (1,)
    assert arr[0] == 1.0


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.stp"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(tensorio.TensorFormatError, match="not a tensor file"):
        tensorio.read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "trunc.stp"
    tensorio.write_tensor(np.ones((3, 4), dtype=np.float32), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(tensorio.TensorFormatError, match="corrupt file"):
        tensorio.read_tensor(p)


def test_unknown_dtype_code(tmp_path):
    p = tmp_path / "odd.stp"
    p.write_bytes(b"STEN" + struct.pack("<BBB", 1, 7, 1)
                  + struct.pack("<Q", 1) + struct.pack("<f", 1.0))
    with pytest.raises(tensorio.TensorFormatError, match="unsupported dtype"):
        tensorio.read_tensor(p)


def test_rejects_unsupported_rank_and_dtype(tmp_path):
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.write_tensor(np.zeros((1,) * 6, dtype=np.float32), tmp_path / "r6.stp")
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.write_tensor(np.zeros(3, dtype=np.int32), tmp_path / "int.stp")


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=5),
    dtype=st.sampled_from([np.float32, np.float64]),
    seed=st.integers(0, 2**31),
)
def test_round_trip_identity(shape, dtype, seed):
    import tempfile
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape).astype(dtype)
    with tempfile.TemporaryDirectory() as d:
        p = f"{d}/rt.stp"
        tensorio.write_tensor(arr, p)
        back = tensorio.read_tensor(p)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_round_trip_random_3d(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(np.float64)
    p = tmp_path / "r.stp"
    tensorio.write_tensor(arr, p)
    assert np.array_equal(tensorio.read_tensor(p), arr)
