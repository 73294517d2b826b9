import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lssl.errors import FormatError
from lssl.tensorfile import MAGIC, read_tensor, write_tensor


def test_round_trip_32x32(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    arr = rng.normal(size=(32, 32)).astype(np.float32)
    path = tmp_path / "img.ten"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_header_layout(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.zeros((2, 3), dtype=np.float32))
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    assert blob[8] == 2                      # rank
    assert blob[9:13] == (2).to_bytes(4, "little")
    assert blob[13:17] == (3).to_bytes(4, "little")
    assert len(blob) == 17 + 4 * 6


def test_corrupt_magic(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.zeros((4, 4), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.zeros((4, 4), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        read_tensor(path)


def test_payload_dims_mismatch(tmp_path):
    # header says 2x2 but payload holds 3 floats
    path = tmp_path / "t.ten"
    payload = MAGIC + bytes([2]) + (2).to_bytes(4, "little") * 2 + b"\x00" * 12
    path.write_bytes(payload)
    with pytest.raises(FormatError):
        read_tensor(path)


def test_empty_file(tmp_path):
    path = tmp_path / "t.ten"
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        read_tensor(path)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=4),
       st.integers(min_value=0, max_value=2**32 - 1))
def test_round_trip_fuzz(tmp_path_factory, dims, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    arr = rng.normal(size=tuple(dims)).astype(np.float32)
    path = tmp_path_factory.mktemp("fuzz") / "t.ten"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)
