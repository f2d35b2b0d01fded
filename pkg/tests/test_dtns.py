"""Binary tensor container: round-trips, golden header bytes, error cases."""

import io
import struct

import numpy as np
import pytest

from dfir import dtns


RNG = np.random.default_rng(7)


@pytest.mark.parametrize(
    "array",
    [
        RNG.standard_normal((4, 5)).astype(np.float32),
        RNG.standard_normal((3, 2, 2)),
        RNG.integers(-(2**40), 2**40, size=(7,), dtype=np.int64),
        RNG.random((2, 3)) > 0.5,
        np.float64(3.5),                      # rank 0
        np.zeros((0, 4), dtype=np.float32),   # empty tensor
    ],
    ids=["f32", "f64", "i64", "bool", "rank0", "empty"],
)
def test_round_trip_bit_exact(array):
    arr = np.asarray(array)
    back = dtns.decode(dtns.encode(arr))
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()  # bit-exact, not just allclose


def test_golden_bytes():
    # Hand-assembled container for [[1.0, 2.0], [3.0, 4.0]] as f64.
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    blob = dtns.encode(arr)
    assert blob[:4] == b"DTNS"
    assert blob[4] == 1                       # version
    assert blob[5] == 1                       # dtype code f64
    assert blob[6] == 2                       # rank
    assert blob[7] == 0                       # reserved
    assert struct.unpack_from("<2Q", blob, 8) == (2, 2)
    assert blob[24:] == struct.pack("<4d", 1.0, 2.0, 3.0, 4.0)
    assert len(blob) == 8 + 16 + 32


def test_file_and_stream_io(tmp_path):
    arr = RNG.standard_normal((6, 2)).astype(np.float32)
    path = str(tmp_path / "t.dtns")
    dtns.write_tensor(path, arr)
    assert dtns.read_tensor(path).tobytes() == arr.tobytes()

    buf = io.BytesIO()
    dtns.write_tensor(buf, arr)
    buf.seek(0)
    assert dtns.read_tensor(buf).tobytes() == arr.tobytes()
    assert dtns.read_tensor(buf.getvalue()).tobytes() == arr.tobytes()


def test_bad_magic():
    blob = bytearray(dtns.encode(np.zeros(3)))
    blob[:4] = b"NOPE"
    with pytest.raises(dtns.TensorFormatError, match="magic"):
        dtns.decode(bytes(blob))


def test_bad_version_and_dtype_and_reserved():
    blob = bytearray(dtns.encode(np.zeros(3)))
    blob[4] = 9
    with pytest.raises(dtns.TensorFormatError, match="version"):
        dtns.decode(bytes(blob))
    blob[4] = 1
    blob[5] = 42
    with pytest.raises(dtns.TensorFormatError, match="dtype code"):
        dtns.decode(bytes(blob))
    blob[5] = 1
    blob[7] = 1
    with pytest.raises(dtns.TensorFormatError, match="reserved"):
        dtns.decode(bytes(blob))


def test_truncation():
    blob = dtns.encode(RNG.standard_normal((3, 3)))
    with pytest.raises(dtns.TensorFormatError, match="truncated header"):
        dtns.decode(blob[:6])
    with pytest.raises(dtns.TensorFormatError, match="truncated dims"):
        dtns.decode(blob[:12])
    with pytest.raises(dtns.TensorFormatError, match="size mismatch"):
        dtns.decode(blob[:-1])
    with pytest.raises(dtns.TensorFormatError, match="size mismatch"):
        dtns.decode(blob + b"\x00")


def test_unsupported_dtype_rejected():
    with pytest.raises(dtns.TensorFormatError, match="unsupported dtype"):
        dtns.encode(np.zeros(3, dtype=np.int32))


def test_big_endian_input_normalized():
    arr = np.arange(6, dtype=">f8").reshape(2, 3)
    back = dtns.decode(dtns.encode(arr))
    assert back.dtype == np.dtype("<f8").newbyteorder("=")
    np.testing.assert_array_equal(back, arr.astype("<f8"))
