import struct

import numpy as np
import pytest

from dynakv import serialization as ser


@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4)])
def test_binary_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=shape)
    path = tmp_path / "t.dkvt"
    ser.write_tensor(path, arr)
    back = ser.read_tensor(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, np.asarray(arr, dtype=np.float64))


def test_binary_layout_is_little_endian_row_major(tmp_path):
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "t.dkvt"
    ser.write_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"DKVT"
    assert struct.unpack_from("<I", raw, 4)[0] == 2
    assert struct.unpack_from("<2Q", raw, 8) == (2, 2)
    payload = np.frombuffer(raw, dtype="<f8", offset=24)
    assert np.array_equal(payload, [1.0, 2.0, 3.0, 4.0])


def test_non_contiguous_input_serialized_row_major(tmp_path):
    arr = np.arange(12.0).reshape(3, 4).T  # transposed view, not C-contiguous
    path = tmp_path / "t.dkvt"
    ser.write_tensor(path, arr)
    assert np.array_equal(ser.read_tensor(path), arr)


@pytest.mark.parametrize("shape", [(), (4,), (2, 5)])
def test_json_mirror_round_trip(tmp_path, shape):
    rng = np.random.default_rng(1)
    arr = rng.normal(size=shape)
    path = tmp_path / "t.json"
    ser.write_tensor_json(path, arr)
    back = ser.read_tensor_json(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.dkvt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ser.FormatError):
        ser.read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.dkvt"
    ser.write_tensor(path, np.ones((3, 3)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ser.FormatError):
        ser.read_tensor(path)


def test_json_mirror_validates(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"magic": "DKVT", "shape": [3], "data": [1.0]}')
    with pytest.raises(ser.FormatError):
        ser.read_tensor_json(path)
