"""Binary tensor and checkpoint formats."""

import struct

import numpy as np
import pytest

from mia.tenio import (FormatError, read_checkpoint, read_tensor,
                       write_checkpoint, write_tensor)


def test_tensor_round_trip(tmp_path, rng):
    path = tmp_path / "x.ten"
    arr = rng.normal(size=(3, 5, 2))
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape
    assert back.dtype == np.float64
    assert np.allclose(back, arr, atol=1e-6)  # float32 storage


def test_tensor_round_trip_preserves_f32_exactly(tmp_path, rng):
    path = tmp_path / "x.ten"
    arr = rng.normal(size=17).astype(np.float32).astype(np.float64)
    write_tensor(path, arr)
    assert np.array_equal(read_tensor(path), arr)


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "x.ten"
    write_tensor(path, np.zeros((2, 3)))
    raw = path.read_bytes()
    assert raw[:4] == b"MIAT"
    version, ndim = struct.unpack_from("<II", raw, 4)
    assert (version, ndim) == (1, 2)
    assert struct.unpack_from("<II", raw, 12) == (2, 3)
    assert len(raw) == 12 + 8 + 4 * 6


def test_tensor_bad_magic_names_file(tmp_path):
    path = tmp_path / "bad.ten"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError, match="bad.ten"):
        read_tensor(path)


def test_tensor_bad_version(tmp_path):
    path = tmp_path / "v9.ten"
    write_tensor(path, np.zeros(2))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_tensor(path)


def test_tensor_truncated_payload(tmp_path):
    path = tmp_path / "trunc.ten"
    write_tensor(path, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="size"):
        read_tensor(path)


def test_checkpoint_round_trip(tmp_path, rng):
    path = tmp_path / "m.miac"
    params = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32).astype(float),
              "b.bias": rng.normal(size=4).astype(np.float32).astype(float)}
    opt = {"t": np.array([3.0]), "m/a.weight": np.zeros((2, 3))}
    write_checkpoint(path, params, opt)
    back_params, back_opt = read_checkpoint(path)
    assert set(back_params) == set(params)
    for k in params:
        assert np.array_equal(back_params[k], params[k])
    assert set(back_opt) == set(opt)
    assert back_opt["t"][0] == 3.0


def test_checkpoint_without_optimizer_block(tmp_path):
    path = tmp_path / "m.miac"
    write_checkpoint(path, {"w": np.ones(2)})
    params, opt = read_checkpoint(path)
    assert list(params) == ["w"] and opt == {}


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.miac"
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(FormatError, match="bad.miac"):
        read_checkpoint(path)
