import numpy as np
import pytest

from shardmax.ltf import (
    LtfBadMagic,
    LtfDtypeError,
    LtfError,
    LtfTruncated,
    load_tensor_dir,
    read_ltf,
    save_tensor_dir,
    write_ltf,
)


def test_round_trip_f64(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5))
    path = tmp_path / "t.ltf"
    write_ltf(path, arr)
    back = read_ltf(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_round_trip_f32(tmp_path):
    arr = np.random.default_rng(1).standard_normal((7,)).astype(np.float32)
    path = tmp_path / "t.ltf"
    write_ltf(path, arr)
    back = read_ltf(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_empty_extent_round_trips(tmp_path):
    arr = np.zeros((4, 0, 3))
    path = tmp_path / "empty.ltf"
    write_ltf(path, arr)
    back = read_ltf(path)
    assert back.shape == (4, 0, 3)
    # header-only file: magic + dtype/ndim/pad + three u64 extents
    assert path.stat().st_size == 8 + 3 * 8


def test_header_layout_is_little_endian(tmp_path):
    path = tmp_path / "t.ltf"
    write_ltf(path, np.array([[1.0, 2.0]], dtype=np.float32))
    blob = path.read_bytes()
    assert blob[:4] == b"LTF1"
    assert blob[4] == 1          # f32 code
    assert blob[5] == 2          # ndim
    assert blob[6:8] == b"\x00\x00"
    assert int.from_bytes(blob[8:16], "little") == 1
    assert int.from_bytes(blob[16:24], "little") == 2
    assert blob[24:28] == np.float32(1.0).tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ltf"
    write_ltf(path, np.zeros(3))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(LtfBadMagic):
        read_ltf(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.ltf"
    write_ltf(path, np.arange(10.0))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(LtfTruncated):
        read_ltf(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "long.ltf"
    write_ltf(path, np.arange(4.0))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(LtfTruncated):
        read_ltf(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "code.ltf"
    write_ltf(path, np.zeros(2))
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(LtfDtypeError):
        read_ltf(path)


def test_expected_dtype_mismatch(tmp_path):
    path = tmp_path / "t.ltf"
    write_ltf(path, np.zeros(2, dtype=np.float32))
    with pytest.raises(LtfDtypeError):
        read_ltf(path, expected_dtype=np.float64)


def test_nonzero_reserved_field(tmp_path):
    path = tmp_path / "pad.ltf"
    write_ltf(path, np.zeros(2))
    blob = bytearray(path.read_bytes())
    blob[6] = 1
    path.write_bytes(bytes(blob))
    with pytest.raises(LtfError):
        read_ltf(path)


def test_integer_tensor_rejected(tmp_path):
    with pytest.raises(LtfDtypeError):
        write_ltf(tmp_path / "int.ltf", np.arange(3))


def test_tensor_dir_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a.w": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    save_tensor_dir(tmp_path / "ckpt", tensors, extra={"note": 1})
    back, manifest = load_tensor_dir(tmp_path / "ckpt")
    assert set(back) == {"a.w", "b"}
    assert np.array_equal(back["a.w"], tensors["a.w"])
    assert manifest["note"] == 1
    assert manifest["tensors"]["a.w"]["shape"] == [2, 3]
