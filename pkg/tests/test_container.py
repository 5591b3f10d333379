import struct

import numpy as np
import pytest

from pat_reid.container import MAGIC, load_container, save_container
from pat_reid.errors import ConfigError, FormatError


def test_roundtrip_is_bitwise_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "weights": rng.standard_normal((3, 4)).astype(np.float32),
        "bias": rng.standard_normal(4).astype(np.float32),
        "deep": rng.standard_normal((2, 3, 2)).astype(np.float32),
    }
    path = tmp_path / "t.patb"
    save_container(path, tensors)
    loaded = load_container(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == np.float32
        assert loaded[name].tobytes() == arr.tobytes()
        assert loaded[name].shape == arr.shape


def test_empty_container_is_nine_bytes(tmp_path):
    path = tmp_path / "empty.patb"
    save_container(path, {})
    assert path.stat().st_size == 9
    assert load_container(path) == {}


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.patb"
    path.write_bytes(b"NOPE" + bytes(5))
    with pytest.raises(FormatError, match="magic"):
        load_container(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v.patb"
    path.write_bytes(MAGIC + bytes([9]) + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="version"):
        load_container(path)


def test_corrupted_dims_give_format_error_without_partial_result(tmp_path):
    path = tmp_path / "c.patb"
    save_container(path, {"a": np.ones((2, 2), np.float32), "b": np.zeros(3, np.float32)})
    blob = bytearray(path.read_bytes())
    # dims of "a" start after magic+version+count+name_len+name+ndim
    dims_at = 4 + 1 + 4 + 4 + 1 + 4
    blob[dims_at : dims_at + 4] = struct.pack("<I", 10_000_000)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="offset"):
        load_container(path)


def test_truncated_data_detected(tmp_path):
    path = tmp_path / "t.patb"
    save_container(path, {"a": np.ones((4, 4), np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_container(path)


def test_trailing_garbage_detected(tmp_path):
    path = tmp_path / "g.patb"
    save_container(path, {"a": np.ones(2, np.float32)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        load_container(path)


def test_non_ascii_name_rejected_on_save(tmp_path):
    with pytest.raises(ConfigError):
        save_container(tmp_path / "n.patb", {"naïve": np.ones(1, np.float32)})


def test_float64_input_is_stored_as_float32(tmp_path):
    path = tmp_path / "f.patb"
    save_container(path, {"x": np.array([1.0, 2.5], np.float64)})
    out = load_container(path)["x"]
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, np.array([1.0, 2.5], np.float32))
