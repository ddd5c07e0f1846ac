import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reid_forge.errors import ValidationError
from reid_forge.tensorio import (
    TNSR_MAGIC,
    TNSR_VERSION,
    load_checkpoint,
    load_tensor_file,
    read_tensor,
    save_checkpoint,
    save_tensor_file,
    write_tensor,
)


class TestTensorFormat:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(), (1,), (7,), (3, 4), (2, 3, 4, 5), (1, 1, 1)]:
            arr = rng.standard_normal(shape)
            path = tmp_path / "t.tnsr"
            save_tensor_file(path, arr)
            back = load_tensor_file(path)
            assert back.shape == arr.shape
            assert back.dtype == np.float64
            np.testing.assert_array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        path = tmp_path / "t.tnsr"
        save_tensor_file(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == TNSR_MAGIC
        version, ndim = struct.unpack_from("<II", raw, 4)
        assert version == TNSR_VERSION
        assert ndim == 2
        dims = struct.unpack_from("<2Q", raw, 12)
        assert dims == (2, 3)
        payload = np.frombuffer(raw[12 + 16 :], dtype="<f8")
        np.testing.assert_array_equal(payload.reshape(2, 3), arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.tnsr"
        save_tensor_file(path, np.zeros(3))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="magic"):
            load_tensor_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "t.tnsr"
        save_tensor_file(path, np.zeros(3))
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="version"):
            load_tensor_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.tnsr"
        save_tensor_file(path, np.zeros((4, 4)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValidationError, match="truncated"):
            load_tensor_file(path)

    def test_non_contiguous_input(self, tmp_path):
        arr = np.arange(24, dtype=np.float64).reshape(4, 6)[:, ::2]
        path = tmp_path / "t.tnsr"
        save_tensor_file(path, arr)
        np.testing.assert_array_equal(load_tensor_file(path), arr)

    @given(
        hnp.arrays(
            dtype=np.float64,
            shape=hnp.array_shapes(min_dims=0, max_dims=4, max_side=6),
            elements=st.floats(-1e12, 1e12, allow_nan=False),
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, arr):
        stream = io.BytesIO()
        write_tensor(stream, arr)
        stream.seek(0)
        back = read_tensor(stream)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


class TestStreamHelpers:
    def test_multiple_tensors_one_stream(self, tmp_path):
        path = tmp_path / "multi.bin"
        a = np.arange(4.0)
        b = np.ones((2, 2))
        with open(path, "wb") as fh:
            write_tensor(fh, a)
            write_tensor(fh, b)
        with open(path, "rb") as fh:
            np.testing.assert_array_equal(read_tensor(fh), a)
            np.testing.assert_array_equal(read_tensor(fh), b)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {
            "conv1.w": rng.standard_normal((8, 3, 3, 3)),
            "conv1.b": rng.standard_normal(8),
            "head.w": rng.standard_normal((5, 8)),
        }
        meta = {"epoch": 3, "format": "demo", "nested": {"a": 1}}
        path = tmp_path / "ck.tnsrck"
        save_checkpoint(path, tensors, meta)
        back_tensors, back_meta = load_checkpoint(path)
        assert set(back_tensors) == set(tensors)
        for name, arr in tensors.items():
            np.testing.assert_array_equal(back_tensors[name], arr)
        assert back_meta["epoch"] == 3
        assert back_meta["nested"] == {"a": 1}

    def test_deterministic_bytes(self, tmp_path):
        tensors = {"b": np.ones(2), "a": np.zeros(3)}
        meta = {"z": 1, "m": 2}
        p1 = tmp_path / "a.ck"
        p2 = tmp_path / "b.ck"
        save_checkpoint(p1, tensors, meta)
        save_checkpoint(p2, dict(reversed(list(tensors.items()))), meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "ck.tnsrck"
        save_checkpoint(path, {"a": np.zeros(2)}, {})
        raw = bytearray(path.read_bytes())
        raw[8] = ord("X")  # first header byte, breaks the JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError):
            load_checkpoint(path)
