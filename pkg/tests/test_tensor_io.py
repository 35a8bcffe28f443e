"""KVTN format and synthetic-data generator tests."""

import struct

import numpy as np
import pytest

from kvpack import (
    CacheTensor,
    SyntheticSpec,
    TensorFormatError,
    generate_synthetic,
    read_tensor,
    write_tensor,
)

HEADER_SIZE = 30  # magic(4) + version(1) + dtype(1) + 3 * u64


def _tiny_tensor(dtype=np.float32):
    return CacheTensor(np.zeros((1, 1, 1), dtype=dtype))


class TestFormat:
    def test_smallest_tensor_layout(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        data = path.read_bytes()
        assert len(data) == HEADER_SIZE + 4
        assert data[:4] == b"KVTN"
        assert data[4] == 1  # version
        assert data[5] == 1  # float32 code
        assert struct.unpack_from("<QQQ", data, 6) == (1, 1, 1)
        assert data[HEADER_SIZE:] == b"\x00\x00\x00\x00"

    @pytest.mark.parametrize("dtype", [np.float16, np.float32])
    def test_roundtrip_bitwise(self, tmp_path, dtype):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((5, 3, 7)).astype(dtype)
        path = tmp_path / "t.kvtn"
        write_tensor(CacheTensor(values), path)
        back = read_tensor(path)
        assert back.dtype == np.dtype(dtype)
        assert np.array_equal(
            back.values.view(np.uint16 if dtype == np.float16 else np.uint32),
            values.view(np.uint16 if dtype == np.float16 else np.uint32),
        )

    def test_f16_payload_size(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(CacheTensor(np.ones((2, 2, 2), dtype=np.float16)), path)
        assert len(path.read_bytes()) == HEADER_SIZE + 16  # 8 values * 2 bytes

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="magic"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(TensorFormatError, match="truncated"):
            read_tensor(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TensorFormatError, match="trailing"):
            read_tensor(path)

    def test_bad_version_and_dtype(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="version"):
            read_tensor(path)
        data[4] = 1
        data[5] = 7
        path.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="dtype"):
            read_tensor(path)

    def test_nan_payload_rejected(self, tmp_path):
        path = tmp_path / "t.kvtn"
        write_tensor(_tiny_tensor(), path)
        data = bytearray(path.read_bytes())
        data[HEADER_SIZE:] = struct.pack("<f", float("nan"))
        path.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="NaN"):
            read_tensor(path)

    def test_nonfinite_tensor_rejected(self):
        values = np.zeros((1, 1, 2), dtype=np.float32)
        values[0, 0, 0] = np.inf
        with pytest.raises(TensorFormatError):
            CacheTensor(values)

    def test_empty_dimension_rejected(self):
        with pytest.raises(TensorFormatError):
            CacheTensor(np.zeros((0, 1, 1), dtype=np.float32))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(context_len=64, head_num=2, head_dim=16, seed=11)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert np.array_equal(a.values, b.values)

    def test_different_seeds_differ(self):
        a = generate_synthetic(SyntheticSpec(64, 2, 16, seed=1))
        b = generate_synthetic(SyntheticSpec(64, 2, 16, seed=2))
        assert not np.array_equal(a.values, b.values)

    def test_zero_fraction_uniform_std(self):
        spec = SyntheticSpec(
            context_len=4096, head_num=1, head_dim=32, seed=5,
            channel_outlier_fraction=0.0, base_std=1.0,
        )
        t = generate_synthetic(spec)
        stds = t.values.std(axis=0).ravel()
        assert stds.max() / stds.min() < 1.3  # sampling noise only

    def test_outlier_channels_scaled(self):
        # Empirical oracle: channels with std far above base_std are the
        # outliers; their count should be near fraction * head_dim and
        # their std near outlier_magnitude.
        spec = SyntheticSpec(
            context_len=8192, head_num=1, head_dim=128, seed=123,
            channel_outlier_fraction=0.05, outlier_magnitude=10.0, base_std=1.0,
        )
        t = generate_synthetic(spec)
        stds = t.values.std(axis=0).ravel()
        high = stds > 5.0
        n_expected = 0.05 * 128
        assert abs(int(high.sum()) - n_expected) <= 5 * np.sqrt(128 * 0.05 * 0.95)
        assert high.sum() > 0
        assert np.allclose(stds[high], 10.0, rtol=0.15)
        assert np.allclose(stds[~high], 1.0, rtol=0.15)

    def test_invalid_spec(self):
        with pytest.raises(TensorFormatError):
            SyntheticSpec(0, 1, 1)
        with pytest.raises(TensorFormatError):
            SyntheticSpec(1, 1, 1, channel_outlier_fraction=1.5)
