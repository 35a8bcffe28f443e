"""KVTN tensor files and synthetic KV-cache data generation.

The KVTN format stores one dense [context_len, head_num, head_dim] tensor:
magic ``KVTN``, a version byte, a dtype byte (0 = float16, 1 = float32),
three little-endian uint64 dimensions, then the raw values little-endian.
float16 payloads are the IEEE 754 binary16 bit patterns, so files are
bit-exact across implementations.

Synthetic tensors are Gaussian per channel with a seeded subset of
channels scaled up, mimicking the outlier-channel statistics that make
real key/value activations compress well.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import TensorFormatError

_MAGIC = b"KVTN"
_VERSION = 1
_HEADER = struct.Struct("<4sBBQQQ")
_CODE_TO_DTYPE = {0: np.dtype("<f2"), 1: np.dtype("<f4")}
_DTYPE_TO_CODE = {np.dtype(np.float16): 0, np.dtype(np.float32): 1}


@dataclass(frozen=True)
class CacheTensor:
    """Dense KV tensor for one layer; the uncompressed ground truth.

    ``values`` has shape ``(context_len, head_num, head_dim)`` and dtype
    float16 or float32. Non-finite values are rejected up front because
    min/max quantization is undefined for them.
    """

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise TensorFormatError("values must be a 3-d ndarray [context_len, head_num, head_dim]")
        if min(v.shape) < 1:
            raise TensorFormatError(f"all dimensions must be positive, got shape {v.shape}")
        if v.dtype not in (np.float16, np.float32):
            raise TensorFormatError(f"unsupported dtype {v.dtype}; expected float16 or float32")
        if not np.all(np.isfinite(v)):
            raise TensorFormatError("NaN/Inf values are not accepted into the pipeline")

    @property
    def context_len(self) -> int:
        return self.values.shape[0]

    @property
    def head_num(self) -> int:
        return self.values.shape[1]

    @property
    def head_dim(self) -> int:
        return self.values.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def as_float32(self) -> np.ndarray:
        """Working copy in float32 (exact for float16 inputs)."""
        return np.ascontiguousarray(self.values, dtype=np.float32)


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic recipe for a synthetic KV tensor.

    The per-channel statistical model is a stand-in for caches captured
    from real prompts; its parameters are tunable, not ground truth.
    """

    context_len: int
    head_num: int
    head_dim: int
    seed: int = 0
    channel_outlier_fraction: float = 0.05
    outlier_magnitude: float = 8.0
    base_std: float = 1.0

    def __post_init__(self):
        if min(self.context_len, self.head_num, self.head_dim) < 1:
            raise TensorFormatError("context_len, head_num and head_dim must be positive")
        if not 0.0 <= self.channel_outlier_fraction <= 1.0:
            raise TensorFormatError("channel_outlier_fraction must lie in [0, 1]")
        if self.outlier_magnitude <= 0 or self.base_std <= 0:
            raise TensorFormatError("outlier_magnitude and base_std must be positive")
        if not 0 <= self.seed < 2**64:
            raise TensorFormatError("seed must fit an unsigned 64-bit integer")


def write_tensor(t: CacheTensor, path) -> None:
    """Write ``t`` to ``path`` in the KVTN format."""
    dims = (t.context_len, t.head_num, t.head_dim)
    if max(dims) >= 2**64:
        raise TensorFormatError("dimension exceeds unsigned 64-bit range")
    code = _DTYPE_TO_CODE[np.dtype(t.dtype)]
    le_dtype = _CODE_TO_DTYPE[code]
    header = _HEADER.pack(_MAGIC, _VERSION, code, *dims)
    payload = np.ascontiguousarray(t.values, dtype=le_dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path) -> CacheTensor:
    """Read a KVTN file; exact inverse of :func:`write_tensor`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TensorFormatError("file too short for KVTN header")
    magic, version, code, ctx, heads, dim = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    if version != _VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unsupported dtype code {code}")
    if min(ctx, heads, dim) < 1:
        raise TensorFormatError("dimensions must be positive")
    dtype = _CODE_TO_DTYPE[code]
    expected = ctx * heads * dim * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise TensorFormatError(f"truncated payload: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise TensorFormatError(f"trailing bytes after payload: {len(payload) - expected}")
    values = np.frombuffer(payload, dtype=dtype).reshape(ctx, heads, dim).copy()
    if not np.all(np.isfinite(values)):
        raise TensorFormatError("NaN/Inf in payload")
    return CacheTensor(values)


def generate_synthetic(spec: SyntheticSpec) -> CacheTensor:
    """Deterministic Gaussian tensor with outlier channels scaled up.

    Channels are (head, dim) pairs. A seeded hash selects roughly
    ``channel_outlier_fraction`` of them; their values are scaled by
    ``outlier_magnitude``. Identical specs yield identical tensors.
    """
    mask_rng = np.random.default_rng([spec.seed, 0x6F75746C])
    outliers = mask_rng.random((spec.head_num, spec.head_dim)) < spec.channel_outlier_fraction
    value_rng = np.random.default_rng([spec.seed, 0x76616C73])
    values = value_rng.standard_normal(
        (spec.context_len, spec.head_num, spec.head_dim), dtype=np.float32
    )
    values *= np.float32(spec.base_std)
    values[:, outliers] *= np.float32(spec.outlier_magnitude)
    return CacheTensor(values)
