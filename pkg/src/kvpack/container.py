"""KVCZ container: a compressed layer cache persisted to disk.

Layout (all little-endian):

    magic "KVCZ", version u8, dtype u8 (0 = float16, 1 = float32)
    head_num u64, head_dim u64, context_len u64, compressed_tokens u64
    cfg_k: mode u8, block_size u32, buffer_size u32, rel_quant_scale f64
    cfg_v: same
    k code lengths (256 bytes), v code lengths (256 bytes)
    flags u8 (bit 0: whole-context channel ranges follow)
    [channel ranges: head_num * head_dim * (min f32, max f32)]
    buffered u32
    k buffer, v buffer (buffered * head_num * head_dim values, stored dtype)
    K arena: block count u32, offsets u32 each, arena length u64, bytes
    V arena: same

Everything before the K arena bytes is parseable without touching the
arenas. Buffers and arenas round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from typing import Tuple

import numpy as np

from . import codec
from .codebook import deserialize_codebook, serialize_codebook
from .errors import ContainerFormatError
from .kvcache import LayerCacheState
from .quantizer import QuantConfig, QuantMode

_MAGIC = b"KVCZ"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float16): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f2"), 1: np.dtype("<f4")}
_MODE_CODES = {QuantMode.K_BLOCK: 0, QuantMode.K_CHANNEL: 1, QuantMode.V_TOKEN: 2}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}
_HEAD = struct.Struct("<4sBBQQQQ")
_CFG = struct.Struct("<BIId")


def _pack_cfg(cfg: QuantConfig) -> bytes:
    return _CFG.pack(_MODE_CODES[cfg.mode], cfg.block_size, cfg.buffer_size, cfg.rel_quant_scale)


def _unpack_cfg(data: bytes, offset: int) -> Tuple[QuantConfig, int]:
    mode_code, block_size, buffer_size, rel = _CFG.unpack_from(data, offset)
    if mode_code not in _CODE_MODES:
        raise ContainerFormatError(f"unknown quantization mode code {mode_code}")
    cfg = QuantConfig(
        mode=_CODE_MODES[mode_code],
        block_size=block_size,
        rel_quant_scale=rel,
        buffer_size=buffer_size,
    )
    return cfg, offset + _CFG.size


def save_state(state: LayerCacheState, path) -> None:
    """Serialize a layer cache (arenas and buffers verbatim) to KVCZ."""
    dtype_code = _DTYPE_CODES[np.dtype(state.dtype)]
    store_dtype = _CODE_DTYPES[dtype_code]
    parts = [
        _HEAD.pack(
            _MAGIC,
            _VERSION,
            dtype_code,
            state.head_num,
            state.head_dim,
            state.context_len,
            state.compressed_tokens,
        ),
        _pack_cfg(state.cfg_k),
        _pack_cfg(state.cfg_v),
        serialize_codebook(state.k_codebook),
        serialize_codebook(state.v_codebook),
    ]
    has_ranges = state.k_channel_ranges is not None
    parts.append(struct.pack("<B", 1 if has_ranges else 0))
    if has_ranges:
        mins, maxs = state.k_channel_ranges
        parts.append(np.stack([mins, maxs], axis=-1).astype("<f4").tobytes())
    parts.append(struct.pack("<I", state.buffered))
    parts.append(
        np.ascontiguousarray(state._k_buffer[: state.buffered], dtype=store_dtype).tobytes()
    )
    parts.append(
        np.ascontiguousarray(state._v_buffer[: state.buffered], dtype=store_dtype).tobytes()
    )
    for arena in (state.k_arena, state.v_arena):
        data = arena.snapshot()
        parts.append(struct.pack("<I", len(arena)))
        parts.append(arena.block_offsets.astype("<u4").tobytes())
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_header(path) -> dict:
    """Parse the KVCZ header (no arena bytes are interpreted)."""
    with open(path, "rb") as fh:
        data = fh.read(_HEAD.size + 2 * _CFG.size)
    if len(data) < _HEAD.size + 2 * _CFG.size:
        raise ContainerFormatError("file too short for KVCZ header")
    magic, version, dtype_code, head_num, head_dim, ctx, compressed = _HEAD.unpack_from(data)
    if magic != _MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    if version != _VERSION:
        raise ContainerFormatError(f"unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise ContainerFormatError(f"unsupported dtype code {dtype_code}")
    cfg_k, off = _unpack_cfg(data, _HEAD.size)
    cfg_v, _ = _unpack_cfg(data, off)
    return {
        "dtype": _CODE_DTYPES[dtype_code],
        "head_num": head_num,
        "head_dim": head_dim,
        "context_len": ctx,
        "compressed_tokens": compressed,
        "cfg_k": cfg_k,
        "cfg_v": cfg_v,
    }


def load_state(path) -> LayerCacheState:
    """Rebuild a layer cache from a KVCZ file; inverse of :func:`save_state`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size:
        raise ContainerFormatError("file too short for KVCZ header")
    magic, version, dtype_code, head_num, head_dim, ctx, compressed = _HEAD.unpack_from(data)
    if magic != _MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    if version != _VERSION:
        raise ContainerFormatError(f"unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise ContainerFormatError(f"unsupported dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    off = _HEAD.size
    cfg_k, off = _unpack_cfg(data, off)
    cfg_v, off = _unpack_cfg(data, off)
    try:
        k_cb = deserialize_codebook(data[off: off + 256])
        v_cb = deserialize_codebook(data[off + 256: off + 512])
    except Exception as exc:
        raise ContainerFormatError(f"invalid embedded codebook: {exc}") from exc
    off += 512
    (flags,) = struct.unpack_from("<B", data, off)
    off += 1
    ranges = None
    if flags & 1:
        n = head_num * head_dim
        pairs = np.frombuffer(data, dtype="<f4", count=2 * n, offset=off).reshape(
            head_num, head_dim, 2
        )
        ranges = (pairs[..., 0].copy(), pairs[..., 1].copy())
        off += 8 * n
    (buffered,) = struct.unpack_from("<I", data, off)
    off += 4
    if buffered != ctx - compressed:
        raise ContainerFormatError("buffered token count disagrees with dimensions")
    n_buf = buffered * head_num * head_dim
    k_buf = np.frombuffer(data, dtype=dtype, count=n_buf, offset=off).reshape(
        buffered, head_num, head_dim
    )
    off += n_buf * dtype.itemsize
    v_buf = np.frombuffer(data, dtype=dtype, count=n_buf, offset=off).reshape(
        buffered, head_num, head_dim
    )
    off += n_buf * dtype.itemsize

    state = LayerCacheState(
        head_num,
        head_dim,
        cfg_k,
        cfg_v,
        k_cb,
        v_cb,
        dtype=dtype,
        k_channel_ranges=ranges,
    )
    for attr, cfg in (("k_arena", cfg_k), ("v_arena", cfg_v)):
        (n_blocks,) = struct.unpack_from("<I", data, off)
        off += 4
        offsets = np.frombuffer(data, dtype="<u4", count=n_blocks, offset=off)
        off += 4 * n_blocks
        (arena_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + arena_len > len(data):
            raise ContainerFormatError("truncated arena bytes")
        n_units = codec.units_per_block(cfg.mode, head_dim, cfg.block_size)
        setattr(
            state,
            attr,
            codec.CompressedArena.restore(data[off: off + arena_len], offsets, n_units),
        )
        off += arena_len
    if off != len(data):
        raise ContainerFormatError(f"trailing bytes after container: {len(data) - off}")
    state.context_len = ctx
    state.compressed_tokens = compressed
    state.buffered = buffered
    if buffered:
        state._k_buffer[:buffered] = k_buf.astype(np.float32)
        state._v_buffer[:buffered] = v_buf.astype(np.float32)
    expected_blocks = (compressed // cfg_k.block_size) * head_num
    if len(state.k_arena) != expected_blocks or len(state.v_arena) != expected_blocks:
        raise ContainerFormatError("arena block count disagrees with compressed_tokens")
    return state
