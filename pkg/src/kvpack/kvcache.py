"""Per-layer cache lifecycle: prefill, buffered appends, fetch.

A :class:`LayerCacheState` owns one K arena and one V arena, fixed-size
pending buffers for tokens that have not reached a full block yet, and
the pair of shared Huffman codebooks built once at prefill and reused
for every later append. The decode loop appends one token at a time;
when the buffer exceeds its capacity the largest block-multiple prefix
is quantized, entropy-coded and appended, and the remainder stays
buffered at full precision.

Prefill and append share one compression path, so appending a token
stream incrementally produces byte-identical arena blocks to one-shot
compression under the same codebooks.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import codec
from .codebook import HuffmanCodebook, build_codebook, build_histogram, smooth_histogram
from .errors import ConfigError, CodecError
from .quantizer import QuantConfig, QuantMode, quantize_block
from .tensor_io import CacheTensor


class LayerCacheState:
    """Compressed KV cache of a single layer."""

    def __init__(
        self,
        head_num: int,
        head_dim: int,
        cfg_k: QuantConfig,
        cfg_v: QuantConfig,
        k_codebook: HuffmanCodebook,
        v_codebook: HuffmanCodebook,
        dtype=np.float32,
        k_channel_ranges: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        if not cfg_k.mode.is_key:
            raise ConfigError("cfg_k must use a K quantization mode")
        if cfg_v.mode is not QuantMode.V_TOKEN:
            raise ConfigError("cfg_v must use the V_TOKEN mode")
        if cfg_k.block_size != cfg_v.block_size or cfg_k.buffer_size != cfg_v.buffer_size:
            raise ConfigError("K and V must share block_size and buffer_size")
        if head_dim * 32 > codec.MAX_SLICE_BITS:
            raise ConfigError("head_dim too large for 16-bit slice counters")
        if cfg_k.mode is QuantMode.K_CHANNEL and k_channel_ranges is None:
            raise ConfigError("K_CHANNEL mode requires whole-context channel ranges")

        self.head_num = head_num
        self.head_dim = head_dim
        self.cfg_k = cfg_k
        self.cfg_v = cfg_v
        self.k_codebook = k_codebook
        self.v_codebook = v_codebook
        self.dtype = np.dtype(dtype)
        self.k_channel_ranges = k_channel_ranges

        self.k_arena = codec.CompressedArena()
        self.v_arena = codec.CompressedArena()
        # One slot of headroom: the overflow check runs after each append.
        cap = cfg_k.buffer_size + 1
        self._k_buffer = np.zeros((cap, head_num, head_dim), dtype=np.float32)
        self._v_buffer = np.zeros((cap, head_num, head_dim), dtype=np.float32)
        self.context_len = 0
        self.compressed_tokens = 0
        self.buffered = 0

    # ------------------------------------------------------------------
    # Construction

    @classmethod
    def prefill(
        cls,
        k: CacheTensor,
        v: CacheTensor,
        cfg_k: QuantConfig,
        cfg_v: QuantConfig,
        codebooks: Optional[Tuple[HuffmanCodebook, HuffmanCodebook]] = None,
        k_channel_ranges: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ) -> "LayerCacheState":
        """Compress a prompt's K/V tensors into a fresh cache state.

        All full blocks are quantized; the histograms of their codes
        (smoothed over the representable range) seed the shared
        codebooks unless ``codebooks`` injects prebuilt ones. Residual
        tokens stay in the buffers at full precision.
        """
        if k.values.shape != v.values.shape:
            raise ConfigError("K and V tensors must share dimensions")
        if k.context_len < 1:
            raise ConfigError("prefill requires at least one token")

        k_work = k.as_float32()
        v_work = v.as_float32()
        ctx, head_num, head_dim = k_work.shape
        bs = cfg_k.block_size
        n_full = (ctx // bs) * bs

        if cfg_k.mode is QuantMode.K_CHANNEL and k_channel_ranges is None:
            k_channel_ranges = (
                k_work.min(axis=0).astype(np.float32),
                k_work.max(axis=0).astype(np.float32),
            )

        k_blocks = []
        v_blocks = []
        if n_full > 0:
            k_blocks = _quantize_tokens(k_work[:n_full], cfg_k, 0, head_num, k_channel_ranges)
            v_blocks = _quantize_tokens(v_work[:n_full], cfg_v, 0, head_num, None)

        if codebooks is None:
            k_hist = np.zeros(256, dtype=np.uint64)
            v_hist = np.zeros(256, dtype=np.uint64)
            if n_full > 0:
                k_hist += build_histogram(np.concatenate([b.codes.ravel() for b in k_blocks]))
                v_hist += build_histogram(np.concatenate([b.codes.ravel() for b in v_blocks]))
            k_cb = build_codebook(smooth_histogram(k_hist, cfg_k.max_code))
            v_cb = build_codebook(smooth_histogram(v_hist, cfg_v.max_code))
        else:
            k_cb, v_cb = codebooks

        state = cls(
            head_num,
            head_dim,
            cfg_k,
            cfg_v,
            k_cb,
            v_cb,
            dtype=k.dtype,
            k_channel_ranges=k_channel_ranges,
        )
        if n_full > 0:
            state._append_blocks(k_blocks, v_blocks, n_full)
        residual = ctx - n_full
        if residual:
            state._k_buffer[:residual] = k_work[n_full:]
            state._v_buffer[:residual] = v_work[n_full:]
            state.buffered = residual
        state.context_len = ctx
        return state

    # ------------------------------------------------------------------
    # Decode-stage appends

    def append_token(self, k_vec, v_vec) -> None:
        """Buffer one new token's K/V vectors; compress on overflow.

        Overflow truncates the largest block-multiple prefix of the
        buffer in one batch, with block indices continuing from the
        last used index; the remainder stays buffered.
        """
        k_vec = np.asarray(k_vec, dtype=np.float32)
        v_vec = np.asarray(v_vec, dtype=np.float32)
        expected = (self.head_num, self.head_dim)
        if k_vec.shape != expected or v_vec.shape != expected:
            raise CodecError(f"token vectors must have shape {expected}")
        if not (np.all(np.isfinite(k_vec)) and np.all(np.isfinite(v_vec))):
            raise CodecError("non-finite token vectors rejected")
        self._k_buffer[self.buffered] = k_vec
        self._v_buffer[self.buffered] = v_vec
        self.buffered += 1
        self.context_len += 1
        if self.buffered > self.cfg_k.buffer_size:
            n_compress = (self.buffered // self.cfg_k.block_size) * self.cfg_k.block_size
            self._compress_range(
                self._k_buffer[:n_compress].copy(), self._v_buffer[:n_compress].copy()
            )
            remainder = self.buffered - n_compress
            if remainder:
                self._k_buffer[:remainder] = self._k_buffer[n_compress: self.buffered]
                self._v_buffer[:remainder] = self._v_buffer[n_compress: self.buffered]
            self.buffered = remainder

    # ------------------------------------------------------------------
    # Fetch

    def fetch_dequantized(self) -> Tuple[CacheTensor, CacheTensor]:
        """Materialize the full dequantized K and V tensors (testing aid).

        The compressed region is decoded and dequantized; buffered
        tokens are returned verbatim.
        """
        k_out = self._materialize(
            self.k_arena, self.k_codebook, self.cfg_k, self._k_buffer
        )
        v_out = self._materialize(
            self.v_arena, self.v_codebook, self.cfg_v, self._v_buffer
        )
        return CacheTensor(k_out), CacheTensor(v_out)

    def _materialize(self, arena, cb, cfg, buffer) -> np.ndarray:
        out = np.empty((self.context_len, self.head_num, self.head_dim), dtype=np.float32)
        bs = cfg.block_size
        n_units = codec.units_per_block(cfg.mode, self.head_dim, bs)
        for _, block_index, codes, mins, scales in codec.iter_decoded_blocks(
            arena, cb, n_units=n_units, head_dim=self.head_dim
        ):
            head = block_index % self.head_num
            t0 = (block_index // self.head_num) * bs
            if cfg.mode is QuantMode.V_TOKEN:
                deq = mins[:, None] + codes.astype(np.float64) * scales[:, None]
            else:
                deq = mins[None, :] + codes.astype(np.float64) * scales[None, :]
            out[t0: t0 + bs, head] = deq.astype(np.float32)
        if self.buffered:
            out[self.compressed_tokens:] = buffer[: self.buffered]
        return out

    # ------------------------------------------------------------------
    # Shared compression path

    def _compress_range(self, k_tokens: np.ndarray, v_tokens: np.ndarray) -> None:
        """Quantize, encode and append full blocks starting at the cursor.

        The whole batch is processed in one pass per tensor, mirroring a
        single kernel launch covering every block of the overflow event.
        """
        n = k_tokens.shape[0]
        bs = self.cfg_k.block_size
        if n % bs != 0:
            raise CodecError("compression range must be a multiple of block_size")
        ctx_start = self.compressed_tokens
        k_blocks = _quantize_tokens(
            k_tokens, self.cfg_k, ctx_start, self.head_num, self.k_channel_ranges
        )
        v_blocks = _quantize_tokens(v_tokens, self.cfg_v, ctx_start, self.head_num, None)
        self._append_blocks(k_blocks, v_blocks, n)

    def _append_blocks(self, k_blocks, v_blocks, n_tokens: int) -> None:
        for q in k_blocks:
            self.k_arena.append(codec.compress_block(q, self.k_codebook))
        for q in v_blocks:
            self.v_arena.append(codec.compress_block(q, self.v_codebook))
        self.compressed_tokens += n_tokens


def _quantize_tokens(tokens, cfg, ctx_start, head_num, channel_ranges):
    """Quantize a block-multiple token range into blocks in index order.

    Blocks are ordered chunk-major then head, matching the
    ``block_index = chunk * head_num + head`` packing.
    """
    n = tokens.shape[0]
    bs = cfg.block_size
    blocks = []
    for chunk in range(n // bs):
        base = chunk * bs
        for head in range(head_num):
            ranges = None
            if channel_ranges is not None:
                ranges = (channel_ranges[0][head], channel_ranges[1][head])
            blocks.append(
                quantize_block(
                    tokens[base: base + bs, head, :],
                    cfg.mode,
                    cfg,
                    head_index=head,
                    ctx_start=ctx_start + base,
                    head_num=head_num,
                    channel_ranges=ranges,
                )
            )
    return blocks
