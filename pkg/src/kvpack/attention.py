"""Cache-resident fused decompress + matrix-vector attention.

The fused paths consume decoded slices directly inside the dot product,
folding dequantization into the accumulation:

    sum_c (min_c + code_c * scale_c) * q_c
        = (sum_c min_c * q_c) + (sum_c scale_c * code_c * q_c)

so nothing larger than a bounded group of blocks is ever materialized.
Unfused reference paths over dense tensors are provided for
differential testing and as the plain matvec baseline.

All accumulation is in float32. Per-block partial results combine in a
fixed ordinal order, so results are reproducible for a given worker
count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import codec
from .codec import DataMovement
from .errors import CodecError
from .kvcache import LayerCacheState
from .tensor_io import CacheTensor


@dataclass(frozen=True)
class AttentionOutput:
    """One decode step's result plus the pre-softmax logits."""

    out: np.ndarray     # (head_num, head_dim) float32
    scores: np.ndarray  # (head_num, context_len) float32


def _check_query(state: LayerCacheState, q) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float32)
    if arr.shape != (state.head_num, state.head_dim):
        raise CodecError(f"query must have shape {(state.head_num, state.head_dim)}")
    if not np.all(np.isfinite(arr)):
        raise CodecError("non-finite query rejected")
    return arr


def _ordinal_ranges(n_blocks: int, n_threads: int):
    if n_blocks == 0:
        return []
    n_threads = max(1, min(n_threads, n_blocks))
    step = -(-n_blocks // n_threads)
    return [(i, min(i + step, n_blocks)) for i in range(0, n_blocks, step)]


def fused_k_scores(
    state: LayerCacheState,
    q,
    movement: Optional[DataMovement] = None,
    n_threads: int = 1,
) -> np.ndarray:
    """Pre-softmax logits over the whole context, decoded block by block.

    Each compressed K block is decoded slice-wise and its dot products
    accumulate immediately; buffered tokens contribute exact dot
    products. Logits are scaled by 1/sqrt(head_dim).
    """
    q32 = _check_query(state, q)
    H, D = state.head_num, state.head_dim
    cfg = state.cfg_k
    scores = np.zeros((H, state.context_len), dtype=np.float32)
    n_units = codec.units_per_block(cfg.mode, D, cfg.block_size)
    if movement is not None:
        movement.add_read(q32.nbytes)

    def run(span):
        lo, hi = span
        for _, block_index, codes, mins, scales in codec.iter_decoded_blocks(
            state.k_arena,
            state.k_codebook,
            n_units=n_units,
            head_dim=D,
            ordinals=range(lo, hi),
            movement=movement,
        ):
            head = block_index % H
            t0 = (block_index // H) * cfg.block_size
            qh = q32[head]
            folded = scales.astype(np.float32) * qh
            base = np.float32(mins.astype(np.float32) @ qh)
            scores[head, t0: t0 + cfg.block_size] = codes.astype(np.float32) @ folded + base

    spans = _ordinal_ranges(len(state.k_arena), n_threads)
    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            list(pool.map(run, spans))
    elif spans:
        run(spans[0])

    if state.buffered:
        buf = state._k_buffer[: state.buffered]
        if movement is not None:
            movement.add_read(buf.nbytes)
        scores[:, state.compressed_tokens:] = np.einsum("thd,hd->ht", buf, q32)
    scores *= np.float32(1.0 / math.sqrt(D))
    return scores


def fused_v_output(
    state: LayerCacheState,
    weights,
    movement: Optional[DataMovement] = None,
    n_threads: int = 1,
) -> np.ndarray:
    """Weighted V aggregation decoded block by block.

    Each V block contributes ``(w * scale) @ codes + (w @ mins)`` to its
    head's partial vector; partials reduce in ordinal order. Buffered
    tokens contribute their exact vectors.
    """
    w = np.asarray(weights, dtype=np.float32)
    H, D = state.head_num, state.head_dim
    if w.shape != (H, state.context_len):
        raise CodecError(f"weights must have shape {(H, state.context_len)}")
    cfg = state.cfg_v
    n_units = codec.units_per_block(cfg.mode, D, cfg.block_size)
    if movement is not None:
        movement.add_read(w.nbytes)

    def run(span):
        lo, hi = span
        part = np.zeros((H, D), dtype=np.float32)
        for _, block_index, codes, mins, scales in codec.iter_decoded_blocks(
            state.v_arena,
            state.v_codebook,
            n_units=n_units,
            head_dim=D,
            ordinals=range(lo, hi),
            movement=movement,
        ):
            head = block_index % H
            t0 = (block_index // H) * cfg.block_size
            wb = w[head, t0: t0 + cfg.block_size]
            part[head] += (wb * scales.astype(np.float32)) @ codes.astype(np.float32)
            part[head] += np.float32(wb @ mins.astype(np.float32))
        return part

    spans = _ordinal_ranges(len(state.v_arena), n_threads)
    out = np.zeros((H, D), dtype=np.float32)
    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            for part in pool.map(run, spans):
                out += part
    elif spans:
        out += run(spans[0])

    if state.buffered:
        buf = state._v_buffer[: state.buffered]
        if movement is not None:
            movement.add_read(buf.nbytes)
        out += np.einsum("ht,thd->hd", w[:, state.compressed_tokens:], buf)
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax (row max subtracted)."""
    x = np.asarray(logits, dtype=np.float32)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=-1, keepdims=True)


def attention_step(
    state: LayerCacheState,
    q,
    movement: Optional[DataMovement] = None,
    n_threads: int = 1,
) -> AttentionOutput:
    """One decode-stage attention step over the compressed cache."""
    if state.context_len < 1:
        raise CodecError("attention over an empty context")
    scores = fused_k_scores(state, q, movement=movement, n_threads=n_threads)
    weights = softmax_rows(scores)
    out = fused_v_output(state, weights, movement=movement, n_threads=n_threads)
    return AttentionOutput(out=out, scores=scores)


def reference_scores(
    k: CacheTensor, q, movement: Optional[DataMovement] = None
) -> np.ndarray:
    """Dense matvec baseline: logits from a materialized K tensor."""
    q32 = np.asarray(q, dtype=np.float32)
    values = k.as_float32()
    if q32.shape != (k.head_num, k.head_dim):
        raise CodecError(f"query must have shape {(k.head_num, k.head_dim)}")
    if movement is not None:
        movement.add_read(values.nbytes + q32.nbytes)
    scores = np.einsum("thd,hd->ht", values, q32)
    return scores * np.float32(1.0 / math.sqrt(k.head_dim))


def reference_output(
    v: CacheTensor, weights, movement: Optional[DataMovement] = None
) -> np.ndarray:
    """Dense matvec baseline: weighted V sum from a materialized tensor."""
    w = np.asarray(weights, dtype=np.float32)
    values = v.as_float32()
    if w.shape != (v.head_num, v.context_len):
        raise CodecError(f"weights must have shape {(v.head_num, v.context_len)}")
    if movement is not None:
        movement.add_read(values.nbytes + w.nbytes)
    return np.einsum("ht,thd->hd", w, values)


def multistage_attention(
    state: LayerCacheState,
    q,
    movement: Optional[DataMovement] = None,
) -> AttentionOutput:
    """Unfused pipeline: decode + dequantize, then separate matvec passes."""
    k, v = state.fetch_dequantized()
    scores = reference_scores(k, q, movement=movement)
    weights = softmax_rows(scores)
    out = reference_output(v, weights, movement=movement)
    return AttentionOutput(out=out, scores=scores)
