"""Shared test utilities: independent oracles and random generators."""

import numpy as np

from kvpack import (
    CacheTensor,
    QuantConfig,
    QuantMode,
    LayerCacheState,
    build_codebook,
    build_histogram,
    smooth_histogram,
)


def naive_tree_decode(payload, bit_offset, bit_count, tree, out_len):
    """Straightforward if/else Huffman tree walk (reference decoder)."""
    data = bytes(payload)
    children = tree.children.tolist()
    is_symbol = tree.is_symbol.tolist()
    symbols = tree.symbols.tolist()
    out = []
    index = 0
    for pos in range(bit_offset, bit_offset + bit_count):
        bit = (data[pos >> 3] >> (7 - (pos & 7))) & 1
        index = children[index][bit]
        if is_symbol[index]:
            out.append(symbols[index])
            index = 0
    if len(out) != out_len or index != 0:
        raise ValueError(f"corrupt stream: {len(out)} symbols, expected {out_len}")
    return np.asarray(out, dtype=np.uint8)


def brute_force_quantize(values, rel):
    """Elementwise re-derivation of codes and reconstruction (pure Python)."""
    values = [float(v) for v in np.asarray(values).ravel()]
    vmin = np.float32(min(values))
    vmax = np.float32(max(values))
    scale = np.float32(rel * (float(vmax) - float(vmin)))
    codes = []
    for v in values:
        if scale == 0:
            codes.append(0)
            continue
        t = (v - float(vmin)) / float(scale)
        c = int(t)
        if t - c >= 0.5:
            c += 1
        codes.append(c)
    recon = [float(vmin) + c * float(scale) for c in codes]
    return codes, float(vmin), float(scale), recon


def huffman_merge_cost(counts):
    """Optimal total encoded bits = sum of merged weights (greedy identity)."""
    weights = sorted(int(c) for c in counts if c > 0)
    if len(weights) <= 1:
        return sum(weights)  # single symbol still pays one bit per value
    total = 0
    import heapq

    heapq.heapify(weights)
    while len(weights) > 1:
        a = heapq.heappop(weights)
        b = heapq.heappop(weights)
        total += a + b
        heapq.heappush(weights, a + b)
    return total


def random_codebook(rng, max_symbols=40, min_symbols=1):
    """Codebook from a random skewed histogram; returns (codebook, n_symbols)."""
    n_sym = int(rng.integers(min_symbols, max_symbols + 1))
    hist = np.zeros(256, dtype=np.uint64)
    hist[:n_sym] = rng.integers(1, 10_000, size=n_sym).astype(np.uint64)
    return build_codebook(hist), n_sym


def smoothed_codebook_for(codes, max_code):
    return build_codebook(smooth_histogram(build_histogram(codes), max_code))


def make_state(
    rng,
    context_len,
    head_num=4,
    head_dim=32,
    block_size=16,
    buffer_size=None,
    mode=QuantMode.K_BLOCK,
    rel_k=0.05,
    rel_v=0.15,
    appended=0,
    dtype=np.float32,
):
    """Random prefilled state with optional extra appended tokens."""
    cfg_k = QuantConfig(mode=mode, block_size=block_size,
                        rel_quant_scale=rel_k, buffer_size=buffer_size)
    cfg_v = QuantConfig(mode=QuantMode.V_TOKEN, block_size=block_size,
                        rel_quant_scale=rel_v, buffer_size=buffer_size)
    k = rng.standard_normal((context_len, head_num, head_dim)).astype(dtype)
    v = rng.standard_normal((context_len, head_num, head_dim)).astype(dtype)
    state = LayerCacheState.prefill(CacheTensor(k), CacheTensor(v), cfg_k, cfg_v)
    originals = [k, v]
    for _ in range(appended):
        kt = rng.standard_normal((head_num, head_dim)).astype(np.float32)
        vt = rng.standard_normal((head_num, head_dim)).astype(np.float32)
        state.append_token(kt, vt)
        originals[0] = np.concatenate([originals[0], kt[None].astype(dtype)])
        originals[1] = np.concatenate([originals[1], vt[None].astype(dtype)])
    return state, originals[0], originals[1]


def max_relative_error(actual, reference):
    ref = np.asarray(reference, dtype=np.float64)
    act = np.asarray(actual, dtype=np.float64)
    denom = max(float(np.abs(ref).max()), 1e-30)
    return float(np.abs(act - ref).max()) / denom
