"""End-to-end pipeline: synthetic cache -> prefill -> KVCZ file -> fetch.

Shows the ratio accounting (payload, buffered tokens, metadata), the
KVTN/KVCZ file formats, and that reconstruction respects the
quantization error bound.
"""

import os
import tempfile

import numpy as np

from kvpack import (
    LayerCacheState,
    QuantConfig,
    QuantMode,
    SyntheticSpec,
    collect_stats,
    generate_synthetic,
    load_state,
    read_header,
    save_state,
    write_tensor,
)

spec = SyntheticSpec(context_len=2048 + 5, head_num=8, head_dim=128, seed=42)
k = generate_synthetic(spec)
v = generate_synthetic(SyntheticSpec(context_len=2048 + 5, head_num=8,
                                     head_dim=128, seed=43))
print(f"synthetic cache: context={k.context_len} heads={k.head_num} dim={k.head_dim}")

cfg_k = QuantConfig(mode=QuantMode.K_BLOCK, block_size=64)   # rel scale 0.05
cfg_v = QuantConfig(mode=QuantMode.V_TOKEN, block_size=64)   # rel scale 0.15
state = LayerCacheState.prefill(k, v, cfg_k, cfg_v)
print(f"prefill: {len(state.k_arena)} K blocks + {len(state.v_arena)} V blocks, "
      f"{state.buffered} tokens left buffered")

stats = collect_stats(state)
print(f"\noriginal   {stats.original_bytes:>10d} B")
print(f"compressed {stats.compressed_bytes:>10d} B (payload + buffered tokens)")
print(f"metadata   {stats.metadata_bytes:>10d} B (counters, headers, metas, offsets)")
print(f"ratio      {stats.compression_ratio:.2f}x   "
      f"bits/value {stats.bits_per_value:.2f}")

with tempfile.TemporaryDirectory() as tmp:
    kvtn = os.path.join(tmp, "k.kvtn")
    write_tensor(k, kvtn)
    print(f"\nKVTN tensor file: {os.path.getsize(kvtn)} bytes")

    kvcz = os.path.join(tmp, "layer.kvcz")
    save_state(state, kvcz)
    print(f"KVCZ container:   {os.path.getsize(kvcz)} bytes")
    print("header parse (no arena reads):", read_header(kvcz)["cfg_k"].mode.value)

    restored = load_state(kvcz)
    kf, vf = restored.fetch_dequantized()

err_k = np.abs(kf.values.astype(np.float64) - k.values.astype(np.float64)).max()
err_v = np.abs(vf.values.astype(np.float64) - v.values.astype(np.float64)).max()
print(f"\nreconstruction max error: K {err_k:.4f}, V {err_v:.4f} "
      f"(bounded by each unit's scale/2)")
assert np.array_equal(kf.values[state.compressed_tokens:],
                      k.values[state.compressed_tokens:])
print("buffered tokens came back bit-exact")
