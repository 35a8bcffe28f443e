"""Shared Huffman codebooks: canonical codes, smoothing, entropy bound.

Quantized KV codes are highly skewed, which is exactly what a static
Huffman code exploits. This script builds a codebook from a skewed
histogram, shows the canonical code table, and checks the average code
length against the entropy bound.
"""

import numpy as np

from kvpack import (
    build_codebook,
    build_histogram,
    deserialize_codebook,
    histogram_entropy,
    serialize_codebook,
    smooth_histogram,
)

rng = np.random.default_rng(1)
codes = np.minimum(rng.geometric(0.5, size=200_000) - 1, 15).astype(np.uint8)

hist = build_histogram(codes)
print("top counts:", {i: int(hist[i]) for i in range(6)})
print(f"entropy: {histogram_entropy(hist):.3f} bits/code")

# Smoothing guarantees every representable code stays encodable even if
# it never occurred in this sample.
smoothed = smooth_histogram(hist, max_code=20)
cb = build_codebook(smoothed)

print("\ncanonical encode table (symbol, codeword, length):")
for sym, word, length in cb.encode_table[:8]:
    print(f"  {sym:3d}  {word:0{length}b}  len={length}")

avg = float((cb.code_lengths.astype(np.float64) * hist).sum() / hist.sum())
ent = histogram_entropy(hist)
print(f"\naverage code length {avg:.3f} bits vs entropy {ent:.3f} bits "
      f"(bound: entropy + 1 = {ent + 1:.3f})")
print(f"code-stream reduction vs raw 8-bit codes: {8 / avg:.2f}x")

blob = serialize_codebook(cb)
print(f"\nserialized codebook: {len(blob)} bytes (code lengths only)")
back = deserialize_codebook(blob)
assert back.encode_table == cb.encode_table
print("deserialization reproduces the canonical table exactly")

tree = cb.decode_tree
print(f"decode tree: {tree.n_nodes} array nodes "
      f"({int((cb.code_lengths > 0).sum())} symbols)")
