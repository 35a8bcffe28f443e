"""Compression ratio across context lengths and quantization scales.

On stationary data the ratio barely moves with context length, and a
coarser relative scale (fewer quantization levels, lower entropy)
compresses monotonically better.
"""

import numpy as np

from kvpack import run_ratio_sweep

contexts = [1024, 2048, 4096]
scales = [0.05, 0.1, 0.2]
rows = run_ratio_sweep(contexts, scales, head_num=4, head_dim=128,
                       block_size=64, seed=0)

print(f"{'rel_scale':>9} | " + " | ".join(f"ctx {c:>5}" for c in contexts))
by_scale = {}
for row in rows:
    scale = float(row.config.split("rsk=")[1].split(";")[0])
    by_scale.setdefault(scale, []).append(row)
for scale in scales:
    ratios = [r.compression_ratio for r in by_scale[scale]]
    print(f"{scale:>9} | " + " | ".join(f"{r:>8.3f}" for r in ratios))

print("\nbits/value at rel_scale 0.05:",
      [f"{r.bits_per_value:.3f}" for r in by_scale[0.05]])

for scale in scales:
    ratios = np.array([r.compression_ratio for r in by_scale[scale]])
    cv = ratios.std() / ratios.mean()
    print(f"rel_scale {scale}: ratio variation across contexts CV={cv:.4f}")
