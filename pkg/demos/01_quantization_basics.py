"""Error-bounded quantization at the three granularities.

Walks through the quantization unit contract: codes are offsets from
the unit minimum, the step is rel_quant_scale * (max - min), and every
value reconstructs within half a step.
"""

import numpy as np

from kvpack import (
    QuantConfig,
    QuantMode,
    dequantize_block,
    quantize_block,
    quantize_unit,
)

print("== one unit ==")
values = np.array([0.0, 1.0, 2.0, 3.0])
codes, meta = quantize_unit(values, rel_quant_scale=0.5)
recon = meta.min_value + codes * meta.scale
print(f"values        {values}")
print(f"codes         {codes}   (min={meta.min_value}, scale={meta.scale})")
print(f"reconstructed {recon}")
print(f"max |error|   {np.abs(values - recon).max()}  <=  scale/2 = {meta.scale / 2}")

print("\n== granularities on one 2D block ==")
rng = np.random.default_rng(0)
block = rng.standard_normal((4, 6))
for mode, rel in ((QuantMode.K_BLOCK, 0.05), (QuantMode.V_TOKEN, 0.15)):
    cfg = QuantConfig(mode=mode, block_size=4, rel_quant_scale=rel)
    q = quantize_block(block, mode, cfg, head_index=0, ctx_start=0, head_num=1)
    err = np.abs(block - dequantize_block(q, mode)).max()
    print(
        f"{mode.value:8s}: {len(q.unit_mins)} units "
        f"({'per channel' if mode.is_key else 'per token'}), "
        f"max code {q.codes.max()}, max error {err:.4f}"
    )

print("\n== whole-context channel mode ==")
ctx = rng.standard_normal((32, 6)) * 3
cfg = QuantConfig(mode=QuantMode.K_CHANNEL, block_size=8, rel_quant_scale=0.25)
ranges = (ctx.min(axis=0).astype(np.float32), ctx.max(axis=0).astype(np.float32))
worst = 0.0
for start in range(0, 32, 8):
    q = quantize_block(ctx[start:start + 8], QuantMode.K_CHANNEL, cfg,
                       0, start, 1, channel_ranges=ranges)
    err = np.abs(ctx[start:start + 8] - dequantize_block(q, QuantMode.K_CHANNEL))
    worst = max(worst, float((err / (q.unit_scales / 2)).max()))
print(f"worst error / (scale/2) across blocks: {worst:.3f}  (must be <= 1)")
