"""Acceptance suite: one test per criterion, each printing a verdict line.

Verdict lines are also collected in ``VERDICT_LINES`` and echoed by the
conftest terminal-summary hook, so they stay visible under pytest's
output capture. Every tolerance is pinned here; nothing is deferred.
"""

import time

import numpy as np

from kvpack import (
    CacheTensor,
    CompressedArena,
    LayerCacheState,
    QuantConfig,
    QuantMode,
    QuantizedBlock,
    attention_step,
    build_codebook,
    build_histogram,
    collect_stats,
    compress_block,
    decode_slice,
    decompress_block,
    dequantize_block,
    encode_slice,
    fused_k_scores,
    fused_v_output,
    histogram_entropy,
    metadata_overhead,
    quantize_block,
    reference_output,
    reference_scores,
    run_ratio_sweep,
    run_simulation,
    smooth_histogram,
    softmax_rows,
)
from kvpack.bench import SimulationSettings

from helpers import make_state, max_relative_error, naive_tree_decode, random_codebook


VERDICT_LINES = []


def _report(num, name, ok, detail=""):
    verdict = "PASS" if ok else "FAIL"
    line = f"[acceptance] criterion {num} ({name}): {verdict}"
    if detail:
        line += f" -- {detail}"
    VERDICT_LINES.append(line)
    print(line, flush=True)
    assert ok, line


# ----------------------------------------------------------------------
# 1. Lossless codec over 1,000 random (codebook, code matrix) pairs.

def test_criterion_1_lossless_codec():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    failures = 0
    for trial in range(1000):
        block_size = int(rng.choice([16, 64, 128]))
        head_dim = int(rng.choice([64, 128]))
        cb, n_sym = random_codebook(rng, max_symbols=48)
        codes = rng.integers(0, n_sym, size=(block_size, head_dim)).astype(np.uint8)
        n_units = head_dim if trial % 2 == 0 else block_size
        mode = QuantMode.K_BLOCK if trial % 2 == 0 else QuantMode.V_TOKEN
        q = QuantizedBlock(
            codes=codes,
            unit_mins=rng.standard_normal(n_units).astype(np.float32),
            unit_scales=np.abs(rng.standard_normal(n_units)).astype(np.float32),
            block_index=trial,
            head_index=0,
            ctx_start=0,
        )
        arena = CompressedArena()
        ordinal = arena.append(compress_block(q, cb))
        back = decompress_block(
            arena, ordinal, cb, mode=mode, head_num=trial + 1,
            head_dim=head_dim, block_size=block_size,
        )
        if not (
            np.array_equal(back.codes, codes)
            and np.array_equal(back.unit_mins, q.unit_mins)
            and np.array_equal(back.unit_scales, q.unit_scales)
            and back.block_index == trial
        ):
            failures += 1
    elapsed = time.perf_counter() - t0
    _report(
        1, "lossless-codec",
        failures == 0 and elapsed < 60.0,
        f"1000 roundtrips, {failures} mismatches, {elapsed:.1f}s",
    )


# ----------------------------------------------------------------------
# 2. Branchless decoder vs naive conditional tree walk, 10,000 slices.

def test_criterion_2_branchless_equivalence():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    mismatches = 0
    n_slices = 0
    for _ in range(100):
        cb, n_sym = random_codebook(rng, max_symbols=40)
        for _ in range(100):
            out_len = int(rng.integers(32, 129))
            codes = rng.integers(0, n_sym, size=out_len).astype(np.uint8)
            bits, count = encode_slice(codes, cb)
            payload = np.packbits(bits).tobytes()
            branchless = decode_slice(payload, 0, count, cb.decode_tree, out_len)
            naive = naive_tree_decode(payload, 0, count, cb.decode_tree, out_len)
            if not np.array_equal(branchless, naive) or not np.array_equal(branchless, codes):
                mismatches += 1
            n_slices += 1
    elapsed = time.perf_counter() - t0
    _report(
        2, "branchless-decoder-equivalence",
        mismatches == 0 and n_slices == 10_000 and elapsed < 30.0,
        f"{n_slices} slices, {mismatches} mismatches, {elapsed:.1f}s",
    )


# ----------------------------------------------------------------------
# 3. Quantization error bound at all granularities, zero violations.

def test_criterion_3_quantization_error_bound():
    rng = np.random.default_rng(303)
    violations = 0
    checked = 0
    for rel in (0.05, 0.15, 0.25):
        for mode in (QuantMode.K_BLOCK, QuantMode.K_CHANNEL, QuantMode.V_TOKEN):
            cfg = QuantConfig(mode=mode, block_size=32, rel_quant_scale=rel)
            for _ in range(4):
                ctx = rng.standard_normal((128, 48)) * rng.uniform(0.1, 30)
                outlier_cols = rng.random(48) < 0.1
                ctx[:, outlier_cols] *= 10
                ranges = None
                if mode is QuantMode.K_CHANNEL:
                    ranges = (
                        ctx.min(axis=0).astype(np.float32),
                        ctx.max(axis=0).astype(np.float32),
                    )
                for start in range(0, 128, 32):
                    block = ctx[start: start + 32]
                    q = quantize_block(block, mode, cfg, 0, start, 1,
                                       channel_ranges=ranges)
                    deq = dequantize_block(q, mode)
                    bound = q.unit_scales.astype(np.float64) / 2
                    err = np.abs(block - deq)
                    bad = err > (bound[:, None] if mode is QuantMode.V_TOKEN
                                 else bound[None, :])
                    violations += int(bad.sum())
                    checked += err.size
    _report(
        3, "quantization-error-bound",
        violations == 0,
        f"{checked} elements across 3 modes x 3 scales, {violations} violations",
    )


# ----------------------------------------------------------------------
# 4. Fused attention equivalence on 200 random layer states.

def test_criterion_4_fused_attention_equivalence():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(200):
        # Log-uniform context up to 4096 exercises small and large caches.
        ctx = int(np.exp(rng.uniform(np.log(4), np.log(4096))))
        state, _, _ = make_state(
            rng, ctx, head_num=8, head_dim=128, block_size=64, buffer_size=128,
            appended=int(rng.integers(0, 3)),
        )
        q = rng.standard_normal((8, 128)).astype(np.float32)
        res = attention_step(state, q)
        kf, vf = state.fetch_dequantized()
        ref_scores = reference_scores(kf, q)
        weights = softmax_rows(ref_scores)
        ref_out = reference_output(vf, weights)
        err_scores = max_relative_error(res.scores, ref_scores)
        err_out = max_relative_error(res.out, ref_out)
        worst = max(worst, err_scores, err_out)
        if trial % 25 == 0:
            # Exercise the standalone entry points on a subset.
            direct_scores = fused_k_scores(state, q)
            direct_out = fused_v_output(state, softmax_rows(direct_scores))
            worst = max(
                worst,
                max_relative_error(direct_scores, ref_scores),
                max_relative_error(direct_out, ref_out),
            )
    elapsed = time.perf_counter() - t0
    _report(
        4, "fused-attention-equivalence",
        worst <= 1e-5 and elapsed < 300.0,
        f"200 states, worst relative error {worst:.2e}, {elapsed:.0f}s",
    )


# ----------------------------------------------------------------------
# 5. Huffman efficiency: entropy bound and ratio vs raw 8-bit codes.

def _measure_bits_per_value(codes, max_code):
    cb = build_codebook(smooth_histogram(build_histogram(codes), max_code))
    q = QuantizedBlock(
        codes=codes,
        unit_mins=np.zeros(codes.shape[1], dtype=np.float32),
        unit_scales=np.ones(codes.shape[1], dtype=np.float32),
        block_index=0,
        head_index=0,
        ctx_start=0,
    )
    cblock = compress_block(q, cb)
    return cblock.total_bits / codes.size


def test_criterion_5_huffman_efficiency():
    rng = np.random.default_rng(505)
    n = 1024 * 128

    # Distribution shaped like counts {4,2,1,1} -> H = 1.75 bits.
    shaped = rng.choice(4, size=n, p=[0.5, 0.25, 0.125, 0.125]).astype(np.uint8)
    shaped = shaped.reshape(1024, 128)
    h_shaped = histogram_entropy(build_histogram(shaped))
    bits_shaped = _measure_bits_per_value(shaped, 3)

    # Truncated geometric, success 1/2 -> H close to 2 bits.
    geom = np.minimum(rng.geometric(0.5, size=n) - 1, 19).astype(np.uint8)
    geom = geom.reshape(1024, 128)
    h_geom = histogram_entropy(build_histogram(geom))
    bits_geom = _measure_bits_per_value(geom, 20)
    ratio_geom = 8.0 / bits_geom

    ok = (
        h_shaped <= bits_shaped <= h_shaped + 1.0
        and h_geom <= bits_geom <= h_geom + 1.0
        and abs(h_geom - 2.0) < 0.25
        and ratio_geom >= 3.5
    )
    _report(
        5, "huffman-efficiency", ok,
        f"shaped H={h_shaped:.3f} bits={bits_shaped:.3f}; "
        f"geometric H={h_geom:.3f} bits={bits_geom:.3f} ratio={ratio_geom:.2f}x",
    )


# ----------------------------------------------------------------------
# 6. Metadata accounting at head_dim 128 and ~2 bits/code.

def test_criterion_6_metadata_accounting():
    rng = np.random.default_rng(606)
    n_blocks, block_size, head_dim = 16, 64, 128
    codes_all = np.minimum(
        rng.geometric(0.5, size=(n_blocks, block_size, head_dim)) - 1, 19
    ).astype(np.uint8)
    cb = build_codebook(
        smooth_histogram(build_histogram(codes_all.ravel()), 20)
    )
    cblocks = []
    for i in range(n_blocks):
        q = QuantizedBlock(
            codes=codes_all[i],
            unit_mins=np.zeros(head_dim, dtype=np.float32),
            unit_scales=np.ones(head_dim, dtype=np.float32),
            block_index=i,
            head_index=0,
            ctx_start=0,
        )
        cblocks.append(compress_block(q, cb))
    total_bits = sum(b.total_bits for b in cblocks)
    avg_bits = total_bits / codes_all.size
    frac_comp, frac_orig = metadata_overhead(cblocks, head_dim=head_dim)
    ok = (
        1.8 <= avg_bits <= 2.2
        and abs(frac_comp - 1 / 16) <= 0.1 * (1 / 16)
        and abs(frac_orig - 1 / 128) <= 0.1 * (1 / 128)
    )
    _report(
        6, "metadata-accounting", ok,
        f"avg {avg_bits:.3f} bits/code, counters/compressed={frac_comp:.5f} "
        f"(target 1/16={1/16:.5f}), counters/original={frac_orig:.6f} "
        f"(target 1/128={1/128:.6f})",
    )


# ----------------------------------------------------------------------
# 7. Incremental append vs one-shot prefill, shared codebooks.

def test_criterion_7_append_bulk_equivalence():
    rng = np.random.default_rng(707)
    failures = 0
    for _ in range(50):
        heads = int(rng.integers(1, 4))
        dim = int(rng.choice([4, 8, 16]))
        bs = 8
        ctx = int(rng.integers(bs + 1, 80))
        cfg_k = QuantConfig(mode=QuantMode.K_BLOCK, block_size=bs,
                            rel_quant_scale=0.05, buffer_size=16)
        cfg_v = QuantConfig(mode=QuantMode.V_TOKEN, block_size=bs,
                            rel_quant_scale=0.15, buffer_size=16)
        k = rng.standard_normal((ctx, heads, dim)).astype(np.float32)
        v = rng.standard_normal((ctx, heads, dim)).astype(np.float32)
        bulk = LayerCacheState.prefill(CacheTensor(k), CacheTensor(v), cfg_k, cfg_v)
        inc = LayerCacheState.prefill(
            CacheTensor(k[:1]), CacheTensor(v[:1]), cfg_k, cfg_v,
            codebooks=(bulk.k_codebook, bulk.v_codebook),
        )
        for t in range(1, ctx):
            inc.append_token(k[t], v[t])
        for arena_bulk, arena_inc in ((bulk.k_arena, inc.k_arena),
                                      (bulk.v_arena, inc.v_arena)):
            n = len(arena_inc)
            if arena_inc.block_offsets.tolist() != arena_bulk.block_offsets[:n].tolist():
                failures += 1
            elif arena_inc.snapshot() != arena_bulk.snapshot()[: arena_inc.write_cursor]:
                failures += 1
    _report(
        7, "append-bulk-equivalence",
        failures == 0,
        f"50 token streams, {failures} arena mismatches",
    )


# ----------------------------------------------------------------------
# 8. Ratio stability across context lengths (stationary data).

def test_criterion_8_ratio_stability():
    rows = run_ratio_sweep(
        [2048, 4096, 8192, 16384], [0.05],
        head_num=4, head_dim=128, block_size=64, seed=808,
    )
    ratios = np.array([r.compression_ratio for r in rows])
    cv = float(ratios.std() / ratios.mean())
    _report(
        8, "ratio-stability-across-context",
        cv < 0.10,
        f"ratios {[f'{r:.3f}' for r in ratios]}, CV={cv:.4f}",
    )


# ----------------------------------------------------------------------
# 9. Desk-scale substitutes for the GPU-scale results.

def test_criterion_9_desk_scale_substitutes():
    note = (
        "[acceptance] note: GPU-scale throughput figures (>400 GB/s K, "
        ">180 GB/s V), accelerator crossover behavior, and model-accuracy "
        "benchmark results are NOT reproduced at desk scale; the gated "
        "substitutes are the byte-movement invariant and the differential "
        "correctness suites, with CPU timings reported as informational "
        "output only."
    )
    VERDICT_LINES.append(note)
    print(note, flush=True)
    settings = SimulationSettings(
        prompt_len=384, gen_len=4, head_num=4, head_dim=64, seed=909,
        warmup=1, reps=3,
    )
    cfg_k = QuantConfig(mode=QuantMode.K_BLOCK, block_size=64, buffer_size=128)
    cfg_v = QuantConfig(mode=QuantMode.V_TOKEN, block_size=64, buffer_size=128)
    result = run_simulation(settings, cfg_k, cfg_v)
    stats = collect_stats(result.state)
    fused_bytes = result.fused_movement.bytes_read
    ref_bytes = result.reference_movement.bytes_read
    ok = (
        stats.compression_ratio > 1.0
        and fused_bytes < ref_bytes
        and result.summary.fused_time > 0
        and result.summary.multistage_time > 0
        and result.summary.reference_matvec_time > 0
        and result.summary.equivalent_decompression_throughput is not None
    )
    _report(
        9, "byte-movement-invariant-and-informational-timings", ok,
        f"fused reads {fused_bytes} B < reference reads {ref_bytes} B at "
        f"ratio {stats.compression_ratio:.2f}; informational times "
        f"fused={result.summary.fused_time:.4f}s "
        f"multistage={result.summary.multistage_time:.4f}s",
    )
