"""Command-line front end: compress, decompress, simulate, ratio-sweep.

Exit codes: 0 on success, 1 for internal errors, 2 for usage or I/O
problems (argparse uses 2 as well).
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from . import bench, container, tensor_io
from .errors import ConfigError, ContainerFormatError, KvpackError, TensorFormatError
from .kvcache import LayerCacheState
from .quantizer import QuantConfig, QuantMode


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["kblock", "kchannel"], default="kblock",
                   help="K quantization granularity (V is always token-wise)")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--buffer-size", type=int, default=None,
                   help="pending-token buffer capacity (default 2x block size)")
    p.add_argument("--rel-scale-k", type=float, default=None,
                   help="relative quantization scale for K (default per mode)")
    p.add_argument("--rel-scale-v", type=float, default=None,
                   help="relative quantization scale for V (default 0.15)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", type=str, default=None, help="write report rows to this path")


def _configs(args) -> tuple[QuantConfig, QuantConfig]:
    cfg_k = QuantConfig(
        mode=QuantMode(args.mode),
        block_size=args.block_size,
        rel_quant_scale=args.rel_scale_k,
        buffer_size=args.buffer_size,
    )
    cfg_v = QuantConfig(
        mode=QuantMode.V_TOKEN,
        block_size=args.block_size,
        rel_quant_scale=args.rel_scale_v,
        buffer_size=args.buffer_size,
    )
    return cfg_k, cfg_v


def _cmd_compress(args) -> int:
    k = tensor_io.read_tensor(args.k_path)
    v = tensor_io.read_tensor(args.v_path)
    cfg_k, cfg_v = _configs(args)
    state = LayerCacheState.prefill(k, v, cfg_k, cfg_v)
    container.save_state(state, args.out_path)
    stats = bench.collect_stats(state)
    print(
        f"compressed {args.k_path} + {args.v_path} -> {args.out_path} "
        f"ratio={stats.compression_ratio:.3f} bits_per_value={stats.bits_per_value:.3f} "
        f"original={stats.original_bytes} "
        f"compressed={stats.compressed_bytes} metadata={stats.metadata_bytes}"
    )
    if args.csv:
        row = bench.BenchRow(
            config=bench.config_label(cfg_k, cfg_v, state.head_num, state.head_dim),
            context_len=state.context_len,
            original_bytes=stats.original_bytes,
            compressed_bytes=stats.compressed_bytes,
            metadata_bytes=stats.metadata_bytes,
            compression_ratio=stats.compression_ratio,
            bits_per_value=stats.bits_per_value,
        )
        bench.write_csv([row], args.csv)
    return 0


def _cmd_decompress(args) -> int:
    state = container.load_state(args.container_path)
    k, v = state.fetch_dequantized()
    dtype = np.dtype(state.dtype)
    k = tensor_io.CacheTensor(k.values.astype(dtype))
    v = tensor_io.CacheTensor(v.values.astype(dtype))
    tensor_io.write_tensor(k, args.k_out)
    tensor_io.write_tensor(v, args.v_out)
    print(
        f"decompressed {args.container_path} -> {args.k_out}, {args.v_out} "
        f"context_len={state.context_len}"
    )
    return 0


def _cmd_simulate(args) -> int:
    cfg_k, cfg_v = _configs(args)
    settings = bench.SimulationSettings(
        prompt_len=args.prompt_len,
        gen_len=args.gen_len,
        head_num=args.head_num,
        head_dim=args.head_dim,
        seed=args.seed,
        threads=args.threads,
    )
    result = bench.run_simulation(settings, cfg_k, cfg_v)
    s = result.summary
    print(
        f"simulated prompt={args.prompt_len} gen={args.gen_len} "
        f"final_context={result.state.context_len} "
        f"ratio={s.compression_ratio:.3f} bits_per_value={s.bits_per_value:.3f}"
    )
    print(
        f"median times: fused={s.fused_time:.6f}s multistage={s.multistage_time:.6f}s "
        f"matvec={s.reference_matvec_time:.6f}s "
        f"equivalent_decompression_throughput={s.equivalent_decompression_throughput}"
    )
    print(
        f"bytes read: fused={result.fused_movement.bytes_read} "
        f"reference={result.reference_movement.bytes_read} "
        f"max_divergence={result.max_divergence:.2e}"
    )
    if args.csv:
        bench.write_csv(result.rows + [result.summary], args.csv)
    return 0


def _parse_int_list(text: str, flag: str) -> List[int]:
    try:
        items = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects a comma-separated integer list") from exc
    if not items:
        raise ConfigError(f"{flag} must not be empty")
    return items


def _parse_float_list(text: str, flag: str) -> List[float]:
    try:
        items = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects a comma-separated float list") from exc
    if not items:
        raise ConfigError(f"{flag} must not be empty")
    return items


def _cmd_ratio_sweep(args) -> int:
    contexts = _parse_int_list(args.context_lens, "--context-lens")
    scales = _parse_float_list(args.rel_scales, "--rel-scales")
    rows = bench.run_ratio_sweep(
        contexts,
        scales,
        head_num=args.head_num,
        head_dim=args.head_dim,
        block_size=args.block_size,
        buffer_size=args.buffer_size,
        mode=args.mode,
        seed=args.seed,
    )
    for row in rows:
        print(
            f"ctx={row.context_len} config=({row.config}) "
            f"ratio={row.compression_ratio:.3f} bits_per_value={row.bits_per_value:.3f}"
        )
    if args.csv:
        bench.write_csv(rows, args.csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvpack",
        description="Error-bounded KV-cache compression with fused decode attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress two KVTN tensors into a KVCZ container")
    p.add_argument("k_path")
    p.add_argument("v_path")
    p.add_argument("out_path")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_compress)

    p = sub.add_parser("decompress", help="materialize a KVCZ container back to KVTN tensors")
    p.add_argument("container_path")
    p.add_argument("k_out")
    p.add_argument("v_out")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_decompress)

    p = sub.add_parser("simulate", help="run the decode-loop simulator and report timings")
    p.add_argument("--prompt-len", type=int, default=512)
    p.add_argument("--gen-len", type=int, default=32)
    p.add_argument("--head-num", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=128)
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("ratio-sweep", help="compression ratio across contexts and scales")
    p.add_argument("--context-lens", type=str, default="2048,4096,8192,16384")
    p.add_argument("--rel-scales", type=str, required=True,
                   help="comma-separated scales applied to both K and V")
    p.add_argument("--head-num", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=128)
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_ratio_sweep)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, TensorFormatError, ContainerFormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KvpackError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
