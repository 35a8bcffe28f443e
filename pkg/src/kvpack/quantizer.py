"""Error-bounded scalar quantization of 2D cache blocks.

Three granularities share one code path. K blocks quantize per channel
(column) with block-local ranges; K channel mode quantizes per channel
with ranges spanning the whole context; V blocks quantize per token
(row). Codes are unsigned 8-bit offsets from the unit minimum and the
step is ``rel_quant_scale * (max - min)`` of the unit, so every
reconstructed value lands within half a step of the original.

Rounding is half-away-from-zero, fixed so that independently built
pipelines produce identical codes. Unit metadata (min, scale) is kept
in float32 regardless of the input dtype.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, CodecError

MIN_REL_SCALE = 1.0 / 255.0

# Largest per-granularity scales that keep model accuracy within a few
# percent of the uncompressed baseline.
DEFAULT_REL_SCALE = {
    "kblock": 0.05,
    "kchannel": 0.25,
    "vtoken": 0.15,
}


class QuantMode(enum.Enum):
    """Quantization unit layout. K modes apply to key tensors, V to values."""

    K_BLOCK = "kblock"
    K_CHANNEL = "kchannel"
    V_TOKEN = "vtoken"

    @property
    def is_key(self) -> bool:
        return self in (QuantMode.K_BLOCK, QuantMode.K_CHANNEL)


class QuantUnitMeta(NamedTuple):
    """Per-unit dequantization metadata: ``value = min_value + code * scale``."""

    min_value: float
    scale: float


@dataclass(frozen=True)
class QuantConfig:
    """Quantization settings for one tensor (K or V) of one layer."""

    mode: QuantMode
    block_size: int = 64
    rel_quant_scale: Optional[float] = None
    buffer_size: Optional[int] = None

    def __post_init__(self):
        if self.rel_quant_scale is None:
            object.__setattr__(self, "rel_quant_scale", DEFAULT_REL_SCALE[self.mode.value])
        if self.buffer_size is None:
            object.__setattr__(self, "buffer_size", 2 * self.block_size)
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if not MIN_REL_SCALE <= self.rel_quant_scale <= 1.0:
            raise ConfigError(
                f"rel_quant_scale {self.rel_quant_scale} outside [1/255, 1]; "
                "codes must fit an unsigned 8-bit integer"
            )
        if self.buffer_size < self.block_size:
            raise ConfigError("buffer_size must be at least block_size")
        if self.buffer_size % self.block_size != 0:
            raise ConfigError("buffer_size must be a multiple of block_size")

    @property
    def max_code(self) -> int:
        """Largest code the configured scale can produce."""
        return int(math.ceil(1.0 / self.rel_quant_scale))


@dataclass(frozen=True)
class QuantizedBlock:
    """One quantized 2D block plus its per-unit metadata.

    ``codes`` is ``(block_size, head_dim)`` uint8. ``unit_mins`` and
    ``unit_scales`` are float32 with one entry per channel for K modes
    or per token for V mode. ``block_index`` packs the block position as
    ``ctx_chunk_index * head_num + head_index`` so appended chunks stay
    contiguous in arrival order.
    """

    codes: np.ndarray
    unit_mins: np.ndarray
    unit_scales: np.ndarray
    block_index: int
    head_index: int
    ctx_start: int


def _round_half_away(t: np.ndarray) -> np.ndarray:
    # Inputs are nonnegative, so half-away-from-zero equals half-up.
    c = np.floor(t)
    c += (t - c) >= 0.5
    return c


def _quantize_grid(x, rel, reduce_axis, vmin=None, vmax=None, clamp_max=None):
    """Quantize ``x`` with one (min, scale) unit per row or column.

    ``reduce_axis`` is the axis collapsed into each unit (0 gives
    per-column units, 1 per-row). ``vmin``/``vmax`` override the unit
    ranges; out-of-range values are then clipped to ``clamp_max``.
    Returns ``(codes uint8, mins float32, scales float32)``.
    """
    x64 = np.asarray(x, dtype=np.float64)
    if vmin is None:
        vmin = x64.min(axis=reduce_axis, keepdims=True).astype(np.float32)
        vmax = x64.max(axis=reduce_axis, keepdims=True).astype(np.float32)
    else:
        vmin = np.asarray(vmin, dtype=np.float32)
        vmax = np.asarray(vmax, dtype=np.float32)
        shape = [1, 1]
        shape[1 - reduce_axis] = -1
        vmin = vmin.reshape(shape)
        vmax = vmax.reshape(shape)
    scales = (np.float64(rel) * (vmax.astype(np.float64) - vmin.astype(np.float64))).astype(np.float32)
    s64 = scales.astype(np.float64)
    safe = np.where(s64 > 0, s64, 1.0)
    t = (x64 - vmin.astype(np.float64)) / safe
    codes = _round_half_away(t)
    if clamp_max is not None:
        np.clip(codes, 0, clamp_max, out=codes)
    codes = np.where(s64 > 0, codes, 0.0).astype(np.uint8)
    return codes, vmin.ravel(), scales.ravel()


def quantize_unit(values, rel_quant_scale: float):
    """Quantize one unit (a flat group of values sharing min/scale).

    Returns ``(codes, meta)`` where ``meta.scale`` is
    ``rel_quant_scale * (max - min)``; a constant unit gets scale 0 and
    all-zero codes. Every value reconstructs within ``scale / 2``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise CodecError("cannot quantize an empty unit")
    if not np.all(np.isfinite(v)):
        raise CodecError("non-finite values in quantization unit")
    if not MIN_REL_SCALE <= rel_quant_scale <= 1.0:
        raise ConfigError(f"rel_quant_scale {rel_quant_scale} outside [1/255, 1]")
    codes, mins, scales = _quantize_grid(v.reshape(-1, 1), rel_quant_scale, reduce_axis=0)
    return codes.ravel(), QuantUnitMeta(float(mins[0]), float(scales[0]))


def quantize_block(
    block,
    mode: QuantMode,
    cfg: QuantConfig,
    head_index: int,
    ctx_start: int,
    head_num: int,
    channel_ranges=None,
) -> QuantizedBlock:
    """Quantize one ``(block_size, head_dim)`` block at the given position.

    K modes produce one unit per column, V mode one unit per row. For
    ``K_CHANNEL`` the caller must supply ``channel_ranges`` as
    ``(mins, maxs)`` arrays of length head_dim spanning the whole
    context; codes are clipped to the representable range since values
    outside those ranges can appear after the ranges were fixed.
    """
    x = np.asarray(block, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != cfg.block_size:
        raise CodecError(f"block shape {x.shape} does not match block_size {cfg.block_size}")
    if mode is not cfg.mode:
        raise ConfigError(f"mode {mode} does not match config mode {cfg.mode}")
    if ctx_start % cfg.block_size != 0:
        raise CodecError("ctx_start must be a multiple of block_size")
    if not 0 <= head_index < head_num:
        raise CodecError("head_index out of range")

    if mode is QuantMode.V_TOKEN:
        codes, mins, scales = _quantize_grid(x, cfg.rel_quant_scale, reduce_axis=1)
    elif mode is QuantMode.K_CHANNEL:
        if channel_ranges is None:
            raise ConfigError("K_CHANNEL quantization requires whole-context channel_ranges")
        vmin, vmax = channel_ranges
        codes, mins, scales = _quantize_grid(
            x, cfg.rel_quant_scale, reduce_axis=0, vmin=vmin, vmax=vmax, clamp_max=cfg.max_code
        )
    else:
        codes, mins, scales = _quantize_grid(x, cfg.rel_quant_scale, reduce_axis=0)

    block_index = (ctx_start // cfg.block_size) * head_num + head_index
    return QuantizedBlock(
        codes=codes,
        unit_mins=mins,
        unit_scales=scales,
        block_index=block_index,
        head_index=head_index,
        ctx_start=ctx_start,
    )


def dequantize_block(q: QuantizedBlock, mode: QuantMode) -> np.ndarray:
    """Reconstruct a block as float64: ``min + code * scale`` per unit."""
    codes = q.codes.astype(np.float64)
    mins = q.unit_mins.astype(np.float64)
    scales = q.unit_scales.astype(np.float64)
    if mode is QuantMode.V_TOKEN:
        if mins.shape[0] != codes.shape[0]:
            raise CodecError("token-mode metadata count must equal block_size")
        return mins[:, None] + codes * scales[:, None]
    if mins.shape[0] != codes.shape[1]:
        raise CodecError("channel-mode metadata count must equal head_dim")
    return mins[None, :] + codes * scales[None, :]
