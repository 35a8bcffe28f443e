"""Parallel entropy codec and the append-only compressed arena.

Encoding walks a block slice by slice (one token's head_dim codes per
slice, for both K and V blocks), packs the per-slice bitstreams
back-to-back at prefix-sum bit offsets, and keeps one unsigned 16-bit
bit count per slice so any slice can be decoded independently.

Decoding drives the array-form Huffman tree with arithmetic updates
only: each bit indexes straight into the node's two-element child
array, the output cursor advances by the node's ``is_symbol`` flag, and
the position resets to the root via ``index &= ~(-is_symbol)``. The
same update runs either scalar (:func:`decode_slice`) or in lockstep
over many slices at once (:func:`decode_slices`), which is the CPU
analogue of one thread per slice.

Bit order is MSB-first within each byte. Serialized blocks are padded
to 4-byte alignment and recorded in a block-offsets array governed by
an atomic write cursor, so concurrently appended blocks never overlap
and can be fetched in any order.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .codebook import DecodeTree, HuffmanCodebook
from .errors import ArenaFullError, CodecError
from .quantizer import QuantMode, QuantizedBlock

# Upper bound on slices decoded per lockstep batch. This is the CPU
# stand-in for the number of thread blocks resident on a GPU: scratch
# stays O(group * head_dim) no matter how long the context grows.
DECODE_GROUP_SLICES = 8192

MAX_SLICE_BITS = 0xFFFF
_BLOCK_HEADER = struct.Struct("<IH")  # block_index u32, slice count u16


@dataclass
class DataMovement:
    """Byte/scratch counters for comparing fused and unfused paths."""

    bytes_read: int = 0
    peak_scratch_values: int = 0

    def add_read(self, n: int) -> None:
        self.bytes_read += int(n)

    def note_scratch(self, n: int) -> None:
        self.peak_scratch_values = max(self.peak_scratch_values, int(n))


@dataclass(frozen=True)
class CompressedBlock:
    """One entropy-coded block: per-slice bit counts, metas, payload."""

    block_index: int
    slice_bit_counts: np.ndarray  # (n_slices,) uint16
    unit_mins: np.ndarray         # (n_units,) float32
    unit_scales: np.ndarray       # (n_units,) float32
    payload: bytes                # concatenated slice bitstreams, byte-padded

    @property
    def n_slices(self) -> int:
        return int(self.slice_bit_counts.shape[0])

    @property
    def total_bits(self) -> int:
        return int(self.slice_bit_counts.astype(np.int64).sum())


def _codeword_bits(codes: np.ndarray, cb: HuffmanCodebook):
    """Expand codes into their concatenated codeword bits (uint8 0/1)."""
    lengths = cb.code_lengths[codes]
    if np.any(lengths == 0):
        missing = int(codes[lengths == 0][0])
        raise CodecError(f"code {missing} is absent from the codebook")
    lens = lengths.astype(np.int64)
    total = int(lens.sum())
    words = cb.code_words[codes]
    idx = np.repeat(np.arange(codes.size, dtype=np.int64), lens)
    ends = np.cumsum(lens)
    within = np.arange(total, dtype=np.int64) - (ends - lens)[idx]
    shifts = (lens[idx] - 1 - within).astype(np.uint32)
    bits = ((words[idx] >> shifts) & 1).astype(np.uint8)
    return bits, lens


def encode_slice(codes, cb: HuffmanCodebook) -> Tuple[np.ndarray, int]:
    """Encode one slice of codes; returns (bit array of 0/1, bit count)."""
    arr = np.asarray(codes, dtype=np.uint8).ravel()
    if arr.size == 0:
        raise CodecError("cannot encode an empty slice")
    bits, lens = _codeword_bits(arr, cb)
    total = int(lens.sum())
    if total > MAX_SLICE_BITS:
        raise CodecError(f"slice bit count {total} overflows 16 bits")
    return bits, total


def scan_offsets(bit_counts) -> Tuple[np.ndarray, int]:
    """Exclusive bit offsets (from the inclusive scan) and the total."""
    counts = np.asarray(bit_counts, dtype=np.uint32)
    if counts.size == 0:
        raise CodecError("scan over an empty bit-count array")
    inclusive = np.cumsum(counts, dtype=np.uint64)
    total = int(inclusive[-1])
    if total > 0xFFFFFFFF:
        raise CodecError("total bit count overflows 32 bits")
    offsets = (inclusive - counts).astype(np.uint32)
    return offsets, total


def compress_block(q: QuantizedBlock, cb: HuffmanCodebook) -> CompressedBlock:
    """Entropy-code a quantized block slice by slice.

    Slices are the rows of the code matrix: one token's head_dim codes,
    for K and V blocks alike. Slice bitstreams land back-to-back at
    their scan offsets; unit metadata is carried through verbatim.
    """
    codes = q.codes
    bits, lens = _codeword_bits(codes.ravel(), cb)
    counts = lens.reshape(codes.shape).sum(axis=1)
    if counts.max(initial=0) > MAX_SLICE_BITS:
        raise CodecError("a slice bit count overflows 16 bits; reduce head_dim or code lengths")
    payload = np.packbits(bits).tobytes()
    return CompressedBlock(
        block_index=q.block_index,
        slice_bit_counts=counts.astype(np.uint16),
        unit_mins=np.asarray(q.unit_mins, dtype=np.float32),
        unit_scales=np.asarray(q.unit_scales, dtype=np.float32),
        payload=payload,
    )


def decode_slice(payload, bit_offset: int, bit_count: int, tree: DecodeTree, out_len: int) -> np.ndarray:
    """Branch-free decode of one slice from a packed payload.

    Implements the arithmetic traversal: the bit selects the child, the
    current node's symbol is always written at the output cursor, the
    cursor advances by ``is_symbol`` and the node index is cleared with
    ``index &= ~(-is_symbol)``. After ``bit_count`` bits the stream must
    have produced exactly ``out_len`` symbols with the traversal back at
    the root; anything else is a corrupt stream.
    """
    data = bytes(payload)
    if bit_offset < 0 or bit_offset + bit_count > len(data) * 8:
        raise CodecError("bit range outside payload")
    children = tree.children.tolist()
    is_symbol = tree.is_symbol.tolist()
    symbols = tree.symbols.tolist()
    # Symbols consume at least one bit each, so bit_count slots suffice
    # even for corrupt streams; validity is checked afterwards.
    out = np.zeros(bit_count + 1, dtype=np.uint8)
    index = 0
    write_pos = 0
    for pos in range(bit_offset, bit_offset + bit_count):
        bit = (data[pos >> 3] >> (7 - (pos & 7))) & 1
        index = children[index][bit]
        s = is_symbol[index]
        out[write_pos] = symbols[index]
        write_pos += s
        index &= ~(-s)
    if write_pos != out_len or index != 0:
        raise CodecError(
            f"corrupt slice: {write_pos} symbols from {bit_count} bits, expected {out_len}"
        )
    return out[:out_len]


def decode_slices(bits: np.ndarray, bit_offsets, bit_counts, tree: DecodeTree, out_len: int) -> np.ndarray:
    """Lockstep decode of many slices over an unpacked bit array.

    All slices advance one bit per step with the same arithmetic updates
    as :func:`decode_slice`; slices whose bit budget is spent stop
    participating. Slices are processed sorted by bit count so the
    active set is always a contiguous prefix. Returns an
    ``(n_slices, out_len)`` uint8 matrix in the original slice order.
    """
    offs = np.asarray(bit_offsets, dtype=np.int64)
    counts = np.asarray(bit_counts, dtype=np.int64)
    n = offs.shape[0]
    if n == 0:
        return np.zeros((0, out_len), dtype=np.uint8)
    if np.any(offs < 0) or np.any(offs + counts > bits.shape[0]):
        raise CodecError("bit range outside payload")
    order = np.argsort(-counts, kind="stable")
    csort = counts[order]
    pos = offs[order].copy()
    children_flat = np.ascontiguousarray(tree.children.reshape(-1))
    is_symbol = tree.is_symbol
    symbols = tree.symbols
    index = np.zeros(n, dtype=np.int64)
    write_pos = np.zeros(n, dtype=np.int64)
    row_base = np.arange(n, dtype=np.int64) * (out_len + 1)
    out = np.zeros(n * (out_len + 1), dtype=np.uint8)
    neg_csort = -csort
    for t in range(int(csort[0])):
        a = int(np.searchsorted(neg_csort, -t, side="left"))
        if a == 0:
            break
        bit = bits[pos[:a]]
        pos[:a] += 1
        idx = children_flat[(index[:a] << 1) + bit]
        index[:a] = idx
        sym_flag = is_symbol[idx]
        # Always write the current node's symbol; only symbol nodes
        # advance the cursor, so stale writes get overwritten.
        slots = row_base[:a] + np.minimum(write_pos[:a], out_len)
        out[slots] = symbols[idx]
        write_pos[:a] += sym_flag
        index[:a] &= ~(-sym_flag)
    if np.any(write_pos != out_len) or np.any(index != 0):
        bad = int(np.flatnonzero((write_pos != out_len) | (index != 0))[0])
        raise CodecError(
            f"corrupt slice {int(order[bad])}: {int(write_pos[bad])} symbols, "
            f"expected {out_len}"
        )
    result = np.empty((n, out_len), dtype=np.uint8)
    result[order] = out.reshape(n, out_len + 1)[:, :out_len]
    return result


def _serialize_block(cblock: CompressedBlock) -> bytes:
    raw = b"".join(
        (
            _BLOCK_HEADER.pack(cblock.block_index, cblock.n_slices),
            cblock.slice_bit_counts.astype("<u2").tobytes(),
            np.stack(
                [
                    cblock.unit_mins.astype("<f4"),
                    cblock.unit_scales.astype("<f4"),
                ],
                axis=1,
            ).tobytes(),
            cblock.payload,
        )
    )
    return raw + b"\x00" * (-len(raw) % 4)


def _parse_block(data, start: int, end: int, n_units: int):
    """Parse one serialized block extent.

    Returns ``(block_index, slice_bit_counts, mins, scales,
    payload_byte_offset, payload_bytes)``.
    """
    if end - start < _BLOCK_HEADER.size or (end - start) % 4 != 0:
        raise CodecError("corrupt block header: bad extent size")
    block_index, n_slices = _BLOCK_HEADER.unpack_from(data, start)
    counts_off = start + _BLOCK_HEADER.size
    metas_off = counts_off + 2 * n_slices
    payload_off = metas_off + 8 * n_units
    if payload_off > end:
        raise CodecError("corrupt block header: metadata overruns extent")
    counts = np.frombuffer(data, dtype="<u2", count=n_slices, offset=counts_off)
    metas = np.frombuffer(data, dtype="<f4", count=2 * n_units, offset=metas_off)
    total_bits = int(counts.astype(np.int64).sum())
    payload_bytes = (total_bits + 7) // 8
    pad = end - payload_off - payload_bytes
    if pad < 0 or pad > 3:
        raise CodecError("corrupt block: payload size disagrees with extent")
    return block_index, counts, metas[0::2], metas[1::2], payload_off, payload_bytes


class CompressedArena:
    """Append-only byte buffer of serialized blocks plus offsets array.

    Appends reserve an extent under a lock (the fetch-and-add cursor),
    record the byte offset exactly once in arrival order, and never
    overlap. Readers operate on immutable snapshots.
    """

    def __init__(self, capacity: Optional[int] = None):
        self._buf = bytearray()
        self._offsets: list[int] = []
        self._cursor = 0
        self._capacity = capacity
        self._lock = threading.Lock()
        # Running totals for ratio reporting.
        self.payload_bits = 0
        self.payload_bytes = 0
        self.n_slices = 0

    def __len__(self) -> int:
        return len(self._offsets)

    @property
    def write_cursor(self) -> int:
        return self._cursor

    @property
    def block_offsets(self) -> np.ndarray:
        return np.asarray(self._offsets, dtype=np.uint32)

    @property
    def size_bytes(self) -> int:
        return len(self._buf)

    def snapshot(self) -> bytes:
        return bytes(self._buf)

    def append(self, cblock: CompressedBlock) -> int:
        """Serialize and append a block; returns its arrival ordinal."""
        raw = _serialize_block(cblock)
        with self._lock:
            start = self._cursor
            if self._capacity is not None and start + len(raw) > self._capacity:
                raise ArenaFullError(
                    f"arena capacity {self._capacity} exhausted at offset {start}"
                )
            if start + len(raw) > 0xFFFFFFFF:
                raise ArenaFullError("arena offset overflows 32 bits")
            self._cursor = start + len(raw)
            self._offsets.append(start)
            ordinal = len(self._offsets) - 1
            self._buf += raw
            self.payload_bits += cblock.total_bits
            self.payload_bytes += (cblock.total_bits + 7) // 8
            self.n_slices += cblock.n_slices
        return ordinal

    def extent(self, ordinal: int) -> Tuple[int, int]:
        if not 0 <= ordinal < len(self._offsets):
            raise CodecError(f"block ordinal {ordinal} out of range")
        start = self._offsets[ordinal]
        end = self._offsets[ordinal + 1] if ordinal + 1 < len(self._offsets) else self._cursor
        return start, end

    @classmethod
    def restore(cls, data: bytes, offsets: Sequence[int], n_units: int) -> "CompressedArena":
        """Rebuild an arena (and its counters) from serialized bytes."""
        arena = cls()
        arena._buf = bytearray(data)
        arena._cursor = len(data)
        arena._offsets = [int(o) for o in offsets]
        for ordinal in range(len(arena._offsets)):
            start, end = arena.extent(ordinal)
            _, counts, _, _, _, pbytes = _parse_block(data, start, end, n_units)
            arena.payload_bits += int(counts.astype(np.int64).sum())
            arena.payload_bytes += pbytes
            arena.n_slices += counts.shape[0]
        return arena


def units_per_block(mode: QuantMode, head_dim: int, block_size: int) -> int:
    """Metadata entries per block: one per channel (K) or per token (V)."""
    return block_size if mode is QuantMode.V_TOKEN else head_dim


def decompress_block(
    arena: CompressedArena,
    ordinal: int,
    cb: HuffmanCodebook,
    *,
    mode: QuantMode,
    head_num: int,
    head_dim: int,
    block_size: int,
) -> QuantizedBlock:
    """Exact inverse of ``compress_block`` + ``append`` for one block."""
    n_units = units_per_block(mode, head_dim, block_size)
    data = arena.snapshot()
    start, end = arena.extent(ordinal)
    block_index, counts, mins, scales, payload_off, payload_bytes = _parse_block(
        data, start, end, n_units
    )
    if counts.shape[0] != block_size:
        raise CodecError(
            f"block has {counts.shape[0]} slices, expected block_size {block_size}"
        )
    bits = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8, count=payload_bytes, offset=payload_off)
    )
    offsets, _ = scan_offsets(counts)
    codes = decode_slices(bits, offsets, counts, cb.decode_tree, head_dim)
    chunk = block_index // head_num
    head_index = block_index % head_num
    return QuantizedBlock(
        codes=codes,
        unit_mins=mins.astype(np.float32),
        unit_scales=scales.astype(np.float32),
        block_index=block_index,
        head_index=head_index,
        ctx_start=chunk * block_size,
    )


def iter_decoded_blocks(
    arena: CompressedArena,
    cb: HuffmanCodebook,
    *,
    n_units: int,
    head_dim: int,
    ordinals: Optional[Sequence[int]] = None,
    group_slices: int = DECODE_GROUP_SLICES,
    movement: Optional[DataMovement] = None,
) -> Iterator[Tuple[int, int, np.ndarray, np.ndarray, np.ndarray]]:
    """Decode arena blocks in bounded lockstep groups.

    Yields ``(ordinal, block_index, codes, mins, scales)`` in ordinal
    order. At most ``group_slices`` slices are in flight at once, so
    scratch stays bounded regardless of how many blocks the arena holds.
    """
    if len(arena) == 0:
        return
    data = arena.snapshot()
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    which = range(len(arena)) if ordinals is None else ordinals

    pending = []  # (ordinal, block_index, mins, scales, n_slices)
    offset_parts: list[np.ndarray] = []
    count_parts: list[np.ndarray] = []
    budget = 0

    def flush():
        nonlocal budget
        offs = np.concatenate(offset_parts)
        counts = np.concatenate(count_parts)
        codes_all = decode_slices(bits, offs, counts, cb.decode_tree, head_dim)
        if movement is not None:
            movement.note_scratch(codes_all.size)
        row = 0
        for ordinal, block_index, mins, scales, n_slices in pending:
            yield ordinal, block_index, codes_all[row: row + n_slices], mins, scales
            row += n_slices
        pending.clear()
        offset_parts.clear()
        count_parts.clear()
        budget = 0

    for ordinal in which:
        start, end = arena.extent(ordinal)
        block_index, counts, mins, scales, payload_off, _ = _parse_block(
            data, start, end, n_units
        )
        if movement is not None:
            movement.add_read(end - start)
        rel_offsets, _ = scan_offsets(counts)
        offset_parts.append(rel_offsets.astype(np.int64) + payload_off * 8)
        count_parts.append(counts.astype(np.int64))
        pending.append((ordinal, block_index, mins, scales, counts.shape[0]))
        budget += counts.shape[0]
        if budget >= group_slices:
            yield from flush()
    if pending:
        yield from flush()


def metadata_overhead(cblocks: Sequence[CompressedBlock], head_dim: int) -> Tuple[float, float]:
    """Per-slice counter overhead as fractions of compressed and original size.

    Each slice carries a 16-bit counter. The compressed baseline is the
    entropy-coded payload; the original baseline is the uncompressed
    16-bit values the slices were derived from (head_dim values per
    slice). With head_dim 128 and ~2 bits/code this gives 1/16 of the
    compressed size and 1/128 of the original.
    """
    if not cblocks:
        raise CodecError("metadata_overhead needs at least one block")
    n_slices = sum(b.n_slices for b in cblocks)
    payload_bits = sum(b.total_bits for b in cblocks)
    if payload_bits == 0:
        raise CodecError("empty payloads have no meaningful overhead ratio")
    counter_bits = 16 * n_slices
    original_bits = n_slices * head_dim * 16
    return counter_bits / payload_bits, counter_bits / original_bits
