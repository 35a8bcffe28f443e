"""Shared Huffman codebooks over 8-bit quantization codes.

A codebook is built once from a code histogram and reused for every
later block. Two forms are kept side by side: a canonical encode table
(codeword + length per symbol) and an array decode tree whose nodes
store child indexes in a two-element array, which is what the
arithmetic-reset decoding loop in the codec consumes.

Canonical codes make the 256-byte length table the only thing that must
be persisted: codewords and the decode tree are reconstructed from the
lengths alone, deterministically. Tie-breaking during tree construction
is by (weight, lowest contained symbol) so identical histograms always
produce byte-identical codebooks.

The add-one smoothing step exists because codebooks built at prefill
must encode codes first seen at runtime: after smoothing over the full
representable code range, every producible code has a codeword.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import CodebookError

ALPHABET = 256
MAX_CODE_LENGTH = 32


@dataclass(frozen=True)
class DecodeTree:
    """Array-form Huffman tree (struct-of-arrays over nodes).

    Node 0 is the root. Internal nodes hold both child indexes; leaves
    carry a symbol, have ``is_symbol == 1`` and child indexes of 0,
    which is harmless because the decoder resets to the root right
    after emitting a symbol.
    """

    children: np.ndarray   # (n_nodes, 2) int32, indexed by the next bit
    is_symbol: np.ndarray  # (n_nodes,) int32, 0 or 1
    symbols: np.ndarray    # (n_nodes,) uint8, valid where is_symbol == 1

    @property
    def n_nodes(self) -> int:
        return self.children.shape[0]


@dataclass(frozen=True)
class HuffmanCodebook:
    """Canonical Huffman code plus its decode tree.

    ``code_lengths[s] == 0`` marks symbol ``s`` absent. ``code_words``
    holds the canonical codeword for each present symbol, right-aligned
    in the low ``code_lengths[s]`` bits.
    """

    code_lengths: np.ndarray  # (256,) uint8
    code_words: np.ndarray    # (256,) uint32
    decode_tree: DecodeTree
    max_code_length: int

    @property
    def encode_table(self) -> List[Tuple[int, int, int]]:
        """(symbol, codeword, length) triples in canonical order."""
        present = [s for s in range(ALPHABET) if self.code_lengths[s] > 0]
        present.sort(key=lambda s: (int(self.code_lengths[s]), s))
        return [(s, int(self.code_words[s]), int(self.code_lengths[s])) for s in present]


def build_histogram(codes) -> np.ndarray:
    """Count code occurrences into a 256-bin histogram."""
    arr = np.asarray(codes, dtype=np.uint8).ravel()
    if arr.size == 0:
        raise CodebookError("cannot build a histogram from empty input")
    return np.bincount(arr, minlength=ALPHABET).astype(np.uint64)


def smooth_histogram(h: np.ndarray, max_code: int) -> np.ndarray:
    """Add-one smoothing over codes ``[0, max_code]``; the rest unchanged."""
    if not 0 <= max_code < ALPHABET:
        raise CodebookError(f"max_code {max_code} outside [0, 255]")
    out = np.asarray(h, dtype=np.uint64).copy()
    out[: max_code + 1] += 1
    return out


def histogram_entropy(h) -> float:
    """Shannon entropy of the histogram in bits per symbol."""
    counts = np.asarray(h, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise CodebookError("entropy of an empty histogram is undefined")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def _huffman_lengths(counts: np.ndarray) -> np.ndarray:
    """Optimal code lengths with (weight, lowest symbol) tie-breaking."""
    present = np.flatnonzero(counts)
    lengths = np.zeros(ALPHABET, dtype=np.uint8)
    if present.size == 1:
        # A zero-length code would never consume a bit, so the lone
        # symbol gets a 1-bit code instead.
        lengths[present[0]] = 1
        return lengths
    depth = {int(s): 0 for s in present}
    heap = [(int(counts[s]), int(s), [int(s)]) for s in present]
    heapq.heapify(heap)
    while len(heap) > 1:
        wa, la, sa = heapq.heappop(heap)
        wb, lb, sb = heapq.heappop(heap)
        merged = sa + sb
        for s in merged:
            depth[s] += 1
        heapq.heappush(heap, (wa + wb, min(la, lb), merged))
    for s, d in depth.items():
        if d > MAX_CODE_LENGTH:
            raise CodebookError(f"code length {d} exceeds the {MAX_CODE_LENGTH}-bit cap")
        lengths[s] = d
    return lengths


def _canonical_words(lengths: np.ndarray) -> np.ndarray:
    """Assign lexicographically increasing codewords by (length, symbol)."""
    order = sorted((s for s in range(ALPHABET) if lengths[s] > 0),
                   key=lambda s: (int(lengths[s]), s))
    words = np.zeros(ALPHABET, dtype=np.uint32)
    code = 0
    prev_len = int(lengths[order[0]])
    for s in order:
        length = int(lengths[s])
        code <<= length - prev_len
        words[s] = code
        code += 1
        prev_len = length
    return words


def _tree_from_words(lengths: np.ndarray, words: np.ndarray) -> DecodeTree:
    present = [s for s in range(ALPHABET) if lengths[s] > 0]
    children = [[0, 0]]
    is_symbol = [0]
    symbols = [0]
    if len(present) == 1:
        # Degenerate alphabet: both root branches reach the single leaf.
        children[0] = [1, 1]
        children.append([0, 0])
        is_symbol.append(1)
        symbols.append(int(present[0]))
    else:
        for s in present:
            length = int(lengths[s])
            word = int(words[s])
            node = 0
            for pos in range(length - 1, -1, -1):
                bit = (word >> pos) & 1
                nxt = children[node][bit]
                if nxt == 0:
                    nxt = len(children)
                    children.append([0, 0])
                    is_symbol.append(0)
                    symbols.append(0)
                    children[node][bit] = nxt
                node = nxt
            is_symbol[node] = 1
            symbols[node] = s
    return DecodeTree(
        children=np.asarray(children, dtype=np.int32),
        is_symbol=np.asarray(is_symbol, dtype=np.int32),
        symbols=np.asarray(symbols, dtype=np.uint8),
    )


def codebook_from_lengths(lengths) -> HuffmanCodebook:
    """Rebuild the canonical codewords and decode tree from lengths.

    Raises :class:`CodebookError` unless the lengths satisfy the Kraft
    equality (or are the degenerate single-symbol case with length 1).
    """
    lens = np.asarray(lengths, dtype=np.uint8)
    if lens.shape != (ALPHABET,):
        raise CodebookError(f"expected {ALPHABET} code lengths, got shape {lens.shape}")
    present = np.flatnonzero(lens)
    if present.size == 0:
        raise CodebookError("no symbols present in code-length table")
    max_len = int(lens[present].max())
    if max_len > MAX_CODE_LENGTH:
        raise CodebookError(f"code length {max_len} exceeds the {MAX_CODE_LENGTH}-bit cap")
    if present.size == 1:
        if int(lens[present[0]]) != 1:
            raise CodebookError("single-symbol codebooks must use a 1-bit code")
    else:
        kraft = sum(1 << (MAX_CODE_LENGTH - int(lens[s])) for s in present)
        if kraft != 1 << MAX_CODE_LENGTH:
            raise CodebookError("code lengths violate the Kraft equality")
    words = _canonical_words(lens)
    tree = _tree_from_words(lens, words)
    return HuffmanCodebook(
        code_lengths=lens.copy(),
        code_words=words,
        decode_tree=tree,
        max_code_length=max_len,
    )


def build_codebook(h) -> HuffmanCodebook:
    """Build the canonical Huffman codebook for a histogram."""
    counts = np.asarray(h, dtype=np.uint64)
    if counts.shape != (ALPHABET,):
        raise CodebookError(f"expected a 256-bin histogram, got shape {counts.shape}")
    if counts.sum() == 0:
        raise CodebookError("cannot build a codebook from an empty histogram")
    return codebook_from_lengths(_huffman_lengths(counts))


def serialize_codebook(cb: HuffmanCodebook) -> bytes:
    """Serialize as exactly the 256 code lengths."""
    return bytes(cb.code_lengths.astype(np.uint8).tobytes())


def deserialize_codebook(data: bytes) -> HuffmanCodebook:
    """Inverse of :func:`serialize_codebook`."""
    if len(data) != ALPHABET:
        raise CodebookError(f"serialized codebook must be {ALPHABET} bytes, got {len(data)}")
    return codebook_from_lengths(np.frombuffer(data, dtype=np.uint8))
