"""Low-level bit packing and popcount helpers.

Binary activations and weights live in {-1, +1} but are stored as single
bits (1 -> +1, 0 -> -1), packed LSB-first into little-endian 32-bit words.
Everything else in the simulator builds on the handful of primitives here.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

WORD_BITS = 32
WORD_DTYPE = np.uint32


def words_for_bits(nbits: int) -> int:
    """Number of 32-bit words needed to hold *nbits* bits."""
    return (int(nbits) + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 1-D array of 0/1 values into uint32 words, LSB-first.

    Pad bits past the end of the input are zero.
    """
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ShapeError(f"expected 1-D bit array, got shape {bits.shape}")
    b = np.packbits(bits.astype(np.uint8), bitorder="little")
    pad = (-len(b)) % 4
    if pad:
        b = np.concatenate([b, np.zeros(pad, dtype=np.uint8)])
    return b.view("<u4").astype(WORD_DTYPE)


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of pack_bits: first *nbits* bits as a uint8 array of 0/1."""
    words = np.ascontiguousarray(words, dtype=WORD_DTYPE)
    byts = words.astype("<u4").view(np.uint8)
    bits = np.unpackbits(byts, bitorder="little")
    if nbits > len(bits):
        raise ShapeError(f"asked for {nbits} bits, only {len(bits)} stored")
    return bits[:nbits]


def popcount_words(words: np.ndarray) -> int:
    """Total number of set bits across an array of words."""
    return int(np.bitwise_count(np.asarray(words)).sum())


def popcount_per_word(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(words))


def bits_to_pm1(bits: np.ndarray) -> np.ndarray:
    """Map stored bits to the values they encode: 1 -> +1, 0 -> -1."""
    return np.asarray(bits).astype(np.int64) * 2 - 1


def pm1_to_bits(vals: np.ndarray) -> np.ndarray:
    """Map {-1,+1} values to stored bits. Zero is not a valid input."""
    vals = np.asarray(vals)
    if not np.all(np.abs(vals) == 1):
        raise ShapeError("values must be -1 or +1")
    return ((vals + 1) // 2).astype(np.uint8)


def xnor_accumulate(x_words: np.ndarray, w_words: np.ndarray,
                    mask_words: np.ndarray | None = None) -> int:
    """Popcount of XNOR(x, w) restricted to *mask_words*.

    This is the raw accumulator value the datapath produces for one
    output: the number of bit positions (within the mask) where x and w
    agree. Callers convert to the +/-1 sum via 2*pc - n.
    """
    x_words = np.asarray(x_words, dtype=WORD_DTYPE)
    w_words = np.asarray(w_words, dtype=WORD_DTYPE)
    if x_words.shape != w_words.shape:
        raise ShapeError(
            f"operand shapes differ: {x_words.shape} vs {w_words.shape}")
    agree = ~(x_words ^ w_words)
    if mask_words is None:
        raise ShapeError("a mask is required; pad bits would count as matches")
    agree &= np.asarray(mask_words, dtype=WORD_DTYPE)
    return popcount_words(agree)


def lane_mask(nbits: int, total_words: int) -> np.ndarray:
    """Words with the low *nbits* bits set, zero beyond."""
    if nbits > total_words * WORD_BITS:
        raise ShapeError("mask longer than word buffer")
    out = np.zeros(total_words, dtype=WORD_DTYPE)
    full, rem = divmod(int(nbits), WORD_BITS)
    out[:full] = np.uint32(0xFFFFFFFF)
    if rem:
        out[full] = np.uint32((1 << rem) - 1)
    return out
