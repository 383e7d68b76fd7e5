"""Bit-packed {-1,+1} tensors and the xnor-popcount inner product.

This module is the source of truth for the 1-bit encoding used everywhere
else (kernels, model files, benchmarks):

  * bit value 1 encodes +1, bit value 0 encodes -1;
  * bits are packed into 64-bit words, LSB first: within a word, bit b
    (counted from the least significant end) holds logical index
    word_index * 64 + b;
  * a packed row of ``row_len`` logical bits occupies ceil(row_len / 64)
    words and every padding bit (logical index >= row_len) is 0.

The fixed word width and bit order make serialized payloads bit-exact
across platforms. All containers here are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EncodingError, InvariantError

WORD_BITS = 64

try:
    from ._accel import xnor_gemm_words as _xnor_gemm_accel
except ImportError:  # pragma: no cover - numba missing
    _xnor_gemm_accel = None


def words_per_row(row_len: int) -> int:
    return (row_len + WORD_BITS - 1) // WORD_BITS


def popcount(words: np.ndarray) -> np.ndarray:
    """Per-element population count of a uint64 array."""
    return np.bitwise_count(words)


def validate_float_tensor(data, shape=None) -> np.ndarray:
    """Checked construction of a dense float tensor (NCHW for 4-d).

    Returns a float64 ndarray; rejects NaN/Inf and shape/size mismatches.
    The unchecked path is plain numpy; this helper exists for boundaries
    where inputs are untrusted.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(
                f"data length {arr.size} != product of extents {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise InvariantError("float tensor contains NaN or Inf")
    return arr


def pack_row(values) -> tuple[np.ndarray, int]:
    """Pack a sequence of exact +-1 values into (words, row_len).

    Bit i of the packed row is 1 iff values[i] == +1. Padding bits are 0.
    Raises EncodingError for any value that is not exactly +1 or -1.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size and not np.all(np.abs(vals) == 1.0):
        bad = vals[np.abs(vals) != 1.0][0]
        raise EncodingError(f"cannot encode {bad!r}: values must be exactly +1 or -1")
    bits = (vals > 0).astype(np.uint8)
    return pack_bit_rows(bits[None, :])[0].copy(), vals.size


def unpack_row(words: np.ndarray, row_len: int) -> np.ndarray:
    """Inverse of pack_row: returns the +-1 float vector of length row_len."""
    words = np.ascontiguousarray(np.atleast_1d(np.asarray(words, dtype=np.uint64)))
    if words.size < words_per_row(row_len):
        raise DimensionError(f"{words.size} words cannot hold {row_len} bits")
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")[:row_len]
    return bits.astype(np.float64) * 2.0 - 1.0


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, row_len) uint8 {0,1} matrix into (rows, words) uint64.

    Fast path shared by pack_row, BitTensor and the conv engines; assumes
    bits are already 0/1.
    """
    rows, n = bits.shape
    nwords = words_per_row(n)
    if n % WORD_BITS:
        padded = np.zeros((rows, nwords * WORD_BITS), dtype=np.uint8)
        padded[:, :n] = bits
        bits = padded
    packed = np.packbits(np.ascontiguousarray(bits), axis=1, bitorder="little")
    return packed.view(np.uint64)


def unpack_bit_rows(words: np.ndarray, row_len: int) -> np.ndarray:
    """Unpack (rows, words) uint64 into a (rows, row_len) uint8 {0,1} matrix."""
    rows = words.shape[0]
    bits = np.unpackbits(
        np.ascontiguousarray(words).view(np.uint8).reshape(rows, -1),
        axis=1,
        bitorder="little",
    )
    return bits[:, :row_len]


class BitTensor:
    """An immutable 1-bit tensor packed row-wise into 64-bit words.

    Parameters
    ----------
    words : (rows, words_per_row) uint64 array.
    logical_shape : extents of the logical +-1 tensor; its product must be
        rows * row_len.
    row_len : number of logical bits per packed row.
    checked : validate all construction invariants (padding bits zero,
        shape bookkeeping). Disable only in hot loops that build words
        through the module's own packing helpers.
    """

    __slots__ = ("words", "logical_shape", "row_len", "rows")

    def __init__(self, words, logical_shape, row_len, checked=True):
        words = np.asarray(words, dtype=np.uint64)
        if words.ndim == 1:
            words = words[None, :]
        self.words = words
        self.logical_shape = tuple(int(d) for d in logical_shape)
        self.row_len = int(row_len)
        self.rows = words.shape[0]
        if checked:
            self._validate()
        self.words.setflags(write=False)

    def _validate(self):
        nwords = words_per_row(self.row_len)
        if self.words.shape[1] != nwords:
            raise InvariantError(
                f"row of {self.row_len} bits needs {nwords} words, got {self.words.shape[1]}"
            )
        if self.rows * self.row_len != int(np.prod(self.logical_shape)):
            raise InvariantError(
                f"rows*row_len = {self.rows * self.row_len} != "
                f"product of logical shape {self.logical_shape}"
            )
        pad = self.rows and self.row_len % WORD_BITS
        if pad:
            mask = ~np.uint64(0) << np.uint64(self.row_len % WORD_BITS)
            if np.any(self.words[:, -1] & mask):
                raise InvariantError("padding bits beyond row_len must be 0")

    @classmethod
    def from_pm1(cls, values, row_len=None) -> "BitTensor":
        """Pack a +-1 array. Rows span the trailing axes so that each row
        holds ``row_len`` bits (default: the last axis)."""
        arr = np.asarray(values, dtype=np.float64)
        if row_len is None:
            row_len = arr.shape[-1] if arr.ndim else arr.size
        flat = arr.reshape(-1)
        if flat.size and not np.all(np.abs(flat) == 1.0):
            raise EncodingError("values must be exactly +1 or -1")
        if row_len <= 0 or flat.size % row_len:
            raise DimensionError(f"size {flat.size} not divisible into rows of {row_len}")
        bits = (flat > 0).astype(np.uint8).reshape(-1, row_len)
        return cls(pack_bit_rows(bits), arr.shape, row_len, checked=False)

    def to_pm1(self) -> np.ndarray:
        """Unpack to a +-1 float64 array of the logical shape."""
        bits = unpack_bit_rows(self.words, self.row_len)
        return (bits.astype(np.float64) * 2.0 - 1.0).reshape(self.logical_shape)

    def __eq__(self, other):
        return (
            isinstance(other, BitTensor)
            and self.logical_shape == other.logical_shape
            and self.row_len == other.row_len
            and np.array_equal(self.words, other.words)
        )

    def __hash__(self):  # content hash over the packed words
        return hash((self.logical_shape, self.row_len, self.words.tobytes()))

    def __repr__(self):
        return f"BitTensor(shape={self.logical_shape}, row_len={self.row_len}, rows={self.rows})"


def xnor_popcount_dot(a, a_len, b, b_len=None) -> int:
    """Inner product of two packed +-1 rows over +-1 semantics.

    Computed as matches = sum_words popcount(xnor(wa, wb)) - pad_count with
    pad_count = 64 * word_count - n, then result = 2 * matches - n. The
    result is exact integer arithmetic: it lies in [-n, n] and has the
    parity of n.
    """
    if b_len is None:
        b_len = a_len
    if a_len != b_len:
        raise DimensionError(f"row length mismatch: {a_len} != {b_len}")
    a = np.atleast_1d(np.asarray(a, dtype=np.uint64)).ravel()
    b = np.atleast_1d(np.asarray(b, dtype=np.uint64)).ravel()
    nwords = words_per_row(a_len)
    if a.size < nwords or b.size < nwords:
        raise DimensionError("word arrays shorter than the packed row length")
    xnor = ~(a[:nwords] ^ b[:nwords])
    matches = int(popcount(xnor).sum()) - (nwords * WORD_BITS - a_len)
    return 2 * matches - a_len


def xnor_gemm(a: BitTensor, b: BitTensor) -> np.ndarray:
    """All-pairs xnor-popcount dot of the rows of a and b.

    Returns int64 (a.rows, b.rows). Row lengths must match; padding bits
    are zero in both operands, so dot = n - 2 * popcount(a XOR b).
    """
    if a.row_len != b.row_len:
        raise DimensionError(f"row length mismatch: {a.row_len} != {b.row_len}")
    return xnor_gemm_words(a.words, b.words, a.row_len)


def xnor_gemm_words(aw: np.ndarray, bw: np.ndarray, n_bits: int) -> np.ndarray:
    """xnor_gemm on raw (rows, words) uint64 arrays with equal padding."""
    if _xnor_gemm_accel is not None:
        out = np.empty((aw.shape[0], bw.shape[0]), dtype=np.int64)
        _xnor_gemm_accel(
            np.ascontiguousarray(aw), np.ascontiguousarray(bw), n_bits, out
        )
        return out
    mismatches = popcount(aw[:, None, :] ^ bw[None, :, :]).sum(axis=-1, dtype=np.int64)
    return n_bits - 2 * mismatches
