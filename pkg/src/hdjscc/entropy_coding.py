"""Binary arithmetic coder driven by static 16-bit cumulative frequency tables.

The coder keeps 32-bit ``low``/``high`` registers and resolves the straddle
case with a pending-bit counter, which is how carries propagate in a
bit-oriented implementation. Everything runs on integers, so the output is
bit-identical across runs and platforms for identical tables.

Tables are stacked into a 2-D ``cum`` array (one row per distinct table,
padded by repeating the final total) with an ``nsym`` vector giving the
alphabet size of each row. Symbols are addressed by *index* within a row;
:class:`CDFTable` maps between integer values and indices via
``support_offset``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .errors import CodingError, DecodeError

PRECISION = 16
TOTAL = 1 << PRECISION
STATE_BITS = 32

_FULL = np.int64(1) << STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1
_MASK = _FULL - 1


@dataclass
class CDFTable:
    """Cumulative frequencies ``cum`` (``cum[0] = 0``, ``cum[-1] = 2**16``)
    for the integer values ``support_offset .. support_offset + len(cum) - 2``.
    """

    cum: np.ndarray
    support_offset: int = 0

    def __post_init__(self):
        self.cum = np.asarray(self.cum, dtype=np.int64)
        n = len(self.cum) - 1
        if n < 1 or n >= TOTAL:
            raise ValueError(f"table must have between 1 and {TOTAL - 1} symbols, got {n}")
        if self.cum[0] != 0 or self.cum[-1] != TOTAL:
            raise ValueError("cumulative table must start at 0 and end at 2**16")
        if np.any(np.diff(self.cum) < 1):
            raise ValueError("every symbol needs a frequency of at least 1")

    @property
    def n_symbols(self) -> int:
        return len(self.cum) - 1

    def probabilities(self) -> np.ndarray:
        return np.diff(self.cum) / TOTAL

    @classmethod
    def from_pmf(cls, pmf, support_offset: int = 0) -> "CDFTable":
        return cls(quantize_pmf(pmf), support_offset)


def quantize_pmf(pmf, nsym=None) -> np.ndarray:
    """Turn probabilities into 16-bit cumulative tables with every frequency >= 1.

    ``pmf`` is 1-D or row-wise 2-D. With ``nsym`` given, row ``i`` only uses
    its first ``nsym[i]`` entries and the rest of the row is padded with the
    final total. Leftover mass goes to the most probable symbol, which keeps
    the mapping deterministic.
    """
    p = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    rows, width = p.shape
    n = np.full(rows, width, dtype=np.int64) if nsym is None else np.asarray(nsym, dtype=np.int64)
    if np.any(n >= TOTAL) or np.any(n < 1):
        raise ValueError("alphabet size must be in [1, 2**16)")
    valid = np.arange(width)[None, :] < n[:, None]
    p = np.where(valid, np.clip(p, 0.0, None), 0.0)
    s = p.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    p = p / s
    freq = np.floor(p * (TOTAL - n)[:, None]).astype(np.int64) + 1
    freq[~valid] = 0
    rest = TOTAL - freq.sum(axis=1)
    freq[np.arange(rows), np.argmax(p, axis=1)] += rest
    cum = np.zeros((rows, width + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return cum[0] if np.ndim(pmf) == 1 else cum


def stack_tables(tables: Sequence[CDFTable]):
    """Pad a list of tables into ``(cum, nsym)`` arrays for the kernels."""
    width = max(t.n_symbols for t in tables) + 1
    cum = np.full((len(tables), width), TOTAL, dtype=np.int64)
    nsym = np.empty(len(tables), dtype=np.int64)
    for i, t in enumerate(tables):
        cum[i, : t.n_symbols + 1] = t.cum
        nsym[i] = t.n_symbols
    return cum, nsym


def uniform_cum(n: int) -> np.ndarray:
    return quantize_pmf(np.full(n, 1.0 / n))


@numba.njit(cache=True)
def _emit(bits, pos, bit, pending):
    bits[pos] = bit
    pos += 1
    for _ in range(pending):
        bits[pos] = 1 - bit
        pos += 1
    return pos


@numba.njit(cache=True)
def _encode_kernel(indices, rows, cum, nsym):
    n = indices.shape[0]
    # every symbol costs at most PRECISION bits once renormalized
    bits = np.zeros(n * (PRECISION + 1) + 2 * STATE_BITS, dtype=np.uint8)
    pos = 0
    low = np.int64(0)
    high = _MASK
    pending = 0
    for i in range(n):
        r = rows[i]
        s = indices[i]
        if s < 0 or s >= nsym[r]:
            return bits[:0], i
        total = cum[r, nsym[r]]
        span = high - low + 1
        high = low + (span * cum[r, s + 1]) // total - 1
        low = low + (span * cum[r, s]) // total
        while True:
            if high < _HALF:
                pos = _emit(bits, pos, 0, pending)
                pending = 0
            elif low >= _HALF:
                pos = _emit(bits, pos, 1, pending)
                pending = 0
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low = low << 1
            high = (high << 1) | 1
    pending += 1
    if low < _QUARTER:
        pos = _emit(bits, pos, 0, pending)
    else:
        pos = _emit(bits, pos, 1, pending)
    return bits[:pos], -1


@numba.njit(cache=True)
def _decode_symbol(state, bits, cum, nsym, r):
    # state: [low, high, code, pos]
    low = state[0]
    high = state[1]
    code = state[2]
    pos = state[3]
    nbits = bits.shape[0]
    total = cum[r, nsym[r]]
    span = high - low + 1
    value = ((code - low + 1) * total - 1) // span
    lo = 0
    hi = nsym[r]
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cum[r, mid] > value:
            hi = mid
        else:
            lo = mid
    s = lo
    high = low + (span * cum[r, s + 1]) // total - 1
    low = low + (span * cum[r, s]) // total
    while True:
        if high < _HALF:
            pass
        elif low >= _HALF:
            low -= _HALF
            high -= _HALF
            code -= _HALF
        elif low >= _QUARTER and high < _HALF + _QUARTER:
            low -= _QUARTER
            high -= _QUARTER
            code -= _QUARTER
        else:
            break
        low = low << 1
        high = (high << 1) | 1
        b = bits[pos] if pos < nbits else 0
        code = (code << 1) | b
        pos += 1
    state[0] = low
    state[1] = high
    state[2] = code
    state[3] = pos
    return s


@numba.njit(cache=True)
def _decode_kernel(bits, rows, cum, nsym, esc_index, extra_row, extra_per_escape):
    """Decode ``len(rows)`` symbols, then ``extra_per_escape`` symbols from
    ``extra_row`` for every decoded symbol equal to its row's escape index.
    Returns the decoded indices and the number of bits consumed.
    """
    n = rows.shape[0]
    state = np.zeros(4, dtype=np.int64)
    state[1] = _MASK
    nbits = bits.shape[0]
    code = np.int64(0)
    for i in range(STATE_BITS):
        b = bits[i] if i < nbits else 0
        code = (code << 1) | b
    state[2] = code
    state[3] = STATE_BITS
    out = np.empty(n, dtype=np.int64)
    n_esc = 0
    for i in range(n):
        r = rows[i]
        s = _decode_symbol(state, bits, cum, nsym, r)
        out[i] = s
        if esc_index[r] >= 0 and s == esc_index[r]:
            n_esc += 1
    extra = np.empty(n_esc * extra_per_escape, dtype=np.int64)
    for j in range(extra.shape[0]):
        extra[j] = _decode_symbol(state, bits, cum, nsym, extra_row)
    return out, extra, state[3]


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(bits).tobytes()


def _unpack(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def encode_indices(indices, rows, cum, nsym) -> np.ndarray:
    """Low-level entry point: encode symbol indices against table rows.
    Returns the raw bit array (one uint8 per bit).
    """
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    bits, bad = _encode_kernel(indices, rows, np.ascontiguousarray(cum, dtype=np.int64),
                               np.ascontiguousarray(nsym, dtype=np.int64))
    if bad >= 0:
        raise CodingError(f"symbol index {indices[bad]} at position {bad} is outside its table")
    return bits


def decode_indices(data: bytes, rows, cum, nsym, esc_index=None, extra_row=-1, extra_per_escape=0):
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cum = np.ascontiguousarray(cum, dtype=np.int64)
    nsym = np.ascontiguousarray(nsym, dtype=np.int64)
    if esc_index is None:
        esc_index = np.full(len(nsym), -1, dtype=np.int64)
    bits = _unpack(data)
    out, extra, used = _decode_kernel(bits, rows, cum, nsym,
                                      np.ascontiguousarray(esc_index, dtype=np.int64),
                                      int(extra_row), int(extra_per_escape))
    # a valid stream is over-read by at most STATE_BITS - 2 bits
    if used - len(bits) > STATE_BITS:
        raise DecodeError(f"stream truncated: needed {used} bits, have {len(bits)}")
    return out, extra


def ac_encode(symbols: Sequence[int], tables: Sequence[CDFTable]) -> bytes:
    """Arithmetic-code integer ``symbols``, each against its own table.

    Raises :class:`CodingError` when a value lies outside its table's
    support; escaping out-of-range values is the caller's job.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if len(symbols) != len(tables):
        raise ValueError("need exactly one table per symbol")
    if len(symbols) == 0:
        return b""
    uniq: dict[int, int] = {}
    rows = np.empty(len(tables), dtype=np.int64)
    offsets = np.empty(len(tables), dtype=np.int64)
    distinct = []
    for i, t in enumerate(tables):
        key = id(t)
        if key not in uniq:
            uniq[key] = len(distinct)
            distinct.append(t)
        rows[i] = uniq[key]
        offsets[i] = t.support_offset
    cum, nsym = stack_tables(distinct)
    return _pack(encode_indices(symbols - offsets, rows, cum, nsym))


def ac_decode(data: bytes, tables: Sequence[CDFTable], n_symbols: int | None = None) -> np.ndarray:
    """Inverse of :func:`ac_encode`; ``tables`` must match the encoder's exactly.

    A wrong table is not detectable here (the output is simply different);
    the container's CRC and the pipeline's reconstruction check catch it.
    """
    if n_symbols is None:
        n_symbols = len(tables)
    if n_symbols != len(tables):
        raise ValueError("need exactly one table per symbol")
    if n_symbols == 0:
        return np.zeros(0, dtype=np.int64)
    uniq: dict[int, int] = {}
    rows = np.empty(n_symbols, dtype=np.int64)
    offsets = np.empty(n_symbols, dtype=np.int64)
    distinct = []
    for i, t in enumerate(tables):
        key = id(t)
        if key not in uniq:
            uniq[key] = len(distinct)
            distinct.append(t)
        rows[i] = uniq[key]
        offsets[i] = t.support_offset
    cum, nsym = stack_tables(distinct)
    out, _ = decode_indices(data, rows, cum, nsym)
    return out + offsets


def ideal_codelength(symbols, tables: Sequence[CDFTable]) -> float:
    """Sum of -log2 of the (quantized) table probabilities of ``symbols``."""
    bits = 0.0
    for s, t in zip(np.asarray(symbols, dtype=np.int64), tables):
        i = s - t.support_offset
        bits -= np.log2((t.cum[i + 1] - t.cum[i]) / TOTAL)
    return float(bits)
