"""Integer range coder over 16-bit discretized CDFs.

The coder keeps a 56-bit window in a 64-bit signed integer (the extra bit
holds the carry), renormalizes byte-wise whenever the range drops below 2^48
and propagates carries through a pending-byte cache. The flush costs at most
56 bits, so every stream satisfies

    len(bits) <= sum(-log2(freq / 2^16)) + 64.

Encoder and decoder are small state machines stored in int64 arrays so that
numba kernels elsewhere in the package can drive them directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import DecodeError, SymbolRangeError, TruncatedStreamError

PRECISION = 16
TOTAL = 1 << PRECISION
_BOT = 1 << 48
_MASK48 = (1 << 48) - 1
_MASK56 = (1 << 56) - 1
_RANGE0 = (1 << 56) - 1
_INIT_BYTES = 7

# encoder state slots
_LOW, _RANGE, _CACHE, _CSIZE, _POS = 0, 1, 2, 3, 4
# decoder state slots
_CODE, _DRANGE, _DPOS, _ERR, _R = 0, 1, 2, 3, 4

ERR_TRUNCATED = 1
ERR_CORRUPT = 2
ERR_TRAILING = 3
ERR_ALPHABET = 4
ERR_OVERFLOW = 5


# ---------------------------------------------------------------- numba core

@njit(cache=True)
def enc_init(st):
    st[_LOW] = 0
    st[_RANGE] = _RANGE0
    st[_CACHE] = 0
    st[_CSIZE] = 1
    st[_POS] = 0


@njit(cache=True)
def _shift_low(st, out):
    low = st[_LOW]
    if (low & _MASK56) < (0xFF << 48) or (low >> 56) != 0:
        carry = low >> 56
        temp = st[_CACHE]
        while True:
            out[st[_POS]] = (temp + carry) & 0xFF
            st[_POS] += 1
            temp = 0xFF
            st[_CSIZE] -= 1
            if st[_CSIZE] == 0:
                break
        st[_CACHE] = (low >> 48) & 0xFF
    st[_CSIZE] += 1
    st[_LOW] = (low & _MASK48) << 8


@njit(cache=True)
def enc_put(st, out, cum, freq):
    r = st[_RANGE] >> PRECISION
    st[_LOW] += r * cum
    st[_RANGE] = r * freq
    while st[_RANGE] < _BOT:
        st[_RANGE] <<= 8
        _shift_low(st, out)


@njit(cache=True)
def enc_finish(st, out):
    for _ in range(8):
        _shift_low(st, out)
    return st[_POS]


@njit(cache=True)
def _next_byte(ds, data):
    p = ds[_DPOS]
    if p >= data.shape[0]:
        ds[_ERR] = ERR_TRUNCATED
        return 0
    ds[_DPOS] = p + 1
    return np.int64(data[p])


@njit(cache=True)
def dec_init(ds, data):
    ds[_CODE] = 0
    ds[_DRANGE] = _RANGE0
    ds[_DPOS] = 0
    ds[_ERR] = 0
    for _ in range(_INIT_BYTES):
        ds[_CODE] = (ds[_CODE] << 8) | _next_byte(ds, data)


@njit(cache=True)
def dec_target(ds):
    """Scaled cumulative target in [0, TOTAL); flags corruption otherwise."""
    r = ds[_DRANGE] >> PRECISION
    ds[_R] = r
    v = ds[_CODE] // r
    if v >= TOTAL:
        ds[_ERR] = ERR_CORRUPT
        return TOTAL - 1
    return v


@njit(cache=True)
def dec_consume(ds, data, cum, freq):
    r = ds[_R]
    ds[_CODE] -= r * cum
    ds[_DRANGE] = r * freq
    while ds[_DRANGE] < _BOT:
        ds[_DRANGE] <<= 8
        ds[_CODE] = (ds[_CODE] << 8) | _next_byte(ds, data)


@njit(cache=True)
def dec_check_end(ds, data):
    if ds[_ERR] == 0 and ds[_DPOS] != data.shape[0]:
        ds[_ERR] = ERR_TRAILING


@njit(cache=True)
def quantize_pmf(p, n, freq):
    """Largest-remainder discretization of p[:n] onto TOTAL with floor 1.

    Every entry receives at least one unit; the leftover units go to the
    largest fractional remainders (ties to the lower index); any excess caused
    by the floor is taken from the largest frequencies.
    """
    total = 0.0
    for i in range(n):
        total += p[i]
    scale = TOTAL / total
    rem = np.empty(n)
    s = 0
    for i in range(n):
        raw = p[i] * scale
        f = np.int64(np.floor(raw))
        if f < 1:
            f = 1
            rem[i] = -1.0
        else:
            rem[i] = raw - f
        freq[i] = f
        s += f
    d = TOTAL - s
    if d > 0:
        order = np.argsort(-rem, kind="mergesort")
        for j in range(d):
            freq[order[j]] += 1
    elif d < 0:
        order = np.argsort(-freq[:n], kind="mergesort")
        i = 0
        while d < 0:
            k = order[i % n]
            if freq[k] > 1:
                freq[k] -= 1
                d += 1
            i += 1


@njit(cache=True)
def _encode_tables(symbols, cum_flat, starts, sizes, table_of, out, st):
    enc_init(st)
    for i in range(symbols.shape[0]):
        t = table_of[i]
        base = starts[t]
        s = symbols[i]
        lo = cum_flat[base + s]
        enc_put(st, out, lo, cum_flat[base + s + 1] - lo)
    return enc_finish(st, out)


@njit(cache=True)
def _decode_tables(data, cum_flat, starts, sizes, table_of, count, out, ds):
    dec_init(ds, data)
    for i in range(count):
        t = table_of[i]
        base = starts[t]
        n = sizes[t]
        v = dec_target(ds)
        # binary search in cum[base : base + n + 1]
        lo, hi = 0, n
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cum_flat[base + mid] <= v:
                lo = mid
            else:
                hi = mid
        c = cum_flat[base + lo]
        dec_consume(ds, data, c, cum_flat[base + lo + 1] - c)
        out[i] = lo
        if ds[_ERR] != 0:
            return
    dec_check_end(ds, data)


# ---------------------------------------------------------------- python surface

@dataclass(frozen=True)
class DiscretizedCdf:
    """Cumulative frequency table, ``cum[0] == 0`` and ``cum[-1] == TOTAL``.

    Symbol ``alphabet_offset + i`` owns the interval ``[cum[i], cum[i+1])``.
    """

    cum: np.ndarray
    alphabet_offset: int = 0

    def __post_init__(self):
        cum = np.asarray(self.cum, dtype=np.int64)
        if cum.ndim != 1 or cum.size < 2 or cum[0] != 0 or cum[-1] != TOTAL:
            raise ValueError("cdf must start at 0 and end at 2^16")
        if np.any(np.diff(cum) < 1):
            raise ValueError("every in-range symbol needs frequency >= 1")
        cum.setflags(write=False)
        object.__setattr__(self, "cum", cum)

    @property
    def size(self) -> int:
        return self.cum.size - 1

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cum)

    @property
    def symbols(self) -> range:
        return range(self.alphabet_offset, self.alphabet_offset + self.size)

    def bits(self, symbol: int) -> float:
        """Ideal code length of ``symbol`` under the discretized table."""
        i = symbol - self.alphabet_offset
        return -float(np.log2(self.cum[i + 1] - self.cum[i])) + PRECISION


def build_cdf(pmf, alphabet_offset: int = 0) -> DiscretizedCdf:
    pmf = np.asarray(pmf, dtype=np.float64).ravel()
    if pmf.size == 0:
        raise ValueError("empty pmf")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise ValueError("pmf entries must be finite and non-negative")
    total = pmf.sum()
    if total == 0:
        raise ValueError("all-zero pmf")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"pmf sums to {total}, not 1")
    if pmf.size > TOTAL:
        raise ValueError("alphabet larger than the frequency precision")
    freq = np.empty(pmf.size, dtype=np.int64)
    quantize_pmf(pmf, pmf.size, freq)
    return DiscretizedCdf(np.concatenate([[0], np.cumsum(freq)]), alphabet_offset)


def _pack(cdfs, count):
    if isinstance(cdfs, DiscretizedCdf):
        cdfs = [cdfs]
        table_of = np.zeros(count, dtype=np.int64)
    else:
        cdfs = list(cdfs)
        if len(cdfs) != count:
            raise ValueError(f"{count} symbols but {len(cdfs)} cdfs")
        table_of = np.arange(count, dtype=np.int64)
    sizes = np.array([c.size for c in cdfs], dtype=np.int64)
    starts = np.zeros(len(cdfs), dtype=np.int64)
    if len(cdfs) > 1:
        starts[1:] = np.cumsum(sizes + 1)[:-1]
    cum_flat = (np.concatenate([c.cum for c in cdfs]) if cdfs
                else np.zeros(0, dtype=np.int64))
    offsets = np.array([c.alphabet_offset for c in cdfs], dtype=np.int64)
    return cum_flat, starts, sizes, offsets, table_of


def encode_symbols(symbols, cdfs: DiscretizedCdf | Sequence[DiscretizedCdf]) -> bytes:
    """Range-code ``symbols``; ``cdfs`` is one shared table or one per symbol."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    n = symbols.size
    cum_flat, starts, sizes, offsets, table_of = _pack(cdfs, n)
    if n and sizes.size:
        idx = symbols - offsets[table_of]
        bad = (idx < 0) | (idx >= sizes[table_of])
        if bad.any():
            i = int(np.argmax(bad))
            raise SymbolRangeError(f"symbol {symbols[i]} at position {i} outside its alphabet")
    else:
        idx = symbols
    if n == 0:
        return b""
    out = np.zeros(3 * n + 16, dtype=np.uint8)
    st = np.zeros(8, dtype=np.int64)
    end = _encode_tables(idx, cum_flat, starts, sizes, table_of, out, st)
    return out[1:end].tobytes()


def decode_symbols(data: bytes, cdfs: DiscretizedCdf | Sequence[DiscretizedCdf],
                   count: int) -> np.ndarray:
    count = int(count)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if count == 0:
        if buf.size:
            raise DecodeError("unexpected bytes for an empty symbol sequence")
        return np.zeros(0, dtype=np.int64)
    cum_flat, starts, sizes, offsets, table_of = _pack(cdfs, count)
    out = np.zeros(count, dtype=np.int64)
    ds = np.zeros(8, dtype=np.int64)
    _decode_tables(buf, cum_flat, starts, sizes, table_of, count, out, ds)
    raise_decode_error(int(ds[_ERR]))
    return out + offsets[table_of]


def raise_decode_error(code: int) -> None:
    if code == 0:
        return
    if code == ERR_TRUNCATED:
        raise TruncatedStreamError("range-coded stream ended early")
    if code == ERR_TRAILING:
        raise DecodeError("trailing bytes after the last symbol")
    raise DecodeError(f"corrupt range-coded stream (code {code})")


class RangeEncoder:
    """Incremental encoder; pass a fresh cdf with every symbol."""

    def __init__(self, capacity: int = 1 << 16):
        self._out = np.zeros(capacity, dtype=np.uint8)
        self._st = np.zeros(8, dtype=np.int64)
        enc_init(self._st)
        self.ideal_bits = 0.0

    def encode(self, symbol: int, cdf: DiscretizedCdf) -> None:
        i = int(symbol) - cdf.alphabet_offset
        if not 0 <= i < cdf.size:
            raise SymbolRangeError(f"symbol {symbol} outside alphabet {cdf.symbols}")
        if self._st[_POS] + 16 >= self._out.size:
            self._out = np.concatenate([self._out, np.zeros_like(self._out)])
        lo = int(cdf.cum[i])
        enc_put(self._st, self._out, lo, int(cdf.cum[i + 1]) - lo)
        self.ideal_bits += cdf.bits(symbol)

    def finish(self) -> bytes:
        if self._st[_POS] + 16 >= self._out.size:
            self._out = np.concatenate([self._out, np.zeros(32, dtype=np.uint8)])
        end = enc_finish(self._st, self._out)
        return self._out[1:end].tobytes()


class RangeDecoder:
    """Incremental decoder mirroring :class:`RangeEncoder`.

    Because the caller supplies the cdf for symbol ``i`` only after symbols
    ``< i`` were returned, this supports autoregressive models directly.
    """

    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        self._ds = np.zeros(8, dtype=np.int64)
        dec_init(self._ds, self._data)
        raise_decode_error(int(self._ds[_ERR]))

    def decode(self, cdf: DiscretizedCdf) -> int:
        v = dec_target(self._ds)
        i = int(np.searchsorted(cdf.cum, v, side="right")) - 1
        lo = int(cdf.cum[i])
        dec_consume(self._ds, self._data, lo, int(cdf.cum[i + 1]) - lo)
        raise_decode_error(int(self._ds[_ERR]))
        return i + cdf.alphabet_offset

    def finish(self) -> None:
        dec_check_end(self._ds, self._data)
        raise_decode_error(int(self._ds[_ERR]))


def decode_autoregressive(data: bytes, cdf_for: Callable[[int, list], DiscretizedCdf],
                          count: int) -> list[int]:
    """Decode ``count`` symbols where ``cdf_for(i, decoded_so_far)`` builds cdf i."""
    dec = RangeDecoder(data) if count else None
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode(cdf_for(i, out)))
    if dec is not None:
        dec.finish()
    return out
