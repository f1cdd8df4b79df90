"""Conditional Gaussian entropy model.

The quantized value ``k * s`` of an element with predicted mean ``mu`` and
scale ``sigma`` owns the probability mass of the bin ``[k*s - s/2, k*s + s/2]``.
``rate_bits`` is the training surrogate (with analytic gradients), while the
numba helpers at the bottom turn the same model into 16-bit coder tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import erfc

from . import rangecoder as rc
from .errors import EscapeOverflowError

SIGMA_FLOOR = 1e-4
PROB_FLOOR = 2.0 ** -24
TAIL_SIGMAS = 6.0
MAX_HALF_WIDTH = 1 << 14
_RAW_LIMIT = 1 << 31
PRECISION_BITS = float(rc.PRECISION)
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma shapes differ")
        if np.any(sigma < SIGMA_FLOOR):
            raise ValueError(f"sigma below the floor {SIGMA_FLOOR}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) * _SQRT1_2)


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _bin_mass(upper, lower):
    """Phi(upper) - Phi(lower) evaluated on the tail that avoids cancellation."""
    right = (upper + lower) > 0
    p_right = 0.5 * (erfc(lower * _SQRT1_2) - erfc(upper * _SQRT1_2))
    p_left = 0.5 * (erfc(-upper * _SQRT1_2) - erfc(-lower * _SQRT1_2))
    return np.where(right, p_right, p_left)


def _check_step(step):
    step = np.asarray(step, dtype=np.float64)
    if np.any(~(step > 0)):
        raise ValueError("quantization step must be positive")
    return step


def symbol_pmf(params: GaussianParams, step, symbol_range):
    """Per-element probabilities of symbols ``lo..hi`` plus the escape mass.

    Returns ``(pmf, escape)`` with ``pmf.shape == mu.shape + (hi - lo + 1,)``;
    ``escape`` carries the mass of both tails outside the range.
    """
    lo, hi = int(symbol_range[0]), int(symbol_range[1])
    if hi < lo:
        raise ValueError("empty symbol range")
    step = _check_step(step)
    mu, sigma = np.broadcast_arrays(params.mu, params.sigma)
    step = np.broadcast_to(step, mu.shape)
    k = np.arange(lo, hi + 1, dtype=np.float64)
    m, sg, s = mu[..., None], sigma[..., None], step[..., None]
    upper = (k * s + s / 2 - m) / sg
    lower = (k * s - s / 2 - m) / sg
    pmf = _bin_mass(upper, lower)
    left = (lo * step - step / 2 - mu) / sigma
    right = (hi * step + step / 2 - mu) / sigma
    escape = normal_cdf(left) + 0.5 * erfc(right * _SQRT1_2)
    return pmf, escape


def element_bits(mu, sigma, step, y):
    """-log2 of the bin mass around ``y`` (floored at PROB_FLOOR)."""
    upper = (y + step / 2 - mu) / sigma
    lower = (y - step / 2 - mu) / sigma
    return -np.log2(np.maximum(_bin_mass(upper, lower), PROB_FLOOR))


def element_bits_grad(mu, sigma, step, y):
    """Bits and their partials w.r.t. mu, sigma, step (bin width) and y."""
    upper = (y + step / 2 - mu) / sigma
    lower = (y - step / 2 - mu) / sigma
    p = _bin_mass(upper, lower)
    live = p > PROB_FLOOR
    p = np.maximum(p, PROB_FLOOR)
    bits = -np.log2(p)
    g = np.where(live, -1.0 / (p * _LN2), 0.0)       # d bits / d p
    pu, pl = normal_pdf(upper), normal_pdf(lower)
    inv = 1.0 / sigma
    d_y = g * (pu - pl) * inv
    d_mu = -d_y
    d_sigma = g * (-pu * upper + pl * lower) * inv
    d_step = g * 0.5 * (pu + pl) * inv
    return bits, d_mu, d_sigma, d_step, d_y


def rate_bits(params: GaussianParams, step, values, mode="round", noise=None):
    """Total code length estimate in bits.

    ``round`` mode codes ``Round(values / step) * step``; ``noise`` mode codes
    ``values + step * noise`` where ``noise`` is a caller-supplied array of
    Uniform(-1/2, 1/2) draws (or a ``numpy.random.Generator``).
    """
    step = _check_step(step)
    values = np.asarray(values, dtype=np.float64)
    mu, sigma = params.mu, params.sigma
    if mode == "round":
        y = quantize(values, np.broadcast_to(step, values.shape))[1]
    elif mode == "noise":
        y = values + np.broadcast_to(step, values.shape) * _noise(noise, values.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.sum(element_bits(mu, sigma, step, y)))


def rate_bits_grad(params: GaussianParams, step, values, noise):
    """Noise-mode rate and its gradient w.r.t. (mu, sigma, step, values)."""
    step = _check_step(step)
    values = np.asarray(values, dtype=np.float64)
    u = _noise(noise, values.shape)
    s = np.broadcast_to(step, values.shape)
    y = values + s * u
    bits, d_mu, d_sigma, d_step, d_y = element_bits_grad(params.mu, params.sigma, s, y)
    return float(bits.sum()), {"mu": d_mu, "sigma": d_sigma, "step": d_step + d_y * u,
                               "values": d_y}


def _noise(noise, shape):
    if isinstance(noise, np.random.Generator):
        return noise.uniform(-0.5, 0.5, shape)
    if noise is None:
        raise ValueError("noise mode needs a deterministic noise source")
    return np.broadcast_to(np.asarray(noise, dtype=np.float64), shape)


def quantize(values, step):
    """Symbols ``k`` and dequantized ``k * step`` with ``|v - k*step| <= step/2``."""
    values = np.asarray(values, dtype=np.float64)
    step = _check_step(step)
    k = np.rint(values / step)
    # x/s is rounded before rint; nudge the rare half-way cases back in bounds
    err = values - k * step
    k = np.where(err > step / 2, k + 1, np.where(err < -step / 2, k - 1, k))
    return k.astype(np.int64), k * step


# ---------------------------------------------------------------- coder tables

@njit(cache=True)
def _tail(z):
    """Mass beyond ``z`` on its own side of zero (Phi(z) for z <= 0)."""
    if z <= 0.0:
        return 0.5 * math.erfc(-z * _SQRT1_2)
    return 0.5 * math.erfc(z * _SQRT1_2)


@njit(cache=True)
def gaussian_alphabet(mu, sigma, step):
    """Centre symbol and half-width of the in-range alphabet."""
    c = np.int64(np.rint(mu / step))
    w = math.ceil(TAIL_SIGMAS * sigma / step) + 1.0
    if w > MAX_HALF_WIDTH:
        w = MAX_HALF_WIDTH
    return c, np.int64(w)


@njit(cache=True)
def _cum(i, n, lo_edge, step, inv, left, budget):
    """Cumulative frequency below alphabet index ``i`` (0 <= i <= n + 1).

    ``n`` in-range bins are followed by the escape bin. Every bin owns one
    unit plus its share of ``budget`` taken from the quantized in-range mass to
    its left, so a single entry costs O(1) tail evaluations.
    """
    if i <= 0:
        return np.int64(0)
    if i > n:
        return np.int64(rc.TOTAL)
    z = (lo_edge + i * step) * inv
    if z <= 0.0:
        g = _tail(z) - left
    else:
        g = (1.0 - left) - _tail(z)
    if g < 0.0:
        g = 0.0
    elif g > 1.0:
        g = 1.0
    return np.int64(i) + np.int64(g * budget)


@njit(cache=True)
def _table_setup(mu, sigma, step):
    c, w = gaussian_alphabet(mu, sigma, step)
    n = 2 * w + 1
    inv = 1.0 / sigma
    lo_edge = (c - w) * step - step / 2 - mu
    left = _tail(lo_edge * inv)
    return c, w, n, inv, lo_edge, left, rc.TOTAL - (n + 1)


@njit(cache=True)
def gaussian_table(mu, sigma, step, cum):
    """Fill ``cum`` (length n + 2) with the full cumulative table; returns n + 1."""
    c, w, n, inv, lo_edge, left, budget = _table_setup(mu, sigma, step)
    for i in range(n + 2):
        cum[i] = _cum(i, n, lo_edge, step, inv, left, budget)
    return n + 1


@njit(cache=True)
def encode_gaussian(st, out, k, mu, sigma, step):
    """Code symbol k; returns its ideal cost in bits, or -1.0 on raw overflow."""
    c, w, n, inv, lo_edge, left, budget = _table_setup(mu, sigma, step)
    d = k - c
    if -w <= d <= w:
        i = d + w
    elif d < -_RAW_LIMIT or d >= _RAW_LIMIT:
        return -1.0
    else:
        i = n
    lo = _cum(i, n, lo_edge, step, inv, left, budget)
    f = _cum(i + 1, n, lo_edge, step, inv, left, budget) - lo
    rc.enc_put(st, out, lo, f)
    bits = PRECISION_BITS - math.log2(f)
    if i == n:
        raw = d + _RAW_LIMIT
        rc.enc_put(st, out, raw >> 16, 1)
        rc.enc_put(st, out, raw & 0xFFFF, 1)
        bits += 32.0
    return bits


@njit(cache=True)
def decode_gaussian(ds, data, mu, sigma, step):
    c, w, n, inv, lo_edge, left, budget = _table_setup(mu, sigma, step)
    v = rc.dec_target(ds)
    # largest i with cum(i) <= v
    lo, hi = 0, n + 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if _cum(mid, n, lo_edge, step, inv, left, budget) <= v:
            lo = mid
        else:
            hi = mid
    base = _cum(lo, n, lo_edge, step, inv, left, budget)
    rc.dec_consume(ds, data, base, _cum(lo + 1, n, lo_edge, step, inv, left, budget) - base)
    if lo < n:
        return c - w + lo
    hi = rc.dec_target(ds)
    rc.dec_consume(ds, data, hi, 1)
    lo = rc.dec_target(ds)
    rc.dec_consume(ds, data, lo, 1)
    return c + (hi << 16) + lo - _RAW_LIMIT


@njit(cache=True)
def _encode_gaussian_stream(symbols, mu, sigma, step, out, st, bits):
    rc.enc_init(st)
    for i in range(symbols.shape[0]):
        b = encode_gaussian(st, out, symbols[i], mu[i], sigma[i], step[i])
        if b < 0:
            return -1 - i
        bits[i] = b
    return rc.enc_finish(st, out)


@njit(cache=True)
def _decode_gaussian_stream(data, mu, sigma, step, out, ds):
    rc.dec_init(ds, data)
    for i in range(out.shape[0]):
        out[i] = decode_gaussian(ds, data, mu[i], sigma[i], step[i])
        if ds[3] != 0:
            return
    rc.dec_check_end(ds, data)


def encode_gaussian_symbols(symbols, params: GaussianParams, step):
    """Range-code integer symbols under per-element Gaussians.

    Returns ``(bytes, bits)`` where ``bits`` is the per-element ideal cost under
    the discretized tables (escape and raw bits included).
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    n = symbols.size
    mu = np.ascontiguousarray(np.broadcast_to(params.mu, symbols.shape), dtype=np.float64)
    sigma = np.ascontiguousarray(np.broadcast_to(params.sigma, symbols.shape), dtype=np.float64)
    step = np.ascontiguousarray(np.broadcast_to(_check_step(step), symbols.shape), dtype=np.float64)
    if n == 0:
        return b"", np.zeros(0)
    out = np.zeros(6 * n + 16, dtype=np.uint8)
    st = np.zeros(8, dtype=np.int64)
    bits = np.zeros(n)
    end = _encode_gaussian_stream(symbols, mu.ravel(), sigma.ravel(), step.ravel(), out, st, bits)
    if end < 0:
        raise EscapeOverflowError(f"symbol {-1 - end} too far from its predicted mean",
                                  anchor=-1 - end)
    return out[1:end].tobytes(), bits


def decode_gaussian_symbols(data: bytes, params: GaussianParams, step, count=None):
    mu = np.ascontiguousarray(params.mu, dtype=np.float64).ravel()
    n = mu.size if count is None else int(count)
    sigma = np.ascontiguousarray(np.broadcast_to(params.sigma, params.mu.shape),
                                 dtype=np.float64).ravel()
    step = np.ascontiguousarray(np.broadcast_to(_check_step(step), params.mu.shape),
                                dtype=np.float64).ravel()
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.zeros(n, dtype=np.int64)
    if n == 0:
        return out
    ds = np.zeros(8, dtype=np.int64)
    _decode_gaussian_stream(buf, mu, sigma, step, out, ds)
    rc.raise_decode_error(int(ds[3]))
    return out


def coder_table(mu: float, sigma: float, step: float):
    """The exact coder table for one element as ``(cdf, centre, half_width)``.

    Alphabet index ``i < 2w+1`` is symbol ``centre - w + i``; the final index is
    the escape.
    """
    c, w = gaussian_alphabet(float(mu), float(sigma), float(step))
    cum = np.empty(2 * w + 3, dtype=np.int64)
    gaussian_table(float(mu), float(sigma), float(step), cum)
    return rc.DiscretizedCdf(cum, 0), int(c), int(w)
