"""Voxelization, coding order and adaptive context selection.

Everything here is a pure function of the 16-bit quantized locations, so the
decoder rebuilds exactly the encoder's order and context sets. Anchors are
referred to by their position in the coding order ("rank").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DuplicateVoxelError

QMAX = 65535
DEFAULT_RF = 25
DEFAULT_N = 20


def quantize_locations(locations, aabb) -> np.ndarray:
    aabb = np.asarray(aabb, dtype=np.float64)
    u = (np.asarray(locations, dtype=np.float64) - aabb[0]) / (aabb[1] - aabb[0])
    return np.clip(np.rint(u * QMAX), 0, QMAX).astype(np.uint16)


def dequantize_locations(q, aabb) -> np.ndarray:
    aabb = np.asarray(aabb, dtype=np.float64)
    x = aabb[0] + (np.asarray(q, dtype=np.float64) / QMAX) * (aabb[1] - aabb[0])
    return np.minimum(x, aabb[1])      # guard the last ulp at q = QMAX


def voxels_from_q(q, aabb, voxel_size) -> np.ndarray:
    """Voxel coordinates of decoded locations (non-negative int64)."""
    aabb = np.asarray(aabb, dtype=np.float64)
    rel = dequantize_locations(q, aabb) - aabb[0]
    return np.maximum(np.floor(rel / voxel_size + 0.5), 0).astype(np.int64)


def _spread3(v):
    v = v.astype(np.int64) & 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def morton_codes(vox) -> np.ndarray:
    """Z-order key with x in the lowest bit of every triple."""
    vox = np.asarray(vox, dtype=np.int64).reshape(-1, 3)
    return _spread3(vox[:, 0]) | (_spread3(vox[:, 1]) << 1) | (_spread3(vox[:, 2]) << 2)


@dataclass(frozen=True)
class CodingOrder:
    """``perm[r]`` is the input index of the anchor coded at rank ``r``."""

    perm: np.ndarray
    morton: np.ndarray          # Morton key per rank (ascending)
    voxels: np.ndarray          # voxel coordinates per rank

    def __len__(self):
        return self.perm.size


def coding_order(vox) -> CodingOrder:
    vox = np.asarray(vox, dtype=np.int64).reshape(-1, 3)
    codes = morton_codes(vox)
    perm = np.lexsort((np.arange(codes.size), codes))
    sorted_codes = codes[perm]
    dup = np.nonzero(np.diff(sorted_codes) == 0)[0]
    if dup.size:
        a, b = perm[dup[0]], perm[dup[0] + 1]
        raise DuplicateVoxelError(f"anchors {min(a, b)} and {max(a, b)} occupy the same voxel")
    return CodingOrder(perm, sorted_codes, vox[perm])


def scene_coding_order(scene) -> tuple[np.ndarray, CodingOrder]:
    """Quantized locations and the coding order of an :class:`AnchorScene`."""
    q = quantize_locations(scene.locations, scene.aabb)
    return q, coding_order(voxels_from_q(q, scene.aabb, scene.voxel_size))


@dataclass(frozen=True)
class ContextSet:
    target: int
    neighbors: np.ndarray       # ranks, sorted by (distance, Morton)
    offsets: np.ndarray         # neighbour voxel minus target voxel, (k, 3)
    distances: np.ndarray
    dense: bool
    candidates: int             # prior anchors inside the receptive field

    def __len__(self):
        return self.neighbors.size


class VoxelIndex:
    """Occupied voxels sorted in raster order (z, then y, then x).

    ``rows`` lists every occupied (z, y) line once with the start of its run in
    the sorted arrays, so a window query touches only the lines it overlaps.
    """

    def __init__(self, order: CodingOrder, half: int):
        self.half = int(half)
        vox = np.asarray(order.voxels, dtype=np.int64).reshape(-1, 3)
        off = vox + self.half
        keys = (off[:, 2] << 42) | (off[:, 1] << 21) | off[:, 0]
        self.ranks = np.argsort(keys, kind="stable").astype(np.int64)
        self.x = off[self.ranks, 0]
        line = keys[self.ranks] >> 21
        starts = np.nonzero(np.r_[True, line[1:] != line[:-1]])[0] if line.size else np.zeros(0, np.int64)
        self.rows = line[starts]
        self.row_start = np.r_[starts, line.size].astype(np.int64)


def half_extent(rf: int) -> int:
    """Half-width of a cubic receptive field of full extent ``rf`` voxels."""
    if rf < 1:
        raise ValueError("receptive field must be at least one voxel")
    return int(rf) // 2


@njit(cache=True)
def _lower_bound(a, lo, hi, key):
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _select_all(vox, rows, row_start, xs, ranks, half, n, nbr, cnt, cand):
    total = vox.shape[0]
    nrows = rows.shape[0]
    best = np.empty(n + 1, dtype=np.int64)
    for t in range(total):
        x, y, z = vox[t, 0] + half, vox[t, 1] + half, vox[t, 2] + half
        m = 0
        kept = 0
        for dz in range(-half, half + 1):
            first = ((z + dz) << 21) | (y - half)
            last = ((z + dz) << 21) | (y + half)
            ri = _lower_bound(rows, 0, nrows, first)
            while ri < nrows and rows[ri] <= last:
                lo, hi = row_start[ri], row_start[ri + 1]
                ri += 1
                j = _lower_bound(xs, lo, hi, x - half)
                while j < hi and xs[j] <= x + half:
                    r = ranks[j]
                    j += 1
                    if r >= t:
                        continue
                    m += 1
                    ddx = vox[r, 0] - vox[t, 0]
                    ddy = vox[r, 1] - vox[t, 1]
                    ddz = vox[r, 2] - vox[t, 2]
                    # rank order equals Morton order, so (d2, rank) is the tie rule
                    key = ((ddx * ddx + ddy * ddy + ddz * ddz) << 40) | r
                    if kept < n:
                        p = kept
                        kept += 1
                    elif key < best[n - 1]:
                        p = n - 1
                    else:
                        continue
                    while p > 0 and best[p - 1] > key:
                        best[p] = best[p - 1]
                        p -= 1
                    best[p] = key
        cand[t] = m
        cnt[t] = kept
        for i in range(kept):
            nbr[t, i] = best[i] & ((1 << 40) - 1)
        for i in range(kept, n):
            nbr[t, i] = -1


@dataclass(frozen=True)
class ContextTable:
    """Context sets of every rank in compact array form."""

    neighbors: np.ndarray       # (N, n) ranks, -1 padded
    counts: np.ndarray          # (N,)
    candidates: np.ndarray      # (N,) prior anchors in the receptive field
    offsets: np.ndarray         # (N, n, 3) voxel deltas, zero padded
    n: int
    rf: int

    @property
    def dense(self) -> np.ndarray:
        return self.candidates > self.n

    def __len__(self):
        return self.counts.size

    def get(self, target: int) -> ContextSet:
        k = int(self.counts[target])
        off = self.offsets[target, :k]
        return ContextSet(target, self.neighbors[target, :k].copy(), off.copy(),
                          np.sqrt((off ** 2).sum(axis=1)), bool(self.dense[target]),
                          int(self.candidates[target]))


def select_contexts(order: CodingOrder, rf: int = DEFAULT_RF, n: int = DEFAULT_N) -> ContextTable:
    """Adaptive context selection for every anchor in coding order.

    Previously coded anchors inside the ``rf``^3 voxel window are all kept when
    there are at most ``n`` of them; otherwise the ``n`` nearest (by voxel
    centre distance, ties by Morton key) are kept.
    """
    if n < 1:
        raise ValueError("context size must be positive")
    half = half_extent(rf)
    index = VoxelIndex(order, half)
    total = len(order)
    nbr = np.full((total, n), -1, dtype=np.int64)
    cnt = np.zeros(total, dtype=np.int64)
    cand = np.zeros(total, dtype=np.int64)
    if total:
        _select_all(order.voxels, index.rows, index.row_start, index.x, index.ranks, half, n,
                    nbr, cnt, cand)
    offsets = np.zeros((total, n, 3), dtype=np.int64)
    valid = nbr >= 0
    if total:
        offsets[valid] = (order.voxels[nbr[valid]]
                          - np.repeat(order.voxels, cnt, axis=0))
    return ContextTable(nbr, cnt, cand, offsets, n, rf)


def select_context(target: int, order: CodingOrder, rf: int = DEFAULT_RF,
                   n: int = DEFAULT_N) -> ContextSet:
    return select_contexts(order, rf, n).get(target)


def context_stats(order_or_table, rf: int = DEFAULT_RF, n: int = DEFAULT_N):
    """(average selected count, max selected count, sparse fraction)."""
    table = (order_or_table if isinstance(order_or_table, ContextTable)
             else select_contexts(order_or_table, rf, n))
    if len(table) == 0:
        return 0.0, 0, 1.0
    counts = table.counts
    return float(counts.mean()), int(counts.max()), float(np.mean(~table.dense))
