import numpy as np
import pytest
from hypothesis import given, strategies as st

from hemgs.context import (DEFAULT_N, DEFAULT_RF, CodingOrder, coding_order, context_stats,
                           dequantize_locations, half_extent, morton_codes, quantize_locations,
                           scene_coding_order, select_context, select_contexts)
from hemgs.errors import DuplicateVoxelError
from hemgs.scene import SynthSpec, synth_scene

from oracles import brute_contexts, lattice_with_candidates, morton_py, order_py


def test_single_anchor_identity():
    o = coding_order(np.array([[3, 4, 5]]))
    assert o.perm.tolist() == [0]


def test_cube_corners_in_morton_order():
    corners = np.array([[x, y, z] for z in (1, 0) for y in (0, 1) for x in (1, 0)])
    o = coding_order(corners)
    assert o.voxels.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                                 [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]]


@given(st.lists(st.tuples(*[st.integers(0, 2 ** 21 - 1)] * 3), min_size=1, max_size=50,
                unique=True))
def test_morton_matches_bitwise_oracle(vox):
    vox = np.array(vox)
    assert morton_codes(vox).tolist() == [morton_py(*v) for v in vox.tolist()]
    assert coding_order(vox).perm.tolist() == order_py(vox)


def test_order_is_deterministic_and_rejects_duplicates():
    rng = np.random.default_rng(0)
    vox = np.unique(rng.integers(0, 50, (500, 3)), axis=0)[rng.permutation(400)]
    assert np.array_equal(coding_order(vox).perm, coding_order(vox.copy()).perm)
    with pytest.raises(DuplicateVoxelError):
        coding_order(np.array([[1, 2, 3], [0, 0, 0], [1, 2, 3]]))


def test_first_anchor_empty_sparse():
    _, order = scene_coding_order(synth_scene(SynthSpec(50, seed=1)))
    ctx = select_context(0, order)
    assert len(ctx) == 0 and not ctx.dense and ctx.candidates == 0


@pytest.mark.parametrize("m,dense", [(DEFAULT_N - 1, False), (DEFAULT_N, False),
                                     (DEFAULT_N + 1, True)])
def test_threshold_boundary(m, dense):
    vox = lattice_with_candidates(m)
    order = coding_order(vox)
    t = len(order) - 1
    assert order.voxels[t].tolist() == [40, 40, 40]
    ctx = select_context(t, order)
    assert ctx.candidates == m and ctx.dense is dense
    assert len(ctx) == min(m, DEFAULT_N)


def test_context_set_fields():
    _, order = scene_coding_order(synth_scene(SynthSpec(2000, seed=3, pattern="clustered")))
    table = select_contexts(order)
    for t in (5, 500, 1999):
        ctx = table.get(t)
        assert np.all(ctx.neighbors < t)
        assert np.array_equal(ctx.offsets, order.voxels[ctx.neighbors] - order.voxels[t])
        assert np.allclose(ctx.distances, np.linalg.norm(ctx.offsets, axis=1))
        assert np.all(np.diff(ctx.distances) >= 0)


def test_matches_bruteforce_random_scene():
    scene = synth_scene(SynthSpec(3000, seed=4, pattern="clustered"))
    _, order = scene_coding_order(scene)
    table = select_contexts(order)
    ref = brute_contexts(order.voxels, half_extent(DEFAULT_RF), DEFAULT_N)
    for t, (nb, cand) in enumerate(ref):
        assert table.neighbors[t, :table.counts[t]].tolist() == nb
        assert table.candidates[t] == cand


@given(st.integers(0, 2 ** 31), st.integers(2, 40), st.integers(1, 9), st.integers(1, 12))
def test_bruteforce_property_on_dense_lattices(seed, count, rf, n):
    # a tiny box forces many equal distances
    rng = np.random.default_rng(seed)
    vox = np.unique(rng.integers(0, 6, (count, 3)), axis=0)
    order = coding_order(vox[rng.permutation(len(vox))])
    table = select_contexts(order, rf, n)
    for t, (nb, cand) in enumerate(brute_contexts(order.voxels, half_extent(rf), n)):
        assert table.neighbors[t, :table.counts[t]].tolist() == nb
        assert table.candidates[t] == cand
        assert table.dense[t] == (cand > n)


def test_context_stats():
    one = coding_order(np.array([[0, 0, 0]]))
    assert context_stats(one) == (0.0, 0, 1.0)
    empty = CodingOrder(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64))
    assert context_stats(empty) == (0.0, 0, 1.0)
    _, order = scene_coding_order(synth_scene(SynthSpec(5000, seed=5, pattern="clustered")))
    avg, mx, sparse = context_stats(order)
    table = select_contexts(order)
    assert mx <= DEFAULT_N
    assert avg == pytest.approx(table.counts.mean())
    assert sparse == pytest.approx(np.mean(table.candidates <= DEFAULT_N))


def test_adding_anchor_keeps_strictly_nearer_neighbours():
    rng = np.random.default_rng(6)
    vox = np.unique(rng.integers(0, 12, (900, 3)), axis=0)
    base = select_contexts(coding_order(vox), 9, 8)
    free = np.array([v for v in np.ndindex(12, 12, 12) if not (vox == v).all(axis=1).any()])
    extra = free[rng.integers(len(free))]
    grown_order = coding_order(np.vstack([vox, extra]))
    grown = select_contexts(grown_order, 9, 8)
    old_order = coding_order(vox)
    key_old = {tuple(v): r for r, v in enumerate(old_order.voxels.tolist())}
    for r_new, v in enumerate(grown_order.voxels.tolist()):
        if tuple(v) == tuple(extra.tolist()):
            continue
        r_old = key_old[tuple(v)]
        if not base.dense[r_old]:
            continue
        kept_new = {tuple(grown_order.voxels[x]) for x in grown.neighbors[r_new, :grown.counts[r_new]]}
        old_sel = base.neighbors[r_old, :base.counts[r_old]]
        d_old = ((old_order.voxels[old_sel] - old_order.voxels[r_old]) ** 2).sum(axis=1)
        d_extra = ((extra - old_order.voxels[r_old]) ** 2).sum()
        for x, d2 in zip(old_sel, d_old):
            if d2 < d_extra:
                assert tuple(old_order.voxels[x]) in kept_new


def test_location_quantization_round_trip():
    aabb = np.array([[-1.0, 0.0, 2.0], [1.0, 5.0, 2.5]])
    x = np.array([[-1.0, 0.0, 2.0], [1.0, 5.0, 2.5], [0.1, 2.2, 2.31]])
    q = quantize_locations(x, aabb)
    assert q.dtype == np.uint16 and q[0].tolist() == [0, 0, 0] and q[1].tolist() == [65535] * 3
    back = dequantize_locations(q, aabb)
    assert np.all(back <= aabb[1]) and np.all(np.abs(back - x) <= (aabb[1] - aabb[0]) / 65535)


def test_half_extent():
    assert half_extent(25) == 12
    with pytest.raises(ValueError):
        half_extent(0)
