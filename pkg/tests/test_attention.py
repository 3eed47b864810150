import itertools
import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ena import attention as A
from ena.attention import EMPTY, FULL, MIXED, WindowSpec
from ena.errors import GeometryError
from ena.numerics import DegenerateRowError
from oracles import attention_oracle

GOLDEN = Path(__file__).parent / "golden"


def rule_mask(kind, spec):
    """Membership written from the geometry rule, one query-key pair at a time, in row-major order."""
    coords = list(itertools.product(*[range(g) for g in spec.grid]))
    length = len(coords)
    mask = np.zeros((length, length), dtype=bool)
    for a, qc in enumerate(coords):
        for b, kc in enumerate(coords):
            ok = True
            for d, (g, w, t) in enumerate(zip(spec.grid, spec.window, spec.tile)):
                if kind in ("block_1d", "block_nd"):
                    ok &= qc[d] // w == kc[d] // w
                elif kind in ("swa_1d", "swa_nd"):
                    lo = min(max(qc[d] - (w - 1) // 2, 0), g - w)
                    ok &= lo <= kc[d] < lo + w
                elif kind == "sta_nd":
                    n_tiles, span = g // t, w // t
                    lo = min(max(qc[d] // t - (span - 1) // 2, 0), n_tiles - span)
                    ok &= lo <= kc[d] // t < lo + span
            mask[a, b] = ok
    return mask


def row_major(kind, spec):
    mask = A.build_dense_mask(kind, spec)
    inv = np.argsort(A.layout_permutation(spec))
    return mask[np.ix_(inv, inv)]


# ---------------------------------------------------------------------------
# sparsity arithmetic


@pytest.mark.parametrize("grid,window,expected", [
    ((32, 32), (24, 12), 0.71875),
    ((64, 64), (48, 24), 0.71875),
    ((32, 16, 16), (24, 12, 12), 0.578125),
])
def test_golden_sparsity(grid, window, expected):
    assert A.sparsity("sta_nd", WindowSpec(grid, window)) == expected


def test_3d_sparsity_matches_dense_count():
    spec = WindowSpec((32, 16, 16), (24, 12, 12), (8, 4, 4))
    mask = A.build_dense_mask("sta_nd", spec)
    assert int(mask.sum()) == 3456 * 8192
    assert A.sparsity("sta_nd", spec) == 1 - mask.sum() / 8192 ** 2


@pytest.mark.parametrize("kind", ["swa_nd", "sta_nd", "block_nd"])
def test_window_equal_to_grid_has_zero_sparsity(kind):
    spec = WindowSpec((8, 4), (8, 4), (2, 2))
    assert A.sparsity(kind, spec) == 0.0
    assert A.build_dense_mask(kind, spec).all()


def test_full_mask():
    assert A.build_dense_mask("full", WindowSpec((4,))).all()
    assert A.build_dense_mask("full", WindowSpec((4,))).shape == (4, 4)


def test_sta_with_window_equal_to_tile_is_block_attention():
    spec = WindowSpec((4, 4), (2, 2), (2, 2))
    assert np.array_equal(A.build_dense_mask("sta_nd", spec), A.build_dense_mask("block_nd", spec))


# ---------------------------------------------------------------------------
# geometry rules


SMALL_SPECS = [
    ("swa_1d", WindowSpec((9,), (4,))),
    ("block_1d", WindowSpec((8,), (4,))),
    ("swa_nd", WindowSpec((5, 6), (3, 4))),
    ("block_nd", WindowSpec((4, 6), (2, 3))),
    ("sta_nd", WindowSpec((6, 4), (4, 2), (2, 2))),
    ("sta_nd", WindowSpec((4, 6, 2), (2, 6, 2), (2, 3, 1))),
    ("swa_nd", WindowSpec((3, 4, 5), (2, 3, 3))),
]


@pytest.mark.parametrize("kind,spec", SMALL_SPECS)
def test_dense_mask_matches_pairwise_rule(kind, spec):
    assert np.array_equal(row_major(kind, spec), rule_mask(kind, spec))


@pytest.mark.parametrize("kind,spec", [s for s in SMALL_SPECS if s[0] in ("swa_1d", "swa_nd", "sta_nd")])
def test_every_query_sees_window_volume(kind, spec):
    counts = A.build_dense_mask(kind, spec).sum(axis=1)
    assert np.all(counts == math.prod(spec.window))


def test_even_window_extends_toward_higher_coordinates():
    row = row_major("swa_1d", WindowSpec((10,), (4,)))[5]
    assert np.nonzero(row)[0].tolist() == [4, 5, 6, 7]


def test_border_windows_are_shifted_inward():
    mask = row_major("swa_1d", WindowSpec((10,), (5,)))
    assert np.nonzero(mask[0])[0].tolist() == [0, 1, 2, 3, 4]
    assert np.nonzero(mask[9])[0].tolist() == [5, 6, 7, 8, 9]


def reflect(spec):
    coords = np.array(list(itertools.product(*[range(g) for g in spec.grid])))
    flipped = np.array(spec.grid) - 1 - coords
    return np.ravel_multi_index(flipped.T, spec.grid)


@pytest.mark.parametrize("kind,spec", [
    ("swa_nd", WindowSpec((7, 6), (3, 5))),
    ("sta_nd", WindowSpec((8, 6), (6, 2), (2, 2))),
    ("swa_nd", WindowSpec((4, 5, 3), (3, 3, 1))),
])
def test_reflection_symmetry(kind, spec):
    mask = row_major(kind, spec)
    r = reflect(spec)
    assert np.array_equal(mask, mask[np.ix_(r, r)])


@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 9), st.integers(1, 9))
def test_growing_window_only_adds_pairs(h, w, a, b):
    a, b = min(a, h), min(b, w)
    small = A.build_dense_mask("swa_nd", WindowSpec((h, w), (a, b)))
    big_w = (min(a + 2, h), min(b + 2, w))
    big = A.build_dense_mask("swa_nd", WindowSpec((h, w), big_w))
    assert not np.any(small & ~big)
    assert A.sparsity("swa_nd", WindowSpec((h, w), big_w)) <= A.sparsity("swa_nd", WindowSpec((h, w), (a, b)))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_block_mask_is_inside_wide_enough_swa(bh, bw, nh, nw):
    grid = (bh * nh, bw * nw)
    block = A.build_dense_mask("block_nd", WindowSpec(grid, (bh, bw)))
    window = (min(2 * bh - 1, grid[0]), min(2 * bw - 1, grid[1]))
    swa = A.build_dense_mask("swa_nd", WindowSpec(grid, window))
    assert not np.any(block & ~swa)


@pytest.mark.parametrize("kind,spec,match", [
    ("swa_nd", WindowSpec((4, 4), (5, 2)), "exceeds"),
    ("block_nd", WindowSpec((6, 6), (4, 3)), "does not divide"),
    ("sta_nd", WindowSpec((8, 8), (3, 4), (2, 2)), "multiple of tile"),
    ("sta_nd", WindowSpec((8, 8), (4, 4), (2, 2), kernel_block=8), "kernel_block"),
    ("swa_1d", WindowSpec((4, 4), (2, 2)), "1D"),
    ("swa_nd", WindowSpec((6, 6), (2, 2), (4, 1)), "tile"),
    ("sta_nd", WindowSpec((16, 16), (4, 4), (2, 2), strict=True), "128"),
])
def test_invalid_specs_raise_geometry_errors(kind, spec, match):
    with pytest.raises(GeometryError, match=match):
        A.build_dense_mask(kind, spec)


def test_spec_rank_and_positivity():
    with pytest.raises(GeometryError):
        WindowSpec((4, 4), (2,))
    with pytest.raises(GeometryError):
        WindowSpec((4, 0))
    with pytest.raises(GeometryError):
        WindowSpec((2, 2, 2, 2))


# ---------------------------------------------------------------------------
# census


def test_all_true_mask_is_all_full():
    bm = A.block_census(np.ones((12, 12), dtype=bool), 4)
    assert bm.counts() == {"empty": 0, "full": 9, "mixed": 0}


def test_1d_swa_produces_mixed_blocks():
    bm = A.build_block_mask("swa_1d", WindowSpec((8,), (5,), kernel_block=4))
    assert bm.counts()["mixed"] > 0
    # Enumerated by hand from the 8x8 band: every 4x4 quadrant is partially covered.
    assert bm.census.tolist() == [[MIXED, MIXED], [MIXED, MIXED]]


def test_sta_8x8_has_no_mixed_blocks():
    bm = A.build_block_mask("sta_nd", WindowSpec((8, 8), (4, 4), (2, 2)))
    assert bm.counts()["mixed"] == 0
    assert bm.counts()["full"] > 0 and bm.counts()["empty"] > 0


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.data())
def test_sta_never_has_mixed_blocks(tiles, data):
    grid, window = [], []
    for t in tiles:
        n = data.draw(st.integers(1, 4))
        grid.append(t * n)
        window.append(t * data.draw(st.integers(1, n)))
    spec = WindowSpec(tuple(grid), tuple(window), tuple(tiles))
    assert A.build_block_mask("sta_nd", spec).counts()["mixed"] == 0


@pytest.mark.parametrize("kind,spec", SMALL_SPECS)
def test_census_reconstructs_dense_mask(kind, spec):
    mask = A.build_dense_mask(kind, spec)
    for kb in (1, 3, 4, 5):
        bm = A.block_census(mask, kb)
        assert np.array_equal(bm.to_dense(), mask)
        assert bm.sparsity() == float(1 - Fraction(int(mask.sum()), mask.size))


def test_partial_trailing_blocks_use_actual_extent():
    bm = A.block_census(np.ones((5, 5), dtype=bool), 2)
    assert bm.census.shape == (3, 3)
    assert np.all(bm.census == FULL)


def test_census_rejects_non_square():
    with pytest.raises(GeometryError):
        A.block_census(np.ones((3, 4), dtype=bool), 2)


def test_layout_json_round_trip():
    spec = WindowSpec((8, 8), (4, 4), (2, 2))
    bm = A.build_block_mask("sta_nd", spec)
    doc = bm.to_json("sta_nd", spec)
    again = A.BlockMask.from_json(json.loads(A.dumps_layout(doc)))
    assert np.array_equal(again.census, bm.census)
    assert doc["counts"] == bm.counts()


def test_layout_matches_golden_file():
    spec = WindowSpec((8, 8), (4, 4), (2, 2))
    text = A.dumps_layout(A.build_block_mask("sta_nd", spec).to_json("sta_nd", spec))
    assert text == (GOLDEN / "sta_8x8_t2x2_w4x4.json").read_text()


def test_from_json_rejects_other_documents():
    with pytest.raises(ValueError):
        A.BlockMask.from_json({"format": "something/else"})


# ---------------------------------------------------------------------------
# execution


def qkv(rng, length, d=4, batch=()):
    return tuple(rng.standard_normal(batch + (length, d)) for _ in range(3))


def test_identity_mask_returns_values(rng):
    q, k, v = qkv(rng, 6)
    out = A.masked_attention_reference(q, k, v, np.eye(6, dtype=bool)).numpy()
    assert np.allclose(out, v, atol=1e-15)


def test_identical_keys_average_values(rng):
    q, _, v = qkv(rng, 5)
    k = np.tile(rng.standard_normal(4), (5, 1))
    out = A.masked_attention_reference(q, k, v, np.ones((5, 5), dtype=bool)).numpy()
    assert np.allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-14)


def test_reference_matches_loop_oracle(rng):
    q, k, v = qkv(rng, 12)
    mask = rng.random((12, 12)) < 0.4
    mask[np.arange(12), np.arange(12)] = True
    out = A.masked_attention_reference(q, k, v, mask).numpy()
    assert np.max(np.abs(out - attention_oracle(q, k, v, mask))) < 1e-12


def test_empty_row_is_degenerate(rng):
    q, k, v = qkv(rng, 3)
    mask = np.ones((3, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(DegenerateRowError):
        A.masked_attention_reference(q, k, v, mask)
    with pytest.raises(DegenerateRowError):
        A.block_sparse_attention(q, k, v, A.block_census(mask, 1))


def test_all_full_census_equals_unmasked_attention(rng):
    q, k, v = qkv(rng, 16, batch=(2,))
    bm = A.block_census(np.ones((16, 16), dtype=bool), 4)
    stats = A.ExecutionStats()
    out = A.block_sparse_attention(q, k, v, bm, stats).numpy()
    ref = A.masked_attention_reference(q, k, v, np.ones((16, 16), dtype=bool)).numpy()
    assert np.max(np.abs(out - ref)) < 1e-12
    assert stats.visited_blocks == stats.total_blocks == 16


def test_sta_executor_visits_only_full_blocks(rng):
    spec = WindowSpec((8, 8), (4, 4), (2, 2))
    bm = A.build_block_mask("sta_nd", spec)
    q, k, v = qkv(rng, 64)
    stats = A.ExecutionStats()
    out = A.block_sparse_attention(q, k, v, bm, stats).numpy()
    ref = A.masked_attention_reference(q, k, v, A.build_dense_mask("sta_nd", spec)).numpy()
    assert np.max(np.abs(out - ref)) < 1e-10
    assert stats.visited_blocks == bm.counts()["full"]


def test_visited_fraction_tracks_block_sparsity():
    spec = WindowSpec((16, 16), (6, 6), (2, 2))
    bm = A.build_block_mask("sta_nd", spec)
    frac = bm.visited_blocks() / bm.census.size
    assert abs(frac - (1 - bm.block_sparsity())) <= 1 / bm.census.size


RANDOM_KINDS = ("full", "block_1d", "swa_1d", "block_nd", "swa_nd", "sta_nd")


def random_spec(kind, r):
    if kind in ("block_1d", "swa_1d"):
        n = int(r.integers(2, 5))
        w = int(r.integers(1, 5))
        grid = (n * w,) if kind == "block_1d" else (int(r.integers(w, 17)),)
        return WindowSpec(grid, (w,), kernel_block=int(r.integers(1, 6)))
    ndim = int(r.integers(2, 4))
    tiles = tuple(int(r.integers(1, 3)) for _ in range(ndim))
    counts = tuple(int(r.integers(1, 4)) for _ in range(ndim))
    grid = tuple(t * c for t, c in zip(tiles, counts))
    if kind == "block_nd":
        window = tiles
    elif kind == "sta_nd":
        window = tuple(t * int(r.integers(1, c + 1)) for t, c in zip(tiles, counts))
    else:
        window = tuple(int(r.integers(1, g + 1)) for g in grid)
    return WindowSpec(grid, window, tiles)


@pytest.mark.parametrize("trial", range(12))
def test_executor_reference_and_oracle_agree(trial):
    r = np.random.default_rng(trial)
    kind = RANDOM_KINDS[trial % len(RANDOM_KINDS)]
    spec = random_spec(kind, r)
    mask = A.build_dense_mask(kind, spec)
    q, k, v = qkv(r, spec.length, d=3)
    ex = A.block_sparse_attention(q, k, v, A.block_census(mask, spec.kernel_block)).numpy()
    ref = A.masked_attention_reference(q, k, v, mask).numpy()
    assert np.max(np.abs(ex - ref)) < 1e-10
    assert np.max(np.abs(ref - attention_oracle(q, k, v, mask))) < 1e-10


def test_executor_is_deterministic_and_checks_length(rng):
    bm = A.build_block_mask("swa_1d", WindowSpec((10,), (3,), kernel_block=4))
    q, k, v = qkv(rng, 10)
    a = A.block_sparse_attention(q, k, v, bm).numpy()
    b = A.block_sparse_attention(q, k, v, bm).numpy()
    assert np.array_equal(a, b)
    with pytest.raises(GeometryError):
        A.block_sparse_attention(q[:8], k[:8], v[:8], bm)


# ---------------------------------------------------------------------------
# flops


def test_full_mask_flop_ratio_is_one():
    bm = A.block_census(np.ones((16, 16), dtype=bool), 4)
    assert A.attention_flops(bm, 8) == A.full_attention_flops(16, 8)


def test_sta_flop_ratio_matches_sparsity():
    spec = WindowSpec((64, 64), (48, 24), (16, 8), kernel_block=128)
    bm = A.build_block_mask("sta_nd", spec)
    ratio = A.attention_flops(bm, 16) / A.full_attention_flops(spec.length, 16)
    assert ratio == 0.28125 == 1 - A.sparsity("sta_nd", spec)


def test_full_attention_flops_are_quadratic():
    assert A.full_attention_flops(512, 16) == 4 * A.full_attention_flops(256, 16)


def test_one_full_block_per_row():
    bm = A.build_block_mask("block_1d", WindowSpec((32,), (4,), kernel_block=4))
    assert A.attention_flops(bm, 8) / A.full_attention_flops(32, 8) == 4 / 32


def test_mixed_blocks_counted_by_true_entries():
    bm = A.build_block_mask("swa_1d", WindowSpec((8,), (5,), kernel_block=4))
    assert A.attention_flops(bm, 2) == 4 * 2 * 40
    assert A.attention_flops(bm, 2, count_mixed_as_full=True) == 4 * 2 * 64


# ---------------------------------------------------------------------------
# mixer


@pytest.mark.parametrize("kind,spec", [
    ("sta_nd", WindowSpec((4, 4), (2, 2), (2, 2))),
    ("swa_nd", WindowSpec((4, 4), (3, 3))),
    ("full", WindowSpec((4, 4))),
])
def test_mixer_executors_agree(rng, kind, spec):
    params = A.AttentionParams.init(8, 2, rng)
    layout = A.AttentionLayout(kind, spec)
    x = rng.standard_normal((2, 16, 8))
    order = rng.permutation(16)
    for o in (None, order):
        a = A.attention_mixer_forward(x, params, layout, order=o).numpy()
        b = A.attention_mixer_forward(x, params, layout, order=o, executor="dense").numpy()
        assert np.max(np.abs(a - b)) < 1e-12


def test_mixer_is_equivariant_to_stream_order(rng):
    params = A.AttentionParams.init(8, 2, rng)
    layout = A.AttentionLayout("swa_nd", WindowSpec((4, 4), (3, 3)))
    x = rng.standard_normal((1, 16, 8))
    order = rng.permutation(16)
    plain = A.attention_mixer_forward(x, params, layout).numpy()
    shuffled = A.attention_mixer_forward(x[:, order], params, layout, order=order).numpy()
    assert np.max(np.abs(shuffled - plain[:, order])) < 1e-12


def test_mixer_rejects_wrong_length(rng):
    params = A.AttentionParams.init(4, 1, rng)
    layout = A.AttentionLayout("full", WindowSpec((3, 3)))
    with pytest.raises(GeometryError):
        A.attention_mixer_forward(np.zeros((1, 8, 4)), params, layout)
    with pytest.raises(ValueError):
        A.attention_mixer_forward(np.zeros((1, 9, 4)), params, layout, executor="flash")


def test_census_codes_are_distinct():
    assert len({EMPTY, FULL, MIXED}) == 3
