import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ena import numerics as nx
from ena import scan as S
from ena.errors import GeometryError, InvariantViolation, MixerContractError
from ena.scan import Permutation, ScanPlan

HARD_KINDS = ("uni", "switch", "flip", "shift1d", "shift2d", "random", "multi_head_bi", "multi_head_2d",
              "bi", "cross")
ROUND_TRIP_KINDS = ("uni", "multi_head_bi", "multi_head_2d", "bi", "cross")

grids_2d = st.tuples(st.integers(1, 9), st.integers(1, 9))


def identity(x):
    return x


def seq(grid, batch=2, d=4, seed=0):
    n = math.prod(grid)
    return np.random.default_rng(seed).standard_normal((batch, n, d))


# ---------------------------------------------------------------------------
# primitive orderings


def test_flip_reverses():
    assert list(S.build_permutation(ScanPlan("flip", (4,))).indices) == [3, 2, 1, 0]


def test_transpose_reads_column_major():
    assert list(S.transpose_2d((2, 3)).indices) == [0, 3, 1, 4, 2, 5]


def test_shift2d_matches_nested_loop_oracle():
    p = S.build_permutation(ScanPlan("shift2d", (3, 3), shift=1))
    oracle = []
    for r in range(3):
        for c in range(3):
            oracle.append(((r + 1) % 3) * 3 + (c + 1) % 3)
    assert list(p.indices) == oracle


def test_shift1d_is_circular():
    assert list(S.build_permutation(ScanPlan("shift1d", (5,), shift=2)).indices) == [2, 3, 4, 0, 1]


def test_oversized_shift_wraps_with_warning():
    with pytest.warns(UserWarning, match="reduced modulo"):
        p = S.build_permutation(ScanPlan("shift1d", (5,), shift=7))
    assert p == S.shift_1d(5, 2)
    with pytest.warns(UserWarning):
        S.build_permutation(ScanPlan("shift2d", (3, 4), shift=3))


@pytest.mark.parametrize("kind", ["shift2d", "multi_head_2d", "cross", "switch"])
def test_2d_kinds_reject_other_grids(kind):
    plan = ScanPlan(kind, (8,))
    with pytest.raises(GeometryError):
        S.build_permutation(plan)


def test_switch_alternates_with_layer_index():
    plan = ScanPlan("switch", (2, 3))
    assert S.build_permutation(plan.with_layer(1)) == S.reversal(6)
    assert S.build_permutation(plan.with_layer(2)) == S.transpose_2d((2, 3))


def test_cross_and_bi_pass_sets():
    col = S.transpose_2d((2, 3))
    views = [S.build_permutation(ScanPlan("cross", (2, 3)), i) for i in range(4)]
    assert views[0].is_identity() and views[1] == S.reversal(6)
    assert views[2] == col and list(views[3].indices) == list(col.indices[::-1])
    bi = [S.build_permutation(ScanPlan("bi", (6,)), i) for i in range(2)]
    assert bi[0].is_identity() and bi[1] == S.reversal(6)


def test_multi_head_2d_groups_cycle_through_directions():
    plan = ScanPlan("multi_head_2d", (3, 3), head_groups=8)
    dirs = S.cross_directions((3, 3))
    for g in range(8):
        assert S.build_permutation(plan, group=g) == dirs[g % 4]


def test_pass_index_out_of_range():
    with pytest.raises(ValueError):
        S.build_permutation(ScanPlan("bi", (4,)), pass_index=2)


def test_random_scan_is_seeded():
    a = S.build_permutation(ScanPlan("random", (6, 6), seed=3))
    b = S.build_permutation(ScanPlan("random", (6, 6), seed=3))
    assert a == b


def test_random_scan_seeds_differ():
    perms = {S.fisher_yates(12, seed).indices.tobytes() for seed in range(100)}
    assert len(perms) >= 99


# ---------------------------------------------------------------------------
# permutations


def test_invert_identity_and_reversal():
    assert S.invert(Permutation.identity(5)).is_identity()
    assert list(S.invert(S.reversal(4)).indices) == [3, 2, 1, 0]


def test_invert_random_composes_to_identity():
    p = S.fisher_yates(97, seed=11)
    assert S.compose(p, S.invert(p)).is_identity()
    assert S.compose(S.invert(p), p).is_identity()


def test_non_bijection_is_rejected():
    with pytest.raises(InvariantViolation):
        Permutation(np.array([0, 0, 2]))


@given(grids_2d, st.sampled_from(HARD_KINDS), st.integers(0, 20), st.integers(0, 1000))
def test_every_plan_is_bijective(grid, kind, shift, seed):
    plan = ScanPlan(kind, grid, shift=shift, seed=seed, head_groups=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(plan.num_passes):
            for g in range(plan.head_groups):
                p = S.build_permutation(plan, i, group=g)
                assert np.array_equal(np.sort(p.indices), np.arange(plan.length))


@given(st.integers(1, 200), st.integers(0, 10_000))
def test_inverse_property(n, seed):
    p = S.fisher_yates(n, seed)
    x = np.arange(n)
    assert np.array_equal(S.invert(p).apply(p.apply(x, axis=0), axis=0), x)


# ---------------------------------------------------------------------------
# applying plans


def test_uni_is_plain_mixing():
    x = seq((3, 3))
    out = S.apply_single_pass(ScanPlan("uni", (3, 3)), x, lambda t: t * 2.0 + 1.0)
    assert np.array_equal(out.numpy(), x * 2.0 + 1.0)


def test_flip_has_no_post_op():
    x = np.array([[[1.0], [2.0], [3.0]]])
    out = S.apply_single_pass(ScanPlan("flip", (3,)), x, identity)
    assert out.numpy()[0, :, 0].tolist() == [3.0, 2.0, 1.0]


def test_post_only_kinds_permute_after_mixing():
    x = seq((2, 3))
    plan = ScanPlan("shift1d", (2, 3), shift=1)
    out = S.apply_single_pass(plan, x, lambda t: t * 3.0)
    assert np.array_equal(out.numpy(), np.roll(x * 3.0, -1, axis=1))


@pytest.mark.parametrize("kind", ROUND_TRIP_KINDS)
@given(grid=st.tuples(st.integers(2, 7), st.integers(2, 7)), seed=st.integers(0, 1000))
def test_identity_mixer_round_trip(kind, grid, seed):
    x = seq(grid, d=4, seed=seed)
    plan = ScanPlan(kind, grid, head_groups=2 if kind.startswith("multi") else 1)
    assert np.array_equal(S.apply_scan(plan, x, identity).numpy(), x)


def test_headwise_mixer_receives_group_orderings():
    seen = {}

    def mixer(t, head_perms=None):
        seen["perms"] = head_perms
        return t

    mixer.headwise, mixer.num_heads = True, 4
    x = seq((3, 3))
    S.apply_single_pass(ScanPlan("multi_head_bi", (3, 3), head_groups=2), x, mixer)
    perms = seen["perms"]
    assert [p.is_identity() for p in perms] == [True, True, False, False]


def test_bi_with_flip_mixer_matches_composition_oracle():
    x = seq((6,), batch=1)
    rev = S.reversal(6)

    def flip_mixer(t):
        return rev.apply(t, axis=-2)

    out = S.apply_multi_pass(ScanPlan("bi", (6,)), x, flip_mixer).numpy()
    # pass 0: flip(x); pass 1: invert(rev)(flip(rev(x))) = rev(rev(rev(x))) = flip(x)
    view0 = rev.apply(x, axis=-2)
    view1 = S.invert(rev).apply(rev.apply(rev.apply(x, axis=-2), axis=-2), axis=-2)
    assert np.array_equal(out, (view0 + view1) / 2)


@given(st.floats(-4, 4, allow_nan=False), st.sampled_from(["bi", "cross"]))
def test_multi_pass_commutes_with_scaling(alpha, kind):
    x = seq((3, 4))
    w = np.random.default_rng(5).standard_normal((4, 4))

    def linear(t):
        return t @ w

    plan = ScanPlan(kind, (3, 4))
    a = S.apply_multi_pass(plan, x * alpha, linear).numpy()
    b = S.apply_multi_pass(plan, x, linear).numpy() * alpha
    assert np.allclose(a, b, atol=1e-12)


def test_mixer_contract_violation():
    with pytest.raises(MixerContractError):
        S.apply_scan(ScanPlan("flip", (4,)), seq((4,)), lambda t: t[:, :2])


def test_single_and_multi_pass_preconditions():
    with pytest.raises(ValueError):
        S.apply_single_pass(ScanPlan("bi", (4,)), seq((4,)), identity)
    with pytest.raises(ValueError):
        S.apply_multi_pass(ScanPlan("flip", (4,)), seq((4,)), identity)


def test_plan_length_must_match_sequence():
    with pytest.raises(GeometryError):
        S.apply_scan(ScanPlan("flip", (5,)), seq((4,)), identity)


# ---------------------------------------------------------------------------
# learnable scan


def test_soft_permutation_near_identity_init():
    soft = S.gumbel_soft_permutation(S.near_identity_logits(16, scale=60.0), 1.0, seed=0)
    m = soft.matrix.numpy()
    assert np.max(np.abs(m - np.diag(np.diag(m)))) < 1e-6


@given(st.integers(2, 12), st.floats(0.05, 5.0), st.integers(0, 1000))
def test_soft_permutation_rows_are_stochastic(n, temperature, seed):
    logits = np.random.default_rng(seed).standard_normal((n, n))
    m = S.gumbel_soft_permutation(logits, temperature, seed).matrix.numpy()
    assert np.allclose(m.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(m >= 0)


def test_soft_permutation_is_deterministic():
    logits = np.random.default_rng(0).standard_normal((6, 6))
    a = S.gumbel_soft_permutation(logits, 0.5, seed=9).matrix.numpy()
    b = S.gumbel_soft_permutation(logits, 0.5, seed=9).matrix.numpy()
    assert np.array_equal(a, b)


def test_soft_permutation_may_repeat_tokens():
    logits = np.zeros((5, 5))
    logits[:, 2] = 50.0
    sel = S.gumbel_soft_permutation(logits, 0.01, seed=0).hard_selection()
    assert list(sel) == [2] * 5


def test_soft_permutation_temperature_must_be_positive():
    with pytest.raises(ValueError):
        S.gumbel_soft_permutation(np.eye(3), 0.0, seed=0)


def test_learnable_scan_passes_gradient_to_logits():
    x = seq((2, 2), batch=1)
    logits = nx.Tensor(S.near_identity_logits(4, scale=1.0), requires_grad=True)
    with nx.GradTape() as tape:
        y = S.apply_single_pass(ScanPlan("learnable", (2, 2)), x, lambda t: t * 2.0, logits=logits)
        loss = (y * y).sum()
    g = nx.backward(loss, tape)[logits]
    assert np.abs(g).sum() > 0


def test_plan_dict_round_trip():
    plan = ScanPlan("shift2d", (4, 4), shift=7, seed=2)
    assert ScanPlan.from_dict(plan.to_dict()) == plan


def test_plan_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ScanPlan("zigzag", (4, 4))
