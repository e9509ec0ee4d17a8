import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trgkd.errors import ConfigError, UsageError
from trgkd.tensor import Tensor
from trgkd.tokens import (
    apply_plan,
    feasible_patch_counts,
    make_sampling_plan,
    patch_feature_map,
    patch_image,
    patch_size_for,
    patchify,
    unpatchify,
)


def test_patch_counts_and_dims():
    tokens = patch_image(np.zeros((3, 32, 32)), 4)
    assert tokens.shape == (64, 48)


def test_single_patch_is_the_flattened_image(rng):
    img = rng.standard_normal((1, 5, 5))
    tokens = patch_image(img, 5)
    assert tokens.shape == (1, 25)
    np.testing.assert_array_equal(tokens.data[0], img.reshape(-1))


def test_arange_image_patches_in_raster_order():
    img = np.arange(16.0).reshape(1, 4, 4)
    tokens = patch_image(img, 2).data
    np.testing.assert_array_equal(tokens, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])
    # reassemble by hand from the raster layout
    rebuilt = np.zeros((4, 4))
    for m, row in enumerate(tokens):
        r, c = divmod(m, 2)
        rebuilt[2 * r:2 * r + 2, 2 * c:2 * c + 2] = row.reshape(2, 2)
    np.testing.assert_array_equal(rebuilt, img[0])


def test_channel_is_the_fastest_axis_within_a_patch():
    img = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    np.testing.assert_array_equal(patch_image(img, 2).data[0], [0, 1, 0, 1, 0, 1, 0, 1])


def test_indivisible_patch_is_config_error():
    with pytest.raises(ConfigError):
        patch_image(np.zeros((1, 6, 6)), 4)


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 10**6))
def test_unpatchify_inverts_patchify(b, c, p, g, seed):
    x = np.random.default_rng(seed).standard_normal((b, c, p * g, p * (g + 1)))
    back = unpatchify(patchify(x, p), p, c, p * g, p * (g + 1))
    np.testing.assert_array_equal(back, x)


def test_patch_size_for_feature_maps():
    assert patch_size_for(8, 8, 16) == 2
    assert patch_size_for(4, 4, 16) == 1
    assert patch_size_for(4, 4, 1) == 4
    assert sorted(feasible_patch_counts(4, 4)) == [1, 4, 16]


def test_infeasible_target_lists_options():
    with pytest.raises(ConfigError, match=r"\[1, 4, 16\]"):
        patch_size_for(4, 4, 3)


def test_patch_feature_map_teacher_student_alignment(rng):
    t = patch_feature_map(rng.standard_normal((2, 3, 8, 8)), 16)
    s = patch_feature_map(rng.standard_normal((2, 5, 4, 4)), 16)
    assert t.shape == (2, 16, 12) and s.shape == (2, 16, 5)


# -- sampling plan --------------------------------------------------------------


def test_even_split():
    assert make_sampling_plan(4, 16, 8, seed=0).counts == [2, 2, 2, 2]


def test_remainder_goes_to_first_instances():
    assert make_sampling_plan(3, 16, 7, seed=0).counts == [3, 2, 2]


def test_budget_too_large():
    with pytest.raises(ConfigError):
        make_sampling_plan(2, 4, 9, seed=0)


def test_same_seed_same_plan_and_different_seeds_differ():
    a = make_sampling_plan(4, 16, 8, seed=7)
    b = make_sampling_plan(4, 16, 8, seed=7)
    assert a.pairs() == b.pairs()
    differ = sum(make_sampling_plan(4, 16, 8, seed=s).pairs() != a.pairs() for s in range(100, 200))
    assert differ >= 99


@given(st.integers(1, 12), st.integers(1, 20), st.data())
def test_plan_contract(b, m, data):
    s = data.draw(st.integers(1, b * m))
    plan = make_sampling_plan(b, m, s, seed=data.draw(st.integers(0, 2**32 - 1)))
    counts = plan.counts
    assert sum(counts) == s and max(counts) - min(counts) <= 1
    for ix in plan.indices:
        assert len(set(ix.tolist())) == len(ix)
        assert list(ix) == sorted(ix) and all(0 <= i < m for i in ix)


def test_full_plan_is_a_reshape(rng):
    x = rng.standard_normal((2, 4, 3))
    tb = apply_plan(x, make_sampling_plan(2, 4, 8, seed=1))
    np.testing.assert_array_equal(tb.tokens.data, x.reshape(8, 3))


def test_one_token_each():
    tb = apply_plan(np.zeros((2, 5, 3)), make_sampling_plan(2, 5, 2, seed=0))
    assert tb.size == 2 and tb.instance_index.tolist() == [0, 1]


def test_shared_plan_selects_matching_positions(rng):
    plan = make_sampling_plan(3, 16, 10, seed=4)
    tt = apply_plan(rng.standard_normal((3, 16, 12)), plan, "teacher")
    ts = apply_plan(rng.standard_normal((3, 16, 5)), plan, "student")
    assert tt.instance_index.tolist() == ts.instance_index.tolist()
    # mark each token with its (instance, patch) position and read it back
    pos = np.array([[[b, m] for m in range(16)] for b in range(3)], dtype=float)
    picked = apply_plan(pos, plan).tokens.data.astype(int).tolist()
    assert [tuple(p) for p in picked] == plan.pairs()


def test_apply_plan_shape_mismatch():
    with pytest.raises(UsageError):
        apply_plan(Tensor(np.zeros((2, 4, 3))), make_sampling_plan(3, 4, 3, seed=0))
