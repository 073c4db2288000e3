import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import history_rows, pairwise_violations, zlevel_drop
from rcqlpack.env import (
    PackAction,
    check_invariants,
    drop_height,
    gap_ratio,
    observe,
    packed_features,
    replay,
    reset,
    step,
    unpacked_features,
)
from rcqlpack.errors import (
    EpisodeCompleteError,
    InstanceError,
    InvalidActionError,
    UndefinedMetricError,
    ValidationFailure,
)
from rcqlpack.geometry import BinSpec, BoxDims, rotate
from rcqlpack.rollout import random_action

B3 = BinSpec(10.0, 10.0, 128, 3)


def cubes(n, s=1.0):
    return [(s, s, s)] * n


def test_reset_capacity_and_pending():
    st_ = reset(cubes(40), B3, n_u=20)
    assert st_.mask.sum() == 20 and len(st_.pending) == 20
    assert st_.height == 0.0 and st_.gap == 0.0


def test_reset_shortfall_masks_slots():
    st_ = reset(cubes(5), B3, n_u=20)
    assert st_.mask.sum() == 5 and (~st_.mask).sum() == 15


def test_online_has_one_candidate():
    st_ = reset(cubes(5), B3, "online")
    assert st_.n_u == 1 and st_.mask.tolist() == [True]


def test_reset_rejects_unplaceable_box():
    with pytest.raises(InstanceError):
        reset([(11.0, 12.0, 13.0)], B3)


def test_drop_height_examples():
    b = BinSpec(10.0, 10.0, 10, 3)
    st_ = reset([(2, 2, 1), (2, 2, 1)], b)
    assert drop_height(st_, 1.0, 1.0, BoxDims(2, 2, 1)) == 0.0
    step(st_, PackAction(0, 0, 0, 0))
    assert drop_height(st_, 1.0, 1.0, BoxDims(2, 2, 1)) == 1.0
    assert drop_height(st_, 2.0, 0.0, BoxDims(2, 2, 1)) == 0.0


def test_reward_examples_in_2x2_bin():
    b = BinSpec(2.0, 2.0, 2, 3)
    st_ = reset(cubes(8), b, n_u=8)
    out = step(st_, PackAction(0, 0, 0, 0))
    assert st_.gap == 3.0 and out.reward == -3.0
    out = step(st_, PackAction(1, 0, 1, 0))
    assert out.new_height == 1.0 and st_.gap == 2.0 and out.reward == 1.0


def test_gap_ratio_examples():
    b = BinSpec(2.0, 2.0, 2, 3)
    st_ = reset(cubes(8), b, n_u=8)
    with pytest.raises(UndefinedMetricError):
        gap_ratio(st_)
    step(st_, PackAction(0, 0, 0, 0))
    assert gap_ratio(st_) == pytest.approx(75.0)
    k = 1
    for z in range(2):
        for x in range(2):
            for y in range(2):
                if (z, x, y) == (0, 0, 0):
                    continue
                step(st_, PackAction(k, 0, x, y))
                k += 1
    assert st_.done and st_.height == 2.0
    assert gap_ratio(st_) == pytest.approx(0.0)


def test_masked_selection_raises():
    st_ = reset(cubes(2), B3, n_u=4)
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(3, 0, 0, 0))
    step(st_, PackAction(0, 0, 0, 0))
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(0, 0, 0, 0))  # slot 0 is now exhausted


def test_invalid_rotation_and_slots_raise():
    st_ = reset(cubes(2), B3)
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(0, 6, 0, 0))
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(0, 0, 128, 0))
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(0, 0, 0, -1))


def test_rotation_exceeding_footprint_raises():
    st_ = reset([(1.0, 1.0, 12.0)], B3)
    with pytest.raises(InvalidActionError):
        step(st_, PackAction(0, 5, 0, 0))  # (h, l, w): w = 12 > W
    step(st_, PackAction(0, 0, 0, 0))


def test_step_after_done_raises():
    st_ = reset(cubes(1), B3)
    step(st_, PackAction())
    with pytest.raises(EpisodeCompleteError):
        step(st_, PackAction())


def test_online_ignores_select():
    st_ = reset([(1, 2, 3), (3, 2, 1)], B3, "online")
    out = step(st_, PackAction(select=7, rotation=0))
    assert out.placement.dims == BoxDims(1, 2, 3)
    assert st_.slots.tolist() == [1]


def test_refill_takes_next_pending():
    st_ = reset([(1, 1, 1), (2, 2, 2), (3, 3, 3)], B3, n_u=2)
    step(st_, PackAction(0, 0, 0, 0))
    assert st_.slots.tolist() == [2, 1]


def test_position_is_clamped():
    st_ = reset([(3.0, 4.0, 1.0)], B3)
    p = step(st_, PackAction(0, 0, 127, 127)).placement
    assert (p.x, p.y) == (7.0, 6.0)


def test_2d_episode_uses_full_depth():
    b = BinSpec(10.0, 6.0, 16, 2)
    st_ = reset([(2.0, 3.0), (4.0, 1.0)], b)
    p = step(st_, PackAction(0, 1, 0, 99)).placement  # pos_y ignored in 2D
    assert p.dims == BoxDims(3.0, 6.0, 2.0) and p.y == 0.0


def test_check_invariants_flags_corruption():
    st_ = reset(cubes(2), B3)
    step(st_, PackAction(0, 0, 0, 0))
    step(st_, PackAction(1, 0, 50, 0))
    assert check_invariants(st_) == (0, 0, 0)
    st_.hz[1] = 0.5  # floating box
    with pytest.raises(ValidationFailure):
        check_invariants(st_)


def test_observation_phases():
    st_ = reset([(1.0, 2.0, 3.0), (2.0, 2.0, 2.0)], B3)
    sel = observe(st_, "select")
    assert sel.packed.shape == (0, 6) and sel.mask.sum() == 2
    rot = observe(st_, "rotate", select=0)
    np.testing.assert_allclose(rot.current, np.array([1.0, 2.0, 3.0]) * 0.2)
    pos = observe(st_, "position", select=0, rotation=3)
    want = np.array(rotate(BoxDims(1.0, 2.0, 3.0), 3).as_tuple()) * 0.2
    np.testing.assert_allclose(pos.current, want)
    with pytest.raises(InvalidActionError):
        observe(st_, "rotate", select=5)


def test_packed_features_normalisation():
    b = BinSpec(10.0, 20.0, 10, 3)
    st_ = reset([(2.0, 4.0, 3.0), (10.0, 20.0, 1.0)], b)
    step(st_, PackAction(0, 0, 0, 0))
    step(st_, PackAction(1, 0, 0, 0))
    f = packed_features(st_)
    # lengths scaled by 2/W; x in [-1, 1]; y in [-L/W, L/W]; z relative to the current height
    np.testing.assert_allclose(f[0], [0.4, 0.8, 0.6, -1.0, -2.0, -0.8])
    np.testing.assert_allclose(f[1], [2.0, 4.0, 0.2, -1.0, -2.0, -0.2])
    u, m = unpacked_features(st_)
    assert not m.any() and np.all(u == 0)


def random_episode(seed, n, dim, mode, n_u=20, n_p=20):
    rng = np.random.default_rng(seed)
    b = BinSpec(10.0, 10.0, 32, dim)
    boxes = rng.uniform(0.2, 4.0, (n, 3 if dim == 3 else 2))
    st_ = reset(boxes, b, mode, n_p=n_p, n_u=n_u)
    rewards, actions = [], []
    while not st_.done:
        a = random_action(st_, rng)
        rewards.append(step(st_, a).reward)
        actions.append(a)
    return st_, rewards, actions


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.sampled_from([2, 3]), st.sampled_from(["offline", "online"]))
def test_random_episode_invariants(seed, n, dim, mode):
    st_, rewards, _ = random_episode(seed, n, dim, mode)
    rows = history_rows(st_)
    assert pairwise_violations(rows, 10.0, 10.0) == (0, 0, 0)
    assert check_invariants(st_) == (0, 0, 0)
    vol = sum(w * l * h for *_, w, l, h in rows)
    assert abs(sum(rewards) - (-100.0 * st_.height + vol)) < 1e-6
    assert st_.height == max(z + h for _, _, z, _, _, h in rows)
    assert 0.0 <= gap_ratio(st_) < 100.0


@given(st.integers(0, 2**32 - 1))
def test_drop_matches_zlevel_oracle(seed):
    rng = np.random.default_rng(seed)
    st_ = reset(rng.uniform(0.2, 4.0, (25, 3)), B3, n_u=5)
    while not st_.done:
        a = random_action(st_, rng)
        placed = history_rows(st_)
        p = step(st_, a).placement
        assert p.z == zlevel_drop(placed, p.x, p.y, p.dims.w, p.dims.l)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 30))
def test_fifo_freshness(seed, n_p, n):
    st_, _, _ = random_episode(seed, n, 3, "offline", n_p=n_p)
    assert list(st_.packed) == list(range(max(0, n - n_p), n))


@given(st.integers(0, 2**32 - 1))
def test_replay_is_deterministic(seed):
    st_, _, actions = random_episode(seed, 12, 3, "offline", n_u=4)
    again = replay(st_.boxes, st_.bin, actions, "offline", n_u=4)
    assert history_rows(again) == history_rows(st_)
