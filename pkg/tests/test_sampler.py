import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwfnet.errors import DomainError, InputError, ShapeError
from gwfnet.sampler import (
    FrameSequence,
    GaussianWeightVector,
    aggregate_video,
    aggregate_window,
    gaussian_weights,
    partition_sequence,
)

PAPER_W = np.array([0.13, 0.6, 1.0, 0.6, 0.13])


def test_size_five_matches_reference_vector():
    w = gaussian_weights(5).weights
    assert np.all(np.abs(w - PAPER_W) <= 0.01)


def test_size_three_symmetric_with_unit_middle():
    w = gaussian_weights(3).weights
    assert w[1] == 1.0
    assert w[0] == w[2]


def test_size_four_closed_form():
    # centre 2.5, sigma 0.75
    w = gaussian_weights(4).weights
    p, q = math.exp(-2 / 9), math.exp(-2)
    np.testing.assert_allclose(w, [q, p, p, q], rtol=0, atol=1e-15)


@pytest.mark.parametrize("L", range(3, 9))
def test_weight_invariants(L):
    w = gaussian_weights(L).weights
    assert len(w) == L
    np.testing.assert_array_equal(w, w[::-1])
    assert np.all(w > 0) and np.all(w <= 1)
    half = w[: (L + 1) // 2]
    assert np.all(np.diff(half) > 0)
    if L % 2:
        assert w[L // 2] == 1.0
    assert abs(np.sum(gaussian_weights(L).normalized()) - 1.0) <= 1e-12


@pytest.mark.parametrize("L", [0, 2, 9, 12])
def test_window_size_domain(L):
    with pytest.raises(DomainError):
        gaussian_weights(L)


def test_override_flag_allows_other_sizes():
    assert gaussian_weights(9, allow_any_size=True).window_size == 9


def _seq(n, h=3, w=4):
    return FrameSequence(np.arange(n, dtype=float)[:, None, None] * np.ones((n, h, w)))


def test_partition_counts():
    assert len(partition_sequence(_seq(100), 5)) == 20
    wins = partition_sequence(_seq(5), 5)
    assert len(wins) == 1 and list(wins[0][:, 0, 0]) == [0, 1, 2, 3, 4]


def test_partition_drops_remainder():
    wins = partition_sequence(_seq(103), 5)
    assert len(wins) == 20
    # enumerated boundaries: window k holds frames 5k .. 5k+4
    for k, win in enumerate(wins):
        assert list(win[:, 0, 0]) == list(range(5 * k, 5 * k + 5))
    assert wins[-1][-1, 0, 0] == 99


def test_partition_too_short():
    with pytest.raises(InputError):
        partition_sequence(_seq(3), 5)


def test_identical_frames_fixed_point():
    f = np.random.default_rng(0).random((6, 7))
    out = aggregate_window([f] * 5, gaussian_weights(5))
    assert np.max(np.abs(out - f)) <= 1e-12


def test_center_impulse_with_reference_weights():
    # sum of the reference vector is 2.46
    ones = np.ones((2, 2))
    zeros = np.zeros((2, 2))
    out = aggregate_window([zeros, zeros, ones, zeros, zeros], GaussianWeightVector(PAPER_W))
    np.testing.assert_allclose(out, 1 / 2.46, rtol=0, atol=1e-12)
    assert abs(out[0, 0] - 0.4065) < 1e-4


def test_constant_window():
    out = aggregate_window([np.full((3, 3), 0.3)] * 5, gaussian_weights(5))
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_window_shape_errors():
    with pytest.raises(ShapeError):
        aggregate_window([np.zeros((2, 2))] * 4, gaussian_weights(5))


def test_video_kth_shape():
    clip = aggregate_video(FrameSequence(np.random.default_rng(1).random((100, 34, 54))), 5, 100)
    assert clip.voxels.shape == (34, 54, 20)


def test_video_window_four():
    clip = aggregate_video(FrameSequence(np.zeros((100, 2, 2))), 4, 100)
    assert clip.voxels.shape[2] == 25


def test_video_short_pads_last_frame():
    frames = np.random.default_rng(2).random((80, 3, 3))
    clip = aggregate_video(FrameSequence(frames), 5, 100)
    assert clip.voxels.shape == (3, 3, 20)
    # windows 16..19 consist solely of the repeated last frame
    for k in range(16, 20):
        np.testing.assert_allclose(clip.voxels[:, :, k], frames[-1], atol=1e-12)
    padded = np.concatenate([frames, np.repeat(frames[-1:], 20, axis=0)])
    np.testing.assert_allclose(clip.voxels[:, :, 3], aggregate_window(padded[15:20], gaussian_weights(5)), atol=1e-15)


def test_video_long_truncates():
    frames = np.random.default_rng(3).random((130, 2, 2))
    a = aggregate_video(FrameSequence(frames), 5, 100)
    b = aggregate_video(FrameSequence(frames[:100]), 5, 100)
    np.testing.assert_array_equal(a.voxels, b.voxels)


def test_video_empty():
    with pytest.raises(InputError):
        aggregate_video(FrameSequence(np.zeros((0, 2, 2))), 5, 100)


windows = st.integers(3, 8).flatmap(
    lambda L: st.tuples(st.just(L), st.integers(0, 2**31))
)


@settings(max_examples=40, deadline=None)
@given(windows)
def test_range_preserved(arg):
    L, seed = arg
    frames = np.random.default_rng(seed).random((L, 4, 5))
    out = aggregate_window(frames, gaussian_weights(L))
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(windows, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(arg, alpha, beta):
    L, seed = arg
    rng = np.random.default_rng(seed)
    A, B = rng.random((L, 3, 3)), rng.random((L, 3, 3))
    w = gaussian_weights(L)
    lhs = aggregate_window(alpha * A + beta * B, w)
    rhs = alpha * aggregate_window(A, w) + beta * aggregate_window(B, w)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(windows)
def test_reversal_symmetry(arg):
    L, seed = arg
    frames = np.random.default_rng(seed).random((L, 3, 4))
    w = gaussian_weights(L)
    assert np.max(np.abs(aggregate_window(frames, w) - aggregate_window(frames[::-1], w))) <= 1e-12
