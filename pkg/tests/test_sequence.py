import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwfnet.errors import ConfigError, InputError, ShapeError, StateError
from gwfnet.layers import softmax_cross_entropy
from gwfnet.model import build_preset
from gwfnet.sequence import (
    FeatureSequence,
    LSTMParams,
    NeighborhoodPolicy,
    build_feature_sequence,
    lstm_backward,
    lstm_classify,
    lstm_step,
)

from oracles import central_difference, lstm_unrolled, max_rel_error


def _params(D=7, C=3, H=5, seed=0, bias=0.1):
    rng = np.random.default_rng(seed)
    p = LSTMParams.create(D, C, hidden_size=H, rng=rng)
    for k in ("bi", "bf", "bg", "bo", "head_b"):
        p.arrays[k][...] = bias * rng.standard_normal(p.arrays[k].shape)
    return p


def test_zero_params_keep_zero_state():
    p = LSTMParams.create(4, 2, hidden_size=3, init="zeros")
    h, c, _ = lstm_step(p, np.ones(4), np.zeros(3), np.zeros(3))
    # i = 0.5, g = 0 so nothing is written to the cell
    assert not h.any() and not c.any()


def test_saturated_forget_gate_retains_cell():
    p = LSTMParams.create(4, 2, hidden_size=3, init="zeros")
    p.arrays["bf"][...] = 10.0
    c_prev = np.array([1.0, -2.0, 0.5])
    _, c, _ = lstm_step(p, np.zeros(4), np.zeros(3), c_prev)
    np.testing.assert_allclose(c, c_prev * 0.9999546021312976, rtol=1e-12)


def test_matches_unrolled_oracle():
    p = _params(seed=3)
    xs = np.random.default_rng(4).standard_normal((6, 7))
    logits, _ = lstm_classify(p, xs)
    assert np.max(np.abs(logits - lstm_unrolled(p.arrays, xs))) <= 1e-12


def test_single_step_equals_head_of_step():
    p = _params(seed=1)
    x = np.random.default_rng(2).standard_normal(7)
    logits, _ = lstm_classify(p, x[None])
    h, _, _ = lstm_step(p, x, np.zeros(5), np.zeros(5))
    np.testing.assert_allclose(logits, p["head_w"] @ h + p["head_b"], atol=1e-15)


def test_zero_head_gives_uniform_loss():
    p = _params()
    p.arrays["head_w"][...] = 0
    p.arrays["head_b"][...] = 0
    logits, _ = lstm_classify(p, np.ones((3, 7)))
    loss, _ = softmax_cross_entropy(logits, 0)
    assert abs(loss - math.log(3)) < 1e-12


def test_bptt_finite_differences():
    p = _params(seed=0)
    xs = np.random.default_rng(9).standard_normal((4, 7))
    logits, trace = lstm_classify(p, xs)
    _, gl = softmax_cross_entropy(logits, 2)
    grads = lstm_backward(p, trace, gl, need_input_grad=True)
    f = lambda: softmax_cross_entropy(lstm_classify(p, xs)[0], 2)[0]
    assert max_rel_error(grads["input"], central_difference(f, xs)) <= 1e-4
    for name, arr in p.arrays.items():
        assert max_rel_error(grads[name], central_difference(f, arr)) <= 1e-4, name


def test_recurrent_grad_zero_for_one_step():
    p = _params()
    logits, trace = lstm_classify(p, np.ones((1, 7)))
    grads = lstm_backward(p, trace, np.ones(3))
    for gate in "ifgo":
        assert not grads[f"U{gate}"].any()


def test_stale_trace():
    p = _params()
    _, trace = lstm_classify(p, np.ones((2, 7)))
    p.reset_head(3, rng=1)
    with pytest.raises(StateError):
        lstm_backward(p, trace, np.ones(3))
    with pytest.raises(StateError):
        lstm_backward(p, None, np.ones(3))


def test_empty_sequence():
    with pytest.raises(InputError):
        lstm_classify(_params(), np.zeros((0, 7)))
    with pytest.raises(InputError):
        FeatureSequence(np.zeros((0, 7)))


def test_input_size_mismatch():
    with pytest.raises(ShapeError):
        lstm_classify(_params(), np.zeros((2, 6)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_cell_growth_bound(seed, T):
    p = _params(seed=seed % 1000, bias=3.0)
    xs = 5 * np.random.default_rng(seed).standard_normal((T, 7))
    _, trace = lstm_classify(p, xs)
    for t, c in enumerate(trace.cs):
        assert np.all(np.abs(c) <= t + 1e-12)
    assert all(np.all(np.abs(h) <= 1) for h in trace.hs)


def test_constant_input_converges():
    p = _params(seed=2)
    for k in "ifgo":
        p.arrays[f"U{k}"] *= 0.2
    _, trace = lstm_classify(p, np.tile(np.random.default_rng(0).standard_normal(7), (200, 1)))
    assert np.max(np.abs(trace.hs[-1] - trace.hs[-2])) < 1e-9


def test_reset_head_changes_classes():
    p = _params()
    p.reset_head(10, rng=0)
    assert p["head_w"].shape == (10, 5) and p.num_classes == 10 and p.version == 1


def test_policy_expansion():
    win = np.arange(4)[None, None, :] * np.ones((1, 1, 4))
    assert list(NeighborhoodPolicy(4, "tile").expand(win, 10)[0, 0]) == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
    assert list(NeighborhoodPolicy(4, "stretch").expand(win, 8)[0, 0]) == [0, 0, 1, 1, 2, 2, 3, 3]
    with pytest.raises(ConfigError):
        NeighborhoodPolicy(4, "mirror")


def test_feature_sequence_steps():
    model = build_preset("mini", rng=0)
    clip = np.random.default_rng(0).random((16, 16, 20))
    seq = build_feature_sequence(model, clip, 4)
    assert seq.steps.shape == (5, model.feature_size)
    again = build_feature_sequence(model, clip, 4)
    assert seq.steps.tobytes() == again.steps.tobytes()
    assert len(build_feature_sequence(model, clip, 20)) == 1


def test_feature_sequence_windows_are_independent():
    model = build_preset("mini", rng=0, dtype=np.float64)
    clip = np.random.default_rng(1).random((16, 16, 20))
    seq = build_feature_sequence(model, clip, 4)
    solo, _ = model.forward(NeighborhoodPolicy(4).expand(clip[:, :, 8:12], 20))
    np.testing.assert_allclose(seq.steps[2], solo, atol=1e-12)


def test_feature_sequence_spatial_mismatch():
    with pytest.raises(ShapeError):
        build_feature_sequence(build_preset("mini"), np.zeros((8, 8, 20)))
