"""Adam optimizer against a hand-rolled scalar trace."""

import numpy as np
import pytest

from graphife.autodiff import NumericsError
from graphife.optim import AdamState, adam_step

from oracles import scalar_adam_trace


def test_zero_gradient_is_fixed_point():
    params = {"w": np.array([[1.0, -2.0]])}
    state = AdamState.for_params(params)
    new = adam_step(params, {"w": np.zeros((1, 2))}, state, lr=0.1)
    assert np.array_equal(new["w"], params["w"])


def test_first_step_magnitude_is_lr():
    for g in (0.3, -17.0, 1e-4):
        params = {"w": np.array([[0.0]])}
        state = AdamState.for_params(params)
        new = adam_step(params, {"w": np.array([[g]])}, state, lr=0.05)
        # bias-corrected mhat/sqrt(vhat) == sign(g) on the first step, up to eps
        assert abs(abs(new["w"][0, 0]) - 0.05) < 0.05 * 1e-3
        assert np.sign(new["w"][0, 0]) == -np.sign(g)


def test_five_step_trajectory_matches_scalar_oracle():
    expected = scalar_adam_trace(lambda w: 2.0 * w, w0=1.0, lr=0.1, steps=5)
    params = {"w": np.array([[1.0]])}
    state = AdamState.for_params(params)
    got = []
    for _ in range(5):
        grads = {"w": 2.0 * params["w"]}
        params = adam_step(params, grads, state, lr=0.1)
        got.append(params["w"][0, 0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-9)


def test_nan_gradient_names_parameter():
    params = {"gate_w": np.zeros((2, 2))}
    state = AdamState.for_params(params)
    with pytest.raises(NumericsError, match="gate_w"):
        adam_step(params, {"gate_w": np.full((2, 2), np.nan)}, state, lr=0.1)


def test_missing_gradient_treated_as_zero():
    params = {"a": np.ones((1, 1)), "b": np.ones((1, 1))}
    state = AdamState.for_params(params)
    new = adam_step(params, {"a": np.array([[1.0]])}, state, lr=0.1)
    assert np.array_equal(new["b"], params["b"])
    assert new["a"][0, 0] != 1.0


def test_weight_decay_shrinks_parameters():
    params = {"w": np.array([[10.0]])}
    state = AdamState.for_params(params, weight_decay=5e-4)
    new = adam_step(params, {"w": np.zeros((1, 1))}, state, lr=0.1)
    assert new["w"][0, 0] < 10.0


def test_state_mismatch_rejected():
    state = AdamState.for_params({"w": np.zeros((1, 1))})
    with pytest.raises(KeyError):
        adam_step({"other": np.zeros((1, 1))}, {}, state, lr=0.1)
