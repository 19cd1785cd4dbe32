"""Adam update behavior."""

import numpy as np
import pytest

from tinycsi.errors import ConfigError, ShapeError
from tinycsi.optim import AdamState, adam_step
from tinycsi.tensor import Tensor


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0], np.float32), requires_grad=True)
    state = AdamState([p], lr=1e-3)
    before = p.data.copy()
    for _ in range(5):
        adam_step(state, [p], [np.zeros_like(p.data)])
    np.testing.assert_array_equal(p.data, before)


def test_first_step_closed_form():
    # g=1, lr=1e-3: m_hat=1, v_hat=1, so the step is lr / (1 + eps)
    p = Tensor(np.array([1.0], np.float64), requires_grad=True)
    state = AdamState([p], lr=1e-3)
    adam_step(state, [p], [np.ones(1)])
    expected = 1.0 - 1e-3 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-12)
    assert p.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-6)


def test_two_runs_bitwise_identical():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(4, 3)).astype(np.float32) for _ in range(10)]

    def run():
        p = Tensor(np.linspace(-1, 1, 12).reshape(4, 3).astype(np.float32),
                   requires_grad=True)
        state = AdamState([p], lr=1e-2)
        for g in grads:
            adam_step(state, [p], [g])
        return p.data

    assert np.array_equal(run(), run())


def test_moment_shapes_follow_parameters():
    p = Tensor(np.zeros((2, 5), np.float32), requires_grad=True)
    state = AdamState([p], lr=1e-3)
    assert state.m[0].shape == (2, 5)
    assert state.v[0].shape == (2, 5)


def test_mismatched_gradient_shape_rejected():
    p = Tensor(np.zeros((2, 2), np.float32), requires_grad=True)
    state = AdamState([p], lr=1e-3)
    with pytest.raises(ShapeError):
        adam_step(state, [p], [np.zeros((3, 2), np.float32)])


def test_nonpositive_lr_rejected():
    p = Tensor(np.zeros(2, np.float32), requires_grad=True)
    with pytest.raises(ConfigError):
        AdamState([p], lr=0.0)
