# Copyright 2024 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Contains tests for convolution, pooling, activations, losses and the LSTM cell."""

import math

import numpy as np
import pytest

from sstn_agent.core import sstn_ops
from sstn_agent.core.sstn_errors import ConfigError, DimensionError
from sstn_agent.core.sstn_ops import LSTMWeights
from sstn_agent.core.sstn_tensor import Tensor
from sstn_agent.core.tests.gradcheck import check_grads

ACTIVATION_KINDS = ["relu", "sigmoid", "tanh", "softmax_lastdim"]


def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = sstn_ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones():
    out = sstn_ops.conv2d(
        Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0])
    )
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_conv2d_output_shape():
    out = sstn_ops.conv2d(
        Tensor(np.zeros((2, 3, 10, 9))),
        Tensor(np.zeros((5, 3, 5, 4))),
        Tensor(np.zeros(5)),
    )
    assert out.shape == (2, 5, 6, 6)


def test_conv2d_gradients():
    """Random 2x3x8x8 input with four 3x3 kernels."""
    rng = np.random.default_rng(0)
    check_grads(
        sstn_ops.conv2d,
        [
            rng.normal(size=(2, 3, 8, 8)),
            rng.normal(size=(4, 3, 3, 3)),
            rng.normal(size=4),
        ],
    )


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        sstn_ops.conv2d(
            Tensor(np.zeros((1, 1, 3, 3))),
            Tensor(np.zeros((1, 1, 4, 4))),
            Tensor([0.0]),
        )


def test_maxpool2_single_window():
    out = sstn_ops.maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool2_ties_route_to_first_cell():
    x = Tensor(np.full((1, 1, 4, 4), 0.5), requires_grad=True)
    out = sstn_ops.maxpool2(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.5))
    out.sum().backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool2_gradients():
    """Distinct values spaced far apart relative to the difference step."""
    rng = np.random.default_rng(1)
    x = rng.permutation(16).reshape(1, 1, 4, 4) * 0.1
    check_grads(sstn_ops.maxpool2, [x], rtol=1e-5)


def test_maxpool2_odd_size():
    with pytest.raises(DimensionError):
        sstn_ops.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_relu_values():
    out = sstn_ops.activation(Tensor([-1.0, 2.0]), "relu")
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_softmax_of_zeros_is_uniform():
    out = sstn_ops.activation(Tensor(np.zeros((1, 10))), "softmax_lastdim")
    np.testing.assert_allclose(out.data, np.full((1, 10), 0.1), atol=1e-7)


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(2)
    out = sstn_ops.softmax(Tensor(rng.normal(scale=5.0, size=(6, 10))))
    assert np.all(out.data >= 0)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)


@pytest.mark.parametrize("kind", ACTIVATION_KINDS)
def test_activation_gradients(kind):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5))
    if kind == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)
    check_grads(lambda t: sstn_ops.activation(t, kind), [x], rtol=1e-5)


def test_log_softmax_gradients():
    rng = np.random.default_rng(4)
    check_grads(sstn_ops.log_softmax, [rng.normal(size=(3, 5))], rtol=1e-5)


def test_unknown_activation():
    with pytest.raises(ConfigError):
        sstn_ops.activation(Tensor([0.0]), "gelu")


def test_cross_entropy_uniform_logits():
    loss = sstn_ops.cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_confident_correct_logit():
    logits = np.zeros((1, 10))
    logits[0, 3] = 100.0
    loss = sstn_ops.cross_entropy(Tensor(logits), [3])
    assert loss.item() < 1e-6


def test_cross_entropy_gradients():
    rng = np.random.default_rng(5)
    labels = np.array([1, 0, 9, 4])
    check_grads(
        lambda t: sstn_ops.cross_entropy(t, labels),
        [rng.normal(size=(4, 10))],
        rtol=1e-5,
    )
    check_grads(
        lambda t: sstn_ops.cross_entropy(t, labels, reduction="none"),
        [rng.normal(size=(4, 10))],
        rtol=1e-5,
    )


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        sstn_ops.cross_entropy(Tensor(np.zeros((2, 10))), [0, 10])


def test_mse_loss():
    loss = sstn_ops.mse_loss(Tensor([1.0, 3.0]), [0.0, 1.0])
    assert loss.item() == pytest.approx(2.5)


def zero_lstm(inputs: int, hidden: int) -> LSTMWeights:
    return LSTMWeights(
        Tensor(np.zeros((inputs, 4 * hidden))),
        Tensor(np.zeros((hidden, 4 * hidden))),
        Tensor(np.zeros(4 * hidden)),
    )


def test_lstm_step_all_zero():
    """Zero weights open every gate halfway and keep zero carries at zero."""
    h, c = sstn_ops.lstm_step(
        Tensor(np.zeros((2, 3))),
        Tensor(np.zeros((2, 4))),
        Tensor(np.zeros((2, 4))),
        zero_lstm(3, 4),
    )
    np.testing.assert_array_equal(c.data, np.zeros((2, 4)))
    np.testing.assert_array_equal(h.data, np.zeros((2, 4)))


def test_lstm_step_unit_cell():
    h, c = sstn_ops.lstm_step(
        Tensor(np.zeros((1, 3))),
        Tensor(np.zeros((1, 4))),
        Tensor(np.ones((1, 4))),
        zero_lstm(3, 4),
    )
    np.testing.assert_allclose(c.data, np.full((1, 4), 0.5), atol=1e-7)
    np.testing.assert_allclose(h.data, np.full((1, 4), 0.5 * math.tanh(0.5)), atol=1e-7)


def test_lstm_unrolled_gradients():
    """Three unrolled steps, gradients w.r.t. inputs, carries and weights."""
    rng = np.random.default_rng(6)
    batch, inputs, hidden = 2, 3, 4

    def unrolled(x, h, c, w_x, w_h, bias):
        weights = LSTMWeights(w_x, w_h, bias)
        total = None
        for step in range(3):
            h, c = sstn_ops.lstm_step(x * float(step + 1), h, c, weights)
            total = h if total is None else total + h
        return total + c

    check_grads(
        unrolled,
        [
            rng.normal(size=(batch, inputs)),
            rng.normal(size=(batch, hidden)),
            rng.normal(size=(batch, hidden)),
            rng.normal(scale=0.5, size=(inputs, 4 * hidden)),
            rng.normal(scale=0.5, size=(hidden, 4 * hidden)),
            rng.normal(scale=0.5, size=4 * hidden),
        ],
    )


def test_lstm_step_shape_mismatch():
    with pytest.raises(DimensionError):
        sstn_ops.lstm_step(
            Tensor(np.zeros((1, 5))),
            Tensor(np.zeros((1, 4))),
            Tensor(np.zeros((1, 4))),
            zero_lstm(3, 4),
        )
