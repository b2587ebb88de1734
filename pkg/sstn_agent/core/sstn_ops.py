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

"""Neural network operations on top of the gradient tape.

Convolution uses an im2col view of the input built with
numpy.lib.stride_tricks.sliding_window_view; the windows are recomputed in the
backward pass instead of being stored.
"""
from typing import NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sstn_agent.core.sstn_errors import ConfigError, DimensionError
from sstn_agent.core.sstn_tensor import Function, Tensor, matmul


class Conv2d(Function):
    """Valid 2-D convolution with stride 1 (cross-correlation)."""

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise DimensionError(
                f"conv2d expects 4-D input, 4-D kernels and 1-D bias, got "
                f"{tuple(x.shape)}, {tuple(w.shape)}, {tuple(b.shape)}"
            )
        _, channels, height, width = x.shape
        kernels, kernel_channels, kh, kw = w.shape
        if kernel_channels != channels or b.shape[0] != kernels:
            raise DimensionError(
                f"conv2d channel mismatch: input {tuple(x.shape)}, kernels "
                f"{tuple(w.shape)}, bias {tuple(b.shape)}"
            )
        if kh > height or kw > width:
            raise DimensionError(
                f"conv2d kernel {(kh, kw)} larger than input {(height, width)}"
            )
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(self, grad):
        x, w, _ = self.tensors
        kh, kw = w.shape[2:]
        out_h, out_w = grad.shape[2:]
        windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
        grad_b = grad.sum(axis=(0, 2, 3))
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = np.zeros(x.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, w.data[:, :, i, j], axes=([1], [0]))
                grad_x[:, :, i : i + out_h, j : j + out_w] += contrib.transpose(
                    0, 3, 1, 2
                )
        return grad_x, grad_w, grad_b


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid convolution of x [B x C x H x W] with kernels [K x C x kh x kw].

    Returns:
      Tensor: [B x K x (H - kh + 1) x (W - kw + 1)]

    Raises:
      DimensionError: ranks, channels or kernel size do not fit the input
    """
    return Conv2d.apply(x, kernels, bias)


class MaxPool2(Function):
    """2x2 non-overlapping max pool; ties go to the first cell in row order."""

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(
                f"maxpool2 needs a 4-D input with even height and width, got "
                f"{tuple(x.shape)}"
            )
        batch, channels, height, width = x.shape
        cells = (
            x.reshape(batch, channels, height // 2, 2, width // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height // 2, width // 2, 4)
        )
        self.argmax = np.argmax(cells, axis=-1)[..., None]
        return np.take_along_axis(cells, self.argmax, axis=-1)[..., 0]

    def backward(self, grad):
        batch, channels, height, width = self.tensors[0].shape
        cells = np.zeros(
            (batch, channels, height // 2, width // 2, 4), dtype=grad.dtype
        )
        np.put_along_axis(cells, self.argmax, grad[..., None], axis=-1)
        return (
            cells.reshape(batch, channels, height // 2, width // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height, width)
        )


def maxpool2(x: Tensor) -> Tensor:
    return MaxPool2.apply(x)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return grad * (1.0 - self.out * self.out)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True, dtype=np.float64)


class Softmax(Function):
    """Softmax over the last dimension."""

    def forward(self, x):
        self.out = _softmax(x).astype(x.dtype)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=-1, keepdims=True, dtype=np.float64)
        return self.out * (grad - inner)


class LogSoftmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64))
        self.probs = np.exp(shifted - log_norm)
        return shifted - log_norm

    def backward(self, grad):
        return grad - self.probs * grad.sum(axis=-1, keepdims=True, dtype=np.float64)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_lastdim": softmax,
}


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply one of relu, sigmoid, tanh or softmax_lastdim."""
    if kind not in ACTIVATIONS:
        raise ConfigError(
            f"Unknown activation {kind!r}, expected one of {sorted(ACTIVATIONS)}"
        )
    return ACTIVATIONS[kind](x)


class CrossEntropy(Function):
    def forward(self, logits, labels=None, reduction="mean"):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise DimensionError(
                f"cross_entropy expects logits [B x C] and labels [B], got "
                f"{tuple(logits.shape)} and {tuple(labels.shape)}"
            )
        num_classes = logits.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            bad = labels[(labels < 0) | (labels >= num_classes)][0]
            raise IndexError(f"label {bad} out of range for {num_classes} classes")
        self.labels = labels
        self.reduction = reduction
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, dtype=np.float64))
        self.probs = np.exp(shifted - log_norm[:, None])
        nll = log_norm - shifted[np.arange(len(labels)), labels]
        if reduction == "none":
            return nll
        return np.mean(nll, dtype=np.float64)

    def backward(self, grad):
        batch = len(self.labels)
        delta = self.probs.copy()
        delta[np.arange(batch), self.labels] -= 1.0
        if self.reduction == "none":
            return delta * grad[:, None]
        return delta * (grad / batch)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of logits [B x C] against integer labels [B].

    Args:
      logits: unnormalized class scores
      labels: class indices in [0, C)
      reduction: "mean" for a scalar loss, "none" for per-sample losses

    Returns:
      Tensor: scalar mean loss or [B] losses

    Raises:
      IndexError: a label is outside [0, C)
    """
    if reduction not in ("mean", "none"):
        raise ConfigError(f"Unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=np.int64)
    return CrossEntropy.apply(logits, labels=labels, reduction=reduction)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [B x I] @ weight [I x O] + bias [O]."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; target is treated as a constant."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse_loss shape mismatch: {pred.shape} and {target.shape}"
        )
    diff = pred - target
    return (diff * diff).mean()


class LSTMWeights(NamedTuple):
    """LSTM cell parameters, gate order input, forget, candidate, output.

    Attributes:
      w_x: [I x 4H] input projection
      w_h: [H x 4H] recurrent projection
      bias: [4H]
    """

    w_x: Tensor
    w_h: Tensor
    bias: Tensor


def lstm_step(
    x: Tensor, h: Tensor, c: Tensor, weights: LSTMWeights
) -> Tuple[Tensor, Tensor]:
    """One LSTM cell step.

    Args:
      x: [B x I] input
      h: [B x H] hidden carry
      c: [B x H] cell carry
      weights: cell parameters

    Returns:
      (h', c') with c' = f * c + i * g and h' = o * tanh(c')

    Raises:
      DimensionError: weight shapes do not agree with I or H
    """
    hidden = h.shape[1]
    expected = {
        "w_x": (x.shape[1], 4 * hidden),
        "w_h": (hidden, 4 * hidden),
        "bias": (4 * hidden,),
    }
    for name, shape in expected.items():
        if getattr(weights, name).shape != shape:
            raise DimensionError(
                f"lstm {name} has shape {getattr(weights, name).shape}, expected "
                f"{shape} for input {x.shape} and hidden {h.shape}"
            )
    if c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise DimensionError(
            f"lstm carries {h.shape}, {c.shape} do not match input {x.shape}"
        )
    gates = matmul(x, weights.w_x) + matmul(h, weights.w_h) + weights.bias
    rows = slice(None)
    i = sigmoid(gates[rows, 0:hidden])
    f = sigmoid(gates[rows, hidden : 2 * hidden])
    g = tanh(gates[rows, 2 * hidden : 3 * hidden])
    o = sigmoid(gates[rows, 3 * hidden :])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next
