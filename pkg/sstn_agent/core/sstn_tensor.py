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

"""Dense tensors with a dynamic reverse-mode gradient tape.

Every differentiable operation is a Function subclass with a forward pass on
numpy arrays and a backward pass returning one gradient per input. Calling
Function.apply records the function as the creator of its output; the tape is
the graph of creators and is freed once Tensor.backward has run.

Data is float32 unless a float64 numpy array is handed in, in which case the
promoted dtype is kept through every op. Reductions accumulate in float64.
"""
import contextlib
import logging
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from sstn_agent.core.sstn_errors import DimensionError, StateError

logger = logging.getLogger("sstn")

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data: Any, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches to_shape."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(to_shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    Subclasses implement forward on the input arrays and backward returning the
    gradient with respect to each input (or None for inputs that get none).
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and record the function on the tape.

        Args:
          *tensors: input tensors
          **kwargs: non-differentiable arguments passed to forward

        Returns:
          Tensor: output whose creator is this function when grads are enabled
        """
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        dtype = np.result_type(*(t.data.dtype for t in tensors))
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(
            np.asarray(out).astype(dtype, copy=False),
            requires_grad=requires_grad,
            creator=func if requires_grad else None,
        )


class Tensor:
    """A dense array with an optional gradient buffer.

    Attributes:
      data: numpy array holding the values
      grad: numpy array of the same shape, populated by backward
      requires_grad: whether gradients flow to this tensor
      creator: Function that produced this tensor, None for leaves
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype=None,
    ):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Returns a tensor sharing data but cut from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient of shape {grad.shape} does not match tensor of "
                f"shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self, grad: Optional[Union[np.ndarray, float]] = None) -> None:
        """Propagate gradients to every tensor on the tape behind this one.

        Args:
          grad: gradient of the objective with respect to this tensor; ones
            when omitted

        Raises:
          StateError: the tensor is not on a tape
        """
        if not self.requires_grad:
            raise StateError("backward called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate_grad(np.asarray(grad, dtype=self.data.dtype))

        ordered = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if node in visited:
                continue
            if children_done:
                visited.add(node)
                ordered.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and parent not in visited:
                        stack.append((parent, False))

        for node in reversed(ordered):
            if node.creator is None or node.grad is None:
                continue
            grads = node.creator.backward(node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, g in zip(node.creator.tensors, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate_grad(np.asarray(g, dtype=parent.data.dtype))
            node.creator.tensors = ()

        # free the tape; intermediate grads go with it
        for node in ordered:
            if node.creator is not None:
                node.creator = None
                if node is not self:
                    node.grad = None

    def _wrap(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad})"
        )


def tensor(data: Any, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(
        np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad
    )


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        x, y = self.tensors
        return unbroadcast(grad, x.shape), unbroadcast(grad, y.shape)


class Sub(Function):
    def forward(self, x, y):
        return x - y

    def backward(self, grad):
        x, y = self.tensors
        return unbroadcast(grad, x.shape), unbroadcast(-grad, y.shape)


class Mul(Function):
    def forward(self, x, y):
        return x * y

    def backward(self, grad):
        x, y = self.tensors
        return (
            unbroadcast(grad * y.data, x.shape),
            unbroadcast(grad * x.data, y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        return x / y

    def backward(self, grad):
        x, y = self.tensors
        return (
            unbroadcast(grad / y.data, x.shape),
            unbroadcast(-grad * x.data / (y.data * y.data), y.shape),
        )


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return -grad


class MatMul(Function):
    """2-D matrix product."""

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"matmul shape mismatch: {tuple(a.shape)} and {tuple(b.shape)}"
            )
        return a @ b

    def backward(self, grad):
        a, b = self.tensors
        return grad @ b.data.T, a.data.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n].

    Raises:
      DimensionError: inner dimensions differ or an input is not 2-D
    """
    return MatMul.apply(a, b)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        (x,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, x.shape).copy()


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        self.count = x.size if axis is None else np.prod(
            [x.shape[a] for a in np.atleast_1d(axis)]
        )
        return np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        (x,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad / self.count, x.shape).copy()


class Reshape(Function):
    def forward(self, x, shape=()):
        try:
            return x.reshape(shape)
        except ValueError as err:
            raise DimensionError(
                f"cannot reshape {tuple(x.shape)} to {tuple(shape)}"
            ) from err

    def backward(self, grad):
        return grad.reshape(self.tensors[0].shape)


class GetItem(Function):
    def forward(self, x, idx=None):
        self.idx = idx
        return np.array(x[idx])

    def backward(self, grad):
        out = np.zeros(self.tensors[0].shape, dtype=grad.dtype)
        np.add.at(out, self.idx, grad)
        return out


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as err:
            shapes = [tuple(a.shape) for a in arrays]
            raise DimensionError(f"cannot concatenate shapes {shapes}") from err

    def backward(self, grad):
        sizes = [t.shape[self.axis] for t in self.tensors]
        return tuple(np.split(grad, np.cumsum(sizes)[:-1], axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as err:
            shapes = [tuple(a.shape) for a in arrays]
            raise DimensionError(f"cannot stack shapes {shapes}") from err

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: List[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, grad):
        return grad / self.tensors[0].data
