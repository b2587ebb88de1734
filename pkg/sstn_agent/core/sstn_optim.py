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

"""Adam optimizer over named tensors."""
import dataclasses
import logging
from typing import Dict, Optional

import numpy as np

from sstn_agent.core.sstn_errors import ConfigError, StateError
from sstn_agent.core.sstn_tensor import Tensor

logger = logging.getLogger("sstn")

DEFAULT_LR = 1e-4
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-8


@dataclasses.dataclass
class AdamState:
    """Moment estimates for one parameter tensor.

    Moments are kept in float64 regardless of the parameter dtype.
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def for_param(cls, param: Tensor, learning_rate: float = DEFAULT_LR, **kwargs):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        return cls(
            first_moment=np.zeros(param.shape, dtype=np.float64),
            second_moment=np.zeros(param.shape, dtype=np.float64),
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(param: Tensor, state: AdamState) -> Tensor:
    """Apply one bias-corrected Adam update and zero the gradient.

    The parameter gets a fresh data array, so views taken before the step keep
    the old values.

    Args:
      param: tensor with a populated grad
      state: moment buffers tracking param

    Returns:
      Tensor: param, updated

    Raises:
      StateError: param.grad is missing
    """
    if param.grad is None:
        raise StateError("adam_step called on a parameter without a gradient")
    if state.first_moment.shape != param.shape:
        raise StateError(
            f"Adam moments {state.first_moment.shape} do not track a parameter "
            f"of shape {param.shape}"
        )
    grad = param.grad.astype(np.float64)
    state.step_count += 1
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * (
        grad * grad
    )
    m_hat = state.first_moment / (1 - state.beta1**state.step_count)
    v_hat = state.second_moment / (1 - state.beta2**state.step_count)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if np.any(update):
        param.data = (param.data - update).astype(param.data.dtype)
    param.grad = None
    return param


class Adam:
    """Adam over a dictionary of named parameters."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = DEFAULT_LR,
        beta1: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        epsilon: float = DEFAULT_EPSILON,
    ):
        self.params = dict(params)
        self.states = {
            name: AdamState.for_param(
                p, learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=epsilon
            )
            for name, p in self.params.items()
        }

    def step(self, skip_missing: bool = True) -> None:
        """Update every parameter that received a gradient.

        Args:
          skip_missing: parameters without a grad are left alone when True and
            raise StateError when False
        """
        for name, param in self.params.items():
            if param.grad is None and skip_missing:
                logger.debug("No gradient for %s, skipping", name)
                continue
            adam_step(param, self.states[name])

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_of(self, name: str) -> Optional[AdamState]:
        return self.states.get(name)
