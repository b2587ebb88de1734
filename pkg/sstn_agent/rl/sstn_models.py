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

"""Classifier, policy and critic networks.

Parameters are initialized uniformly in +-sqrt(1 / fan_in) from an injected
numpy Generator. Every module exposes its parameters as a flat dictionary with
dotted names, which is also the checkpoint layout.
"""
import dataclasses
import logging
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from sstn_agent.core import sstn_ops
from sstn_agent.core.sstn_errors import (
    ConfigError,
    DimensionError,
    NumericError,
    StateError,
)
from sstn_agent.core.sstn_geometry import one_hot
from sstn_agent.core.sstn_tensor import Tensor, concat, no_grad
from sstn_agent.rl import consts

logger = logging.getLogger("sstn")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Base class holding named parameters and child modules."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        param = Tensor(data, requires_grad=True)
        self._params[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """All parameters keyed by dotted name, in definition order."""
        params = {f"{prefix}{name}": p for name, p in self._params.items()}
        for name, child in self._children.items():
            params.update(child.parameters(f"{prefix}{name}."))
        return params

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters(prefix).items()}

    def load_state_dict(self, values: Dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy values into the parameters.

        Raises:
          KeyError: a parameter is missing from values
          DimensionError: a stored array has the wrong shape
        """
        for name, param in self.parameters(prefix).items():
            if name not in values:
                raise KeyError(f"checkpoint has no parameter {name}")
            value = np.asarray(values[name])
            if value.shape != param.shape:
                raise DimensionError(
                    f"parameter {name} has shape {param.shape}, checkpoint "
                    f"holds {value.shape}"
                )
            param.data = value.astype(param.dtype)

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param(
            "weight", uniform_init(rng, (in_features, out_features), in_features)
        )
        self.bias = self.add_param(
            "bias", uniform_init(rng, (out_features,), in_features)
        )

    def forward(self, x: Tensor) -> Tensor:
        return sstn_ops.linear(x, self.weight, self.bias)


class Conv2dLayer(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng):
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = self.add_param(
            "weight",
            uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in),
        )
        self.bias = self.add_param("bias", uniform_init(rng, (out_channels,), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        return sstn_ops.conv2d(x, self.weight, self.bias)


class LSTMCell(Module):
    def __init__(self, input_size: int, hidden_size: int, rng):
        super().__init__()
        fan_in = input_size + hidden_size
        self.hidden_size = hidden_size
        self.w_x = self.add_param(
            "w_x", uniform_init(rng, (input_size, 4 * hidden_size), fan_in)
        )
        self.w_h = self.add_param(
            "w_h", uniform_init(rng, (hidden_size, 4 * hidden_size), fan_in)
        )
        self.bias = self.add_param(
            "bias", uniform_init(rng, (4 * hidden_size,), fan_in)
        )

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        return sstn_ops.lstm_step(
            x, h, c, sstn_ops.LSTMWeights(self.w_x, self.w_h, self.bias)
        )


def lenet_feature_side(side: int, kernel: int) -> int:
    """Spatial side after conv, pool, conv, pool.

    Raises:
      ConfigError: a pooled map would have an odd side
    """
    first = side - kernel + 1
    if first <= 0 or first % 2:
        raise ConfigError(f"input side {side} with kernel {kernel} gives {first}")
    second = first // 2 - kernel + 1
    if second <= 0 or second % 2:
        raise ConfigError(f"input side {side} with kernel {kernel} gives {second}")
    return second // 2


class LeNetFeatures(Module):
    """conv -> relu -> pool -> conv -> relu -> pool -> flatten -> fc -> relu."""

    def __init__(
        self,
        side: int,
        channels: Sequence[int] = consts.LENET_CHANNELS,
        kernel: int = consts.LENET_KERNEL,
        fc: int = consts.LENET_FC,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.side = side
        pooled = lenet_feature_side(side, kernel)
        self.conv1 = self.add_module("conv1", Conv2dLayer(1, channels[0], kernel, rng))
        self.conv2 = self.add_module(
            "conv2", Conv2dLayer(channels[0], channels[1], kernel, rng)
        )
        self.fc = self.add_module("fc", Linear(channels[1] * pooled * pooled, fc, rng))
        self.out_features = fc

    def forward(self, images: Tensor) -> Tensor:
        x = sstn_ops.maxpool2(sstn_ops.relu(self.conv1(images)))
        x = sstn_ops.maxpool2(sstn_ops.relu(self.conv2(x)))
        return sstn_ops.relu(self.fc(x.reshape(x.shape[0], -1)))


def _as_images(images, side: int) -> Tensor:
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim != 4 or images.shape[1:] != (1, side, side):
        raise DimensionError(
            f"expected images [B x 1 x {side} x {side}], got {images.shape}"
        )
    return images


@dataclasses.dataclass
class ClassifierConfig:
    kind: str = consts.CLASSIFIER_MLP
    input_side: int = consts.CANVAS_SIDE
    num_classes: int = consts.NUM_CLASSES
    mlp_hidden: int = consts.MLP_HIDDEN
    lenet_channels: Tuple[int, int] = consts.LENET_CHANNELS
    lenet_kernel: int = consts.LENET_KERNEL
    lenet_fc: int = consts.LENET_FC

    def __post_init__(self):
        if self.kind not in consts.CLASSIFIER_KINDS:
            raise ConfigError(
                f"Unknown classifier {self.kind!r}, expected one of "
                f"{consts.CLASSIFIER_KINDS}"
            )
        self.lenet_channels = tuple(self.lenet_channels)
        if self.kind == consts.CLASSIFIER_LENET:
            lenet_feature_side(self.input_side, self.lenet_kernel)


class MLPClassifier(Module):
    """flatten -> hidden (relu) -> logits."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        side = config.input_side
        self.hidden = self.add_module(
            "hidden", Linear(side * side, config.mlp_hidden, rng)
        )
        self.out = self.add_module(
            "out", Linear(config.mlp_hidden, config.num_classes, rng)
        )

    def forward(self, images) -> Tensor:
        images = _as_images(images, self.config.input_side)
        flat = images.reshape(images.shape[0], -1)
        return self.out(sstn_ops.relu(self.hidden(flat)))


class LeNetClassifier(Module):
    """LeNet features -> logits."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.features = self.add_module(
            "features",
            LeNetFeatures(
                config.input_side,
                config.lenet_channels,
                config.lenet_kernel,
                config.lenet_fc,
                rng,
            ),
        )
        self.out = self.add_module(
            "out", Linear(config.lenet_fc, config.num_classes, rng)
        )

    def forward(self, images) -> Tensor:
        return self.out(self.features(_as_images(images, self.config.input_side)))


def build_classifier(config: ClassifierConfig, rng: np.random.Generator) -> Module:
    if config.kind == consts.CLASSIFIER_LENET:
        return LeNetClassifier(config, rng)
    return MLPClassifier(config, rng)


def classifier_forward(classifier: Module, images) -> Tensor:
    """Logits [B x num_classes] for an image batch."""
    return classifier(images)


def predict(classifier: Module, images, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image cross-entropy losses and argmax predictions, without a tape."""
    with no_grad():
        logits = classifier(images)
        losses = sstn_ops.cross_entropy(logits, labels, reduction="none")
    return losses.data.astype(np.float64), np.argmax(logits.data, axis=1)


@dataclasses.dataclass
class PolicyConfig:
    use_lstm: bool = True
    lstm_hidden: int = consts.LSTM_HIDDEN
    num_actions: int = consts.NUM_ACTIONS
    input_side: int = consts.CANVAS_SIDE
    lenet_channels: Tuple[int, int] = consts.LENET_CHANNELS
    lenet_kernel: int = consts.LENET_KERNEL
    lenet_fc: int = consts.LENET_FC

    def __post_init__(self):
        self.lenet_channels = tuple(self.lenet_channels)
        if self.num_actions < 1 or self.lstm_hidden < 1:
            raise ConfigError("num_actions and lstm_hidden must be positive")
        lenet_feature_side(self.input_side, self.lenet_kernel)

    @classmethod
    def from_kind(cls, kind: str, **kwargs) -> "PolicyConfig":
        if kind not in consts.POLICY_KINDS:
            raise ConfigError(
                f"Unknown policy {kind!r}, expected one of {consts.POLICY_KINDS}"
            )
        return cls(use_lstm=kind == consts.POLICY_LENET_LSTM, **kwargs)


@dataclasses.dataclass
class PolicyState:
    """LSTM carries, zeros at episode start."""

    h: Tensor
    c: Tensor


class ActOutput(NamedTuple):
    actions: np.ndarray
    log_probs: Tensor
    entropy: Tensor
    probs: Tensor
    state: Optional[PolicyState]


class _RecurrentHead(Module):
    """LeNet features, optionally an LSTM fed with the previous action, and a head."""

    def __init__(self, config: PolicyConfig, outputs: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.features = self.add_module(
            "features",
            LeNetFeatures(
                config.input_side,
                config.lenet_channels,
                config.lenet_kernel,
                config.lenet_fc,
                rng,
            ),
        )
        head_in = config.lenet_fc
        self.lstm = None
        if config.use_lstm:
            self.lstm = self.add_module(
                "lstm",
                LSTMCell(config.lenet_fc + config.num_actions, config.lstm_hidden, rng),
            )
            head_in = config.lstm_hidden
        self.head = self.add_module("head", Linear(head_in, outputs, rng))

    def initial_state(self, batch: int) -> Optional[PolicyState]:
        if not self.config.use_lstm:
            return None
        shape = (batch, self.config.lstm_hidden)
        return PolicyState(
            Tensor(np.zeros(shape, np.float32)), Tensor(np.zeros(shape, np.float32))
        )

    def _trunk(self, images, prev_actions, state: Optional[PolicyState]):
        images = _as_images(images, self.config.input_side)
        features = self.features(images)
        if not self.config.use_lstm:
            return features, None
        if state is None:
            raise StateError("an LSTM policy needs a policy state; call initial_state")
        prev = np.asarray(prev_actions, dtype=np.float32)
        if prev.shape != (images.shape[0], self.config.num_actions):
            raise DimensionError(
                f"previous actions must be one-hot [B x {self.config.num_actions}], "
                f"got {prev.shape}"
            )
        merged = concat([features, Tensor(prev.astype(features.dtype))], axis=1)
        h, c = self.lstm(merged, state.h, state.c)
        return h, PolicyState(h, c)


class PolicyNetwork(_RecurrentHead):
    """Action distribution over the transformation set."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        super().__init__(config, config.num_actions, rng)

    def forward(
        self, images, prev_actions, state: Optional[PolicyState] = None
    ) -> Tuple[Tensor, Optional[PolicyState]]:
        """Returns (probabilities [B x A], next policy state)."""
        trunk, state = self._trunk(images, prev_actions, state)
        return sstn_ops.softmax(self.head(trunk)), state

    def act(
        self,
        images,
        prev_actions,
        state: Optional[PolicyState],
        rng: np.random.Generator,
        mode: str = consts.EVAL_SAMPLE,
    ) -> ActOutput:
        probs, state = self.forward(images, prev_actions, state)
        actions, log_probs = sample_action(probs, rng, mode)
        return ActOutput(actions, log_probs, entropy(probs), probs, state)


class CriticNetwork(_RecurrentHead):
    """State value estimate with parameters disjoint from the policy."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        super().__init__(config, 1, rng)

    def forward(
        self, images, prev_actions, state: Optional[PolicyState] = None
    ) -> Tuple[Tensor, Optional[PolicyState]]:
        """Returns (values [B], next critic state)."""
        trunk, state = self._trunk(images, prev_actions, state)
        out = self.head(trunk)
        return out.reshape(out.shape[0]), state


def entropy(probs: Tensor) -> Tensor:
    """Per-row entropy of a probability batch."""
    return -(probs * (probs + 1e-12).log()).sum(axis=-1)


def sample_action(
    probs: Tensor, rng: np.random.Generator, mode: str = consts.EVAL_SAMPLE
) -> Tuple[np.ndarray, Tensor]:
    """Draw one action per row.

    Args:
      probs: [B x A] probabilities
      rng: generator for the draws, untouched in greedy mode
      mode: "sample" for categorical draws, "greedy" for argmax

    Returns:
      (actions [B] int64, log probabilities [B] on the tape of probs)

    Raises:
      NumericError: a probability is not finite
    """
    p = probs.data.astype(np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite action probabilities", {"probs": p.tolist()})
    if mode == consts.EVAL_GREEDY:
        actions = np.argmax(p, axis=1)
    elif mode == consts.EVAL_SAMPLE:
        cdf = np.cumsum(p, axis=1)
        draws = (1.0 - rng.random(len(p))) * cdf[:, -1]
        actions = np.minimum((cdf < draws[:, None]).sum(axis=1), p.shape[1] - 1)
    else:
        raise ConfigError(f"Unknown action mode {mode!r}")
    actions = actions.astype(np.int64)
    log_probs = probs[np.arange(len(actions)), actions].log()
    return actions, log_probs


class FixedActionPolicy:
    """Emits the same action for every image and step."""

    def __init__(self, action: int, num_actions: int = consts.NUM_ACTIONS):
        self.action = int(action)
        self.num_actions = num_actions

    def initial_state(self, batch: int):
        return None

    def act(self, images, prev_actions, state, rng, mode=consts.EVAL_SAMPLE):
        batch = len(images)
        actions = np.full(batch, self.action, dtype=np.int64)
        probs = one_hot(actions, self.num_actions)
        zeros = Tensor(np.zeros(batch, np.float32))
        return ActOutput(actions, zeros, zeros, Tensor(probs), state)

    def parameters(self) -> Dict[str, Tensor]:
        return {}


class ScriptedPolicy(FixedActionPolicy):
    """Replays a fixed action sequence per image, one row per batch element."""

    def __init__(self, sequences, num_actions: int = consts.NUM_ACTIONS):
        self.sequences = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
        self.num_actions = num_actions
        self.step = 0

    def initial_state(self, batch: int):
        if batch != len(self.sequences):
            raise DimensionError(
                f"{len(self.sequences)} scripted sequences for a batch of {batch}"
            )
        self.step = 0
        return None

    def act(self, images, prev_actions, state, rng, mode=consts.EVAL_SAMPLE):
        if self.step >= self.sequences.shape[1]:
            raise StateError(f"scripted sequences end after {self.step} steps")
        actions = self.sequences[:, self.step].copy()
        self.step += 1
        zeros = Tensor(np.zeros(len(actions), np.float32))
        return ActOutput(
            actions, zeros, zeros, Tensor(one_hot(actions, self.num_actions)), state
        )


class RandomPolicy(FixedActionPolicy):
    """Uniform choice over an action subset."""

    def __init__(
        self,
        actions: Optional[Sequence[int]] = None,
        num_actions: int = consts.NUM_ACTIONS,
    ):
        self.num_actions = num_actions
        self.choices = np.asarray(
            list(range(num_actions)) if actions is None else list(actions), np.int64
        )

    def act(self, images, prev_actions, state, rng, mode=consts.EVAL_SAMPLE):
        batch = len(images)
        actions = self.choices[rng.integers(len(self.choices), size=batch)]
        probs = np.zeros((batch, self.num_actions), np.float32)
        probs[:, self.choices] = 1.0 / len(self.choices)
        log_probs = Tensor(np.full(batch, -np.log(len(self.choices)), np.float32))
        return ActOutput(
            actions, log_probs, Tensor(-log_probs.data), Tensor(probs), state
        )


class TabularPolicy(Module):
    """Softmax policy with one logit row per discrete state."""

    def __init__(self, num_states: int, num_actions: int):
        super().__init__()
        self.logits = self.add_param("logits", np.zeros((num_states, num_actions)))

    def forward(self, states) -> Tensor:
        return sstn_ops.softmax(self.logits[np.asarray(states, dtype=np.int64)])

    def act(self, states, rng, mode=consts.EVAL_SAMPLE) -> ActOutput:
        probs = self.forward(states)
        actions, log_probs = sample_action(probs, rng, mode)
        return ActOutput(actions, log_probs, entropy(probs), probs, None)


class TabularCritic(Module):
    """One value per discrete state."""

    def __init__(self, num_states: int):
        super().__init__()
        self.values = self.add_param("values", np.zeros(num_states))

    def forward(self, states) -> Tensor:
        return self.values[np.asarray(states, dtype=np.int64)]
