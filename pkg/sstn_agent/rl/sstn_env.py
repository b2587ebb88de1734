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

"""Fixed-horizon transformation episodes and their rewards.

The state is the current image batch together with the one-hot encoding of the
previous action (all zeros before the first step). A step warps each image by
its own action and scores the warped image with the classifier, which stays
frozen for the whole episode. Loss and prediction at step t are measured after
action t has been applied.
"""
import dataclasses
import logging
from typing import List, Optional, Tuple

import numpy as np

from sstn_agent.core import sstn_geometry as geo
from sstn_agent.core.sstn_errors import ConfigError, DimensionError, StateError
from sstn_agent.core.sstn_tensor import Tensor
from sstn_agent.rl import consts
from sstn_agent.rl.sstn_models import Module, predict

logger = logging.getLogger("sstn")


@dataclasses.dataclass
class EnvConfig:
    episode_length: int = consts.DEFAULT_EPISODE_LENGTH
    reward_kind: str = consts.REWARD_LOSS_DELTA
    gamma: float = consts.DEFAULT_GAMMA
    return_convention: str = consts.RETURNS_STANDARD

    def __post_init__(self):
        if int(self.episode_length) < 1:
            raise ConfigError(
                f"episode length must be at least 1, got {self.episode_length}"
            )
        self.episode_length = int(self.episode_length)
        if self.reward_kind not in consts.REWARD_KINDS:
            raise ConfigError(
                f"Unknown reward {self.reward_kind!r}, expected one of "
                f"{consts.REWARD_KINDS}"
            )
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.return_convention not in consts.RETURN_CONVENTIONS:
            raise ConfigError(
                f"Unknown return convention {self.return_convention!r}, expected "
                f"one of {consts.RETURN_CONVENTIONS}"
            )


@dataclasses.dataclass
class EnvState:
    """Observation and bookkeeping of a batch episode.

    Attributes:
      images: current images [B x 1 x S x S]
      prev_actions: one-hot previous actions [B x A], zeros at t = 0
      t: number of steps taken
      losses: classifier loss per image on the current images
      predictions: classifier argmax per image on the current images
      transforms: composed map per image, output coordinates to original image
    """

    images: np.ndarray
    prev_actions: np.ndarray
    t: int
    losses: np.ndarray
    predictions: np.ndarray
    transforms: List[geo.AffineMap]


@dataclasses.dataclass
class StepRecord:
    actions: np.ndarray
    rewards: np.ndarray
    losses: np.ndarray
    predictions: np.ndarray


@dataclasses.dataclass
class EpisodeTrace:
    """Per-step log probabilities, rewards, values, losses and predictions."""

    log_probs: List[Tensor] = dataclasses.field(default_factory=list)
    rewards: List[np.ndarray] = dataclasses.field(default_factory=list)
    values: List[Tensor] = dataclasses.field(default_factory=list)
    losses: List[np.ndarray] = dataclasses.field(default_factory=list)
    predictions: List[np.ndarray] = dataclasses.field(default_factory=list)
    actions: List[np.ndarray] = dataclasses.field(default_factory=list)
    entropies: List[Tensor] = dataclasses.field(default_factory=list)
    images: List[np.ndarray] = dataclasses.field(default_factory=list)
    baseline_losses: Optional[np.ndarray] = None
    baseline_predictions: Optional[np.ndarray] = None
    final_images: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    def clear(self) -> None:
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, list):
                value.clear()
            else:
                setattr(self, field.name, None)

    def rewards_array(self) -> np.ndarray:
        """Rewards as [T x B] float64."""
        return np.stack(self.rewards).astype(np.float64)


def reward_r1(pred_prev, pred_now, labels) -> np.ndarray:
    """+1 when a prediction turns correct, -1 when it turns wrong, else 0."""
    labels = np.asarray(labels)
    was_right = np.asarray(pred_prev) == labels
    is_right = np.asarray(pred_now) == labels
    return is_right.astype(np.float64) - was_right.astype(np.float64)


def reward_r2(loss_now) -> np.ndarray:
    """Negated loss; never positive."""
    return -np.asarray(loss_now, dtype=np.float64)


def reward_r3(loss_prev, loss_now) -> np.ndarray:
    """Loss decrease between consecutive steps."""
    return np.asarray(loss_prev, dtype=np.float64) - np.asarray(loss_now, np.float64)


def compute_reward(
    kind: str, pred_prev, pred_now, labels, loss_prev, loss_now
) -> np.ndarray:
    if kind == consts.REWARD_ACCURACY:
        return reward_r1(pred_prev, pred_now, labels)
    if kind == consts.REWARD_NEG_LOSS:
        return reward_r2(loss_now)
    if kind == consts.REWARD_LOSS_DELTA:
        return reward_r3(loss_prev, loss_now)
    raise ConfigError(f"Unknown reward {kind!r}")


def discounted_returns(
    rewards, gamma: float, convention: str = consts.RETURNS_STANDARD
) -> np.ndarray:
    """Returns-to-go for rewards [T x B] (or [T]).

    standard:   G_t = sum_{k >= t} gamma^(k - t) r_k
    as-printed: G_t = sum_{k >= t} gamma^(T - 1 - k) r_k
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    horizon = rewards.shape[0]
    returns = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0]) if horizon else None
    for t in reversed(range(horizon)):
        if convention == consts.RETURNS_STANDARD:
            running = rewards[t] + gamma * running
        elif convention == consts.RETURNS_AS_PRINTED:
            running = rewards[t] * gamma ** (horizon - 1 - t) + running
        else:
            raise ConfigError(f"Unknown return convention {convention!r}")
        returns[t] = running
    return returns


def classify(classifier: Module, images, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image losses and predictions with the classifier frozen."""
    return predict(classifier, images, labels)


class TransformEnvironment:
    """Batch MDP over image states with discrete affine actions."""

    def __init__(self, classifier: Module, config: EnvConfig):
        self.classifier = classifier
        self.config = config
        self.labels: Optional[np.ndarray] = None

    def reset(self, images: np.ndarray, labels) -> EnvState:
        """Start an episode on a batch; scores the untransformed images once."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or len(images) == 0:
            raise DimensionError(
                f"reset needs a non-empty [B x 1 x S x S] batch, got {images.shape}"
            )
        self.labels = np.asarray(labels, dtype=np.int64)
        losses, predictions = classify(self.classifier, images, self.labels)
        return EnvState(
            images=images,
            prev_actions=np.zeros((len(images), consts.NUM_ACTIONS), np.float32),
            t=0,
            losses=losses,
            predictions=predictions,
            transforms=[geo.AffineMap.identity()] * len(images),
        )

    def step(self, state: EnvState, actions) -> Tuple[EnvState, np.ndarray, StepRecord]:
        """Warp every image by its action and score the result.

        Raises:
          StateError: the episode already has episode_length steps, or reset
            was not called
          DimensionError: there is not exactly one action per image
        """
        if self.labels is None:
            raise StateError("step called before reset")
        if state.t >= self.config.episode_length:
            raise StateError(f"episode already has {self.config.episode_length} steps")
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if len(actions) != len(state.images):
            raise DimensionError(
                f"{len(actions)} actions for a batch of {len(state.images)} images"
            )
        images = geo.apply_actions(state.images, actions)
        losses, predictions = classify(self.classifier, images, self.labels)
        rewards = compute_reward(
            self.config.reward_kind,
            state.predictions,
            predictions,
            self.labels,
            state.losses,
            losses,
        )
        size = images.shape[2:]
        transforms = [
            geo.compose(theta, geo.action_to_affine(a, size))
            for theta, a in zip(state.transforms, actions)
        ]
        next_state = EnvState(
            images=images,
            prev_actions=geo.one_hot(actions, consts.NUM_ACTIONS),
            t=state.t + 1,
            losses=losses,
            predictions=predictions,
            transforms=transforms,
        )
        return next_state, rewards, StepRecord(actions, rewards, losses, predictions)

    def done(self, state: EnvState) -> bool:
        return state.t >= self.config.episode_length
