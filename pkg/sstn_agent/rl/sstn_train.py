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

"""Policy-gradient and actor-critic training of the transformation agent.

One training step rolls a mini-batch through a full episode, updates the
policy (and critic) from the episode trace, then takes one cross-entropy step
on the classifier. Randomness comes from independent generators seeded with
(seed, stream) so that shuffling, action sampling, evaluation and each network
initialization never share state.
"""
import dataclasses
import logging
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from sstn_agent.core import sstn_ops
from sstn_agent.core.sstn_dataset import DatasetBundle
from sstn_agent.core.sstn_errors import ConfigError, NumericError, StateError
from sstn_agent.core.sstn_optim import Adam
from sstn_agent.core.sstn_tensor import Tensor, no_grad, stack
from sstn_agent.rl import consts
from sstn_agent.rl.sstn_env import (
    EnvConfig,
    EpisodeTrace,
    TransformEnvironment,
    discounted_returns,
)
from sstn_agent.rl.sstn_models import (
    ClassifierConfig,
    CriticNetwork,
    Module,
    PolicyConfig,
    PolicyNetwork,
    build_classifier,
)

logger = logging.getLogger("sstn")


def stream(seed: int, which: int) -> np.random.Generator:
    """Generator for one of the independent random streams of a run."""
    return np.random.default_rng([int(seed), int(which)])


@dataclasses.dataclass
class TrainConfig:
    algorithm: str = consts.ALGORITHM_AC
    batch_size: int = consts.DEFAULT_BATCH
    epochs: int = consts.DEFAULT_EPOCHS
    lr: float = consts.DEFAULT_LR
    critic_lr: Optional[float] = None
    env: EnvConfig = dataclasses.field(default_factory=EnvConfig)
    classifier: ClassifierConfig = dataclasses.field(default_factory=ClassifierConfig)
    policy: PolicyConfig = dataclasses.field(default_factory=PolicyConfig)
    eval_mode: str = consts.EVAL_GREEDY
    seed: int = 0
    normalize_advantage: bool = False
    entropy_coef: float = 0.0
    classifier_images: str = consts.CLASSIFIER_IMAGES_FINAL
    pretrain_classifier: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.algorithm not in consts.ALGORITHMS:
            raise ConfigError(
                f"Unknown algorithm {self.algorithm!r}, expected one of "
                f"{consts.ALGORITHMS}"
            )
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.epochs < 0 or self.pretrain_classifier < 0:
            raise ConfigError("epochs must be non-negative")
        if self.critic_lr is not None:
            if self.algorithm != consts.ALGORITHM_AC:
                raise ConfigError("critic_lr only applies to the ac algorithm")
            if self.critic_lr <= 0:
                raise ConfigError(f"critic lr must be positive, got {self.critic_lr}")
        if self.eval_mode not in consts.EVAL_MODES:
            raise ConfigError(f"Unknown evaluation mode {self.eval_mode!r}")
        if self.classifier_images not in consts.CLASSIFIER_IMAGES:
            raise ConfigError(
                f"Unknown classifier images {self.classifier_images!r}, expected "
                f"one of {consts.CLASSIFIER_IMAGES}"
            )
        if self.entropy_coef < 0:
            raise ConfigError("entropy coefficient must be non-negative")

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainConfig":
        values = dict(values)
        nested = {
            "env": EnvConfig,
            "classifier": ClassifierConfig,
            "policy": PolicyConfig,
        }
        for key, kind in nested.items():
            if isinstance(values.get(key), dict):
                values[key] = kind(**values[key])
        return cls(**values)


class EvalResult(NamedTuple):
    accuracy: float
    mean_reward: float
    per_class: Dict[int, float]
    mean_loss: float


def rollout(
    env: TransformEnvironment,
    policy,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    mode: str = consts.EVAL_SAMPLE,
    critic: Optional[CriticNetwork] = None,
    keep_images: bool = False,
) -> EpisodeTrace:
    """Run one full episode on a batch.

    Args:
      env: environment holding the frozen classifier
      policy: object with initial_state(batch) and act(...)
      images: batch [B x 1 x S x S]
      labels: class indices [B]
      rng: action sampling generator
      mode: "sample" or "greedy"
      critic: value network evaluated on every state when given
      keep_images: store the image batch after every step

    Returns:
      EpisodeTrace: exactly episode_length steps
    """
    trace = EpisodeTrace()
    state = env.reset(images, labels)
    trace.baseline_losses = state.losses
    trace.baseline_predictions = state.predictions
    policy_state = policy.initial_state(len(images))
    critic_state = critic.initial_state(len(images)) if critic is not None else None
    while not env.done(state):
        out = policy.act(state.images, state.prev_actions, policy_state, rng, mode)
        policy_state = out.state
        if critic is not None:
            value, critic_state = critic(state.images, state.prev_actions, critic_state)
            trace.values.append(value)
        state, rewards, record = env.step(state, out.actions)
        trace.log_probs.append(out.log_probs)
        trace.entropies.append(out.entropy)
        trace.actions.append(record.actions)
        trace.rewards.append(rewards)
        trace.losses.append(record.losses)
        trace.predictions.append(record.predictions)
        if keep_images:
            trace.images.append(state.images)
    trace.final_images = state.images
    return trace


def _weights(returns: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return returns
    return (returns - returns.mean()) / (returns.std() + 1e-8)


def _check_finite(value: float, what: str, diagnostics: Optional[dict]) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}", dict(diagnostics or {}, value=value))
    return value


def _policy_objective(
    trace: EpisodeTrace, weights: np.ndarray, entropy_coef: float
) -> Tensor:
    log_probs = stack(trace.log_probs)
    loss = -(log_probs * Tensor(weights.astype(log_probs.dtype))).mean()
    if entropy_coef:
        loss = loss - stack(trace.entropies).mean() * entropy_coef
    return loss


def pg_loss(
    trace: EpisodeTrace,
    env_config: EnvConfig,
    normalize_advantage: bool = False,
    entropy_coef: float = 0.0,
) -> Tensor:
    """-mean(log_prob_t * G_t) over steps and batch, on the policy tape.

    Raises:
      StateError: the trace is empty
    """
    if len(trace) == 0 or len(trace.log_probs) != len(trace):
        raise StateError("the policy loss needs a complete episode trace")
    returns = discounted_returns(
        trace.rewards_array(), env_config.gamma, env_config.return_convention
    )
    return _policy_objective(
        trace, _weights(returns, normalize_advantage), entropy_coef
    )


def pg_update(
    trace: EpisodeTrace,
    optimizer: Optional[Adam],
    env_config: EnvConfig,
    normalize_advantage: bool = False,
    entropy_coef: float = 0.0,
    diagnostics: Optional[dict] = None,
) -> float:
    """REINFORCE step on pg_loss.

    Returns:
      float: the policy loss

    Raises:
      StateError: the trace is empty
      NumericError: the loss is not finite
    """
    loss = pg_loss(trace, env_config, normalize_advantage, entropy_coef)
    value = _check_finite(loss.item(), "policy loss", diagnostics)
    if optimizer is not None and loss.requires_grad:
        loss.backward()
        optimizer.step()
    return value


def ac_update(
    trace: EpisodeTrace,
    actor_optimizer: Optional[Adam],
    critic_optimizer: Optional[Adam],
    env_config: EnvConfig,
    normalize_advantage: bool = False,
    entropy_coef: float = 0.0,
    diagnostics: Optional[dict] = None,
) -> Tuple[float, float]:
    """Actor-critic step with the critic as a detached baseline.

    The critic regresses G_t with a mean squared error, the actor weights its
    log probabilities by the advantage G_t - v_t. The two losses live on
    disjoint tapes and get separate optimizer steps.

    Returns:
      (policy loss, value loss)

    Raises:
      StateError: the trace is empty or carries no value estimates
    """
    if len(trace) == 0 or len(trace.log_probs) != len(trace):
        raise StateError("ac_update needs a complete episode trace")
    if len(trace.values) != len(trace):
        raise StateError("ac_update needs a value estimate for every step")
    returns = discounted_returns(
        trace.rewards_array(), env_config.gamma, env_config.return_convention
    )
    values = stack(trace.values)
    value_loss = sstn_ops.mse_loss(values, returns)
    advantages = returns - values.data.astype(np.float64)
    policy_loss = _policy_objective(
        trace, _weights(advantages, normalize_advantage), entropy_coef
    )
    policy_value = _check_finite(policy_loss.item(), "policy loss", diagnostics)
    critic_value = _check_finite(value_loss.item(), "value loss", diagnostics)
    if critic_optimizer is not None and value_loss.requires_grad:
        value_loss.backward()
        critic_optimizer.step()
    if actor_optimizer is not None and policy_loss.requires_grad:
        policy_loss.backward()
        actor_optimizer.step()
    return policy_value, critic_value


def classifier_update(
    classifier: Module,
    optimizer: Adam,
    images: np.ndarray,
    labels: np.ndarray,
    diagnostics: Optional[dict] = None,
) -> float:
    """One cross-entropy Adam step on a batch; returns the loss before the step."""
    loss = sstn_ops.cross_entropy(classifier(images), labels)
    value = _check_finite(loss.item(), "classifier loss", diagnostics)
    loss.backward()
    optimizer.step()
    return value


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def train_supervised(
    classifier: Module,
    dataset: DatasetBundle,
    epochs: int,
    batch_size: int,
    optimizer: Adam,
    rng: np.random.Generator,
) -> List[float]:
    """Plain classifier training on untransformed images.

    Returns:
      list: mean batch loss per epoch
    """
    history = []
    for epoch in range(epochs):
        losses = [
            classifier_update(
                classifier,
                optimizer,
                dataset.images[rows],
                dataset.labels[rows],
                {"epoch": epoch, "batch": batch},
            )
            for batch, rows in enumerate(_batches(len(dataset), batch_size, rng))
        ]
        history.append(float(np.mean(losses)))
        logger.info("Supervised epoch %d: loss %.5f", epoch, history[-1])
    return history


def evaluate(
    policy,
    classifier: Module,
    dataset: DatasetBundle,
    env_config: EnvConfig,
    mode: str = consts.EVAL_GREEDY,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = consts.DEFAULT_BATCH,
) -> EvalResult:
    """Roll out every image for the full horizon and classify the final image.

    Returns:
      EvalResult: accuracy, mean undiscounted episode reward, per-class
        accuracy and mean final loss
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    env = TransformEnvironment(classifier, env_config)
    correct = np.zeros(len(dataset), dtype=bool)
    totals = np.zeros(len(dataset))
    losses = np.zeros(len(dataset))
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            rows = np.arange(start, min(start + batch_size, len(dataset)))
            trace = rollout(
                env, policy, dataset.images[rows], dataset.labels[rows], rng, mode
            )
            correct[rows] = trace.predictions[-1] == dataset.labels[rows]
            totals[rows] = trace.rewards_array().sum(axis=0)
            losses[rows] = trace.losses[-1]
    per_class = {
        int(label): float(correct[dataset.labels == label].mean())
        for label in np.unique(dataset.labels)
    }
    return EvalResult(
        float(correct.mean()) if len(dataset) else 0.0,
        float(totals.mean()) if len(dataset) else 0.0,
        per_class,
        float(losses.mean()) if len(dataset) else 0.0,
    )


class SSTNTrainer:
    """Joint training of policy, optional critic and classifier.

    Attributes:
      config: training configuration
      classifier: classifier network
      policy: learned policy, or any object with the policy interface
      critic: value network for actor-critic runs, None otherwise
    """

    def __init__(
        self,
        config: TrainConfig,
        train_set: DatasetBundle,
        test_set: Optional[DatasetBundle] = None,
        policy=None,
    ):
        self.config = config
        self.train_set = train_set
        self.test_set = test_set
        seed = config.seed
        self.classifier = build_classifier(
            config.classifier, stream(seed, consts.STREAM_INIT_CLASSIFIER)
        )
        self.policy = (
            policy
            if policy is not None
            else PolicyNetwork(config.policy, stream(seed, consts.STREAM_INIT_POLICY))
        )
        self.critic = None
        if config.algorithm == consts.ALGORITHM_AC:
            self.critic = CriticNetwork(
                config.policy, stream(seed, consts.STREAM_INIT_CRITIC)
            )
        self.classifier_optimizer = Adam(self.classifier.parameters(), lr=config.lr)
        policy_params = self.policy.parameters()
        self.policy_optimizer = (
            Adam(policy_params, lr=config.lr) if policy_params else None
        )
        self.critic_optimizer = None
        if self.critic is not None:
            self.critic_optimizer = Adam(
                self.critic.parameters(), lr=config.critic_lr or config.lr
            )
        self.shuffle_rng = stream(seed, consts.STREAM_SHUFFLE)
        self.action_rng = stream(seed, consts.STREAM_ACTIONS)
        self.eval_rng = stream(seed, consts.STREAM_EVAL)
        self.env = TransformEnvironment(self.classifier, config.env)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Classifier, policy and critic parameters under dotted prefixes."""
        params = self.classifier.state_dict("classifier.")
        if isinstance(self.policy, Module):
            params.update(self.policy.state_dict("policy."))
        if self.critic is not None:
            params.update(self.critic.state_dict("critic."))
        return params

    def load_state_dict(self, values: Dict[str, np.ndarray]) -> None:
        self.classifier.load_state_dict(values, "classifier.")
        if isinstance(self.policy, Module):
            self.policy.load_state_dict(values, "policy.")
        if self.critic is not None and any(k.startswith("critic.") for k in values):
            self.critic.load_state_dict(values, "critic.")

    def pretrain(self) -> List[float]:
        if not self.config.pretrain_classifier:
            return []
        logger.info(
            "Pretraining classifier for %d epochs", self.config.pretrain_classifier
        )
        return train_supervised(
            self.classifier,
            self.train_set,
            self.config.pretrain_classifier,
            self.config.batch_size,
            self.classifier_optimizer,
            self.shuffle_rng,
        )

    def train_batch(self, images, labels, diagnostics: dict) -> Dict[str, float]:
        config = self.config
        trace = rollout(
            self.env,
            self.policy,
            images,
            labels,
            self.action_rng,
            consts.EVAL_SAMPLE,
            critic=self.critic,
            keep_images=config.classifier_images == consts.CLASSIFIER_IMAGES_ALL,
        )
        value_loss = float("nan")
        if config.algorithm == consts.ALGORITHM_AC:
            policy_loss, value_loss = ac_update(
                trace,
                self.policy_optimizer,
                self.critic_optimizer,
                config.env,
                config.normalize_advantage,
                config.entropy_coef,
                diagnostics,
            )
        else:
            policy_loss = pg_update(
                trace,
                self.policy_optimizer,
                config.env,
                config.normalize_advantage,
                config.entropy_coef,
                diagnostics,
            )
        if config.classifier_images == consts.CLASSIFIER_IMAGES_ALL:
            class_images = np.concatenate(trace.images)
            class_labels = np.tile(labels, len(trace.images))
        else:
            class_images, class_labels = trace.final_images, labels
        classifier_loss = classifier_update(
            self.classifier,
            self.classifier_optimizer,
            class_images,
            class_labels,
            diagnostics,
        )
        return {
            consts.ACCURACY: float(np.mean(trace.predictions[-1] == labels)),
            consts.MEAN_REWARD: float(trace.rewards_array().sum(axis=0).mean()),
            consts.POLICY_LOSS: policy_loss,
            consts.VALUE_LOSS: value_loss,
            consts.CLASSIFIER_LOSS: classifier_loss,
        }

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        """One pass over the shuffled training set; batch-size weighted means."""
        sums: Dict[str, float] = {}
        seen = 0
        for batch, rows in enumerate(
            _batches(len(self.train_set), self.config.batch_size, self.shuffle_rng)
        ):
            stats = self.train_batch(
                self.train_set.images[rows],
                self.train_set.labels[rows],
                {"epoch": epoch, "batch": batch},
            )
            for key, value in stats.items():
                sums[key] = sums.get(key, 0.0) + value * len(rows)
            seen += len(rows)
            logger.debug("epoch %d batch %d: %s", epoch, batch, stats)
        return {key: value / max(seen, 1) for key, value in sums.items()}

    def evaluate(
        self, dataset: DatasetBundle, mode: Optional[str] = None
    ) -> EvalResult:
        return evaluate(
            self.policy,
            self.classifier,
            dataset,
            self.config.env,
            mode or self.config.eval_mode,
            self.eval_rng,
            self.config.batch_size,
        )

    def fit(
        self,
        on_epoch: Optional[Callable[[int, List[dict], "SSTNTrainer"], None]] = None,
    ) -> List[dict]:
        """Train for config.epochs epochs.

        Args:
          on_epoch: called after every epoch with the epoch number, that
            epoch's metric rows and the trainer

        Returns:
          list: metric rows, one train row and (with a test set) one test row
            per epoch
        """
        started = time.perf_counter()
        self.pretrain()
        rows = []
        for epoch in range(self.config.epochs):
            train_stats = self.train_epoch(epoch)
            epoch_rows = [
                dict(
                    {consts.EPOCH: epoch, consts.SPLIT: "train"},
                    **train_stats,
                    **{consts.WALL_SECONDS: time.perf_counter() - started},
                )
            ]
            if self.test_set is not None and len(self.test_set):
                result = self.evaluate(self.test_set)
                epoch_rows.append(
                    {
                        consts.EPOCH: epoch,
                        consts.SPLIT: "test",
                        consts.ACCURACY: result.accuracy,
                        consts.MEAN_REWARD: result.mean_reward,
                        consts.POLICY_LOSS: float("nan"),
                        consts.VALUE_LOSS: float("nan"),
                        consts.CLASSIFIER_LOSS: result.mean_loss,
                        consts.WALL_SECONDS: time.perf_counter() - started,
                    }
                )
            for row in epoch_rows:
                logger.info(
                    "Epoch %d %s: accuracy %.4f, reward %.4f",
                    epoch,
                    row[consts.SPLIT],
                    row[consts.ACCURACY],
                    row[consts.MEAN_REWARD],
                )
            rows.extend(epoch_rows)
            if on_epoch is not None:
                on_epoch(epoch, epoch_rows, self)
        return rows


def train(
    config: TrainConfig,
    train_set: DatasetBundle,
    test_set: Optional[DatasetBundle] = None,
    on_epoch=None,
    policy=None,
) -> Tuple[Dict[str, np.ndarray], List[dict]]:
    """Train from scratch and return (final parameters, metric rows)."""
    trainer = SSTNTrainer(config, train_set, test_set, policy)
    rows = trainer.fit(on_epoch)
    return trainer.state_dict(), rows
