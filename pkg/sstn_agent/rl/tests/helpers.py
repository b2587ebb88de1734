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

"""Small networks, datasets and classifiers shared by the agent tests."""
import numpy as np

from sstn_agent.core import sstn_dataset
from sstn_agent.core.sstn_dataset import DatasetBundle
from sstn_agent.rl.sstn_env import EnvConfig
from sstn_agent.rl.sstn_models import ClassifierConfig, MLPClassifier, PolicyConfig
from sstn_agent.rl.sstn_train import TrainConfig

SIDE = 20


def small_policy_config(use_lstm: bool = True, side: int = SIDE) -> PolicyConfig:
    """LeNet 20 -> 16 -> 8 -> 4 -> 2 with tiny layers."""
    return PolicyConfig(
        use_lstm=use_lstm,
        lstm_hidden=8,
        input_side=side,
        lenet_channels=(2, 3),
        lenet_kernel=5,
        lenet_fc=8,
    )


def small_classifier_config(kind: str = "mlp", side: int = SIDE) -> ClassifierConfig:
    return ClassifierConfig(
        kind=kind,
        input_side=side,
        mlp_hidden=16,
        lenet_channels=(2, 3),
        lenet_kernel=5,
        lenet_fc=8,
    )


def small_train_config(**kwargs) -> TrainConfig:
    values = dict(
        algorithm="ac",
        batch_size=4,
        epochs=1,
        lr=1e-3,
        env=EnvConfig(episode_length=3),
        classifier=small_classifier_config(),
        policy=small_policy_config(),
    )
    values.update(kwargs)
    return TrainConfig(**values)


def random_bundle(count: int, side: int = SIDE, seed: int = 0, split="train"):
    """IDX-quantized random images with random labels."""
    rng = np.random.default_rng(seed)
    images = np.round(rng.random((count, 1, side, side)) * 255) / 255
    labels = rng.integers(10, size=count)
    return DatasetBundle(images.astype(np.float32), labels, split, seed)


def write_bundle(prefix: str, count: int, side: int = SIDE, seed: int = 0) -> str:
    sstn_dataset.write_dataset(prefix, random_bundle(count, side, seed))
    return prefix


def gaussian_blob(side: int, row: float, col: float, sigma: float = 2.0):
    rows, cols = np.mgrid[0:side, 0:side]
    return np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2 * sigma**2))


def template_classifier(template: np.ndarray, label: int = 0) -> MLPClassifier:
    """MLP whose logit for label grows with the overlap between image and template.

    Any image scores loss log(1 + 9 exp(-k * overlap)), which strictly
    decreases as the image moves onto the template.
    """
    side = template.shape[-1]
    classifier = MLPClassifier(
        ClassifierConfig(kind="mlp", input_side=side, mlp_hidden=2),
        np.random.default_rng(0),
    )
    flat = template.reshape(-1).astype(np.float64)
    hidden = np.zeros((side * side, 2))
    hidden[:, 0] = flat / np.dot(flat, flat)
    out = np.zeros((2, 10))
    out[0, label] = 8.0
    classifier.load_state_dict(
        {
            "hidden.weight": hidden,
            "hidden.bias": np.zeros(2),
            "out.weight": out,
            "out.bias": np.zeros(10),
        }
    )
    return classifier


def set_all(module, value: float) -> None:
    for param in module.parameters().values():
        param.data = np.full_like(param.data, value)
