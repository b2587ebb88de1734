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

"""Constant values used by the agent, trainers and run tooling."""

# Action and class space
NUM_ACTIONS = 10
NUM_CLASSES = 10

# Images
CANVAS_SIDE = 80

# Environment
DEFAULT_EPISODE_LENGTH = 40
DEFAULT_GAMMA = 0.98
REWARD_ACCURACY = "r1"
REWARD_NEG_LOSS = "r2"
REWARD_LOSS_DELTA = "r3"
REWARD_KINDS = (REWARD_ACCURACY, REWARD_NEG_LOSS, REWARD_LOSS_DELTA)
RETURNS_STANDARD = "standard"
RETURNS_AS_PRINTED = "as-printed"
RETURN_CONVENTIONS = (RETURNS_STANDARD, RETURNS_AS_PRINTED)

# Models
CLASSIFIER_MLP = "mlp"
CLASSIFIER_LENET = "lenet"
CLASSIFIER_KINDS = (CLASSIFIER_MLP, CLASSIFIER_LENET)
POLICY_LENET = "lenet"
POLICY_LENET_LSTM = "lenet-lstm"
POLICY_KINDS = (POLICY_LENET, POLICY_LENET_LSTM)
MLP_HIDDEN = 256
LENET_CHANNELS = (32, 64)
LENET_KERNEL = 5
LENET_FC = 256
LSTM_HIDDEN = 128

# Training
ALGORITHM_PG = "pg"
ALGORITHM_AC = "ac"
ALGORITHMS = (ALGORITHM_PG, ALGORITHM_AC)
DEFAULT_LR = 1e-4
DEFAULT_BATCH = 64
DEFAULT_EPOCHS = 20
EVAL_GREEDY = "greedy"
EVAL_SAMPLE = "sample"
EVAL_MODES = (EVAL_GREEDY, EVAL_SAMPLE)
CLASSIFIER_IMAGES_FINAL = "final"
CLASSIFIER_IMAGES_ALL = "all"
CLASSIFIER_IMAGES = (CLASSIFIER_IMAGES_FINAL, CLASSIFIER_IMAGES_ALL)

# Independent random streams derived from the run seed
STREAM_SHUFFLE = 0
STREAM_ACTIONS = 1
STREAM_EVAL = 2
STREAM_INIT_CLASSIFIER = 3
STREAM_INIT_POLICY = 4
STREAM_INIT_CRITIC = 5

# Oracle
ORACLE_BUDGET = 1_000_000

# Dataset scale
DESK_TRAIN_COUNT = 10_000
DESK_TEST_COUNT = 2_000
FULL_TRAIN_COUNT = 500_000
FULL_TEST_COUNT = 100_000

# Run directory layout
MANIFEST_JSON = "manifest.json"
METRICS_CSV = "metrics.csv"
FINAL_CHECKPOINT = "final.sstn"
CHECKPOINT_DIR = "checkpoints"
CHECKPOINT_PATTERN = "epoch-{epoch:04d}.sstn"
ABLATION_CSV = "ablation.csv"
ROLLOUT_ACTIONS_JSON = "actions.json"
ORACLE_JSON = "oracle.json"

# Metrics CSV columns
EPOCH = "epoch"
SPLIT = "split"
ACCURACY = "accuracy"
MEAN_REWARD = "mean_reward"
POLICY_LOSS = "policy_loss"
VALUE_LOSS = "value_loss"
CLASSIFIER_LOSS = "classifier_loss"
WALL_SECONDS = "wall_seconds"
METRICS_COLUMNS = [
    EPOCH,
    SPLIT,
    ACCURACY,
    MEAN_REWARD,
    POLICY_LOSS,
    VALUE_LOSS,
    CLASSIFIER_LOSS,
    WALL_SECONDS,
]

# Ablation CSV columns
SETTING = "setting"
REWARD_KIND = "reward_kind"
EPISODE_LENGTH = "episode_length"
SEED = "seed"
