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
"""Tests for run directories, metrics files, rollout dumps and sweeps."""
import dataclasses
import json
import os

import numpy as np
import pandas as pd
import pytest

from sstn_agent.core import sstn_checkpoint
from sstn_agent.core.sstn_errors import ConfigError, ParseError
from sstn_agent.core.sstn_geometry import ActionKind
from sstn_agent.rl import consts, sstn_runs
from sstn_agent.rl.sstn_env import EnvConfig
from sstn_agent.rl.sstn_models import FixedActionPolicy, build_classifier
from sstn_agent.rl.tests.helpers import (
    random_bundle,
    small_classifier_config,
    small_train_config,
    write_bundle,
)


@pytest.fixture
def data(tmp_path):
    train = write_bundle(str(tmp_path / "data" / "train"), 8, seed=1)
    test = write_bundle(str(tmp_path / "data" / "test"), 4, seed=2)
    return train, test


def without_wall_time(path):
    return sstn_runs.read_metrics(path).drop(columns=[consts.WALL_SECONDS])


def test_manifest_round_trip(tmp_path, data):
    config = small_train_config(seed=4)
    manifest = sstn_runs.RunManifest.create(config, *data)
    assert len(manifest.data_checksums) == 4
    assert manifest.seed == 4
    path = str(tmp_path / "manifest.json")
    manifest.write(path)
    loaded = sstn_runs.RunManifest.read(path)
    assert dataclasses.replace(loaded, config={}) == dataclasses.replace(
        manifest, config={}
    )
    assert loaded.train_config() == config


def test_manifest_read_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        sstn_runs.RunManifest.read(str(tmp_path / "missing.json"))
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"epochs": 3}))
    with pytest.raises(ParseError):
        sstn_runs.RunManifest.read(str(path))


def test_append_metrics_writes_header_once(tmp_path):
    path = str(tmp_path / "metrics.csv")
    row = {name: 0.0 for name in consts.METRICS_COLUMNS}
    row.update({consts.EPOCH: 0, consts.SPLIT: "train"})
    sstn_runs.append_metrics(path, [row])
    sstn_runs.append_metrics(path, [dict(row, epoch=1)])
    frame = sstn_runs.read_metrics(path)
    assert list(frame.columns) == consts.METRICS_COLUMNS
    assert frame[consts.EPOCH].tolist() == [0, 1]


def test_pgm_header_and_pixels():
    image = np.zeros((1, 80, 80), np.float32)
    image[0, 0, :3] = [1.0, 0.5, 0.2]
    raw = sstn_runs.pgm_bytes(image)
    header = b"P5\n80 80\n255\n"
    assert raw.startswith(header)
    assert len(raw) == len(header) + 6400
    assert list(raw[len(header) : len(header) + 4]) == [255, 128, 51, 0]


def test_run_training_writes_run_files(tmp_path, data):
    run_dir = str(tmp_path / "run")
    result = sstn_runs.run_training(small_train_config(), *data, run_dir)
    assert sstn_runs.verify_run_dir(run_dir) == []
    assert [row[consts.SPLIT] for row in result["rows"]] == ["train", "test"]
    manifest = sstn_runs.RunManifest.read(result["manifest"])
    assert manifest.finished is not None
    metrics = sstn_runs.read_metrics(result["metrics"])
    assert len(metrics) == 2
    assert not os.path.isdir(os.path.join(run_dir, consts.CHECKPOINT_DIR))

    with pytest.raises(ConfigError, match="overwrite"):
        sstn_runs.run_training(small_train_config(), *data, run_dir)
    sstn_runs.run_training(small_train_config(), *data, run_dir, overwrite=True)
    assert len(sstn_runs.read_metrics(result["metrics"])) == 2


def test_missing_run_files_are_reported(tmp_path):
    assert sstn_runs.verify_run_dir(str(tmp_path)) == list(sstn_runs.RUN_FILES)


def test_periodic_checkpoints(tmp_path, data):
    run_dir = str(tmp_path / "run")
    config = small_train_config(epochs=3, checkpoint_every=2)
    sstn_runs.run_training(config, data[0], None, run_dir)
    assert os.listdir(os.path.join(run_dir, consts.CHECKPOINT_DIR)) == [
        "epoch-0001.sstn"
    ]
    assert len(sstn_runs.read_metrics(os.path.join(run_dir, "metrics.csv"))) == 3


def test_rerun_reproduces_metrics(tmp_path, data):
    config = small_train_config(epochs=2, seed=3)
    first = sstn_runs.run_training(config, *data, str(tmp_path / "a"))
    second = sstn_runs.run_training(config, *data, str(tmp_path / "b"))
    pd.testing.assert_frame_equal(
        without_wall_time(first["metrics"]), without_wall_time(second["metrics"])
    )
    weights = sstn_checkpoint.load_checkpoint(first["checkpoint"])
    again = sstn_checkpoint.load_checkpoint(second["checkpoint"])
    assert weights.keys() == again.keys()
    for name, value in weights.items():
        np.testing.assert_array_equal(value, again[name])


def test_side_mismatch_is_rejected(tmp_path):
    prefix = write_bundle(str(tmp_path / "small"), 4, side=12)
    with pytest.raises(ConfigError, match="12x12"):
        sstn_runs.run_training(
            small_train_config(), prefix, None, str(tmp_path / "run")
        )


def test_load_agent_restores_final_weights(tmp_path, data):
    run_dir = str(tmp_path / "run")
    result = sstn_runs.run_training(small_train_config(), *data, run_dir)
    params = sstn_checkpoint.load_checkpoint(result["checkpoint"])
    config, classifier, policy = sstn_runs.load_agent(run_dir)
    assert config == small_train_config()
    for name, value in classifier.state_dict().items():
        np.testing.assert_array_equal(value, params["classifier." + name])
    for name, value in policy.state_dict().items():
        np.testing.assert_array_equal(value, params["policy." + name])

    evaluation = sstn_runs.evaluate_run(run_dir, data[1])
    assert 0.0 <= evaluation.accuracy <= 1.0
    assert evaluation == sstn_runs.evaluate_run(run_dir, data[1])


def test_fixed_policy_run_has_no_policy_weights(tmp_path, data):
    run_dir = str(tmp_path / "run")
    identity = FixedActionPolicy(ActionKind.IDENTITY)
    config = small_train_config(algorithm="pg")
    sstn_runs.run_training(config, *data, run_dir, policy=identity)
    _, _, policy = sstn_runs.load_agent(run_dir)
    assert policy is None
    with pytest.raises(ConfigError, match="no trained policy"):
        sstn_runs.evaluate_run(run_dir, data[1])
    result = sstn_runs.evaluate_run(run_dir, data[1], policy=identity)
    assert result.mean_reward == 0.0


def test_identity_rollout_dump_repeats_the_input(tmp_path):
    bundle = random_bundle(2)
    classifier = build_classifier(small_classifier_config(), np.random.default_rng(0))
    out_dir = str(tmp_path / "frames")
    summary = sstn_runs.dump_rollout(
        FixedActionPolicy(ActionKind.IDENTITY),
        classifier,
        bundle.images,
        bundle.labels,
        [5, 17],
        EnvConfig(episode_length=3),
        out_dir,
    )
    assert summary == {"5": [9, 9, 9], "17": [9, 9, 9]}
    frames = sorted(os.listdir(os.path.join(out_dir, "00017")))
    assert frames == ["t000.pgm", "t001.pgm", "t002.pgm", "t003.pgm"]
    contents = set()
    for name in frames:
        with open(os.path.join(out_dir, "00017", name), "rb") as fd:
            contents.add(fd.read())
    assert contents == {sstn_runs.pgm_bytes(bundle.images[1])}
    with open(os.path.join(out_dir, consts.ROLLOUT_ACTIONS_JSON)) as fd:
        assert json.load(fd) == summary


def test_translation_rollout_dump_moves_the_image(tmp_path):
    bundle = random_bundle(1)
    classifier = build_classifier(small_classifier_config(), np.random.default_rng(0))
    out_dir = str(tmp_path / "frames")
    sstn_runs.dump_rollout(
        FixedActionPolicy(ActionKind.TRANSLATE_X_POS),
        classifier,
        bundle.images,
        bundle.labels,
        [0],
        EnvConfig(episode_length=1),
        out_dir,
    )
    with open(os.path.join(out_dir, "00000", "t000.pgm"), "rb") as fd:
        before = fd.read()
    with open(os.path.join(out_dir, "00000", "t001.pgm"), "rb") as fd:
        after = fd.read()
    assert before != after


def test_ablation_settings_order():
    settings = sstn_runs.ablation_settings(["r1", "r3"], [2, 5], [0])
    names = [s.name for s in settings]
    assert names == ["r1-T2-s0", "r1-T5-s0", "r3-T2-s0", "r3-T5-s0"]


def test_reward_ablation(tmp_path, data):
    base = small_train_config()
    settings = sstn_runs.ablation_settings(consts.REWARD_KINDS, [2], [0])
    out_dir = str(tmp_path / "ablation")
    frame = sstn_runs.run_ablation(base, settings, *data, out_dir)
    assert len(frame) == 3 * 2
    assert sorted(frame[consts.REWARD_KIND].unique()) == ["r1", "r2", "r3"]
    assert set(frame[consts.EPISODE_LENGTH]) == {2}
    for setting in settings:
        assert sstn_runs.verify_run_dir(os.path.join(out_dir, setting.name)) == []
    written = pd.read_csv(os.path.join(out_dir, consts.ABLATION_CSV))
    assert len(written) == len(frame)

    summary = sstn_runs.final_accuracy(frame)
    assert summary[consts.SETTING].tolist() == [s.name for s in settings]

    again = sstn_runs.run_ablation(base, settings, *data, str(tmp_path / "again"))
    pd.testing.assert_frame_equal(
        frame.drop(columns=[consts.WALL_SECONDS]),
        again.drop(columns=[consts.WALL_SECONDS]),
    )

    with pytest.raises(ConfigError, match="overwrite"):
        sstn_runs.run_ablation(base, settings, *data, out_dir)
    with pytest.raises(ConfigError):
        sstn_runs.run_ablation(base, [], *data, str(tmp_path / "empty"))
