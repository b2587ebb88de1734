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
"""End-to-end tests of the sstn.py subcommands."""
import gzip
import json
import os

import numpy as np
import pandas as pd
import pytest

import sstn
from sstn_agent.core import sstn_checkpoint, sstn_dataset, sstn_util
from sstn_agent.rl import consts, sstn_runs
from sstn_agent.rl.tests.helpers import write_bundle

SMALL_NETS = [
    "--mlp-hidden",
    "16",
    "--lenet-channels",
    "2,3",
    "--lenet-fc",
    "8",
    "--lstm-hidden",
    "8",
]


def run(tmp_path, *argv) -> int:
    return sstn.main(list(argv) + ["--log", str(tmp_path / "logs" / "sstn.log")])


@pytest.fixture
def source(tmp_path):
    rng = np.random.default_rng(0)
    images = str(tmp_path / "src-images-idx3-ubyte")
    labels = str(tmp_path / "src-labels-idx1-ubyte")
    sstn_dataset.write_idx(images, rng.random((20, 28, 28)))
    sstn_dataset.write_idx(labels, rng.integers(10, size=20), labels=True)
    return images, labels


@pytest.fixture
def trained(tmp_path):
    """A one-epoch run on 64 random 20x20 images."""
    data = write_bundle(str(tmp_path / "data" / "train"), 64, seed=1)
    run_dir = str(tmp_path / "run")
    code = run(
        tmp_path,
        "train",
        "--train-data",
        data,
        "--run-dir",
        run_dir,
        "--episode-length",
        "5",
        "--epochs",
        "1",
        "--batch",
        "16",
        *SMALL_NETS,
    )
    assert code == 0
    return data, run_dir


def generate_args(source, prefix, *extra):
    return [
        "generate",
        "--source-images",
        source[0],
        "--source-labels",
        source[1],
        "--count",
        "100",
        "--canvas",
        "32",
        "--patch-size",
        "4",
        "--out-prefix",
        prefix,
        *extra,
    ]


def test_generate_is_reproducible(tmp_path, source, capsys):
    first = str(tmp_path / "a" / "train")
    second = str(tmp_path / "b" / "train")
    assert run(tmp_path, *generate_args(source, first)) == 0
    assert "Generated 100 train images of 32x32" in capsys.readouterr().out
    assert run(tmp_path, *generate_args(source, second)) == 0
    for kind in ("images", "labels"):
        assert sstn_util.file_checksum(
            sstn_dataset.dataset_paths(first)[kind]
        ) == sstn_util.file_checksum(sstn_dataset.dataset_paths(second)[kind])
    bundle = sstn_dataset.load_dataset(first)
    assert bundle.images.shape == (100, 1, 32, 32)


def test_generate_refuses_to_overwrite(tmp_path, source):
    prefix = str(tmp_path / "gen" / "train")
    assert run(tmp_path, *generate_args(source, prefix)) == 0
    assert run(tmp_path, *generate_args(source, prefix)) == 2
    assert run(tmp_path, *generate_args(source, prefix, "-o")) == 0


def test_generate_with_missing_source(tmp_path, source):
    missing = (str(tmp_path / "nothing"), source[1])
    assert run(tmp_path, *generate_args(missing, str(tmp_path / "out"))) == 2


def test_generate_from_source_dir(tmp_path, source):
    source_dir = tmp_path / "source"
    source_dir.mkdir()
    names = sstn_dataset.SOURCE_FILES["test"]
    for path, name in zip(source, names):
        with open(path, "rb") as raw, gzip.open(str(source_dir / name), "wb") as fd:
            fd.write(raw.read())
    prefix = str(tmp_path / "gen" / "test")
    args = ["generate", "--source-dir", str(source_dir), "--split", "test"]
    args += ["--count", "10", "--canvas", "32", "--out-prefix", prefix]
    assert run(tmp_path, *args) == 0
    assert sstn_dataset.load_dataset(prefix).split == "test"


def test_generate_requires_arguments(tmp_path):
    assert run(tmp_path, "generate") == 2


def test_train_writes_a_run(tmp_path, trained):
    _, run_dir = trained
    assert sstn_runs.verify_run_dir(run_dir) == []
    metrics = pd.read_csv(os.path.join(run_dir, consts.METRICS_CSV))
    assert len(metrics) == 1
    assert metrics[consts.SPLIT].tolist() == ["train"]
    assert os.path.isfile(str(tmp_path / "logs" / "sstn.log"))


def test_train_rerun_needs_overwrite(tmp_path, trained):
    data, run_dir = trained
    args = ["train", "--train-data", data, "--run-dir", run_dir, "--epochs", "0"]
    assert run(tmp_path, *args, *SMALL_NETS) == 2
    assert run(tmp_path, *args, *SMALL_NETS, "--overwrite") == 0


def test_critic_lr_requires_actor_critic(tmp_path, trained):
    data, _ = trained
    code = run(
        tmp_path,
        "train",
        "--train-data",
        data,
        "--run-dir",
        str(tmp_path / "pg"),
        "--algorithm",
        "pg",
        "--critic-lr",
        "0.01",
    )
    assert code == 2
    assert not os.path.exists(str(tmp_path / "pg"))


def test_config_file_sets_defaults(tmp_path, trained):
    data, _ = trained
    config = tmp_path / "small.cfg"
    config.write_text(
        "# tiny networks\n"
        "epochs=2\n"
        "episode-length=2\n"
        "batch=32\n"
        "mlp-hidden=16\n"
        "lenet-channels=2,3\n"
        "lenet-fc=8\n"
        "lstm-hidden=8\n"
        "normalize-advantage=true\n"
    )
    run_dir = str(tmp_path / "configured")
    args = ["train", "--config", str(config), "--train-data", data]
    assert run(tmp_path, *args, "--run-dir", run_dir) == 0
    manifest = sstn_util.read_json_file(os.path.join(run_dir, consts.MANIFEST_JSON))
    assert manifest["config"]["epochs"] == 2
    assert manifest["config"]["batch_size"] == 32
    assert manifest["config"]["normalize_advantage"] is True
    assert manifest["config"]["env"]["episode_length"] == 2
    assert manifest["config"]["policy"]["lenet_channels"] == [2, 3]

    # command line flags win over the file
    override = str(tmp_path / "override")
    assert run(tmp_path, *args, "--run-dir", override, "--epochs", "1") == 0
    assert len(pd.read_csv(os.path.join(override, consts.METRICS_CSV))) == 1


def test_config_file_with_unknown_key(tmp_path, trained):
    data, _ = trained
    config = tmp_path / "bad.cfg"
    config.write_text("episodes=4\n")
    code = run(
        tmp_path,
        "train",
        "--config",
        str(config),
        "--train-data",
        data,
        "--run-dir",
        str(tmp_path / "bad"),
    )
    assert code == 2


def test_train_from_manifest_repeats_the_run(tmp_path, trained):
    _, run_dir = trained
    again = str(tmp_path / "again")
    manifest = os.path.join(run_dir, consts.MANIFEST_JSON)
    assert run(tmp_path, "train", "--from-manifest", manifest, "--run-dir", again) == 0
    columns = [consts.WALL_SECONDS]
    pd.testing.assert_frame_equal(
        pd.read_csv(os.path.join(run_dir, consts.METRICS_CSV)).drop(columns=columns),
        pd.read_csv(os.path.join(again, consts.METRICS_CSV)).drop(columns=columns),
    )


def test_evaluate_prints_accuracy(tmp_path, trained, capsys):
    data, run_dir = trained
    capsys.readouterr()
    code = run(tmp_path, "evaluate", "--run-dir", run_dir, "--test-data", data)
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.0 <= result[consts.ACCURACY] <= 1.0
    keys = {consts.ACCURACY, consts.MEAN_REWARD, "mean_loss", "per_class"}
    assert set(result) == keys


def identity_checkpoint(run_dir, path):
    params = sstn_checkpoint.load_checkpoint(
        os.path.join(run_dir, consts.FINAL_CHECKPOINT)
    )
    bias = np.zeros_like(params["policy.head.bias"])
    bias[9] = 1e3
    params["policy.head.bias"] = bias
    sstn_checkpoint.save_checkpoint(path, params)
    return path


def test_rollout_dump_with_identity_policy(tmp_path, trained):
    data, run_dir = trained
    checkpoint = identity_checkpoint(run_dir, str(tmp_path / "identity.sstn"))
    out_dir = str(tmp_path / "frames")
    code = run(
        tmp_path,
        "rollout_dump",
        "--run-dir",
        run_dir,
        "--checkpoint",
        checkpoint,
        "--data",
        data,
        "--indices",
        "0,3",
        "--episode-length",
        "3",
        "--out-dir",
        out_dir,
    )
    assert code == 0
    with open(os.path.join(out_dir, consts.ROLLOUT_ACTIONS_JSON)) as fd:
        assert json.load(fd) == {"0": [9, 9, 9], "3": [9, 9, 9]}
    frames = []
    for name in sorted(os.listdir(os.path.join(out_dir, "00003"))):
        with open(os.path.join(out_dir, "00003", name), "rb") as fd:
            frames.append(fd.read())
    assert len(frames) == 4
    assert len(set(frames)) == 1


def test_rollout_dump_with_unreadable_checkpoint(tmp_path, trained):
    """Corrupt, missing and directory checkpoints are input errors."""
    data, run_dir = trained
    broken = tmp_path / "broken.sstn"
    broken.write_bytes(b"not a checkpoint")
    args = ["rollout_dump", "--run-dir", run_dir, "--data", data]
    args += ["--out-dir", str(tmp_path / "frames")]
    assert run(tmp_path, *args, "--checkpoint", str(broken)) == 2
    missing = str(tmp_path / "missing.sstn")
    assert run(tmp_path, *args, "--checkpoint", missing) == 2
    folder = tmp_path / "folder.sstn"
    folder.mkdir()
    assert run(tmp_path, *args, "--checkpoint", str(folder)) == 2


def test_rollout_dump_rejects_bad_indices(tmp_path, trained):
    data, run_dir = trained
    args = ["rollout_dump", "--run-dir", run_dir, "--data", data]
    args += ["--out-dir", str(tmp_path / "frames"), "--indices", "64"]
    assert run(tmp_path, *args) == 2


def test_oracle_writes_json(tmp_path, trained, capsys):
    data, run_dir = trained
    out_dir = str(tmp_path / "oracle")
    capsys.readouterr()
    code = run(
        tmp_path,
        "oracle",
        "--run-dir",
        run_dir,
        "--data",
        data,
        "--index",
        "2",
        "--depth",
        "1",
        "--gap",
        "3",
        "--out-dir",
        out_dir,
    )
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    with open(os.path.join(out_dir, consts.ORACLE_JSON)) as fd:
        written = json.load(fd)
    assert printed == written
    assert written["num_evaluated"] == 10
    assert len(written["best_sequence"]) == 1
    assert written["policy_gap"]["num_images"] == 3
    assert min(written["policy_gap"]["gaps"]) >= 0.0


def test_oracle_over_budget(tmp_path, trained):
    data, run_dir = trained
    args = ["oracle", "--run-dir", run_dir, "--data", data, "--depth", "3"]
    assert run(tmp_path, *args, "--budget", "100") == 2


def test_ablate_writes_csv(tmp_path, trained, capsys):
    data, _ = trained
    out_dir = str(tmp_path / "ablation")
    code = run(
        tmp_path,
        "ablate",
        "--train-data",
        data,
        "--rewards",
        "r1,r3",
        "--episode-lengths",
        "2",
        "--seeds",
        "0",
        "--epochs",
        "1",
        "--batch",
        "32",
        "--out-dir",
        out_dir,
        *SMALL_NETS,
    )
    assert code == 0
    frame = pd.read_csv(os.path.join(out_dir, consts.ABLATION_CSV))
    assert frame[consts.SETTING].tolist() == ["r1-T2-s0", "r3-T2-s0"]
    assert "r3-T2-s0" in capsys.readouterr().out


def test_unknown_command(tmp_path):
    assert run(tmp_path, "dance") == 2
