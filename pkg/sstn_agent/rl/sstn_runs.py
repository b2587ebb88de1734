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

"""Run directories: manifests, metrics, checkpoints, rollout dumps, sweeps.

A run directory holds manifest.json (written before training starts),
metrics.csv (appended after every epoch), final.sstn and optionally
checkpoints/epoch-NNNN.sstn. A run missing any of the first three failed.
"""
import concurrent.futures
import dataclasses
import datetime
import itertools
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import sstn_agent
from sstn_agent.core import sstn_checkpoint, sstn_util
from sstn_agent.core.sstn_dataset import DatasetBundle, dataset_paths, load_dataset
from sstn_agent.core.sstn_errors import ConfigError, ParseError
from sstn_agent.rl import consts
from sstn_agent.rl.sstn_env import EnvConfig, TransformEnvironment
from sstn_agent.rl.sstn_models import Module, PolicyNetwork, build_classifier
from sstn_agent.rl.sstn_train import (
    EvalResult,
    SSTNTrainer,
    TrainConfig,
    evaluate,
    rollout,
    stream,
)

logger = logging.getLogger("sstn")

RUN_FILES = (consts.MANIFEST_JSON, consts.METRICS_CSV, consts.FINAL_CHECKPOINT)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclasses.dataclass
class RunManifest:
    """Everything needed to repeat a run."""

    config: Dict
    seed: int
    train_data: str
    test_data: Optional[str] = None
    data_checksums: Dict[str, str] = dataclasses.field(default_factory=dict)
    version: str = sstn_agent.__version__
    started: str = dataclasses.field(default_factory=_now)
    finished: Optional[str] = None

    @classmethod
    def create(
        cls, config: TrainConfig, train_data: str, test_data: Optional[str] = None
    ) -> "RunManifest":
        checksums = {}
        for prefix in filter(None, (train_data, test_data)):
            for kind in ("images", "labels"):
                path = dataset_paths(prefix)[kind]
                checksums[os.path.basename(path)] = sstn_util.file_checksum(path)
        return cls(config.to_dict(), config.seed, train_data, test_data, checksums)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def write(self, path: str) -> None:
        if not sstn_util.write_json_file(path, dataclasses.asdict(self)):
            raise OSError(f"Could not write run manifest {path}")

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        """Load a manifest.

        Raises:
          FileNotFoundError: path does not exist
          ParseError: the file is not a run manifest
        """
        if not os.path.isfile(path):
            raise FileNotFoundError(f"No run manifest at {path}")
        data = sstn_util.read_json_file(path)
        if not isinstance(data, dict) or "config" not in data:
            raise ParseError("not a run manifest", 0, path)
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in fields})


def checkpoint_path(run_dir: str, epoch: int) -> str:
    return os.path.join(
        run_dir, consts.CHECKPOINT_DIR, consts.CHECKPOINT_PATTERN.format(epoch=epoch)
    )


def append_metrics(path: str, rows: List[dict]) -> None:
    """Append metric rows to a CSV, writing the header on first use."""
    frame = pd.DataFrame(rows, columns=consts.METRICS_COLUMNS)
    frame.to_csv(path, mode="a", header=not os.path.isfile(path), index=False)


def read_metrics(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def verify_run_dir(run_dir: str) -> List[str]:
    """Names of the required run files that are missing."""
    return [
        name for name in RUN_FILES if not os.path.isfile(os.path.join(run_dir, name))
    ]


def _check_side(config: TrainConfig, dataset: DatasetBundle) -> None:
    sides = {config.classifier.input_side, config.policy.input_side}
    if sides != {dataset.side}:
        raise ConfigError(
            f"dataset images are {dataset.side}x{dataset.side} but the networks "
            f"expect sides {sorted(sides)}"
        )


def run_training(
    config: TrainConfig,
    train_data: str,
    test_data: Optional[str],
    run_dir: str,
    overwrite: bool = False,
    policy=None,
) -> Dict:
    """Train one configuration into a run directory.

    Args:
      config: training configuration
      train_data: dataset prefix of the training split
      test_data: dataset prefix of the test split, optional
      run_dir: output directory
      overwrite: replace the outputs of a previous run
      policy: non-learned policy replacing the policy network

    Returns:
      dictionary: paths of the run files and the last metric rows

    Raises:
      ConfigError: run_dir holds a previous run and overwrite is not set, or
        the dataset does not match the network input size
    """
    if not sstn_util.make_dirs(run_dir, overwrite, RUN_FILES):
        raise ConfigError(f"{run_dir} already holds a run; pass --overwrite")
    train_set = load_dataset(train_data, "train")
    test_set = load_dataset(test_data, "test") if test_data else None
    _check_side(config, train_set)
    if test_set is not None:
        _check_side(config, test_set)

    manifest_path = os.path.join(run_dir, consts.MANIFEST_JSON)
    metrics_path = os.path.join(run_dir, consts.METRICS_CSV)
    for stale in (metrics_path, os.path.join(run_dir, consts.FINAL_CHECKPOINT)):
        if os.path.isfile(stale):
            os.remove(stale)
    manifest = RunManifest.create(config, train_data, test_data)
    manifest.write(manifest_path)

    def on_epoch(epoch: int, rows: List[dict], trainer: SSTNTrainer) -> None:
        append_metrics(metrics_path, rows)
        every = config.checkpoint_every
        if every and (epoch + 1) % every == 0:
            path = checkpoint_path(run_dir, epoch)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            sstn_checkpoint.save_checkpoint(path, trainer.state_dict())

    logger.info(
        "Training %s on %d images into %s", config.algorithm, len(train_set), run_dir
    )
    trainer = SSTNTrainer(config, train_set, test_set, policy)
    rows = trainer.fit(on_epoch)
    if not rows:
        append_metrics(metrics_path, [])
    final_path = os.path.join(run_dir, consts.FINAL_CHECKPOINT)
    sstn_checkpoint.save_checkpoint(final_path, trainer.state_dict())
    manifest.finished = _now()
    manifest.write(manifest_path)
    return {
        "run_dir": run_dir,
        "manifest": manifest_path,
        "metrics": metrics_path,
        "checkpoint": final_path,
        "rows": rows,
    }


def load_agent(
    run_dir: str, checkpoint: Optional[str] = None
) -> Tuple[TrainConfig, Module, Optional[PolicyNetwork]]:
    """Rebuild classifier and policy of a run from its manifest and a checkpoint.

    Returns:
      (config, classifier, policy); policy is None when the checkpoint holds
      no policy parameters

    Raises:
      FileNotFoundError: manifest or checkpoint missing
      ParseError: unreadable checkpoint
    """
    manifest = RunManifest.read(os.path.join(run_dir, consts.MANIFEST_JSON))
    config = manifest.train_config()
    params = sstn_checkpoint.load_checkpoint(
        checkpoint or os.path.join(run_dir, consts.FINAL_CHECKPOINT)
    )
    classifier = build_classifier(
        config.classifier, stream(config.seed, consts.STREAM_INIT_CLASSIFIER)
    )
    classifier.load_state_dict(params, "classifier.")
    policy = None
    if any(name.startswith("policy.") for name in params):
        policy = PolicyNetwork(
            config.policy, stream(config.seed, consts.STREAM_INIT_POLICY)
        )
        policy.load_state_dict(params, "policy.")
    return config, classifier, policy


def evaluate_run(
    run_dir: str,
    test_data: str,
    mode: Optional[str] = None,
    checkpoint: Optional[str] = None,
    episode_length: Optional[int] = None,
    policy=None,
) -> EvalResult:
    """Evaluate a trained run on a dataset."""
    config, classifier, trained = load_agent(run_dir, checkpoint)
    policy = policy or trained
    if policy is None:
        raise ConfigError(f"{run_dir} has no trained policy; pass a fixed policy")
    env_config = config.env
    if episode_length:
        env_config = dataclasses.replace(env_config, episode_length=episode_length)
    dataset = load_dataset(test_data, "test")
    _check_side(config, dataset)
    result = evaluate(
        policy,
        classifier,
        dataset,
        env_config,
        mode or config.eval_mode,
        stream(config.seed, consts.STREAM_EVAL),
        config.batch_size,
    )
    logger.info(
        "Evaluated %s on %d images: accuracy %.4f",
        run_dir,
        len(dataset),
        result.accuracy,
    )
    return result


def pgm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PGM of a [H x W] (or [1 x H x W]) image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    height, width = image.shape
    pixels = np.clip(np.rint(image.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as fd:
        fd.write(pgm_bytes(image))


def dump_rollout(
    policy,
    classifier: Module,
    images: np.ndarray,
    labels: np.ndarray,
    indices: Sequence[int],
    env_config: EnvConfig,
    out_dir: str,
    mode: str = consts.EVAL_GREEDY,
    seed: int = 0,
) -> Dict[str, List[int]]:
    """Write the transformed image sequence of every input as PGM frames.

    Frames t=0..T go to out_dir/NNNNN/tTTT.pgm, frame 0 being the input, and
    the chosen actions to out_dir/actions.json keyed by dataset index.

    Returns:
      dictionary: dataset index (as string) to action list
    """
    env = TransformEnvironment(classifier, env_config)
    trace = rollout(
        env,
        policy,
        images,
        labels,
        stream(seed, consts.STREAM_EVAL),
        mode,
        keep_images=True,
    )
    actions = np.stack(trace.actions, axis=1)
    frames = [np.asarray(images, dtype=np.float32)] + trace.images
    summary = {}
    for row, index in enumerate(indices):
        image_dir = os.path.join(out_dir, f"{int(index):05d}")
        os.makedirs(image_dir, exist_ok=True)
        for t, batch in enumerate(frames):
            write_pgm(os.path.join(image_dir, f"t{t:03d}.pgm"), batch[row])
        summary[str(int(index))] = [int(a) for a in actions[row]]
    path = os.path.join(out_dir, consts.ROLLOUT_ACTIONS_JSON)
    if not sstn_util.write_json_file(path, summary):
        raise OSError(f"Could not write {path}")
    logger.info(
        "Dumped %d rollouts of %d steps to %s", len(summary), len(trace), out_dir
    )
    return summary


@dataclasses.dataclass(frozen=True)
class AblationSetting:
    reward_kind: str
    episode_length: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.reward_kind}-T{self.episode_length}-s{self.seed}"


def ablation_settings(
    reward_kinds: Sequence[str], episode_lengths: Sequence[int], seeds: Sequence[int]
) -> List[AblationSetting]:
    """Cross product of the requested settings in a fixed order."""
    return [
        AblationSetting(reward, int(length), int(seed))
        for reward, length, seed in itertools.product(
            reward_kinds, episode_lengths, seeds
        )
    ]


def _configure(base: TrainConfig, setting: AblationSetting) -> TrainConfig:
    env = dataclasses.replace(
        base.env,
        reward_kind=setting.reward_kind,
        episode_length=setting.episode_length,
    )
    return dataclasses.replace(base, env=env, seed=setting.seed)


def _run_setting(args) -> List[dict]:
    base, setting, train_data, test_data, out_dir, overwrite = args
    result = run_training(
        _configure(base, setting),
        train_data,
        test_data,
        os.path.join(out_dir, setting.name),
        overwrite,
    )
    return [
        dict(
            {
                consts.SETTING: setting.name,
                consts.REWARD_KIND: setting.reward_kind,
                consts.EPISODE_LENGTH: setting.episode_length,
                consts.SEED: setting.seed,
            },
            **row,
        )
        for row in result["rows"]
    ]


def run_ablation(
    base: TrainConfig,
    settings: Sequence[AblationSetting],
    train_data: str,
    test_data: Optional[str],
    out_dir: str,
    workers: int = 1,
    overwrite: bool = False,
) -> pd.DataFrame:
    """Train every setting into its own run directory and collect the curves.

    Args:
      base: configuration shared by all settings
      settings: reward kind, episode length and seed per run
      train_data: training dataset prefix
      test_data: test dataset prefix, optional
      out_dir: parent of the per-setting run directories
      workers: number of parallel processes
      overwrite: replace previous runs

    Returns:
      DataFrame: one row per setting, epoch and split, also written to
        out_dir/ablation.csv
    """
    if not settings:
        raise ConfigError("ablation needs at least one setting")
    if not sstn_util.make_dirs(out_dir, overwrite, [consts.ABLATION_CSV]):
        raise ConfigError(f"{out_dir} already holds an ablation; pass --overwrite")
    jobs = [(base, s, train_data, test_data, out_dir, overwrite) for s in settings]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_setting, jobs))
    else:
        results = [_run_setting(job) for job in jobs]
    columns = [
        consts.SETTING,
        consts.REWARD_KIND,
        consts.EPISODE_LENGTH,
        consts.SEED,
    ] + consts.METRICS_COLUMNS
    frame = pd.DataFrame([row for rows in results for row in rows], columns=columns)
    frame.to_csv(os.path.join(out_dir, consts.ABLATION_CSV), index=False)
    logger.info("Ablation of %d settings written to %s", len(settings), out_dir)
    return frame


def final_accuracy(frame: pd.DataFrame, split: str = "test") -> pd.DataFrame:
    """Last-epoch accuracy per setting."""
    rows = frame[frame[consts.SPLIT] == split]
    ordered = rows.sort_values(consts.EPOCH, kind="stable")
    last = ordered.groupby(consts.SETTING, sort=False).tail(1)
    columns = [
        consts.SETTING,
        consts.REWARD_KIND,
        consts.EPISODE_LENGTH,
        consts.SEED,
        consts.ACCURACY,
    ]
    return last[columns].reset_index(drop=True)
