# !/usr/bin/env python3

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

"""Command line tool for the sequential spatial transformer agent.

The user can invoke it to perform the following:
  Download the MNIST or Fashion-MNIST source files.
  Generate cluttered canvas datasets.
  Train a transformation policy and classifier into a run directory.
  Evaluate a run, dump transformed image sequences, sweep ablations.
  Search short action sequences exhaustively and compare against a policy.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from logging import handlers
from typing import List, Optional

import numpy as np

from sstn_agent.core import sstn_dataset, sstn_util
from sstn_agent.core.sstn_errors import ConfigError, ParseError
from sstn_agent.rl import consts, sstn_oracle, sstn_runs
from sstn_agent.rl.sstn_env import EnvConfig
from sstn_agent.rl.sstn_models import ClassifierConfig, PolicyConfig, RandomPolicy
from sstn_agent.rl.sstn_train import TrainConfig

LOG_FILE_NAME = "logs/sstn.log"
LOG_SEPARATOR = "-" * 100
logging.basicConfig(level=logging.NOTSET)
logger = logging.getLogger(name="sstn")


def get_logger(log_path: str):
    """Configure the logger.

    Args:
      log_path: path to the log file
    """
    try:
        if not os.path.exists(os.path.dirname(log_path)):
            os.makedirs(os.path.dirname(log_path))
    except Exception:
        logger.info("Issue while creating log directory")
        exc_type, exc_value, exc_traceback = sys.exc_info()
        logger.error(
            " ".join(
                map(str, traceback.format_exception(exc_type, exc_value, exc_traceback))
            )
        )
    log_path = os.path.abspath(log_path)
    for handler in logger.handlers:
        if getattr(handler, "baseFilename", None) == log_path:
            return
    file_handler = handlers.TimedRotatingFileHandler(
        log_path, when="midnight", interval=1, backupCount=30
    )
    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)


def _default_log() -> str:
    return os.path.join(
        os.path.abspath(os.path.join(sstn_util.get_root_dir(), os.pardir)),
        LOG_FILE_NAME,
    )


def _int_list(value: str) -> List[int]:
    return [int(item) for item in str(value).split(",") if item.strip()]


def _str_list(value: str) -> List[str]:
    return [item.strip() for item in str(value).split(",") if item.strip()]


def _print_json(data) -> None:
    print(json.dumps(data, indent=4))


def _image_side(prefix: str) -> int:
    path = sstn_dataset.dataset_paths(sstn_util.get_abs_path(prefix))["images"]
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Dataset images {path} do not exist")
    return int(sstn_dataset.idx_shape(path)[-1])


def build_train_config(args, side: int) -> TrainConfig:
    """Training configuration from parsed train/ablate arguments."""
    networks = dict(
        input_side=side,
        lenet_channels=tuple(args.lenet_channels),
        lenet_kernel=args.lenet_kernel,
        lenet_fc=args.lenet_fc,
    )
    return TrainConfig(
        algorithm=args.algorithm,
        batch_size=args.batch,
        epochs=args.epochs,
        lr=args.lr,
        critic_lr=args.critic_lr,
        env=EnvConfig(
            args.episode_length, args.reward, args.gamma, args.return_convention
        ),
        classifier=ClassifierConfig(
            kind=args.classifier, mlp_hidden=args.mlp_hidden, **networks
        ),
        policy=PolicyConfig.from_kind(
            args.policy, lstm_hidden=args.lstm_hidden, **networks
        ),
        eval_mode=args.eval_mode,
        seed=args.seed,
        normalize_advantage=args.normalize_advantage,
        entropy_coef=args.entropy_coef,
        classifier_images=args.classifier_images,
        pretrain_classifier=args.pretrain_classifier,
        checkpoint_every=args.checkpoint_every,
    )


def cmd_generate(args):
    """Generate a cluttered dataset from a source IDX pair."""
    if args.source_dir and not (args.source_images or args.source_labels):
        source = sstn_dataset.source_split_paths(args.source_dir, args.split)
        args.source_images, args.source_labels = source["images"], source["labels"]
    if not args.source_images or not args.source_labels or not args.out_prefix:
        args.command_parser.error(
            "--source-images and --source-labels (or --source-dir) and --out-prefix "
            "are required"
        )
    images = sstn_dataset.read_idx(sstn_util.get_abs_path(args.source_images))
    labels = sstn_dataset.read_idx(sstn_util.get_abs_path(args.source_labels))
    if images.ndim != 3 or labels.ndim != 1:
        raise ConfigError("--source-images and --source-labels are swapped")
    prefix = sstn_util.get_abs_path(args.out_prefix)
    paths = sstn_dataset.dataset_paths(prefix)
    if not sstn_util.make_dirs(
        os.path.dirname(prefix),
        args.overwrite,
        {os.path.basename(path) for path in paths.values()},
    ):
        raise ConfigError(f"Dataset {prefix} already exists; pass --overwrite")
    config = sstn_dataset.ClutterConfig(
        count=args.count,
        canvas=args.canvas,
        clutter_patches=args.clutter_patches,
        patch_size=args.patch_size,
        seed=args.seed,
        split=args.split,
    )
    bundle = sstn_dataset.make_cluttered(images, labels, config)
    sstn_dataset.write_dataset(prefix, bundle, dataclasses.asdict(config))
    counts = np.bincount(bundle.labels, minlength=sstn_dataset.NUM_CLASSES)
    print(
        f"Generated {len(bundle)} {config.split} images of "
        f"{config.canvas}x{config.canvas} at {prefix}"
    )
    print("Images per class: " + ", ".join(str(int(c)) for c in counts))


def cmd_fetch(args):
    """Download the gzipped source IDX files."""
    paths = sstn_dataset.download_source(
        args.dataset,
        sstn_util.get_abs_path(args.out_dir),
        args.base_url,
        args.overwrite,
    )
    _print_json(paths)


def cmd_train(args):
    """Train into a run directory, from flags or from a previous manifest."""
    if not args.run_dir:
        args.command_parser.error("--run-dir is required")
    run_dir = sstn_util.get_abs_path(args.run_dir)
    if args.from_manifest:
        manifest = sstn_runs.RunManifest.read(
            sstn_util.get_abs_path(args.from_manifest)
        )
        config = manifest.train_config()
        train_data = args.train_data or manifest.train_data
        test_data = args.test_data or manifest.test_data
    else:
        if not args.train_data:
            args.command_parser.error("--train-data or --from-manifest is required")
        train_data, test_data = args.train_data, args.test_data
        config = build_train_config(args, _image_side(train_data))
    result = sstn_runs.run_training(
        config,
        sstn_util.get_abs_path(train_data),
        sstn_util.get_abs_path(test_data) if test_data else None,
        run_dir,
        args.overwrite,
    )
    for row in result["rows"][-2:]:
        print(
            f"epoch {row[consts.EPOCH]} {row[consts.SPLIT]}: accuracy "
            f"{row[consts.ACCURACY]:.4f}, mean reward {row[consts.MEAN_REWARD]:.4f}"
        )
    print(f"Run written to {run_dir}")


def cmd_evaluate(args):
    """Evaluate a run on a dataset and print accuracy and reward."""
    if not args.run_dir or not args.test_data:
        args.command_parser.error("--run-dir and --test-data are required")
    result = sstn_runs.evaluate_run(
        sstn_util.get_abs_path(args.run_dir),
        sstn_util.get_abs_path(args.test_data),
        args.eval_mode,
        sstn_util.get_abs_path(args.checkpoint) if args.checkpoint else None,
        args.episode_length,
    )
    _print_json(
        {
            consts.ACCURACY: result.accuracy,
            consts.MEAN_REWARD: result.mean_reward,
            "mean_loss": result.mean_loss,
            "per_class": {str(k): v for k, v in result.per_class.items()},
        }
    )


def cmd_rollout_dump(args):
    """Write transformed image sequences as PGM frames plus actions JSON."""
    if not args.run_dir or not args.data or not args.out_dir:
        args.command_parser.error("--run-dir, --data and --out-dir are required")
    config, classifier, policy = sstn_runs.load_agent(
        sstn_util.get_abs_path(args.run_dir),
        sstn_util.get_abs_path(args.checkpoint) if args.checkpoint else None,
    )
    if policy is None:
        raise ConfigError(f"{args.run_dir} has no trained policy")
    dataset = sstn_dataset.load_dataset(sstn_util.get_abs_path(args.data))
    indices = args.indices or list(range(min(args.count, len(dataset))))
    if any(i < 0 or i >= len(dataset) for i in indices):
        raise ConfigError(f"indices must lie in [0, {len(dataset)})")
    out_dir = sstn_util.get_abs_path(args.out_dir)
    if not sstn_util.make_dirs(out_dir, args.overwrite, [consts.ROLLOUT_ACTIONS_JSON]):
        raise ConfigError(f"{out_dir} already holds a rollout; pass --overwrite")
    env_config = config.env
    if args.episode_length:
        env_config = dataclasses.replace(env_config, episode_length=args.episode_length)
    summary = sstn_runs.dump_rollout(
        policy,
        classifier,
        dataset.images[indices],
        dataset.labels[indices],
        indices,
        env_config,
        out_dir,
        args.eval_mode or config.eval_mode,
        config.seed,
    )
    print(
        f"Wrote {env_config.episode_length + 1} frames for {len(summary)} "
        f"images to {out_dir}"
    )


def cmd_ablate(args):
    """Sweep reward kinds, episode lengths and seeds."""
    if not args.train_data or not args.out_dir:
        args.command_parser.error("--train-data and --out-dir are required")
    base = build_train_config(args, _image_side(args.train_data))
    settings = sstn_runs.ablation_settings(
        args.rewards, args.episode_lengths, args.seeds
    )
    frame = sstn_runs.run_ablation(
        base,
        settings,
        sstn_util.get_abs_path(args.train_data),
        sstn_util.get_abs_path(args.test_data) if args.test_data else None,
        sstn_util.get_abs_path(args.out_dir),
        args.workers,
        args.overwrite,
    )
    split = "test" if args.test_data else "train"
    print(sstn_runs.final_accuracy(frame, split).to_string(index=False))


def cmd_oracle(args):
    """Exhaustive search for one image, optionally the policy gap over many."""
    if not args.run_dir or not args.data:
        args.command_parser.error("--run-dir and --data are required")
    _, classifier, policy = sstn_runs.load_agent(
        sstn_util.get_abs_path(args.run_dir),
        sstn_util.get_abs_path(args.checkpoint) if args.checkpoint else None,
    )
    dataset = sstn_dataset.load_dataset(sstn_util.get_abs_path(args.data))
    if not 0 <= args.index < len(dataset):
        raise ConfigError(f"--index must lie in [0, {len(dataset)})")
    result = sstn_oracle.exhaustive_search(
        dataset.images[args.index],
        int(dataset.labels[args.index]),
        classifier,
        args.depth,
        args.actions,
        args.budget,
        args.beam_width,
    )
    output = result.to_dict()
    if args.gap:
        count = min(args.gap, len(dataset))
        report = sstn_oracle.policy_gap(
            policy if policy is not None else RandomPolicy(args.actions),
            classifier,
            dataset.images[:count],
            dataset.labels[:count],
            args.depth,
            args.actions,
            args.budget,
            args.beam_width,
        )
        output["policy_gap"] = report.to_dict()
    _print_json(output)
    if args.out_dir:
        out_dir = sstn_util.get_abs_path(args.out_dir)
        if not sstn_util.make_dirs(out_dir, args.overwrite, [consts.ORACLE_JSON]):
            raise ConfigError(f"{out_dir} already holds oracle output")
        path = os.path.join(out_dir, consts.ORACLE_JSON)
        if not sstn_util.write_json_file(path, output):
            raise OSError(f"Could not write oracle output to {out_dir}")


def _add_common_args(parser):
    parser.add_argument(
        "--config",
        help="Plain-text key=value file with default values for the flags",
    )
    parser.add_argument(
        "--log",
        dest="log",
        default=_default_log(),
        help="Full path to the output log file. Default log file {}".format(
            _default_log()
        ),
    )
    parser.add_argument(
        "-o",
        "--overwrite",
        dest="overwrite",
        action="store_true",
        help="Overwrite the existing output files",
    )


def _add_model_args(parser):
    parser.add_argument(
        "--classifier", default=consts.CLASSIFIER_MLP, choices=consts.CLASSIFIER_KINDS
    )
    parser.add_argument(
        "--policy", default=consts.POLICY_LENET_LSTM, choices=consts.POLICY_KINDS
    )
    parser.add_argument("--mlp-hidden", type=int, default=consts.MLP_HIDDEN)
    parser.add_argument(
        "--lenet-channels",
        type=_int_list,
        default=list(consts.LENET_CHANNELS),
        help="Comma separated channel counts of the two conv layers",
    )
    parser.add_argument("--lenet-kernel", type=int, default=consts.LENET_KERNEL)
    parser.add_argument("--lenet-fc", type=int, default=consts.LENET_FC)
    parser.add_argument("--lstm-hidden", type=int, default=consts.LSTM_HIDDEN)


def _add_train_args(parser):
    parser.add_argument("--train-data", help="Dataset prefix of the training split")
    parser.add_argument("--test-data", help="Dataset prefix of the test split")
    _add_model_args(parser)
    parser.add_argument(
        "--algorithm", default=consts.ALGORITHM_AC, choices=consts.ALGORITHMS
    )
    parser.add_argument(
        "--reward", default=consts.REWARD_LOSS_DELTA, choices=consts.REWARD_KINDS
    )
    parser.add_argument(
        "--episode-length", type=int, default=consts.DEFAULT_EPISODE_LENGTH
    )
    parser.add_argument("--gamma", type=float, default=consts.DEFAULT_GAMMA)
    parser.add_argument(
        "--return-convention",
        default=consts.RETURNS_STANDARD,
        choices=consts.RETURN_CONVENTIONS,
    )
    parser.add_argument("--lr", type=float, default=consts.DEFAULT_LR)
    parser.add_argument(
        "--critic-lr",
        type=float,
        default=None,
        help="Critic learning rate, actor-critic only. Defaults to --lr",
    )
    parser.add_argument("--batch", type=int, default=consts.DEFAULT_BATCH)
    parser.add_argument("--epochs", type=int, default=consts.DEFAULT_EPOCHS)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--normalize-advantage", action="store_true")
    parser.add_argument("--entropy-coef", type=float, default=0.0)
    parser.add_argument(
        "--classifier-images",
        default=consts.CLASSIFIER_IMAGES_FINAL,
        choices=consts.CLASSIFIER_IMAGES,
    )
    parser.add_argument(
        "--pretrain-classifier",
        type=int,
        default=0,
        help="Epochs of plain classifier training before the joint training",
    )
    parser.add_argument(
        "--checkpoint-every",
        type=int,
        default=0,
        help="Write a checkpoint every K epochs, 0 for the final one only",
    )
    parser.add_argument(
        "--eval-mode", default=consts.EVAL_GREEDY, choices=consts.EVAL_MODES
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__)
    subparsers = parser.add_subparsers(
        dest="command", help="Sequential spatial transformer agent"
    )
    subparsers.required = True

    # Parameters for dataset generation:
    parser_generate = subparsers.add_parser(
        "generate", help="Generate a cluttered dataset from source IDX files."
    )
    parser_generate.add_argument("--source-images", help="Source IDX image file")
    parser_generate.add_argument("--source-labels", help="Source IDX label file")
    parser_generate.add_argument(
        "--source-dir", help="Directory of fetched source files, picked by --split"
    )
    parser_generate.add_argument("--count", type=int, default=consts.DESK_TRAIN_COUNT)
    parser_generate.add_argument(
        "--canvas", type=int, default=sstn_dataset.DEFAULT_CANVAS
    )
    parser_generate.add_argument(
        "--clutter-patches", type=int, default=sstn_dataset.DEFAULT_CLUTTER_PATCHES
    )
    parser_generate.add_argument(
        "--patch-size", type=int, default=sstn_dataset.DEFAULT_PATCH_SIZE
    )
    parser_generate.add_argument("--seed", type=int, default=0)
    parser_generate.add_argument("--split", default="train", choices=["train", "test"])
    parser_generate.add_argument(
        "--out-prefix", help="Output path prefix of the IDX pair"
    )
    parser_generate.set_defaults(handler=cmd_generate, command_parser=parser_generate)

    # Parameters for source download:
    parser_fetch = subparsers.add_parser(
        "fetch", help="Download MNIST or Fashion-MNIST source files."
    )
    parser_fetch.add_argument(
        "--dataset", default="mnist", choices=sorted(sstn_dataset.SOURCE_URLS)
    )
    parser_fetch.add_argument("--out-dir", default="data/source")
    parser_fetch.add_argument("--base-url", help="Mirror to download from")
    parser_fetch.set_defaults(handler=cmd_fetch, command_parser=parser_fetch)

    # Parameters for training:
    parser_train = subparsers.add_parser(
        "train", help="Train policy and classifier into a run directory."
    )
    _add_train_args(parser_train)
    parser_train.add_argument("--run-dir", help="Output run directory")
    parser_train.add_argument(
        "--from-manifest", help="Repeat the run described by a manifest.json"
    )
    parser_train.set_defaults(handler=cmd_train, command_parser=parser_train)

    # Parameters for evaluation:
    parser_evaluate = subparsers.add_parser(
        "evaluate", help="Evaluate a trained run on a dataset."
    )
    parser_evaluate.add_argument("--run-dir")
    parser_evaluate.add_argument("--test-data")
    parser_evaluate.add_argument("--checkpoint", help="Defaults to the final one")
    parser_evaluate.add_argument("--eval-mode", choices=consts.EVAL_MODES)
    parser_evaluate.add_argument("--episode-length", type=int)
    parser_evaluate.set_defaults(handler=cmd_evaluate, command_parser=parser_evaluate)

    # Parameters for rollout dumps:
    parser_dump = subparsers.add_parser(
        "rollout_dump", help="Write transformed image sequences as PGM files."
    )
    parser_dump.add_argument("--run-dir")
    parser_dump.add_argument("--checkpoint", help="Defaults to the final one")
    parser_dump.add_argument("--data", help="Dataset prefix")
    parser_dump.add_argument(
        "--indices", type=_int_list, help="Comma separated dataset indices"
    )
    parser_dump.add_argument("--count", type=int, default=8)
    parser_dump.add_argument("--episode-length", type=int)
    parser_dump.add_argument("--eval-mode", choices=consts.EVAL_MODES)
    parser_dump.add_argument("--out-dir")
    parser_dump.set_defaults(handler=cmd_rollout_dump, command_parser=parser_dump)

    # Parameters for ablation sweeps:
    parser_ablate = subparsers.add_parser(
        "ablate", help="Train a cross product of reward kinds and episode lengths."
    )
    _add_train_args(parser_ablate)
    parser_ablate.add_argument(
        "--rewards", type=_str_list, default=list(consts.REWARD_KINDS)
    )
    parser_ablate.add_argument(
        "--episode-lengths",
        type=_int_list,
        default=[consts.DEFAULT_EPISODE_LENGTH],
    )
    parser_ablate.add_argument("--seeds", type=_int_list, default=[0])
    parser_ablate.add_argument("--workers", type=int, default=1)
    parser_ablate.add_argument("--out-dir")
    parser_ablate.set_defaults(handler=cmd_ablate, command_parser=parser_ablate)

    # Parameters for the oracle:
    parser_oracle = subparsers.add_parser(
        "oracle", help="Exhaustively search action sequences for one image."
    )
    parser_oracle.add_argument("--run-dir", help="Run providing the classifier")
    parser_oracle.add_argument("--checkpoint", help="Defaults to the final one")
    parser_oracle.add_argument("--data", help="Dataset prefix")
    parser_oracle.add_argument("--index", type=int, default=0)
    parser_oracle.add_argument("--depth", type=int, default=2)
    parser_oracle.add_argument(
        "--actions", type=_int_list, help="Comma separated action subset"
    )
    parser_oracle.add_argument("--budget", type=int, default=consts.ORACLE_BUDGET)
    parser_oracle.add_argument("--beam-width", type=int)
    parser_oracle.add_argument(
        "--gap",
        type=int,
        default=0,
        help="Also report the policy gap over the first N images",
    )
    parser_oracle.add_argument("--out-dir", help="Also write oracle.json here")
    parser_oracle.set_defaults(handler=cmd_oracle, command_parser=parser_oracle)

    for sub in (
        parser_generate,
        parser_fetch,
        parser_train,
        parser_evaluate,
        parser_dump,
        parser_ablate,
        parser_oracle,
    ):
        _add_common_args(sub)
    return parser


def apply_config_file(command_parser: argparse.ArgumentParser, file_name: str):
    """Use key=value pairs from a file as defaults of a subcommand.

    Raises:
      ConfigError: a key names no flag of the subcommand
    """
    values = sstn_util.read_config_file(file_name)
    actions = {action.dest: action for action in command_parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ConfigError(f"{file_name}: unknown setting {key!r}")
        if action.nargs == 0:
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value
    command_parser.set_defaults(**defaults)


def parse_args(parser: argparse.ArgumentParser, argv: Optional[List[str]] = None):
    args = parser.parse_args(argv)
    if args.config:
        apply_config_file(args.command_parser, sstn_util.get_abs_path(args.config))
        args = parser.parse_args(argv)
    if getattr(args, "algorithm", None) == consts.ALGORITHM_PG and args.critic_lr:
        args.command_parser.error("--critic-lr only applies to --algorithm ac")
    return args


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand.

    Returns:
      int: 0 on success, 1 on a runtime failure, 2 on a usage or config error
    """
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
        get_logger(args.log)
        logger.info(LOG_SEPARATOR)
        logger.info("Created an instance of SSTN")
        logger.info(f"Input arguments: {args}")
        args.handler(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        print(f"Error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("Fatal exception in SSTN")
        return 1
    logger.info("SSTN %s finished successfully", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
