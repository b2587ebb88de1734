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

"""Module for basic file, directory and config operations."""
import hashlib
import json
import logging
import os

from sstn_agent.core.sstn_errors import ConfigError

logger = logging.getLogger("sstn")


def get_root_dir() -> str:
    """Returns full path to the sstn_agent package."""
    return os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))


def get_abs_path(path: str) -> str:
    """Convert a path relative to the repository root to an absolute path.

    Args:
      path (string): path

    Returns:
      string: absolute path
    """
    if os.path.isabs(path):
        return path
    return os.path.abspath(os.path.join(os.path.join(get_root_dir(), os.pardir), path))


def read_json_file(file_name: str) -> dict:
    """Read json file into python dictionary and error check.

    Args:
      file_name (string): file name where to read file from.

    Returns:
      dictionary: file contents. None on error.
    """
    try:
        with open(file_name, "r") as fd:
            data = json.load(fd)
        logger.debug("Loaded json file: %s", file_name)
    except Exception:
        logger.exception("Error, could not load file: %s", file_name)
        return None
    return data


def write_json_file(file_name: str, data) -> bool:
    """Write out a dictionary or list into a json file and error check.

    Args:
      file_name (string): file name to write.
      data: the object to convert to JSON

    Returns:
      bool: True on success and False on failure
    """
    try:
        with open(file_name, "w") as fd:
            json.dump(data, fd, indent=4)
        logger.info("Wrote json file: %s", file_name)
    except Exception:
        logger.exception("Error, could not write file on disk: %s", file_name)
        return False
    return True


def make_dirs(path: str, overwrite: bool, files=None) -> bool:
    """Create all missing directories in the path.

    Args:
      path(str): path to create
      overwrite(bool): if True overwrite the existing files
      files(set): file names inside path that the caller is going to write
    Returns:
      True if directories in the path were created
    """
    abs_path = os.path.abspath(path)
    if not overwrite and os.path.isdir(abs_path) and files:
        old_files = set(files).intersection(os.listdir(abs_path))
        if old_files:
            logger.error(
                "Directory %s contains outputs from a previous run. "
                "Remove files %s or pass --overwrite.",
                abs_path,
                sorted(old_files),
            )
            return False
    os.makedirs(abs_path, exist_ok=True)
    logger.debug("Created path %s", abs_path)
    return True


def file_checksum(file_name: str) -> str:
    """Returns the sha256 hex digest of a file."""
    digest = hashlib.sha256()
    with open(file_name, "rb") as fd:
        for chunk in iter(lambda: fd.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_config_file(file_name: str) -> dict:
    """Read a plain-text key=value config file.

    Blank lines and lines starting with '#' are skipped. Dashes in keys are
    converted to underscores so keys match argparse destinations.

    Args:
      file_name (string): path to the config file

    Returns:
      dictionary: key to raw string value

    Raises:
      ConfigError: a line is not of the form key=value
    """
    config = {}
    with open(file_name, "r") as fd:
        for line_no, line in enumerate(fd, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(
                    f"{file_name}:{line_no}: expected key=value, got {line!r}"
                )
            config[key.strip().replace("-", "_")] = value.strip()
    logger.info("Loaded %d config values from %s", len(config), file_name)
    return config
