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

"""IDX file I/O and cluttered canvas generation.

A cluttered canvas holds one full source image (digit or garment) at a random
position among small crops cut from other source images. Overlaps combine by
per-pixel max, so values stay in [0, 1]. Each canvas draws from its own
generator seeded with (seed, index), which makes every image reproducible on
its own.
"""
import dataclasses
import gzip
import logging
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np
import requests

from sstn_agent.core import sstn_util
from sstn_agent.core.sstn_errors import ConfigError, DimensionError, ParseError

logger = logging.getLogger("sstn")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10
PIXEL_SCALE = np.float32(255.0)

DEFAULT_CANVAS = 80
DEFAULT_CLUTTER_PATCHES = 8
DEFAULT_PATCH_SIZE = 8

SOURCE_URLS = {
    "mnist": "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "fashion-mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
SOURCE_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}
DOWNLOAD_CHUNK = 10240


def _open(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as fd:
            return fd.read()
    except FileNotFoundError:
        logger.error("IDX file %s does not exist.", path)
        raise
    except OSError as err:
        logger.exception("Could not read IDX file: %s", path)
        raise ParseError(f"cannot read IDX file: {err}", 0, path) from err


def parse_idx(raw: bytes, path: Optional[str] = None) -> np.ndarray:
    """Decode IDX bytes.

    Returns:
      np.ndarray: images [N x H x W] float32 in [0, 1], or labels [N] int64

    Raises:
      ParseError: unknown magic, truncated header or data, trailing bytes
    """
    if len(raw) < 4:
        raise ParseError("truncated magic", len(raw), path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic == IMAGES_MAGIC:
        rank = 3
    elif magic == LABELS_MAGIC:
        rank = 1
    else:
        raise ParseError(f"unknown IDX magic 0x{magic:08x}", 0, path)
    header = 4 + 4 * rank
    if len(raw) < header:
        raise ParseError("truncated dimensions", len(raw), path)
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    expected = 1
    for dim in dims:
        expected *= dim
    available = len(raw) - header
    if expected > available:
        raise ParseError(
            f"dimensions {dims} need {expected} bytes, {available} present",
            len(raw),
            path,
        )
    if expected < available:
        raise ParseError("trailing bytes after IDX data", header + expected, path)
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header)
    if magic == LABELS_MAGIC:
        return data.astype(np.int64)
    return data.reshape(dims).astype(np.float32) / PIXEL_SCALE


def read_idx(path: str) -> np.ndarray:
    """Read an IDX image or label file, optionally gzipped."""
    data = parse_idx(_open(path), path)
    logger.info("Read %s from %s", data.shape, path)
    return data


def idx_shape(path: str) -> Tuple[int, ...]:
    """Dimensions stored in an IDX header, without decoding the data."""
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as fd:
            head = fd.read(16)
    except FileNotFoundError:
        raise
    except OSError as err:
        raise ParseError(f"cannot read IDX header: {err}", 0, path) from err
    if len(head) < 8:
        raise ParseError("truncated header", len(head), path)
    (magic,) = struct.unpack_from(">I", head, 0)
    rank = {IMAGES_MAGIC: 3, LABELS_MAGIC: 1}.get(magic)
    if rank is None:
        raise ParseError(f"unknown IDX magic 0x{magic:08x}", 0, path)
    if len(head) < 4 + 4 * rank:
        raise ParseError("truncated dimensions", len(head), path)
    return struct.unpack_from(f">{rank}I", head, 4)


def encode_idx(array: np.ndarray, labels: bool = False) -> bytes:
    """IDX bytes for labels [N] or images [N x H x W] with values in [0, 1]."""
    array = np.asarray(array)
    if labels:
        if array.ndim != 1:
            raise DimensionError(f"labels must be 1-D, got {array.shape}")
        body = array.astype(np.uint8)
        return struct.pack(">II", LABELS_MAGIC, len(body)) + body.tobytes()
    if array.ndim != 3:
        raise DimensionError(f"images must be [N x H x W], got {array.shape}")
    body = np.clip(np.rint(array.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return struct.pack(">IIII", IMAGES_MAGIC, *body.shape) + body.tobytes()


def write_idx(path: str, array: np.ndarray, labels: bool = False) -> None:
    try:
        with open(path, "wb") as fd:
            fd.write(encode_idx(array, labels))
    except OSError:
        logger.exception("Could not write IDX file: %s", path)
        raise
    logger.info("Wrote %s", path)


@dataclasses.dataclass
class DatasetBundle:
    """Images [N x 1 x S x S] in [0, 1] with class labels.

    positions and source_indices are generation metadata: the top-left corner
    (row, col) of the placed source image and its index in the source set.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    seed: int = 0
    positions: Optional[np.ndarray] = None
    source_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DimensionError(
                f"dataset images must be [N x 1 x S x S], got {self.images.shape}"
            )
        if len(self.labels) != len(self.images):
            raise DimensionError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES
        ):
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices) -> "DatasetBundle":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetBundle(
            self.images[indices],
            self.labels[indices],
            self.split,
            self.seed,
            None if self.positions is None else self.positions[indices],
            None if self.source_indices is None else self.source_indices[indices],
        )


@dataclasses.dataclass
class ClutterConfig:
    count: int
    canvas: int = DEFAULT_CANVAS
    clutter_patches: int = DEFAULT_CLUTTER_PATCHES
    patch_size: int = DEFAULT_PATCH_SIZE
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"count must be non-negative, got {self.count}")
        if self.clutter_patches < 0 or self.patch_size < 1:
            raise ConfigError(
                f"invalid clutter {self.clutter_patches} x {self.patch_size}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


def make_cluttered(
    source_images: np.ndarray, source_labels: np.ndarray, config: ClutterConfig
) -> DatasetBundle:
    """Generate config.count cluttered canvases from source images [M x h x w].

    Clutter crops are cut from source images other than the placed one when
    more than one source image exists. Canvas values are maxima of source
    values, so IDX-quantized sources give IDX-exact canvases.

    Raises:
      ConfigError: empty source, patch larger than a source image, or canvas
        smaller than a source image
    """
    source_images = np.asarray(source_images, dtype=np.float32)
    source_labels = np.asarray(source_labels, dtype=np.int64)
    if source_images.ndim != 3 or len(source_images) == 0:
        raise ConfigError("source must be a non-empty [M x h x w] set")
    if len(source_labels) != len(source_images):
        raise DimensionError(
            f"{len(source_labels)} source labels for {len(source_images)} images"
        )
    num_sources, height, width = source_images.shape
    size = config.patch_size
    if size > height or size > width:
        raise ConfigError(
            f"patch size {size} exceeds source image size {(height, width)}"
        )
    if config.canvas < height or config.canvas < width:
        raise ConfigError(
            f"canvas {config.canvas} cannot hold a source image of {(height, width)}"
        )

    side = config.canvas
    images = np.zeros((config.count, 1, side, side), dtype=np.float32)
    positions = np.zeros((config.count, 2), dtype=np.int64)
    picked = np.zeros(config.count, dtype=np.int64)
    for index in range(config.count):
        rng = np.random.default_rng([config.seed, index])
        src = int(rng.integers(num_sources))
        canvas = images[index, 0]
        for _ in range(config.clutter_patches):
            other = int(rng.integers(num_sources - 1)) if num_sources > 1 else 0
            if num_sources > 1 and other >= src:
                other += 1
            cy = int(rng.integers(height - size + 1))
            cx = int(rng.integers(width - size + 1))
            py = int(rng.integers(side - size + 1))
            px = int(rng.integers(side - size + 1))
            region = canvas[py : py + size, px : px + size]
            np.maximum(
                region, source_images[other, cy : cy + size, cx : cx + size], out=region
            )
        row = int(rng.integers(side - height + 1))
        col = int(rng.integers(side - width + 1))
        region = canvas[row : row + height, col : col + width]
        np.maximum(region, source_images[src], out=region)
        positions[index] = (row, col)
        picked[index] = src
    logger.info(
        "Generated %d cluttered %dx%d images (%d patches of %d px, seed %d)",
        config.count,
        side,
        side,
        config.clutter_patches,
        size,
        config.seed,
    )
    return DatasetBundle(
        images, source_labels[picked], config.split, config.seed, positions, picked
    )


def dataset_paths(prefix: str) -> Dict[str, str]:
    return {
        "images": f"{prefix}-images-idx3-ubyte",
        "labels": f"{prefix}-labels-idx1-ubyte",
        "meta": f"{prefix}-meta.json",
    }


def write_dataset(prefix: str, bundle: DatasetBundle, extra: dict = None) -> Dict:
    """Write a bundle as an IDX image/label pair plus a JSON sidecar.

    Args:
      prefix: output path prefix
      bundle: dataset to write
      extra: additional metadata stored in the sidecar

    Returns:
      dictionary: paths of the written files
    """
    paths = dataset_paths(prefix)
    out_dir = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(out_dir, exist_ok=True)
    write_idx(paths["images"], bundle.images[:, 0])
    write_idx(paths["labels"], bundle.labels, labels=True)
    meta = {"split": bundle.split, "seed": bundle.seed, "count": len(bundle)}
    meta.update(extra or {})
    if not sstn_util.write_json_file(paths["meta"], meta):
        raise OSError(f"Could not write dataset metadata {paths['meta']}")
    return paths


def load_dataset(prefix: str, split: Optional[str] = None) -> DatasetBundle:
    """Load a bundle written by write_dataset.

    Raises:
      FileNotFoundError: the image or label file is missing
      ParseError: a file is unreadable or malformed
    """
    paths = dataset_paths(prefix)
    images = read_idx(paths["images"])
    labels = read_idx(paths["labels"])
    if images.ndim != 3 or labels.ndim != 1:
        raise ParseError("image and label files are swapped", 0, paths["images"])
    meta = {}
    if os.path.isfile(paths["meta"]):
        meta = sstn_util.read_json_file(paths["meta"]) or {}
    return DatasetBundle(
        images[:, None],
        labels,
        split or meta.get("split", "train"),
        int(meta.get("seed", 0)),
    )


def download_source(
    dataset: str,
    out_dir: str,
    base_url: Optional[str] = None,
    overwrite: bool = False,
) -> Dict[str, str]:
    """Download the gzipped IDX files of MNIST or Fashion-MNIST.

    Existing files are kept unless overwrite is set.

    Returns:
      dictionary: "{split}-images" / "{split}-labels" to local path

    Raises:
      ConfigError: unknown dataset name
      requests.HTTPError: a download failed
    """
    if dataset not in SOURCE_URLS:
        raise ConfigError(
            f"Unknown source dataset {dataset!r}, expected one of "
            f"{sorted(SOURCE_URLS)}"
        )
    base_url = base_url or SOURCE_URLS[dataset]
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, (images_file, labels_file) in SOURCE_FILES.items():
        for kind, file_name in (("images", images_file), ("labels", labels_file)):
            target = os.path.join(out_dir, file_name)
            paths[f"{split}-{kind}"] = target
            if os.path.isfile(target) and not overwrite:
                logger.info("Keeping existing %s", target)
                continue
            url = base_url.rstrip("/") + "/" + file_name
            response = requests.get(url, stream=True, timeout=60)
            try:
                response.raise_for_status()
            except requests.HTTPError:
                logger.exception("Error downloading %s", url)
                raise
            with open(target, "wb") as fd:
                for chunk in response.iter_content(chunk_size=DOWNLOAD_CHUNK):
                    if chunk:
                        fd.write(chunk)
            logger.info("Downloaded %s to %s", url, target)
    return paths


def source_split_paths(source_dir: str, split: str) -> Dict[str, str]:
    """Paths of the downloaded IDX pair for a split."""
    images_file, labels_file = SOURCE_FILES[split]
    return {
        "images": os.path.join(source_dir, images_file),
        "labels": os.path.join(source_dir, labels_file),
    }
