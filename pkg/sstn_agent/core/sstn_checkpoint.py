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

"""Reads and writes named weight checkpoints.

Layout: the magic b"SSTN1", then per parameter
  name length (u32 LE), name bytes (utf-8), rank (u32 LE), dims (u32 LE each),
  raw float32 little-endian data
until end of file.
"""
import logging
import struct
from typing import Dict

import numpy as np

from sstn_agent.core.sstn_errors import ParseError

logger = logging.getLogger("sstn")

MAGIC = b"SSTN1"
_U32 = struct.Struct("<I")


def encode_checkpoint(params: Dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays into checkpoint bytes."""
    chunks = [MAGIC]
    for name, array in params.items():
        array = np.asarray(array)
        raw_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes, path: str = None) -> Dict[str, np.ndarray]:
    """Parse checkpoint bytes into float32 arrays keyed by name.

    Raises:
      ParseError: bad magic or a truncated entry, with the byte offset
    """
    if raw[: len(MAGIC)] != MAGIC:
        raise ParseError(f"bad checkpoint magic {raw[:len(MAGIC)]!r}", 0, path)
    offset = len(MAGIC)
    params = {}

    def read_u32(what: str) -> int:
        nonlocal offset
        if offset + 4 > len(raw):
            raise ParseError(f"truncated {what}", offset, path)
        (value,) = _U32.unpack_from(raw, offset)
        offset += 4
        return value

    while offset < len(raw):
        name_len = read_u32("name length")
        if offset + name_len > len(raw):
            raise ParseError("truncated parameter name", offset, path)
        try:
            name = raw[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as err:
            raise ParseError("parameter name is not utf-8", offset, path) from err
        offset += name_len
        rank = read_u32("rank")
        if rank > 8:
            raise ParseError(f"rank {rank} of {name} is not supported", offset, path)
        dims = tuple(read_u32("dimension") for _ in range(rank))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ParseError(f"truncated data for {name}", offset, path)
        params[name] = (
            np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
            .astype(np.float32)
            .reshape(dims)
        )
        offset += nbytes
    return params


def save_checkpoint(path: str, params: Dict[str, np.ndarray]) -> None:
    """Write named arrays to path.

    Raises:
      OSError: the file could not be written
    """
    try:
        with open(path, "wb") as fd:
            fd.write(encode_checkpoint(params))
    except OSError:
        logger.exception("Could not write checkpoint: %s", path)
        raise
    logger.info("Wrote checkpoint %s with %d tensors", path, len(params))


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint.

    Raises:
      FileNotFoundError: the file does not exist
      ParseError: the file could not be read or is not a valid checkpoint
    """
    try:
        with open(path, "rb") as fd:
            raw = fd.read()
    except FileNotFoundError:
        logger.error("Checkpoint %s does not exist.", path)
        raise
    except OSError as err:
        logger.exception("Could not read checkpoint: %s", path)
        raise ParseError(f"cannot read checkpoint: {err}", 0, path) from err
    return decode_checkpoint(raw, path)
