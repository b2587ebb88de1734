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

"""Contains tests for the weight checkpoint format."""

import struct

import numpy as np
import pytest

from sstn_agent.core import sstn_checkpoint
from sstn_agent.core.sstn_errors import ParseError


def test_round_trip(tmp_path):
    params = {
        "policy.fc.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "policy.fc.bias": np.array([0.5, -0.25], dtype=np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }
    path = str(tmp_path / "weights.sstn")
    sstn_checkpoint.save_checkpoint(path, params)
    loaded = sstn_checkpoint.load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, value in params.items():
        np.testing.assert_array_equal(loaded[name], value)
        assert loaded[name].shape == value.shape


def test_byte_layout():
    raw = sstn_checkpoint.encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    expected = (
        b"SSTN1"
        + struct.pack("<I", 1)
        + b"w"
        + struct.pack("<II", 2, 1)
        + struct.pack("<I", 2)
        + struct.pack("<ff", 1.0, 2.0)
    )
    assert raw == expected


def test_bad_magic():
    with pytest.raises(ParseError) as err:
        sstn_checkpoint.decode_checkpoint(b"SSTN0")
    assert err.value.offset == 0


def test_truncated_data_reports_offset():
    raw = sstn_checkpoint.encode_checkpoint({"w": np.ones(4)})
    with pytest.raises(ParseError) as err:
        sstn_checkpoint.decode_checkpoint(raw[:-3])
    assert err.value.offset == len(b"SSTN1") + 4 + 1 + 4 + 4


def test_empty_checkpoint_has_no_entries():
    assert sstn_checkpoint.decode_checkpoint(b"SSTN1") == {}


def test_unreadable_checkpoint_is_a_parse_error(tmp_path):
    """A path that cannot be read reports offset 0 and keeps the path."""
    folder = tmp_path / "weights.sstn"
    folder.mkdir()
    with pytest.raises(ParseError) as err:
        sstn_checkpoint.load_checkpoint(str(folder))
    assert err.value.offset == 0
    assert err.value.path == str(folder)
    with pytest.raises(FileNotFoundError):
        sstn_checkpoint.load_checkpoint(str(tmp_path / "absent.sstn"))
