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

"""Error types raised by the SSTN agent."""
from typing import Optional


class DimensionError(ValueError):
    """Tensor shapes do not fit the operation."""


class StateError(RuntimeError):
    """A stateful object was used out of order."""


class ConfigError(ValueError):
    """A configuration value or combination is not supported."""


class ParseError(ValueError):
    """A binary file could not be decoded.

    Attributes:
      offset: byte offset where decoding failed
      path: file being decoded, if known
    """

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}at byte {offset}: {message}")


class NumericError(ArithmeticError):
    """A probability, loss or gradient became non-finite.

    Attributes:
      diagnostics: context collected where the value was detected
    """

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
