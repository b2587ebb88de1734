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

"""Affine maps, discrete transformation actions and the bilinear sampler.

Coordinates are normalized so that -1 and +1 fall on the centers of the first
and last pixel of each axis. Warping uses backward mapping: every output
pixel (xt, yt) reads the input at theta . (xt, yt, 1), so a scale below 1
zooms in and a positive tx moves content toward -x.

Pixels outside the input contribute zero.
"""
import dataclasses
import enum
import functools
import logging
import math
from typing import Sequence, Tuple

import numpy as np

from sstn_agent.core.sstn_errors import DimensionError
from sstn_agent.core.sstn_tensor import Function, Tensor

logger = logging.getLogger("sstn")

TRANSLATE_PIXELS = 4
SCALE_FACTOR = 0.8
ROTATE_DEGREES = 10.0


class ActionKind(enum.IntEnum):
    """The ten discrete transformations; the value is the action index."""

    TRANSLATE_X_POS = 0
    TRANSLATE_X_NEG = 1
    TRANSLATE_Y_POS = 2
    TRANSLATE_Y_NEG = 3
    SCALE_X = 4
    SCALE_Y = 5
    SCALE_XY = 6
    ROTATE_POS = 7
    ROTATE_NEG = 8
    IDENTITY = 9

    @property
    def label(self) -> str:
        return _ACTION_LABELS[self]


_ACTION_LABELS = {
    ActionKind.TRANSLATE_X_POS: "TranslateX+4",
    ActionKind.TRANSLATE_X_NEG: "TranslateX-4",
    ActionKind.TRANSLATE_Y_POS: "TranslateY+4",
    ActionKind.TRANSLATE_Y_NEG: "TranslateY-4",
    ActionKind.SCALE_X: "ScaleX0.8",
    ActionKind.SCALE_Y: "ScaleY0.8",
    ActionKind.SCALE_XY: "ScaleXY0.8",
    ActionKind.ROTATE_POS: "Rotate+10",
    ActionKind.ROTATE_NEG: "Rotate-10",
    ActionKind.IDENTITY: "Identity",
}

NUM_ACTIONS = len(ActionKind)


def one_hot(actions, num_actions: int = NUM_ACTIONS) -> np.ndarray:
    """One-hot rows for an action index or a batch of indices.

    Negative indices encode "no action yet" and give an all-zero row.
    """
    indices = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    out = np.zeros((len(indices), num_actions), dtype=np.float32)
    taken = indices >= 0
    out[np.nonzero(taken)[0], indices[taken]] = 1.0
    return out if np.ndim(actions) else out[0]


@dataclasses.dataclass(frozen=True)
class AffineMap:
    """2x3 affine map [[a11, a12, tx], [a21, a22, ty]] in normalized units."""

    a11: float = 1.0
    a12: float = 0.0
    tx: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "AffineMap":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((2, 3), (3, 3)):
            raise DimensionError(f"affine matrix must be 2x3 or 3x3, got {m.shape}")
        return cls(
            float(m[0, 0]),
            float(m[0, 1]),
            float(m[0, 2]),
            float(m[1, 0]),
            float(m[1, 1]),
            float(m[1, 2]),
        )

    def matrix(self) -> np.ndarray:
        """Returns the 2x3 float64 parameter matrix."""
        return np.array(
            [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty]],
            dtype=np.float64,
        )

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix(), [0.0, 0.0, 1.0]])

    def is_identity(self) -> bool:
        return self == AffineMap.identity()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map [..., 2] (x, y) points."""
        points = np.asarray(points, dtype=np.float64)
        x, y = points[..., 0], points[..., 1]
        return np.stack(
            [
                self.a11 * x + self.a12 * y + self.tx,
                self.a21 * x + self.a22 * y + self.ty,
            ],
            axis=-1,
        )


def compose(outer: AffineMap, inner: AffineMap) -> AffineMap:
    """Returns outer . inner in homogeneous coordinates (inner applied first)."""
    if outer.is_identity():
        return inner
    if inner.is_identity():
        return outer
    return AffineMap.from_matrix(outer.homogeneous() @ inner.homogeneous())


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    height, width = (int(s) for s in size)
    if height <= 0 or width <= 0:
        raise DimensionError(f"image size must be positive, got {(height, width)}")
    return height, width


def action_to_affine(action, image_size: Tuple[int, int]) -> AffineMap:
    """Parameter matrix of a discrete action on an image of (H, W) pixels.

    Translations move by TRANSLATE_PIXELS pixels, scales set the scaled axis to
    SCALE_FACTOR, rotations turn by ROTATE_DEGREES about the image center.
    """
    height, width = _check_size(image_size)
    action = ActionKind(int(action))
    shift_x = 2.0 * TRANSLATE_PIXELS / width
    shift_y = 2.0 * TRANSLATE_PIXELS / height
    cos = math.cos(math.radians(ROTATE_DEGREES))
    sin = math.sin(math.radians(ROTATE_DEGREES))
    if action == ActionKind.TRANSLATE_X_POS:
        return AffineMap(tx=shift_x)
    if action == ActionKind.TRANSLATE_X_NEG:
        return AffineMap(tx=-shift_x)
    if action == ActionKind.TRANSLATE_Y_POS:
        return AffineMap(ty=shift_y)
    if action == ActionKind.TRANSLATE_Y_NEG:
        return AffineMap(ty=-shift_y)
    if action == ActionKind.SCALE_X:
        return AffineMap(a11=SCALE_FACTOR)
    if action == ActionKind.SCALE_Y:
        return AffineMap(a22=SCALE_FACTOR)
    if action == ActionKind.SCALE_XY:
        return AffineMap(a11=SCALE_FACTOR, a22=SCALE_FACTOR)
    if action == ActionKind.ROTATE_POS:
        return AffineMap(a11=cos, a12=-sin, a21=sin, a22=cos)
    if action == ActionKind.ROTATE_NEG:
        return AffineMap(a11=cos, a12=sin, a21=-sin, a22=cos)
    return AffineMap.identity()


@dataclasses.dataclass(frozen=True)
class SampleGrid:
    """Source locations of every output pixel, [H x W x 2] as (x, y)."""

    coords: np.ndarray

    @property
    def size(self) -> Tuple[int, int]:
        return self.coords.shape[-3], self.coords.shape[-2]


def target_lattice(out_size: Tuple[int, int]) -> np.ndarray:
    """Normalized (x, y) coordinates of every output pixel, [H x W x 2]."""
    height, width = _check_size(out_size)
    xs = np.linspace(-1.0, 1.0, width)
    ys = np.linspace(-1.0, 1.0, height)
    grid_x, grid_y = np.meshgrid(xs, ys)
    return np.stack([grid_x, grid_y], axis=-1)


def grid_generate(theta: AffineMap, out_size: Tuple[int, int]) -> SampleGrid:
    """Source coordinates theta . (xt, yt, 1) for each output pixel."""
    lattice = target_lattice(out_size)
    if theta.is_identity():
        return SampleGrid(lattice)
    return SampleGrid(theta.apply(lattice))


def _as_coords(grid) -> np.ndarray:
    coords = grid.coords if isinstance(grid, SampleGrid) else grid
    return np.asarray(coords, dtype=np.float64)


def _corner_terms(coords: np.ndarray, height: int, width: int):
    """Yields per-corner (x index, y index, x weight, y weight, x slope, y slope).

    Slopes follow the piecewise derivative of max(0, 1 - |m - x|): +1 where
    the corner lies at or beyond the source point, -1 before it, 0 once the
    distance reaches 1.
    """
    px = (coords[..., 0] + 1.0) * (width - 1) / 2.0
    py = (coords[..., 1] + 1.0) * (height - 1) / 2.0
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    on_x = fx == 0
    on_y = fy == 0
    x_terms = (
        (x0, 1.0 - fx, np.where(on_x, 1.0, -1.0)),
        (x0 + 1, fx, np.where(on_x, 0.0, 1.0)),
    )
    y_terms = (
        (y0, 1.0 - fy, np.where(on_y, 1.0, -1.0)),
        (y0 + 1, fy, np.where(on_y, 0.0, 1.0)),
    )
    for xi, wx, sx in x_terms:
        for yi, wy, sy in y_terms:
            yield xi.astype(np.int64), yi.astype(np.int64), wx, wy, sx, sy


def _gather(images_t: np.ndarray, xi, yi, batch_index):
    """Reads images_t[b, yi, xi, :] with zeros outside the image."""
    _, height, width, _ = images_t.shape
    inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    rows = np.clip(yi, 0, height - 1)
    cols = np.clip(xi, 0, width - 1)
    values = images_t[batch_index, rows, cols]
    return values * inside[..., None], inside


def _prepare(images: np.ndarray, grid):
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected images [B x C x H x W], got {images.shape}")
    coords = _as_coords(grid)
    if coords.ndim not in (3, 4) or coords.shape[-1] != 2:
        raise DimensionError(f"expected grid [H x W x 2], got {coords.shape}")
    batch = images.shape[0]
    full = np.broadcast_to(coords, (batch,) + coords.shape[-3:])
    batch_index = np.arange(batch)[:, None, None]
    images_t = images.astype(np.float64).transpose(0, 2, 3, 1)
    return images_t, full, batch_index


def bilinear_sample(images, grid) -> np.ndarray:
    """Bilinear read of images [B x C x H x W] at grid locations.

    Args:
      images: input batch
      grid: SampleGrid or array [H' x W' x 2] shared by the batch, or
        [B x H' x W' x 2] per image

    Returns:
      np.ndarray: [B x C x H' x W'] float64
    """
    images_t, coords, batch_index = _prepare(images, grid)
    height, width = images_t.shape[1:3]
    out = np.zeros(coords.shape[:3] + (images_t.shape[3],), dtype=np.float64)
    for xi, yi, wx, wy, _, _ in _corner_terms(coords, height, width):
        values, _ = _gather(images_t, xi, yi, batch_index)
        out += values * (wx * wy)[..., None]
    return out.transpose(0, 3, 1, 2)


def bilinear_sample_backward(images, grid, out_grad) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of bilinear_sample with respect to images and grid.

    Args:
      images: input batch [B x C x H x W]
      grid: sampling grid as passed to bilinear_sample
      out_grad: gradient of the objective w.r.t. the output [B x C x H' x W']

    Returns:
      (input_grad [B x C x H x W], grid_grad shaped like the grid)
    """
    images_t, coords, batch_index = _prepare(images, grid)
    batch, height, width, channels = images_t.shape
    grad_t = np.asarray(out_grad, dtype=np.float64).transpose(0, 2, 3, 1)
    input_grad = np.zeros_like(images_t)
    dv_dpx = np.zeros(coords.shape[:3], dtype=np.float64)
    dv_dpy = np.zeros(coords.shape[:3], dtype=np.float64)
    batch_full = np.broadcast_to(batch_index, coords.shape[:3])
    for xi, yi, wx, wy, sx, sy in _corner_terms(coords, height, width):
        values, inside = _gather(images_t, xi, yi, batch_index)
        weight = (wx * wy * inside)[..., None]
        np.add.at(
            input_grad,
            (
                batch_full[inside],
                yi[inside],
                xi[inside],
            ),
            (grad_t * weight)[inside],
        )
        projected = (grad_t * values).sum(axis=-1)
        dv_dpx += projected * wy * sx
        dv_dpy += projected * wx * sy
    grid_grad = np.stack(
        [dv_dpx * (width - 1) / 2.0, dv_dpy * (height - 1) / 2.0], axis=-1
    )
    if _as_coords(grid).ndim == 3:
        grid_grad = grid_grad.sum(axis=0)
    return input_grad.transpose(0, 3, 1, 2), grid_grad


class BilinearSampler(Function):
    """Differentiable bilinear sampling of images at a coordinate tensor."""

    def forward(self, images, coords):
        return bilinear_sample(images, coords)

    def backward(self, grad):
        images, coords = self.tensors
        return bilinear_sample_backward(images.data, coords.data, grad)


def sample(images: Tensor, coords: Tensor) -> Tensor:
    return BilinearSampler.apply(images, coords)


@functools.lru_cache(maxsize=64)
def _action_coords(action: int, height: int, width: int) -> np.ndarray:
    coords = grid_generate(action_to_affine(action, (height, width)), (height, width))
    coords.coords.setflags(write=False)
    return coords.coords


def apply_actions(images: np.ndarray, actions: Sequence[int]) -> np.ndarray:
    """Resample each image of a batch [B x C x H x W] by its own action.

    Identity copies the image unchanged.
    """
    images = np.asarray(images)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if images.ndim != 4 or len(actions) != images.shape[0]:
        raise DimensionError(
            f"{len(actions)} actions do not match an image batch of {images.shape}"
        )
    height, width = images.shape[2:]
    out = np.empty_like(images)
    for action in np.unique(actions):
        rows = np.nonzero(actions == action)[0]
        if action == ActionKind.IDENTITY:
            out[rows] = images[rows]
            continue
        coords = _action_coords(int(action), height, width)
        out[rows] = bilinear_sample(images[rows], coords).astype(images.dtype)
    return out


def apply_action(image: np.ndarray, action) -> np.ndarray:
    """Resample a single [C x H x W] image by one action."""
    return apply_actions(np.asarray(image)[None], [int(action)])[0]


def warp(images: np.ndarray, theta: AffineMap) -> np.ndarray:
    """Resample a batch by an arbitrary affine map, keeping the dtype."""
    images = np.asarray(images)
    grid = grid_generate(theta, images.shape[2:])
    return bilinear_sample(images, grid).astype(images.dtype)
