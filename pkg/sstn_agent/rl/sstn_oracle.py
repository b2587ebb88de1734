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

"""Brute-force search over short action sequences.

Every candidate sequence is applied by per-step resampling and the final image
is scored on its own (batch of one), so that the loss of a sequence does not
depend on what else is evaluated with it.
"""
import dataclasses
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from sstn_agent.core import sstn_geometry as geo
from sstn_agent.core.sstn_errors import ConfigError, DimensionError
from sstn_agent.core.sstn_tensor import no_grad
from sstn_agent.rl import consts
from sstn_agent.rl.sstn_models import Module, predict

logger = logging.getLogger("sstn")


@dataclasses.dataclass
class SearchResult:
    best_sequence: List[int]
    best_loss: float
    num_evaluated: int

    def to_dict(self) -> Dict:
        return {
            "best_sequence": [int(a) for a in self.best_sequence],
            "best_loss": float(self.best_loss),
            "num_evaluated": int(self.num_evaluated),
        }


class GapReport(NamedTuple):
    mean_gap: float
    stderr: float
    gaps: np.ndarray
    policy_losses: np.ndarray
    oracle_losses: np.ndarray

    def to_dict(self) -> Dict:
        return {
            "mean_gap": self.mean_gap,
            "stderr": self.stderr,
            "num_images": int(len(self.gaps)),
            "gaps": self.gaps.tolist(),
        }


def _action_subset(actions: Optional[Sequence[int]]) -> List[int]:
    if actions is None:
        return list(range(geo.NUM_ACTIONS))
    subset = sorted({int(a) for a in actions})
    if not subset or subset[0] < 0 or subset[-1] >= geo.NUM_ACTIONS:
        raise ConfigError(
            f"action subset must be non-empty indices below {geo.NUM_ACTIONS}, "
            f"got {list(actions)}"
        )
    return subset


def image_loss(classifier: Module, image: np.ndarray, label: int) -> float:
    """Classifier loss of a single [C x H x W] image."""
    losses, _ = predict(classifier, np.asarray(image)[None], [int(label)])
    return float(losses[0])


def apply_sequence(image: np.ndarray, sequence: Sequence[int]) -> np.ndarray:
    for action in sequence:
        image = geo.apply_action(image, action)
    return image


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DimensionError(f"expected a [C x H x W] image, got {image.shape}")
    return image


def exhaustive_search(
    image,
    label: int,
    classifier: Module,
    depth: int,
    actions: Optional[Sequence[int]] = None,
    budget: int = consts.ORACLE_BUDGET,
    beam_width: Optional[int] = None,
) -> SearchResult:
    """Find the action sequence of a given length with the lowest final loss.

    Sequences are visited in lexicographic order of action index and only a
    strictly lower loss replaces the incumbent, so ties go to the
    lexicographically smallest sequence.

    Args:
      image: [C x H x W] image
      label: class index
      classifier: frozen classifier
      depth: sequence length L
      actions: action subset, all actions when None
      budget: maximum number of scored sequences
      beam_width: keep only this many prefixes per depth instead of
        enumerating everything

    Returns:
      SearchResult: best sequence, its loss and the number of scored sequences

    Raises:
      ConfigError: the search would score more than budget sequences
    """
    image = _check_image(image)
    subset = _action_subset(actions)
    if depth < 0:
        raise ConfigError(f"search depth must be non-negative, got {depth}")
    if beam_width is not None:
        return _beam_search(image, label, classifier, depth, subset, budget, beam_width)
    total = len(subset) ** depth
    if total > budget:
        raise ConfigError(
            f"exhaustive search of depth {depth} over {len(subset)} actions scores "
            f"{total} sequences, above the budget of {budget}; use a smaller depth, "
            "a smaller action subset or a beam width"
        )
    best = SearchResult([], float("inf"), 0)
    prefix: List[int] = []

    def visit(current: np.ndarray, remaining: int) -> None:
        if remaining == 0:
            loss = image_loss(classifier, current, label)
            best.num_evaluated += 1
            if loss < best.best_loss:
                best.best_loss = loss
                best.best_sequence = list(prefix)
            return
        for action in subset:
            prefix.append(action)
            visit(geo.apply_action(current, action), remaining - 1)
            prefix.pop()

    with no_grad():
        visit(image, depth)
    logger.debug(
        "Exhaustive search depth %d: best %s loss %.6f after %d sequences",
        depth,
        best.best_sequence,
        best.best_loss,
        best.num_evaluated,
    )
    return best


def _beam_search(image, label, classifier, depth, subset, budget, beam_width):
    if beam_width < 1:
        raise ConfigError(f"beam width must be at least 1, got {beam_width}")
    if beam_width * len(subset) * max(depth, 1) > budget:
        raise ConfigError(
            f"beam search of width {beam_width} and depth {depth} exceeds the "
            f"budget of {budget} scored sequences"
        )
    with no_grad():
        if depth == 0:
            return SearchResult([], image_loss(classifier, image, label), 1)
        beam = [((), image)]
        evaluated = 0
        scored = []
        for _ in range(depth):
            scored = []
            for sequence, current in beam:
                for action in subset:
                    child = geo.apply_action(current, action)
                    loss = image_loss(classifier, child, label)
                    scored.append((loss, sequence + (action,), child))
                    evaluated += 1
            # stable sort keeps lexicographic order among equal losses
            scored.sort(key=lambda item: item[0])
            beam = [(seq, child) for _, seq, child in scored[:beam_width]]
    loss, sequence, _ = scored[0]
    return SearchResult(list(sequence), loss, evaluated)


def greedy_sequences(
    policy,
    images: np.ndarray,
    depth: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Actions a policy takes greedily for depth steps, [B x depth]."""
    images = np.asarray(images, dtype=np.float32)
    rng = rng if rng is not None else np.random.default_rng(0)
    sequences = np.zeros((len(images), depth), dtype=np.int64)
    if depth == 0:
        return sequences
    with no_grad():
        state = policy.initial_state(len(images))
        prev = np.zeros((len(images), consts.NUM_ACTIONS), np.float32)
        for t in range(depth):
            out = policy.act(images, prev, state, rng, consts.EVAL_GREEDY)
            state = out.state
            sequences[:, t] = out.actions
            images = geo.apply_actions(images, out.actions)
            prev = geo.one_hot(out.actions, consts.NUM_ACTIONS)
    return sequences


def policy_gap(
    policy,
    classifier: Module,
    images: np.ndarray,
    labels: np.ndarray,
    depth: int,
    actions: Optional[Sequence[int]] = None,
    budget: int = consts.ORACLE_BUDGET,
    beam_width: Optional[int] = None,
) -> GapReport:
    """Loss after the policy's greedy steps minus the oracle's best loss.

    With the full action set and exhaustive search every per-image gap is
    non-negative.

    Returns:
      GapReport: mean gap, its standard error and the per-image values
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images but {len(labels)} labels")
    sequences = greedy_sequences(policy, images, depth)
    policy_losses = np.zeros(len(images))
    oracle_losses = np.zeros(len(images))
    for i, (image, label) in enumerate(zip(images, labels)):
        with no_grad():
            policy_losses[i] = image_loss(
                classifier, apply_sequence(image, sequences[i]), label
            )
        oracle_losses[i] = exhaustive_search(
            image, label, classifier, depth, actions, budget, beam_width
        ).best_loss
    gaps = policy_losses - oracle_losses
    stderr = float(gaps.std(ddof=1) / np.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
    logger.info(
        "Policy gap at depth %d over %d images: %.6f +- %.6f",
        depth,
        len(gaps),
        float(gaps.mean()) if len(gaps) else 0.0,
        stderr,
    )
    return GapReport(
        float(gaps.mean()) if len(gaps) else 0.0,
        stderr,
        gaps,
        policy_losses,
        oracle_losses,
    )
