"""Speaker-change and speaker-assignment priors.

Speaker change is a Bernoulli(p0) coin per frame.  On a change, the next
speaker is an existing speaker k (other than the current one) with weight
equal to its number of contiguous blocks so far, or a new speaker with
weight alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from uisrnn.errors import ValidationError

NEW = 0
P0_MIN = 1e-6
P0_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class PriorParams:
    alpha: float
    p0: float

    def __post_init__(self):
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.p0 < 1:
            raise ValidationError(f"p0 must be in (0, 1), got {self.p0}")


@dataclass(frozen=True)
class BlockCounts:
    """Block count per seen speaker plus the speaker of the previous frame."""

    counts: tuple = ()
    current_speaker: int = 0

    @classmethod
    def start(cls, first_label: int = 1) -> "BlockCounts":
        return cls(counts=((first_label, 1),), current_speaker=first_label)

    def as_dict(self) -> dict:
        return dict(self.counts)

    @property
    def num_speakers(self) -> int:
        return len(self.counts)

    def get(self, label: int) -> int:
        for k, n in self.counts:
            if k == label:
                return n
        return 0


def _pairs(labels: Sequence[int]):
    return zip(labels, labels[1:])


def count_changes(labels: Sequence[int]) -> int:
    return sum(1 for a, b in _pairs(labels) if a != b)


def estimate_alpha(label_sequences: Iterable[Sequence[int]]) -> float:
    """New-speaker events beyond the first speaker over speaker-change events."""
    numerator = 0
    denominator = 0
    for labels in label_sequences:
        labels = list(labels)
        numerator += max(labels) - 1
        denominator += count_changes(labels)
    if denominator == 0:
        raise ValidationError("no speaker changes in corpus")
    return numerator / denominator


def estimate_p0(label_sequences: Iterable[Sequence[int]]) -> float:
    changes = 0
    pairs = 0
    for labels in label_sequences:
        labels = list(labels)
        changes += count_changes(labels)
        pairs += len(labels) - 1
    if pairs == 0:
        raise ValidationError("every sequence has length 1; p0 is undefined")
    return min(max(changes / pairs, P0_MIN), P0_MAX)


def estimate_priors(label_sequences: Iterable[Sequence[int]]) -> PriorParams:
    seqs = [list(s) for s in label_sequences]
    return PriorParams(alpha=estimate_alpha(seqs), p0=estimate_p0(seqs))


def change_log_prob(p0: float, changed: bool) -> float:
    return math.log(p0) if changed else math.log1p(-p0)


def assignment_log_prob(blocks: BlockCounts, alpha: float, target: int) -> float:
    """log p(y_t = target | z_t = 1, history); ``target`` is a label or ``NEW``."""
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    if target == blocks.current_speaker:
        raise ValidationError("assignment factor applies only to a speaker change")
    z = alpha
    n_target = None
    for k, n in blocks.counts:
        if k != blocks.current_speaker:
            z += n
        if k == target:
            n_target = n
    if target == NEW:
        return math.log(alpha / z)
    if n_target is None:
        raise ValidationError(f"speaker {target} has not been seen")
    return math.log(n_target / z)


def assignment_log_probs(blocks: BlockCounts, alpha: float) -> dict:
    """All admissible switch targets (existing speakers != current, and NEW) with log-probabilities."""
    z = alpha + sum(n for k, n in blocks.counts if k != blocks.current_speaker)
    log_z = math.log(z)
    out = {k: math.log(n) - log_z for k, n in blocks.counts if k != blocks.current_speaker}
    out[NEW] = math.log(alpha) - log_z
    return out


def update_blocks(blocks: BlockCounts, label: int) -> BlockCounts:
    if label == blocks.current_speaker:
        return blocks
    counts = list(blocks.counts)
    for i, (k, n) in enumerate(counts):
        if k == label:
            counts[i] = (k, n + 1)
            break
    else:
        counts.append((label, 1))
    return BlockCounts(tuple(counts), label)


def blocks_from_labels(labels: Sequence[int]) -> BlockCounts:
    blocks = BlockCounts()
    for y in labels:
        blocks = update_blocks(blocks, y)
    return blocks


def label_process_log_prob(labels: Sequence[int], priors: PriorParams) -> float:
    """Log-probability of a canonical labeling under the change and assignment factors alone."""
    labels = list(labels)
    if not labels or labels[0] != 1:
        raise ValidationError("labeling must start with speaker 1")
    total = 0.0
    blocks = BlockCounts.start(1)
    for y in labels[1:]:
        if y == blocks.current_speaker:
            total += change_log_prob(priors.p0, False)
        else:
            target = NEW if y > blocks.num_speakers else y
            if target == NEW and y != blocks.num_speakers + 1:
                raise ValidationError("labeling is not canonical")
            total += change_log_prob(priors.p0, True) + assignment_log_prob(blocks, priors.alpha, target)
        blocks = update_blocks(blocks, y)
    return total
