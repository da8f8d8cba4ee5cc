"""Synthetic conversations drawn from the model's own generative story."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from uisrnn.data import Dataset, EmbeddingSequence, LabeledRecording, relabel_canonical, stable_hash
from uisrnn.errors import ValidationError
from uisrnn.evaluation import FrameReference

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    num_speakers: int = 4
    dim: int = 8
    mean_scale: float = 10.0
    sigma: float = 1.0
    num_frames: int = 200
    p0: float = 0.05
    alpha: float = 1.0
    seed: int = 0
    overlap_fraction: float = 0.0
    frame_duration: float = 1.0

    def __post_init__(self):
        if self.num_speakers < 1 or self.num_frames < 1 or self.dim < 1:
            raise ValidationError("num_speakers, num_frames and dim must be >= 1")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not 0 < self.p0 < 1:
            raise ValidationError("p0 must be in (0, 1)")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if not 0 <= self.overlap_fraction < 1:
            raise ValidationError("overlap_fraction must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class Synthesized:
    recording: LabeledRecording
    reference: FrameReference
    speaker_labels: tuple  # generative single-speaker labels, before the overlap relabeling
    speaker_means: np.ndarray
    capped: bool


def sample_labels(rng: np.random.Generator, num_frames: int, p0: float, alpha: float,
                  max_speakers: int | None = None) -> tuple[list, bool]:
    """Sample a canonical label stream; returns ``(labels, capped)``.

    ``capped`` is True if the speaker cap ever removed NEW-speaker mass.
    """
    labels = [1]
    counts = {1: 1}
    current = 1
    capped = False
    for _ in range(1, num_frames):
        if rng.random() >= p0:
            labels.append(current)
            continue
        targets = [k for k in counts if k != current]
        weights = [counts[k] for k in targets]
        if max_speakers is None or len(counts) < max_speakers:
            targets.append(len(counts) + 1)
            weights.append(alpha)
        else:
            capped = True
        if not targets:
            labels.append(current)
            continue
        w = np.asarray(weights, dtype=np.float64)
        y = targets[int(rng.choice(len(targets), p=w / w.sum()))]
        counts[y] = counts.get(y, 0) + 1
        current = y
        labels.append(y)
    return labels, capped


def generate(config: SynthConfig, recording_id: str = "synth", domain: str = "synthetic") -> Synthesized:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stable_hash(recording_id)]))
    means = rng.normal(0.0, config.mean_scale, size=(config.num_speakers, config.dim))
    labels, capped = sample_labels(rng, config.num_frames, config.p0, config.alpha, config.num_speakers)
    if capped:
        logger.debug("recording %s: speaker cap %d reached", recording_id, config.num_speakers)
    centers = means[np.asarray(labels) - 1]
    sets = [frozenset([y]) for y in labels]
    if config.overlap_fraction > 0:
        overlap = rng.random(config.num_frames) < config.overlap_fraction
        for t in np.nonzero(overlap)[0]:
            seen = sorted(set(labels[: t + 1]) - {labels[t]})
            if not seen:
                continue
            other = seen[int(rng.integers(len(seen)))]
            centers[t] = 0.5 * (means[labels[t] - 1] + means[other - 1])
            sets[t] = frozenset([labels[t], other])
    frames = centers + rng.normal(0.0, config.sigma, size=centers.shape)
    reference = FrameReference(tuple(sets), config.frame_duration)
    rec = LabeledRecording(
        recording_id,
        domain,
        EmbeddingSequence(frames, config.frame_duration),
        relabel_canonical(sets),
        list(reference.frames) if config.overlap_fraction > 0 else None,
    )
    return Synthesized(rec, reference, tuple(labels), means, capped)


def generate_dataset(config: SynthConfig, num_recordings: int, prefix: str = "rec",
                     domain: str = "synthetic") -> Dataset:
    """``num_recordings`` independent conversations, each with its own speakers."""
    return Dataset([
        generate(config, f"{prefix}{i:04d}", domain).recording for i in range(num_recordings)
    ])
