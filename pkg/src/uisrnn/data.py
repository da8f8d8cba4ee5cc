"""Core data types, labeling conventions and dataset preparation."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from uisrnn.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """T frames of D-dimensional embeddings, stored as a float64 (T, D) array."""

    frames: np.ndarray
    frame_duration: float = 1.0

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValidationError(f"frames must be a nonempty (T, D) array, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("embedding frames contain non-finite values")
        if not self.frame_duration > 0:
            raise ValidationError("frame_duration must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (
            self.frame_duration == other.frame_duration
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass(frozen=True)
class LabelSequence:
    """Canonical speaker labels: 1-based, numbered in order of first appearance."""

    labels: tuple

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        if not labels:
            raise ValidationError("label sequence must be nonempty")
        next_new = 1
        for v in labels:
            if v == next_new:
                next_new += 1
            elif not 1 <= v < next_new:
                raise ValidationError(f"labels are not canonical: {labels[:20]}...")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __getitem__(self, item):
        return self.labels[item]

    @property
    def num_speakers(self) -> int:
        return max(self.labels)

    def changes(self) -> list[int]:
        """Speaker-change indicators z_t for t = 2..T."""
        return [int(a != b) for a, b in zip(self.labels, self.labels[1:])]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


@dataclass(frozen=True)
class LabeledRecording:
    id: str
    domain: str
    embeddings: EmbeddingSequence
    labels: LabelSequence
    reference: list | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.labels) != len(self.embeddings):
            raise ValidationError(
                f"recording {self.id}: {len(self.labels)} labels for {len(self.embeddings)} frames"
            )
        if self.reference is not None and len(self.reference) != len(self.labels):
            raise ValidationError(f"recording {self.id}: reference length mismatch")

    def reference_sets(self) -> list[frozenset]:
        """Per-frame reference speaker sets (singletons of the labels when no overlap info)."""
        if self.reference is not None:
            return list(self.reference)
        return [frozenset([y]) for y in self.labels]


@dataclass
class Dataset:
    recordings: list

    def __post_init__(self):
        self.recordings = list(self.recordings)
        if not self.recordings:
            raise ValidationError("dataset must contain at least one recording")
        ids = [r.id for r in self.recordings]
        if len(set(ids)) != len(ids):
            raise ValidationError("recording ids must be unique")

    def __len__(self):
        return len(self.recordings)

    def __iter__(self):
        return iter(self.recordings)

    @property
    def dim(self) -> int:
        return self.recordings[0].embeddings.dim


@dataclass(frozen=True, eq=False)
class SpeakerTrainSequence:
    speaker_key: tuple
    frames: np.ndarray

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class RttmSegment:
    recording: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.onset < 0:
            raise ValidationError(f"negative onset {self.onset}")
        if not self.duration > 0:
            raise ValidationError(f"non-positive duration {self.duration}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True, eq=False)
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray
    total_variance: float

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]

    def captured_fraction(self) -> float:
        if self.total_variance == 0:
            return 1.0
        return float(self.variances.sum() / self.total_variance)

    def reconstruct(self, projected: np.ndarray) -> np.ndarray:
        return np.asarray(projected) @ self.basis + self.mean


# --------------------------------------------------------------------------
# RTTM and frame labels
# --------------------------------------------------------------------------


def parse_rttm(text: str) -> list[RttmSegment]:
    segments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 9:
            raise ParseError(f"expected at least 9 fields, got {len(fields)}", line=lineno)
        if fields[0] != "SPEAKER":
            raise ParseError(f"unsupported RTTM type {fields[0]!r}", line=lineno)
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise ParseError("onset/duration are not numbers", line=lineno) from None
        if duration < 0:
            raise ValidationError(f"line {lineno}: negative duration {duration}")
        if duration == 0:
            logger.warning("line %d: zero-duration segment skipped", lineno)
            continue
        segments.append(RttmSegment(fields[1], onset, duration, fields[7]))
    return segments


def format_rttm(segments: Iterable[RttmSegment]) -> str:
    lines = [
        f"SPEAKER {s.recording} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>"
        for s in segments
    ]
    return "".join(line + "\n" for line in lines)


def labels_to_segments(labels: Sequence[int], recording: str, frame_duration: float = 1.0) -> list[RttmSegment]:
    """Merge runs of equal labels into RTTM segments."""
    segments = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segments.append(
                RttmSegment(recording, start * frame_duration, (t - start) * frame_duration, str(labels[start]))
            )
            start = t
    return segments


def sets_to_segments(frame_sets: Sequence[frozenset], recording: str,
                     frame_duration: float = 1.0) -> list[RttmSegment]:
    """One segment per maximal run of frames containing a speaker; sorted by onset, then speaker."""
    segments = []
    speakers = sorted(set().union(*frame_sets), key=str)
    for spk in speakers:
        start = None
        for t in range(len(frame_sets) + 1):
            present = t < len(frame_sets) and spk in frame_sets[t]
            if present and start is None:
                start = t
            elif not present and start is not None:
                segments.append(RttmSegment(recording, start * frame_duration, (t - start) * frame_duration, str(spk)))
                start = None
    return sorted(segments, key=lambda seg: (seg.onset, seg.speaker))


def relabel_canonical(raw_labels: Sequence[Hashable]) -> LabelSequence:
    mapping = {}
    out = []
    for v in raw_labels:
        if v not in mapping:
            mapping[v] = len(mapping) + 1
        out.append(mapping[v])
    if not out:
        raise ValidationError("cannot relabel an empty sequence")
    return LabelSequence(tuple(out))


def frame_speaker_sets(segments: Sequence[RttmSegment], num_frames: int, frame_duration: float = 1.0) -> list[frozenset]:
    """Speakers active at each frame midpoint."""
    if num_frames < 1:
        raise ValidationError("num_frames must be >= 1")
    recordings = {s.recording for s in segments}
    if len(recordings) > 1:
        raise ValidationError(f"segments span several recordings: {sorted(recordings)}")
    midpoints = (np.arange(num_frames) + 0.5) * frame_duration
    active = [set() for _ in range(num_frames)]
    for seg in segments:
        inside = np.nonzero((midpoints >= seg.onset) & (midpoints < seg.offset))[0]
        for f in inside:
            active[f].add(seg.speaker)
    return [frozenset(s) for s in active]


def segments_to_frame_labels(
    segments: Sequence[RttmSegment],
    num_frames: int,
    frame_duration: float = 1.0,
    overlap_as_new_speaker: bool = True,
    overlap_policy: str = "error",
) -> tuple[LabelSequence, list[frozenset]]:
    """Convert segments to canonical frame labels plus the raw per-frame speaker sets.

    With ``overlap_as_new_speaker`` every distinct set of two or more
    concurrent speakers becomes its own synthetic speaker.  Otherwise overlap
    frames either raise (``overlap_policy="error"``) or keep the speaker whose
    segment comes first in ``segments`` (``"first"``).
    """
    if overlap_policy not in ("error", "first"):
        raise ValidationError(f"unknown overlap policy {overlap_policy!r}")
    sets = frame_speaker_sets(segments, num_frames, frame_duration)
    order = {}
    for seg in segments:
        order.setdefault(seg.speaker, len(order))
    raw = []
    for f, active in enumerate(sets):
        if not active:
            raise ValidationError(f"frame {f} has no active speaker; restrict input to speech frames")
        if len(active) == 1 or overlap_as_new_speaker:
            raw.append(active)
        elif overlap_policy == "first":
            raw.append(frozenset([min(active, key=order.__getitem__)]))
        else:
            raise ValidationError(f"frame {f} has overlapping speakers {sorted(active)}")
    return relabel_canonical(raw), sets


# --------------------------------------------------------------------------
# Training sequences
# --------------------------------------------------------------------------


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def build_training_sequences(dataset: Dataset, permutations: int = 10, seed: int = 0) -> list[SpeakerTrainSequence]:
    """Per (recording, speaker), ``permutations`` shuffled copies of that speaker's frames."""
    if permutations < 1:
        raise ValidationError("permutations must be >= 1")
    out = []
    for rec in dataset:
        labels = rec.labels.as_array()
        frames = rec.embeddings.frames
        rec_hash = stable_hash(rec.id)
        for speaker in range(1, rec.labels.num_speakers + 1):
            own = frames[labels == speaker]
            if own.shape[0] == 0:
                continue
            for copy_index in range(permutations):
                rng = np.random.default_rng(np.random.SeedSequence([seed, rec_hash, speaker, copy_index]))
                perm = rng.permutation(own.shape[0])
                seq = own[perm]
                seq.setflags(write=False)
                out.append(SpeakerTrainSequence((rec.id, speaker), seq))
    return out


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


def pca_fit(sequences: Iterable[EmbeddingSequence], output_dim: int) -> PcaProjection:
    data = np.concatenate([np.asarray(s.frames if isinstance(s, EmbeddingSequence) else s, dtype=np.float64)
                           for s in sequences], axis=0)
    n, input_dim = data.shape
    if output_dim < 1 or output_dim > input_dim:
        raise ValidationError(f"output_dim must be in [1, {input_dim}], got {output_dim}")
    if n < output_dim:
        raise ValidationError(f"need at least {output_dim} frames, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=True)
    variances_all = np.zeros(input_dim)
    variances_all[: sing.size] = sing**2 / n
    basis = vt[:output_dim].copy()
    # deterministic orientation: largest-magnitude coordinate positive
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(output_dim), pivots])
    basis *= signs[:, None]
    tol = max(n, input_dim) * np.finfo(float).eps * (sing[0] if sing.size else 0.0)
    rank = int(np.sum(sing > tol))
    if rank < output_dim:
        logger.warning("data has rank %d < %d; basis completed with arbitrary orthonormal directions",
                       rank, output_dim)
    return PcaProjection(mean=mean, basis=basis, variances=variances_all[:output_dim],
                         total_variance=float(variances_all.sum()))


def pca_apply(proj: PcaProjection, seq: EmbeddingSequence) -> EmbeddingSequence:
    if seq.dim != proj.input_dim:
        raise ValidationError(f"sequence dim {seq.dim} does not match projection input {proj.input_dim}")
    return EmbeddingSequence((seq.frames - proj.mean) @ proj.basis.T, seq.frame_duration)


def pca_apply_dataset(proj: PcaProjection, dataset: Dataset) -> Dataset:
    return Dataset([
        LabeledRecording(r.id, r.domain, pca_apply(proj, r.embeddings), r.labels, r.reference)
        for r in dataset
    ])


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def stratified_split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset | None]:
    """Holdout split stratified over domain tags.

    Returns ``(train, validation)``; validation is None if every domain was
    too small to contribute a held-out recording.
    """
    if not 0 < ratio < 1:
        raise ValidationError("ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    by_domain = {}
    for rec in dataset:
        by_domain.setdefault(rec.domain, []).append(rec.id)
    train_ids = set()
    for domain in sorted(by_domain):
        ids = by_domain[domain]
        if len(ids) == 1:
            logger.warning("domain %r has a single recording; assigned to train", domain)
            train_ids.update(ids)
            continue
        # every stratum with two or more recordings contributes to both sides
        n_train = min(max(math.floor(len(ids) * ratio + 0.5), 1), len(ids) - 1)
        perm = rng.permutation(len(ids))
        train_ids.update(ids[i] for i in perm[:n_train])
    train = [r for r in dataset if r.id in train_ids]
    val = [r for r in dataset if r.id not in train_ids]
    return Dataset(train), (Dataset(val) if val else None)
