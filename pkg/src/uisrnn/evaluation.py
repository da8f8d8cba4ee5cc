"""Frame-level diarization error rate without forgiveness collar."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from uisrnn.errors import ValidationError


@dataclass(frozen=True)
class FrameReference:
    frames: tuple  # per-frame frozenset of reference speakers
    frame_duration: float = 1.0

    def __post_init__(self):
        frames = tuple(frozenset(f) for f in self.frames)
        if not frames:
            raise ValidationError("reference has no frames")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_labels(cls, labels, frame_duration: float = 1.0) -> "FrameReference":
        return cls(tuple(frozenset([y]) for y in labels), frame_duration)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class DerBreakdown:
    missed: float = 0.0
    false_alarm: float = 0.0
    confusion: float = 0.0
    total: float = 0.0

    @property
    def der(self) -> float:
        if self.total == 0:
            raise ValidationError("reference contains no speech; DER undefined")
        return (self.missed + self.false_alarm + self.confusion) / self.total

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(
            self.missed + other.missed,
            self.false_alarm + other.false_alarm,
            self.confusion + other.confusion,
            self.total + other.total,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["der"] = self.der
        return out


def _as_reference(reference) -> FrameReference:
    if isinstance(reference, FrameReference):
        return reference
    return FrameReference(tuple(reference))


def overlap_matrix(reference: FrameReference, hypothesis: Sequence):
    """Counts of frames where hypothesis label h co-occurs with reference speaker r."""
    if len(reference) != len(hypothesis):
        raise ValidationError(f"reference has {len(reference)} frames, hypothesis {len(hypothesis)}")
    hyp_labels = sorted(set(hypothesis), key=repr)
    ref_labels = sorted(set().union(*reference.frames), key=repr)
    hi = {h: i for i, h in enumerate(hyp_labels)}
    ri = {r: j for j, r in enumerate(ref_labels)}
    counts = np.zeros((len(hyp_labels), len(ref_labels)), dtype=np.int64)
    for speakers, h in zip(reference.frames, hypothesis):
        for r in speakers:
            counts[hi[h], ri[r]] += 1
    return counts, hyp_labels, ref_labels


def optimal_mapping(reference, hypothesis: Sequence) -> dict:
    """Injective hyp -> ref map maximizing matched frames (Hungarian algorithm)."""
    reference = _as_reference(reference)
    hypothesis = list(hypothesis)
    counts, hyp_labels, ref_labels = overlap_matrix(reference, hypothesis)
    if counts.size == 0:
        return {}
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return {hyp_labels[i]: ref_labels[j] for i, j in zip(rows, cols) if counts[i, j] > 0}


def der(reference, hypothesis: Sequence, exclude_overlap: bool = False, mapping: dict | None = None) -> DerBreakdown:
    reference = _as_reference(reference)
    hypothesis = list(hypothesis)
    if len(reference) != len(hypothesis):
        raise ValidationError(f"reference has {len(reference)} frames, hypothesis {len(hypothesis)}")
    if mapping is None:
        mapping = optimal_mapping(reference, hypothesis)
    unmapped = object()
    dt = reference.frame_duration
    missed = false_alarm = confusion = total = 0
    for ref_set, h in zip(reference.frames, hypothesis):
        n_ref = len(ref_set)
        if exclude_overlap and n_ref >= 2:
            continue
        mapped = mapping.get(h, unmapped)
        n_hyp = 1
        hit = 1 if mapped in ref_set else 0
        missed += max(0, n_ref - n_hyp)
        false_alarm += max(0, n_hyp - n_ref)
        confusion += min(n_ref, n_hyp) - hit
        total += n_ref
    result = DerBreakdown(missed * dt, false_alarm * dt, confusion * dt, total * dt)
    if total == 0:
        raise ValidationError("no scoreable reference speech")
    return result


def der_corpus(pairs, exclude_overlap: bool = False, domains: Sequence[str] | None = None):
    """Time-weighted corpus DER: components are summed before dividing.

    Returns ``(overall, per_domain)`` where ``per_domain`` maps domain tag to
    its own breakdown (empty if ``domains`` is not given).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no recordings to score")
    if domains is not None and len(domains) != len(pairs):
        raise ValidationError("one domain tag per recording required")
    overall = DerBreakdown()
    per_domain = {}
    for i, (ref, hyp) in enumerate(pairs):
        b = der(ref, hyp, exclude_overlap=exclude_overlap)
        overall = overall + b
        if domains is not None:
            per_domain[domains[i]] = per_domain.get(domains[i], DerBreakdown()) + b
    return overall, dict(sorted(per_domain.items()))


def format_domain_table(per_domain: dict, overall: DerBreakdown | None = None) -> str:
    lines = [f"{'domain':<20} {'DER%':>7} {'miss':>9} {'fa':>9} {'conf':>9} {'total':>9}"]
    rows = list(per_domain.items())
    if overall is not None:
        rows.append(("OVERALL", overall))
    for name, b in rows:
        lines.append(
            f"{name:<20} {100 * b.der:7.2f} {b.missed:9.2f} {b.false_alarm:9.2f} {b.confusion:9.2f} {b.total:9.2f}"
        )
    return "\n".join(lines)
