"""On-disk formats: UEMB embedding files, label files and dataset manifests.

UEMB layout (little-endian)::

    b"UEMB" | version u32 = 1 | T u32 | D u32 | frame_duration f32 | T*D f32 row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from uisrnn.data import Dataset, EmbeddingSequence, LabeledRecording, LabelSequence, parse_rttm, segments_to_frame_labels
from uisrnn.errors import BadMagicError, DimensionMismatchError, FormatError, TruncatedError, ValidationError, VersionMismatchError

MAGIC = b"UEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")


def write_embeddings(seq: EmbeddingSequence, path) -> None:
    T, D = seq.frames.shape
    payload = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, D, seq.frame_duration))
        fh.write(payload.tobytes())


def read_embeddings(path, expected_dim: int | None = None) -> EmbeddingSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, T, D, frame_duration = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if D == 0 or T == 0:
        raise FormatError(f"{path}: empty sequence (T={T}, D={D})")
    if expected_dim is not None and D != expected_dim:
        raise DimensionMismatchError(f"{path}: dim {D}, expected {expected_dim}")
    expected = _HEADER.size + 4 * T * D
    if len(raw) < expected:
        raise TruncatedError(f"{path}: header claims {T}x{D} values, payload has {(len(raw) - _HEADER.size) // 4}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    frames = np.frombuffer(raw, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    return EmbeddingSequence(frames.astype(np.float64), float(frame_duration))


def write_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def read_labels(path) -> LabelSequence:
    values = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            v = int(line)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not an integer: {line!r}") from None
        if v < 1:
            raise FormatError(f"{path}:{lineno}: labels must be positive")
        values.append(v)
    return LabelSequence(tuple(values))


def read_label_file_raw(path) -> list[int]:
    return [int(line) for line in Path(path).read_text(encoding="utf-8").split()]


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_dataset(manifest_path, overlap_as_new_speaker: bool = True) -> Dataset:
    """Load a JSON manifest: list of {id, domain, embeddings_path, labels_path | rttm_path}."""
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValidationError(f"{manifest_path}: manifest must be a JSON list")
    base = manifest_path.parent
    recordings = []
    for entry in entries:
        missing = {"id", "embeddings_path"} - entry.keys()
        if missing:
            raise ValidationError(f"{manifest_path}: entry missing {sorted(missing)}")
        emb = read_embeddings(_resolve(base, entry["embeddings_path"]))
        reference = None
        if "rttm_path" in entry:
            segments = parse_rttm(_resolve(base, entry["rttm_path"]).read_text(encoding="utf-8"))
            segments = [s for s in segments if s.recording == entry["id"]]
            labels, reference = segments_to_frame_labels(
                segments, len(emb), emb.frame_duration, overlap_as_new_speaker=overlap_as_new_speaker
            )
        elif "labels_path" in entry:
            labels = read_labels(_resolve(base, entry["labels_path"]))
        else:
            raise ValidationError(f"{manifest_path}: entry {entry['id']} has neither labels_path nor rttm_path")
        recordings.append(LabeledRecording(entry["id"], entry.get("domain", "default"), emb, labels, reference))
    return Dataset(recordings)


def write_manifest(entries: list[dict], path) -> None:
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_recording(rec: LabeledRecording, directory, rttm: bool = False) -> dict:
    """Write one recording's UEMB + labels (or RTTM) into ``directory``; return its manifest entry."""
    from uisrnn.data import format_rttm, sets_to_segments

    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    emb_name = f"{rec.id}.uemb"
    write_embeddings(rec.embeddings, directory / emb_name)
    entry = {"id": rec.id, "domain": rec.domain, "embeddings_path": emb_name}
    if rttm:
        segments = sets_to_segments(rec.reference_sets(), rec.id, rec.embeddings.frame_duration)
        name = f"{rec.id}.rttm"
        (directory / name).write_text(format_rttm(segments), encoding="utf-8")
        entry["rttm_path"] = name
    else:
        name = f"{rec.id}.labels"
        write_labels(rec.labels, directory / name)
        entry["labels_path"] = name
    return entry
