"""Dataset ingestion, synthetic speaker corpora, and matrix persistence.

Two on-disk matrix formats are supported:

* CSV text, one row per line, no header, values written with 17 significant
  digits so that float64 values survive the round trip.
* ``MBNMAT1`` binary: the 7-byte magic ``b"MBNMAT1"``, little-endian u64 row
  count, u64 column count, then row-major little-endian float64 values.

A dataset manifest is a JSON object::

    {"feature_dim": 25,
     "entries": [{"id": "utt0", "path": "utt0.csv", "label": "spk3"}, ...]}

Relative feature paths are resolved against the manifest's directory.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"MBNMAT1"
_HEADER = struct.Struct("<QQ")


class DatasetError(ValueError):
    """Raised for malformed manifests, feature files, or matrix files."""


@dataclass(frozen=True)
class FrameMatrix:
    """Acoustic frames of one utterance, shape ``(T, F)``."""

    utterance_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DatasetError(
                f"utterance {self.utterance_id!r}: frames must be a non-empty "
                f"2-D matrix, got shape {frames.shape}"
            )
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def feature_dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    label: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    feature_dim: int
    entries: Tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if int(self.feature_dim) < 1:
            raise DatasetError(f"feature_dim must be positive, got {self.feature_dim}")
        seen = {}
        for row, entry in enumerate(self.entries):
            if entry.utterance_id in seen:
                raise DatasetError(
                    f"manifest row {row}: duplicate utterance id {entry.utterance_id!r} "
                    f"(first seen at row {seen[entry.utterance_id]})"
                )
            seen[entry.utterance_id] = row
        labelled = [e.label is not None for e in self.entries]
        if any(labelled) and not all(labelled):
            row = labelled.index(False) if labelled[0] else labelled.index(True)
            raise DatasetError(
                f"manifest row {row}: labels must be given for all entries or none"
            )

    @property
    def has_labels(self):
        return bool(self.entries) and self.entries[0].label is not None

    def to_json(self):
        return {
            "feature_dim": int(self.feature_dim),
            "entries": [
                {"id": e.utterance_id, "path": e.path, "label": e.label}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or "feature_dim" not in obj or "entries" not in obj:
            raise DatasetError("manifest must be an object with 'feature_dim' and 'entries'")
        entries = []
        for row, item in enumerate(obj["entries"]):
            try:
                label = item.get("label")
                entries.append(
                    ManifestEntry(
                        str(item["id"]), str(item["path"]),
                        None if label is None else str(label),
                    )
                )
            except (KeyError, TypeError, AttributeError) as exc:
                raise DatasetError(f"manifest row {row}: malformed entry {item!r}") from exc
        return cls(int(obj["feature_dim"]), tuple(entries))


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Parameters of a synthetic speaker corpus.

    Every speaker owns a private diagonal GMM with ``mixtures_per_speaker``
    unit-variance components whose means are drawn from an isotropic normal
    with standard deviation ``speaker_separation``.
    """

    num_speakers: int = 10
    utterances_per_speaker: int = 50
    frames_per_utterance_range: Tuple[int, int] = (100, 200)
    feature_dim: int = 10
    mixtures_per_speaker: int = 4
    speaker_separation: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.frames_per_utterance_range
        if min(self.num_speakers, self.utterances_per_speaker, self.feature_dim,
               self.mixtures_per_speaker) < 1:
            raise DatasetError("corpus counts and dimensions must be positive")
        if not 1 <= lo <= hi:
            raise DatasetError(f"bad frames_per_utterance_range {self.frames_per_utterance_range}")
        if not self.speaker_separation > 0:
            raise DatasetError("speaker_separation must be positive")
        if self.seed < 0:
            raise DatasetError("seed must be unsigned")
        object.__setattr__(self, "frames_per_utterance_range", (int(lo), int(hi)))


# ---------------------------------------------------------------------------
# matrix files
# ---------------------------------------------------------------------------

def _check_finite(matrix, where):
    bad = np.argwhere(~np.isfinite(matrix))
    if bad.size:
        r, c = bad[0]
        raise DatasetError(f"{where}: non-finite value {matrix[r, c]!r} at row {r}, column {c}")


def save_matrix(path, matrix, fmt=None):
    """Write a 2-D float64 matrix as CSV or ``MBNMAT1``.

    ``fmt`` is ``"csv"`` or ``"bin"``; when omitted it is inferred from the
    file extension (``.csv`` means text, anything else binary).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2:
        raise DatasetError(f"expected a 2-D matrix, got shape {matrix.shape}")
    _check_finite(matrix, str(path))
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "bin"
    if fmt == "csv":
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for row in matrix:
                fh.write(",".join(format(v, ".17g") for v in row))
                fh.write("\n")
    elif fmt == "bin":
        rows, cols = matrix.shape
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(rows, cols))
            fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    else:
        raise DatasetError(f"unknown matrix format {fmt!r}")


def load_matrix(path):
    """Read a matrix written by :func:`save_matrix` (format sniffed from the magic)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head == MAGIC:
            header = fh.read(_HEADER.size)
            if len(header) != _HEADER.size:
                raise DatasetError(f"{path}: truncated MBNMAT1 header")
            rows, cols = _HEADER.unpack(header)
            payload = fh.read()
            if len(payload) != rows * cols * 8:
                raise DatasetError(
                    f"{path}: malformed MBNMAT1 payload, expected {rows * cols * 8} bytes "
                    f"for {rows}x{cols}, found {len(payload)}"
                )
            return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return _load_csv(path)


def _load_csv(path):
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                values = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise DatasetError(f"{path}: unparsable value on row {lineno}: {exc}") from exc
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetError(
                    f"{path}: row {lineno} has {len(values)} columns, expected {width}"
                )
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: empty matrix file")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

def read_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(obj)


def write_manifest(manifest_path, manifest):
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2)
        fh.write("\n")


def load_dataset(manifest_path):
    """Load every utterance named by a manifest.

    Returns
    -------
    utterances : list of FrameMatrix
        In manifest order.
    labels : list of str or None
        Ground-truth speaker labels when the manifest carries them.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    utterances = []
    for row, entry in enumerate(manifest.entries):
        feat_path = Path(entry.path)
        if not feat_path.is_absolute():
            feat_path = base / feat_path
        if not feat_path.exists():
            raise DatasetError(f"manifest row {row} ({entry.utterance_id}): missing file {feat_path}")
        try:
            frames = load_matrix(feat_path)
            _check_finite(frames, f"manifest row {row} ({entry.utterance_id}) file {feat_path}")
        except DatasetError as exc:
            if str(exc).startswith("manifest row"):
                raise
            raise DatasetError(f"manifest row {row} ({entry.utterance_id}): {exc}") from exc
        if frames.shape[1] != manifest.feature_dim:
            raise DatasetError(
                f"manifest row {row} ({entry.utterance_id}): file {feat_path} has "
                f"{frames.shape[1]} columns, manifest feature_dim is {manifest.feature_dim}"
            )
        utterances.append(FrameMatrix(entry.utterance_id, frames))
    labels = [e.label for e in manifest.entries] if manifest.has_labels else None
    return utterances, labels


def write_dataset(directory, utterances, labels=None, fmt="bin"):
    """Write utterances plus a ``manifest.json`` into ``directory``.

    Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if fmt == "csv" else ".bin"
    entries = []
    for i, utt in enumerate(utterances):
        name = f"{utt.utterance_id}{ext}"
        save_matrix(directory / name, utt.frames, fmt=fmt)
        label = None if labels is None else str(labels[i])
        entries.append(ManifestEntry(utt.utterance_id, name, label))
    manifest = DatasetManifest(utterances[0].feature_dim, tuple(entries))
    path = directory / "manifest.json"
    write_manifest(path, manifest)
    return path


def generate_synthetic_corpus(spec):
    """Sample a labelled corpus of speakers from private GMMs.

    Utterances are ordered speaker-major, so labels read
    ``[0]*U + [1]*U + ...`` for ``U`` utterances per speaker.

    Returns
    -------
    utterances : list of FrameMatrix
    labels : np.ndarray of int
    manifest : DatasetManifest
        Entries point at ``<utterance_id>.bin`` files, which
        :func:`write_dataset` produces.
    """
    rng = np.random.default_rng(spec.seed)
    c, m, dim = spec.num_speakers, spec.mixtures_per_speaker, spec.feature_dim
    means = rng.normal(0.0, spec.speaker_separation, size=(c, m, dim))
    lo, hi = spec.frames_per_utterance_range
    utterances = []
    labels = []
    for s in range(c):
        for u in range(spec.utterances_per_speaker):
            t = int(rng.integers(lo, hi + 1))
            comp = rng.integers(0, m, size=t)
            frames = means[s, comp] + rng.standard_normal((t, dim))
            utterances.append(FrameMatrix(f"spk{s:03d}_utt{u:04d}", frames))
            labels.append(s)
    manifest = DatasetManifest(
        dim,
        tuple(
            ManifestEntry(u.utterance_id, f"{u.utterance_id}.bin", f"spk{lab:03d}")
            for u, lab in zip(utterances, labels)
        ),
    )
    return utterances, np.array(labels, dtype=np.int64), manifest


def pool_frames(utterances: Sequence[FrameMatrix]) -> np.ndarray:
    dims = {u.feature_dim for u in utterances}
    if len(dims) != 1:
        raise DatasetError(f"utterances disagree on feature dimension: {sorted(dims)}")
    return np.concatenate([u.frames for u in utterances], axis=0)


def encode_labels(labels: Sequence) -> Tuple[np.ndarray, List]:
    """Map arbitrary hashable labels to ``0..c-1`` in order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(lab, len(mapping))
    return out, list(mapping)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
