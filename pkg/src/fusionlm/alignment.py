"""Per-token visual features: frame allocation, feature files, manifests."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .tokenizer import encode

MISSING = "-"
MANIFEST_FIELDS = ("segment_id", "transcript", "feature_file_path")


@dataclass(frozen=True)
class FrameTrack:
    frames: np.ndarray  # (K, D)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DataError(f"frame track must be a non-empty K x D matrix, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise DataError("frame track contains non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def K(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Segment:
    id: str
    tokens: np.ndarray  # (N,) int64, BOS/EOS included
    features: np.ndarray  # (N, D)
    has_visual: bool

    def __len__(self):
        return len(self.tokens)

    def blinded(self) -> "Segment":
        return Segment(self.id, self.tokens, np.zeros_like(self.features), False)


def assign_frames(n_tokens: int, n_frames: int) -> np.ndarray:
    """Token ``i`` of ``N`` takes frame ``floor(i * K / N)``.

    Replicates frames when ``N >= K`` (allocation counts differ by at most
    one) and subsamples them uniformly when ``N < K``.
    """
    if n_tokens < 1 or n_frames < 1:
        raise DataError(f"need N >= 1 and K >= 1, got N={n_tokens}, K={n_frames}")
    return np.arange(n_tokens, dtype=np.int64) * n_frames // n_tokens


def attach_features(
    tokens: Sequence[int], track: FrameTrack | None, dim: int, segment_id: str = ""
) -> Segment:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DataError(f"segment {segment_id!r}: token sequence must be non-empty")
    if track is None:
        return Segment(segment_id, tokens, np.zeros((tokens.size, dim)), False)
    if track.D != dim:
        raise DataError(
            f"segment {segment_id!r}: feature dimension {track.D} does not match expected {dim}"
        )
    idx = assign_frames(tokens.size, track.K)
    return Segment(segment_id, tokens, track.frames[idx], True)


def write_feature_file(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    k, d = frames.shape
    lines = [f"{k} {d}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in frames)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_feature_file(path) -> FrameTrack:
    try:
        rows = Path(path).read_text(encoding="ascii").split()
        k, d = int(rows[0]), int(rows[1])
        values = np.array(rows[2:], dtype=np.float64)
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"unreadable feature file {path}: {exc}") from exc
    if values.size != k * d:
        raise DataError(f"feature file {path}: header says {k}x{d}, found {values.size} values")
    return FrameTrack(values.reshape(k, d))


@dataclass(frozen=True)
class ManifestRow:
    segment_id: str
    transcript: str
    feature_file_path: str  # MISSING when the segment has no features


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow((r.segment_id, r.transcript, r.feature_file_path))


def read_manifest(path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_FIELDS:
                raise DataError(f"manifest {path}: expected header {MANIFEST_FIELDS}, got {header}")
            rows = []
            for n, rec in enumerate(reader, start=2):
                if len(rec) != 3:
                    raise DataError(f"manifest {path} line {n}: expected 3 columns, got {len(rec)}")
                rows.append(ManifestRow(*rec))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return rows


def load_segments(manifest_path, vocab, dim: int | None = None) -> list:
    """Tokenize every manifest row and attach its (possibly missing) features.

    Feature paths are resolved relative to the manifest's directory.  With
    ``dim=None`` the width is taken from the first feature file.
    """
    base = Path(manifest_path).parent
    rows = read_manifest(manifest_path)
    tracks = [None if r.feature_file_path == MISSING else read_feature_file(base / r.feature_file_path)
              for r in rows]
    if dim is None:
        dim = next((t.D for t in tracks if t is not None), None)
        if dim is None:
            raise DataError(f"manifest {manifest_path}: no feature files to infer the feature width from")
    segments = []
    for row, track in zip(rows, tracks):
        segments.append(
            attach_features(encode(vocab, row.transcript), track, dim, row.segment_id)
        )
    if not segments:
        raise DataError(f"manifest {manifest_path} has no segments")
    return segments
