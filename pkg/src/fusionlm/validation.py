"""Input checks shared by the estimator and the evaluation helpers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .alignment import Segment
from .errors import DataError


def check_segments(X, dim: int | None = None, vocab_size: int | None = None,
                   min_len: int = 2) -> list:
    """Return ``X`` as a list after validating every segment.

    Checks type, minimum length, token range, feature shape and finiteness,
    and the all-zero rule for segments without visual features.
    """
    if isinstance(X, Segment):
        X = [X]
    segments = list(X)
    if not segments:
        raise DataError("empty corpus")
    for s in segments:
        if not isinstance(s, Segment):
            raise DataError(f"expected Segment, got {type(s).__name__}")
        n = len(s.tokens)
        if n < min_len:
            raise DataError(f"segment {s.id!r}: need at least {min_len} tokens, got {n}")
        if s.features.shape[0] != n:
            raise DataError(f"segment {s.id!r}: {s.features.shape[0]} feature rows for {n} tokens")
        if dim is not None and s.features.shape[1] != dim:
            raise DataError(f"segment {s.id!r}: feature width {s.features.shape[1]} != {dim}")
        if vocab_size is not None and (s.tokens.min() < 0 or s.tokens.max() >= vocab_size):
            raise DataError(f"segment {s.id!r}: token id outside [0, {vocab_size})")
        if not np.isfinite(s.features).all():
            raise DataError(f"segment {s.id!r}: non-finite features")
        if not s.has_visual and np.any(s.features):
            raise DataError(f"segment {s.id!r}: has_visual=False but features are non-zero")
    return segments


def feature_dim(segments: Sequence[Segment]) -> int:
    dims = {s.features.shape[1] for s in segments}
    if len(dims) != 1:
        raise DataError(f"segments disagree on feature width: {sorted(dims)}")
    return dims.pop()
