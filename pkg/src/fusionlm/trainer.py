"""Batching, unrolled training with dev-set early stopping."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .alignment import Segment
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, ParamSet, batch_loss_and_grads, batch_nll
from .optim import Adafactor, AdafactorState, ClipPolicy, clip_by_group, sgd_step
from .tokenizer import PAD

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    unroll_max: int = 70
    optimizer: str = "adafactor"
    learning_rate: float = 0.1  # sgd only; adafactor uses relative steps
    dev_fraction: float = 0.01
    patience: int = 2
    max_epochs: int = 10
    seed: int = 0
    clip_lstm: float = 1.0
    clip_other: float = 10000.0
    threads: int = 1
    shard_size: int = 16

    def __post_init__(self):
        if not 0.0 < self.dev_fraction < 1.0:
            raise ConfigError(f"dev_fraction must lie in (0, 1), got {self.dev_fraction}")
        if self.unroll_max < 2:
            raise ConfigError("unroll_max must be >= 2")
        if self.optimizer not in ("adafactor", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.threads < 1 or self.shard_size < 1:
            raise ConfigError("threads and shard_size must be >= 1")

    @property
    def clip_policy(self) -> ClipPolicy:
        return ClipPolicy(self.clip_lstm, self.clip_other)


def split_dev(segments: Sequence, fraction: float, seed: int):
    """Seeded random ``(train, dev)`` split with ``max(1, round(fraction * n))`` dev items."""
    n = len(segments)
    if n < 2:
        raise DataError(f"need at least 2 segments to split, got {n}")
    n_dev = min(n - 1, max(1, round(fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    dev_idx = set(order[:n_dev].tolist())
    train = [s for i, s in enumerate(segments) if i not in dev_idx]
    dev = [s for i, s in enumerate(segments) if i in dev_idx]
    return train, dev


def chunk_segment(segment: Segment, unroll_max: int) -> list:
    """Consecutive, non-overlapping chunks of at most ``unroll_max`` tokens."""
    n = len(segment.tokens)
    if n <= unroll_max:
        return [segment]
    return [
        Segment(f"{segment.id}#{k}", segment.tokens[lo:lo + unroll_max],
                segment.features[lo:lo + unroll_max], segment.has_visual)
        for k, lo in enumerate(range(0, n, unroll_max))
    ]


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (B, T) int64, PAD-filled
    features: np.ndarray  # (B, T, D)
    mask: np.ndarray  # (B, T-1), 1.0 where a real token is predicted
    segment_ids: tuple

    @property
    def predicted(self) -> int:
        return int(self.mask.sum())


def pad_batch(segments: Sequence[Segment]) -> Batch:
    width = max(len(s.tokens) for s in segments)
    dim = segments[0].features.shape[1]
    tokens = np.full((len(segments), width), PAD, dtype=np.int64)
    feats = np.zeros((len(segments), width, dim))
    mask = np.zeros((len(segments), width - 1))
    for i, s in enumerate(segments):
        n = len(s.tokens)
        tokens[i, :n] = s.tokens
        feats[i, :n] = s.features
        mask[i, :n - 1] = 1.0
    return Batch(tokens, feats, mask, tuple(s.id for s in segments))


def make_batches(segments: Sequence[Segment], batch_size: int, unroll_max: int,
                 rng: np.random.Generator | None = None) -> list:
    """Chunk, optionally shuffle, and pad into batches.

    Chunks shorter than two tokens predict nothing and are dropped.
    """
    chunks = [c for s in segments for c in chunk_segment(s, unroll_max) if len(c.tokens) >= 2]
    if any(len(s.tokens) > unroll_max for s in segments):
        log.warning("segments longer than unroll_max=%d were split into chunks", unroll_max)
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [pad_batch(chunks[i:i + batch_size]) for i in range(0, len(chunks), batch_size)]


def _shards(batch: Batch, size: int) -> list:
    out = []
    for lo in range(0, len(batch.tokens), size):
        sl = slice(lo, lo + size)
        out.append((batch.tokens[sl], batch.features[sl], batch.mask[sl]))
    return out


class _Pool:
    """Thread pool whose results come back in submission order."""

    def __init__(self, threads: int):
        self.executor = ThreadPoolExecutor(threads) if threads > 1 else None

    def map(self, fn, items):
        if self.executor is None:
            return [fn(x) for x in items]
        return list(self.executor.map(fn, items))

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


def batch_gradients(params: ParamSet, config: ModelConfig, batch: Batch, shard_size: int, pool=None):
    """Summed NLL and gradients of a batch, reduced shard by shard in order."""
    pool = pool or _Pool(1)
    results = pool.map(lambda sh: batch_loss_and_grads(params, config, *sh), _shards(batch, shard_size))
    total, grads = results[0][0], dict(results[0][1])
    for loss, g in results[1:]:
        total += loss
        for k, v in g.items():
            grads[k] = grads[k] + v
    return total, grads


def corpus_nll(params: ParamSet, config: ModelConfig, segments: Sequence[Segment],
               batch_size: int = 64, threads: int = 1) -> tuple:
    """``(total NLL, predicted token count)`` over chunked segments."""
    batches = make_batches(segments, batch_size, config.unroll_max)
    pool = _Pool(threads)
    try:
        parts = pool.map(lambda b: float((batch_nll(params, config, b.tokens, b.features) * b.mask).sum()),
                         batches)
    finally:
        pool.close()
    return math.fsum(parts), sum(b.predicted for b in batches)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_nll: float
    dev_ppl: float
    wall_seconds: float


class EarlyStopping:
    """Tracks the best dev score; signals a stop after ``patience`` non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score < self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    params: ParamSet
    best_epoch: int
    history: list = field(default_factory=list)
    optimizer_state: AdafactorState | None = None


def train(params: ParamSet, config: ModelConfig, train_set: Sequence[Segment],
          dev_set: Sequence[Segment], tc: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train until dev perplexity stops improving; return the best parameters.

    Training loss per epoch is the masked mean NLL per predicted token.
    """
    if not train_set or not dev_set:
        raise DataError("train and dev sets must both be non-empty")
    if tc.unroll_max > config.unroll_max:
        raise ConfigError(f"train unroll_max {tc.unroll_max} exceeds model unroll_max {config.unroll_max}")
    hyper = Adafactor()
    state = hyper.init_state() if tc.optimizer == "adafactor" else None
    stopper = EarlyStopping(tc.patience)
    best = params.copy()
    history = []
    pool = _Pool(tc.threads)
    try:
        for epoch in range(1, tc.max_epochs + 1):
            start = time.perf_counter()
            rng = np.random.default_rng([tc.seed, epoch])
            total, count = 0.0, 0
            for b, batch in enumerate(make_batches(train_set, tc.batch_size, tc.unroll_max, rng)):
                loss, grads = batch_gradients(params, config, batch, tc.shard_size, pool)
                n = batch.predicted
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                total += loss
                count += n
                mean_grads = {k: g / n for k, g in grads.items()}
                try:
                    mean_grads = clip_by_group(mean_grads, params.groups, tc.clip_policy)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from None
                if state is not None:
                    updated = hyper.step(params.tensors, mean_grads, state)
                else:
                    updated = sgd_step(params.tensors, mean_grads, tc.learning_rate)
                params = params.replace(updated)
            dev_nll, dev_count = corpus_nll(params, config, dev_set, threads=tc.threads)
            record = EpochRecord(epoch, total / count, math.exp(dev_nll / dev_count),
                                 time.perf_counter() - start)
            history.append(record)
            log.info("epoch %d train_nll %.6f dev_ppl %.6f (%.1fs)", *record.__dict__.values())
            if on_epoch is not None:
                on_epoch(record)
            improved = record.dev_ppl < stopper.best
            stop = stopper.update(epoch, record.dev_ppl)
            if improved:
                best = params.copy()
            if stop:
                break
    finally:
        pool.close()
    return TrainResult(best, stopper.best_epoch, history, state)


def write_epoch_log(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_nll\tdev_ppl\twall_seconds\n")
        for r in history:
            fh.write(f"{r.epoch}\t{r.train_nll!r}\t{r.dev_ppl!r}\t{r.wall_seconds:.3f}\n")
