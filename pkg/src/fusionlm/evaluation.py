"""Perplexity, blinding and per-wordpiece NLL comparison reports."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import FusionStrategy, batch_nll
from .trainer import _Pool, chunk_segment, pad_batch
from .validation import check_segments

LOG2E = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class SegmentRecord:
    segment_id: str
    token_ids: tuple  # predicted tokens, BOS excluded
    nll: np.ndarray  # nats, aligned with token_ids
    total: float


@dataclass
class EvalReport:
    corpus_id: str
    model_id: str
    token_count: int
    total_nll: float
    perplexity: float
    records: list | None = None

    @property
    def mean_nll(self) -> float:
        return self.total_nll / self.token_count


def segment_nlls(model, segments: Sequence, batch_size: int = 64) -> list:
    """Per-token NLL for every segment, long segments evaluated chunk by chunk."""
    check = check_segments(segments, dim=model.config_.visual_raw_dim,
                           vocab_size=model.config_.vocab_size)
    params, config = model.params_, model.config_
    chunks = []  # (segment index, chunk)
    for i, s in enumerate(check):
        for c in chunk_segment(s, config.unroll_max):
            if len(c.tokens) >= 2:
                chunks.append((i, c))
    groups = [chunks[k:k + batch_size] for k in range(0, len(chunks), batch_size)]

    def run(group):
        batch = pad_batch([c for _, c in group])
        nll = batch_nll(params, config, batch.tokens, batch.features)
        return [nll[j, :len(c.tokens) - 1] for j, (_, c) in enumerate(group)]

    pool = _Pool(getattr(model, "threads", 1) or 1)
    try:
        results = pool.map(run, groups)
    finally:
        pool.close()
    per_seg = [[] for _ in check]
    targets = [[] for _ in check]
    for group, rows in zip(groups, results):
        for (i, c), row in zip(group, rows):
            per_seg[i].append(row)
            targets[i].extend(c.tokens[1:].tolist())
    out = []
    for s, parts, tgt in zip(check, per_seg, targets):
        nll = np.concatenate(parts) if parts else np.zeros(0)
        out.append(SegmentRecord(s.id, tuple(tgt), nll, math.fsum(nll)))
    return out


def perplexity(model, corpus, corpus_id: str = "", model_id: str = "",
               keep_records: bool = False) -> EvalReport:
    """``exp(sum NLL / predicted tokens)``; EOS is predicted, BOS is not."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot evaluate an empty corpus")
    records = segment_nlls(model, corpus)
    total = math.fsum(r.total for r in records)
    count = sum(len(r.nll) for r in records)
    return EvalReport(corpus_id, model_id, count, total, math.exp(total / count),
                      records if keep_records else None)


def blind_eval(model, corpus, corpus_id: str = "", model_id: str = "",
               keep_records: bool = False) -> EvalReport:
    """Perplexity with every raw visual feature replaced by zeros."""
    if model.config_.fusion is FusionStrategy.TEXT_ONLY:
        raise ConfigError("blinding is undefined for a text-only model")
    bias = model.params_["embed/visual_bias"]
    if np.any(bias):
        warnings.warn(
            f"visual projection bias is non-zero (max |b| = {np.abs(bias).max():.3g}); "
            "blinded inputs still carry this bias",
            stacklevel=2,
        )
    blinded = [s.blinded() for s in corpus]
    return perplexity(model, blinded, corpus_id, model_id, keep_records)


@dataclass(frozen=True)
class CompareRow:
    segment_id: str
    token_ids: tuple
    nll_a: np.ndarray
    nll_b: np.ndarray
    slot_positions: frozenset  # indices into token_ids

    @property
    def total_a(self) -> float:
        return math.fsum(self.nll_a)

    @property
    def total_b(self) -> float:
        return math.fsum(self.nll_b)

    @property
    def delta(self) -> np.ndarray:
        """Per-piece improvement of model b over model a (positive: b better)."""
        return self.nll_a - self.nll_b

    @property
    def b_wins(self) -> bool:
        return self.total_b < self.total_a


@dataclass
class CompareReport:
    rows: list
    vocab: object = None
    meta: dict = field(default_factory=dict)

    @property
    def win_fraction(self) -> float:
        """Share of segments where model b has the strictly lower total; ties count as losses."""
        return sum(r.b_wins for r in self.rows) / len(self.rows)

    def _gains(self, slot: bool) -> np.ndarray:
        vals = [r.delta[i] for r in self.rows for i in range(len(r.token_ids))
                if (i in r.slot_positions) == slot]
        return np.asarray(vals)

    @property
    def mean_slot_gain(self) -> float:
        g = self._gains(True)
        return float(g.mean()) if g.size else float("nan")

    @property
    def mean_other_gain(self) -> float:
        g = self._gains(False)
        return float(g.mean()) if g.size else float("nan")


def _same_vocab(a, b) -> bool:
    if a.config_.vocab_size != b.config_.vocab_size:
        return False
    va, vb = getattr(a, "vocab", None), getattr(b, "vocab", None)
    return va is None or vb is None or va.pieces == vb.pieces


def nll_compare(model_a, model_b, corpus, sample_n: int = 50, seed: int = 0,
                slot_labels: Mapping[str, set] | None = None) -> CompareReport:
    """Wordpiece-level NLL of two models on ``sample_n`` seeded-random segments.

    ``slot_labels`` maps a segment id to token indices (BOS = 0) of
    visually determined tokens; they are reported separately.
    """
    if not _same_vocab(model_a, model_b):
        raise ConfigError("models were trained with different vocabularies")
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot compare on an empty corpus")
    n = min(sample_n, len(corpus))
    picked = sorted(np.random.default_rng(seed).choice(len(corpus), size=n, replace=False).tolist())
    sample = [corpus[i] for i in picked]
    ra, rb = segment_nlls(model_a, sample), segment_nlls(model_b, sample)
    rows = []
    for x, y in zip(ra, rb):
        labels = (slot_labels or {}).get(x.segment_id, ())
        slots = frozenset(t - 1 for t in labels if 1 <= t <= len(x.token_ids))
        rows.append(CompareRow(x.segment_id, x.token_ids, x.nll, y.nll, slots))
    return CompareReport(rows, getattr(model_a, "vocab", None) or getattr(model_b, "vocab", None),
                         {"sample_n": n, "seed": seed})


def _piece(vocab, token_id: int) -> str:
    return vocab.id_to_piece(token_id) if vocab is not None else str(token_id)


def write_eval_report(report: EvalReport, out_dir, name: str = "eval", vocab=None) -> list:
    """Write ``<name>.tsv`` (summary), ``<name>_tokens.tsv`` and ``<name>.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{name}.tsv", out / f"{name}.txt"]
    with open(written[0], "w", encoding="utf-8") as fh:
        fh.write("corpus_id\tmodel_id\ttoken_count\ttotal_nll_nats\tmean_nll_nats\tmean_nll_bits\tperplexity\n")
        fh.write(f"{report.corpus_id}\t{report.model_id}\t{report.token_count}\t{report.total_nll!r}\t"
                 f"{report.mean_nll!r}\t{report.mean_nll * LOG2E!r}\t{report.perplexity!r}\n")
    lines = [
        f"corpus      {report.corpus_id}",
        f"model       {report.model_id}",
        f"tokens      {report.token_count}",
        f"mean NLL    {report.mean_nll:.6f} nats  ({report.mean_nll * LOG2E:.6f} bits)",
        f"perplexity  {report.perplexity:.6f}",
    ]
    if report.records is not None:
        path = out / f"{name}_tokens.tsv"
        written.append(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("segment_id\tposition\tpiece\tnll_nats\n")
            for r in report.records:
                for pos, (tid, v) in enumerate(zip(r.token_ids, r.nll), start=1):
                    fh.write(f"{r.segment_id}\t{pos}\t{_piece(vocab, tid)}\t{float(v)!r}\n")
    written[1].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written


def format_compare_table(report: CompareReport, label_a: str = "A", label_b: str = "B",
                         max_rows: int | None = None) -> str:
    """Aligned text table: one block per segment, per-piece NLL in nats."""
    blocks = []
    for row in report.rows[:max_rows]:
        pieces = [_piece(report.vocab, t) + ("*" if i in row.slot_positions else "")
                  for i, t in enumerate(row.token_ids)]
        width = [max(len(p), 6) for p in pieces]
        head = max(len(label_a), len(label_b), len(row.segment_id))
        fmt = lambda vals: "  ".join(f"{v:>{w}.2f}" for v, w in zip(vals, width))  # noqa: E731
        blocks.append("\n".join([
            f"{row.segment_id:<{head}}  " + "  ".join(f"{p:>{w}}" for p, w in zip(pieces, width)) + "  total",
            f"{label_a:<{head}}  " + fmt(row.nll_a) + f"  {row.total_a:.2f}",
            f"{label_b:<{head}}  " + fmt(row.nll_b) + f"  {row.total_b:.2f}" + ("  <" if row.b_wins else ""),
        ]))
    summary = (
        f"NLL in nats; * marks visually determined slot tokens; '<' marks segments won by {label_b}\n"
        f"{label_b} wins {report.win_fraction:.1%} of {len(report.rows)} segments; "
        f"mean gain on slot pieces {report.mean_slot_gain:.4f}, on other pieces {report.mean_other_gain:.4f}"
    )
    return "\n\n".join(blocks + [summary]) + "\n"


def write_compare_report(report: CompareReport, out_dir, label_a="A", label_b="B") -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "compare.tsv", out / "compare_summary.tsv", out / "compare.txt"]
    with open(paths[0], "w", encoding="utf-8") as fh:
        fh.write("segment_id\tposition\tpiece\tis_slot\tnll_a_nats\tnll_b_nats\tgain_nats\n")
        for r in report.rows:
            for i, tid in enumerate(r.token_ids):
                fh.write(f"{r.segment_id}\t{i + 1}\t{_piece(report.vocab, tid)}\t{int(i in r.slot_positions)}\t"
                         f"{float(r.nll_a[i])!r}\t{float(r.nll_b[i])!r}\t{float(r.delta[i])!r}\n")
    with open(paths[1], "w", encoding="utf-8") as fh:
        fh.write("model_a\tmodel_b\tsegments\twin_fraction_b\tmean_slot_gain_nats\tmean_other_gain_nats\n")
        fh.write(f"{label_a}\t{label_b}\t{len(report.rows)}\t{report.win_fraction!r}\t"
                 f"{report.mean_slot_gain!r}\t{report.mean_other_gain!r}\n")
    paths[2].write_text(format_compare_table(report, label_a, label_b), encoding="utf-8")
    return paths
