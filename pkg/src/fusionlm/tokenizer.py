"""Wordpiece vocabulary: pair-merge training, greedy longest-match coding.

Every unit learned by training is stored twice, bare (word-initial) and
``##``-prefixed (continuation), so any word built from the training alphabet
has an encoding.  Characters never seen in training encode to ``<unk>``.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<S>", "</S>", "<unk>")
CONT = "##"


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class Vocab:
    pieces: tuple
    index: dict = field(init=False, repr=False, compare=False)
    max_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.pieces[:4]) != RESERVED:
            raise DataError(f"vocab must start with the reserved symbols {RESERVED}")
        index = {p: i for i, p in enumerate(self.pieces)}
        if len(index) != len(self.pieces):
            raise DataError("vocab contains duplicate pieces")
        object.__setattr__(self, "index", index)
        longest = max((len(p.removeprefix(CONT)) for p in self.pieces[4:]), default=1)
        object.__setattr__(self, "max_len", longest)

    def __len__(self):
        return len(self.pieces)

    def id_to_piece(self, i: int) -> str:
        if not 0 <= i < len(self.pieces):
            raise IndexError(f"token id {i} outside vocabulary of size {len(self.pieces)}")
        return self.pieces[i]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def _add_unit(pieces: list, seen: set, unit: str, budget: int) -> None:
    for p in (unit, CONT + unit):
        if len(pieces) >= budget:
            return
        if p not in seen:
            seen.add(p)
            pieces.append(p)


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Learn a vocabulary of ``min(target_size, attainable)`` pieces.

    Starts from every corpus character in both forms, then repeatedly merges
    the most frequent adjacent unit pair (ties: lexicographically smallest
    pair) until the budget is spent or every word is a single unit.
    """
    counts = collections.Counter()
    for line in corpus:
        counts.update(line.split())
    if not counts:
        raise DataError("cannot train a vocabulary on an empty corpus")
    alphabet = sorted({c for w in counts for c in w})
    base = len(RESERVED) + 2 * len(alphabet)
    if target_size < base:
        raise DataError(
            f"target_size {target_size} below alphabet floor {base} "
            f"({len(alphabet)} characters in two forms + {len(RESERVED)} reserved)"
        )
    pieces = list(RESERVED)
    seen = set(pieces)
    for c in alphabet:
        _add_unit(pieces, seen, c, target_size)

    words = [[list(w), n] for w, n in sorted(counts.items())]
    while len(pieces) < target_size:
        pairs = collections.Counter()
        for units, n in words:
            for a, b in zip(units, units[1:]):
                pairs[a, b] += n
        if not pairs:
            break
        (left, right), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = left + right
        for entry in words:
            units = entry[0]
            if len(units) < 2:
                continue
            out, i = [], 0
            while i < len(units):
                if i + 1 < len(units) and units[i] == left and units[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(units[i])
                    i += 1
            entry[0] = out
        _add_unit(pieces, seen, merged, target_size)
    return Vocab(tuple(pieces))


def _encode_word(vocab: Vocab, word: str, out: list) -> None:
    i = 0
    while i < len(word):
        prefix = "" if i == 0 else CONT
        for j in range(min(len(word), i + vocab.max_len), i, -1):
            pid = vocab.index.get(prefix + word[i:j])
            if pid is not None:
                out.append(pid)
                i = j
                break
        else:
            out.append(UNK)
            i += 1


def encode(vocab: Vocab, text: str, add_bos_eos: bool = True) -> list:
    ids = [BOS] if add_bos_eos else []
    for word in text.split():
        _encode_word(vocab, word, ids)
    if add_bos_eos:
        ids.append(EOS)
    return ids


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    words: list = []
    for i in ids:
        piece = vocab.id_to_piece(int(i))
        if i in (PAD, BOS, EOS):
            continue
        if i == UNK:
            piece = "�"
        if piece.startswith(CONT) and words:
            words[-1] += piece[len(CONT):]
        else:
            words.append(piece.removeprefix(CONT))
    return " ".join(words)
