"""Grounded synthetic corpora with closed-form oracle perplexities.

Each segment fills the single object slot of a template with an object
word; its frames are the one-hot code of that object (plus optional
Gaussian noise).  Object words never occur in templates, so a transcript
identifies its (template, object) pair and the entropy of a segment is
exactly ``ln T + ln O`` nats without frames and ``ln T`` with them.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import MISSING, ManifestRow, write_feature_file, write_manifest
from .errors import ConfigError

OBJECT_WORDS = (
    "apple", "bowl", "carrot", "dough", "egg", "flour", "garlic", "honey",
    "knife", "lemon", "mango", "noodle", "onion", "pan", "rice", "salt",
    "tomato", "butter", "cheese", "pepper", "spoon", "tray", "whisk", "yogurt",
)
TEMPLATE_WORDS = (
    "add", "the", "now", "take", "put", "slowly", "then", "we", "will", "cut",
    "into", "on", "mix", "a", "with", "some", "stir", "place", "here", "next",
    "just", "clean", "heat", "pour", "grab", "fold", "this", "over", "it", "you",
)


def object_words(n: int) -> tuple:
    if n <= len(OBJECT_WORDS):
        return OBJECT_WORDS[:n]
    return OBJECT_WORDS + tuple(f"item{i}" for i in range(len(OBJECT_WORDS), n))


@dataclass(frozen=True)
class GenSpec:
    num_objects: int = 8
    num_templates: int = 1
    noise_sigma: float = 0.0
    missing_feature_rate: float = 0.25
    frames_per_segment: int = 4
    segments: int = 1000
    feature_dim: int = 16
    template_len: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_objects < 1 or self.num_templates < 1 or self.segments < 1:
            raise ConfigError("num_objects, num_templates and segments must be >= 1")
        if self.feature_dim < self.num_objects:
            raise ConfigError(f"feature_dim {self.feature_dim} < num_objects {self.num_objects}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.missing_feature_rate <= 1.0:
            raise ConfigError("missing_feature_rate must lie in [0, 1]")
        if self.frames_per_segment < 1 or self.template_len < 1:
            raise ConfigError("frames_per_segment and template_len must be >= 1")
        fillers = len(TEMPLATE_WORDS) ** (self.template_len - 1) * self.template_len
        if self.num_templates > fillers:
            raise ConfigError(f"cannot build {self.num_templates} distinct templates of length {self.template_len}")

    @property
    def predicted_tokens(self) -> int:
        return self.template_len + 1  # words plus EOS

    def to_cfg(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_cfg(cls, text: str) -> "GenSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown GenSpec key {key!r}")
            kw[key] = float(value) if types[key] == "float" else int(value)
        return cls(**kw)


@dataclass(frozen=True)
class SyntheticSegment:
    segment_id: str
    transcript: str
    frames: np.ndarray | None  # (K, D) or None when withheld
    template: int
    object: int
    slot_token_index: int  # index into the BOS-prefixed token sequence


def make_templates(spec: GenSpec) -> list:
    """``(words, slot_position)`` pairs; slot is marked by ``None`` in ``words``."""
    rng = np.random.default_rng([spec.seed, 1])
    templates, seen = [], set()
    while len(templates) < spec.num_templates:
        slot = int(rng.integers(spec.template_len))
        fill = [TEMPLATE_WORDS[i] for i in rng.integers(len(TEMPLATE_WORDS), size=spec.template_len - 1)]
        words = fill[:slot] + [None] + fill[slot:]
        key = tuple(words)
        if key not in seen:
            seen.add(key)
            templates.append((words, slot))
    return templates


def generate(spec: GenSpec) -> list:
    """Sample ``spec.segments`` segments; segment ``i`` uses its own seeded stream."""
    templates = make_templates(spec)
    objects = object_words(spec.num_objects)
    width = len(str(spec.segments - 1))
    out = []
    for i in range(spec.segments):
        rng = np.random.default_rng([spec.seed, 2, i])
        t = int(rng.integers(spec.num_templates))
        o = int(rng.integers(spec.num_objects))
        missing = rng.random() < spec.missing_feature_rate
        words, slot = templates[t]
        transcript = " ".join(objects[o] if w is None else w for w in words)
        frames = None
        if not missing:
            frames = np.zeros((spec.frames_per_segment, spec.feature_dim))
            frames[:, o] = 1.0
            if spec.noise_sigma > 0:
                frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape)
        out.append(SyntheticSegment(f"seg{i:0{width}d}", transcript, frames, t, o, slot + 1))
    return out


def write_corpus(spec: GenSpec, segments, out_dir) -> dict:
    """Write manifest, feature files, slot labels and the generator spec.

    Returns the paths written, keyed by role.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in segments:
        rel = MISSING
        if s.frames is not None:
            rel = f"features/{s.segment_id}.txt"
            write_feature_file(out / rel, s.frames)
        rows.append(ManifestRow(s.segment_id, s.transcript, rel))
    write_manifest(out / "manifest.tsv", rows)
    with open(out / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write("segment_id\tslot_token_index\n")
        for s in segments:
            fh.write(f"{s.segment_id}\t{s.slot_token_index}\n")
    (out / "spec.cfg").write_text(spec.to_cfg(), encoding="utf-8")
    return {"manifest": out / "manifest.tsv", "labels": out / "labels.tsv", "spec": out / "spec.cfg"}


def read_labels(path) -> dict:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            if line.strip():
                sid, idx = line.rstrip("\n").split("\t")
                labels[sid] = {int(idx)}
    return labels


def oracle_ppl(spec: GenSpec, condition: str) -> float:
    """Perplexity of the Bayes-optimal predictor under the generator.

    Only defined for noiseless frames.  With frames visible the slot costs
    nothing; segments whose frames were withheld still pay ``ln O``.
    """
    if spec.noise_sigma > 0:
        raise ConfigError("closed-form oracle needs noise_sigma == 0 (noisy oracle is only a bound)")
    if condition == "text_only":
        slot_cost = math.log(spec.num_objects)
    elif condition == "multimodal":
        slot_cost = spec.missing_feature_rate * math.log(spec.num_objects)
    else:
        raise ConfigError(f"condition must be 'text_only' or 'multimodal', got {condition!r}")
    nats = math.log(spec.num_templates) + slot_cost
    return math.exp(nats / spec.predicted_tokens)
