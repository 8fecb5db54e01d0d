"""Visually conditioned two-layer LSTMP language model.

Step ``t`` reads token ``t`` and predicts token ``t + 1``; the visual
feature paired with that step is the one aligned to the *predicted*
position ``t + 1``.  Where it enters the network depends on the fusion
strategy:

==============  ===========================================
text-only       nowhere
early           ``[w ; v]`` into LSTM layer 1
linear          ``w K_w + v K_v`` into LSTM layer 1
weighted        ``[w ; sigmoid(w . v) v]`` into LSTM layer 1
middle          ``[h1 ; v]`` into LSTM layer 2
late            ``[h2 ; v]`` into the output layer
==============  ===========================================
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .alignment import Segment
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tape, Tensor


class FusionStrategy(enum.Enum):
    TEXT_ONLY = "text-only"
    EARLY_CONCAT = "early"
    MIDDLE_CONCAT = "middle"
    LATE_CONCAT = "late"
    LINEAR_COMB = "linear"
    WEIGHTED_CONCAT = "weighted"

    @property
    def has_visual(self) -> bool:
        return self is not FusionStrategy.TEXT_ONLY

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            try:
                return cls[str(value).upper()]
            except KeyError:
                names = ", ".join(s.value for s in cls)
                raise ConfigError(f"unknown fusion {value!r}; expected one of: {names}") from None


EARLY_LOCATION = (
    FusionStrategy.EARLY_CONCAT,
    FusionStrategy.LINEAR_COMB,
    FusionStrategy.WEIGHTED_CONCAT,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    word_emb_dim: int = 64
    visual_raw_dim: int = 16
    visual_emb_dim: int = 64
    lstm_layers: int = 2
    lstm_units: int = 256
    projection_dim: int = 64
    unroll_max: int = 70
    fusion: FusionStrategy = FusionStrategy.MIDDLE_CONCAT
    linear_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "fusion", FusionStrategy.parse(self.fusion))
        dims = ("vocab_size", "word_emb_dim", "visual_raw_dim", "visual_emb_dim",
                "lstm_units", "projection_dim")
        for name in dims:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lstm_layers != 2:
            raise ConfigError(f"only 2 LSTM layers are supported, got {self.lstm_layers}")
        if self.unroll_max < 2:
            raise ConfigError(f"unroll_max must be >= 2, got {self.unroll_max}")
        if self.linear_dim is not None and self.linear_dim < 1:
            raise ConfigError(f"linear_dim must be >= 1, got {self.linear_dim}")
        if self.fusion is FusionStrategy.WEIGHTED_CONCAT and self.word_emb_dim != self.visual_emb_dim:
            raise ConfigError(
                "weighted fusion takes a dot product of word and visual embeddings: "
                f"word_emb_dim={self.word_emb_dim} != visual_emb_dim={self.visual_emb_dim}"
            )

    @classmethod
    def desk(cls, vocab_size: int = 2000, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def full(cls, vocab_size: int = 66000, **overrides) -> "ModelConfig":
        kw = dict(word_emb_dim=512, visual_raw_dim=1500, visual_emb_dim=512,
                  lstm_units=2048, projection_dim=512, unroll_max=70)
        kw.update(overrides)
        return cls(vocab_size=vocab_size, **kw)

    @property
    def fused_dim(self) -> int:
        return self.linear_dim or self.word_emb_dim

    def layer_input_dims(self) -> tuple:
        f = self.fusion
        first = self.word_emb_dim
        if f in (FusionStrategy.EARLY_CONCAT, FusionStrategy.WEIGHTED_CONCAT):
            first += self.visual_emb_dim
        elif f is FusionStrategy.LINEAR_COMB:
            first = self.fused_dim
        second = self.projection_dim
        if f is FusionStrategy.MIDDLE_CONCAT:
            second += self.visual_emb_dim
        return first, second

    @property
    def output_input_dim(self) -> int:
        extra = self.visual_emb_dim if self.fusion is FusionStrategy.LATE_CONCAT else 0
        return self.projection_dim + extra

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


class ParamSet:
    """Named float64 tensors, each tagged with a clipping group."""

    GROUPS = ("lstm", "other")

    def __init__(self, tensors: Mapping[str, np.ndarray], groups: Mapping[str, str]):
        if set(tensors) != set(groups):
            raise ValueError("every tensor needs exactly one group")
        bad = {g for g in groups.values() if g not in self.GROUPS}
        if bad:
            raise ValueError(f"unknown clipping groups {sorted(bad)}")
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.groups = dict(groups)

    def __getitem__(self, name) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, group: str | None = None) -> list:
        return [k for k in self.tensors if group is None or self.groups[k] == group]

    def count(self) -> int:
        return int(np.sum([v.size for v in self.tensors.values()]))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.groups)

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "ParamSet":
        merged = dict(self.tensors)
        merged.update(tensors)
        return ParamSet(merged, self.groups)

    def equal(self, other: "ParamSet") -> bool:
        return (self.groups == other.groups
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


def param_shapes(config: ModelConfig) -> dict:
    """``name -> (shape, group)`` in canonical (initialisation) order."""
    c = config
    H, P = c.lstm_units, c.projection_dim
    shapes = {"embed/word": ((c.vocab_size, c.word_emb_dim), "other")}
    if c.fusion.has_visual:
        shapes["embed/visual"] = ((c.visual_raw_dim, c.visual_emb_dim), "other")
        shapes["embed/visual_bias"] = ((c.visual_emb_dim,), "other")
    if c.fusion is FusionStrategy.LINEAR_COMB:
        shapes["fuse/k_word"] = ((c.word_emb_dim, c.fused_dim), "other")
        shapes["fuse/k_visual"] = ((c.visual_emb_dim, c.fused_dim), "other")
    for layer, din in enumerate(c.layer_input_dims(), start=1):
        shapes[f"lstm{layer}/w_input"] = ((din, 4 * H), "lstm")
        shapes[f"lstm{layer}/w_recurrent"] = ((P, 4 * H), "lstm")
        shapes[f"lstm{layer}/bias"] = ((4 * H,), "lstm")
        shapes[f"lstm{layer}/projection"] = ((H, P), "lstm")
    shapes["output/weight"] = ((c.output_input_dim, c.vocab_size), "other")
    shapes["output/bias"] = ((c.vocab_size,), "other")
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ParamSet:
    """Glorot-uniform matrices, zero biases, forget-gate bias of +1."""
    rng = np.random.default_rng(seed)
    H = config.lstm_units
    tensors, groups = {}, {}
    for name, (shape, group) in param_shapes(config).items():
        if len(shape) == 2:
            r = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-r, r, size=shape)
        else:
            value = np.zeros(shape)
        if name.endswith("/bias") and name.startswith("lstm"):
            value[H:2 * H] = 1.0
        tensors[name] = value
        groups[name] = group
    return ParamSet(tensors, groups)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def embed_visual(params, v_raw) -> Tensor:
    """Affine projection ``v_raw @ V + b`` of raw frame features (any batch shape)."""
    w = _as_tensor(params["embed/visual"])
    v = _as_tensor(v_raw)
    if v.shape[-1] != w.shape[0]:
        raise DimensionError(f"visual feature width {v.shape[-1]} != expected {w.shape[0]}")
    return v @ w + _as_tensor(params["embed/visual_bias"])


def fuse(strategy: FusionStrategy, w, v, params=None) -> Tensor:
    """Build the layer-1 input from word and visual embeddings.

    Middle, late and text-only models feed the word embedding through
    unchanged here; their visual input joins deeper in the network.
    """
    strategy = FusionStrategy.parse(strategy)
    w, v = _as_tensor(w), _as_tensor(v)
    if strategy is FusionStrategy.EARLY_CONCAT:
        return T.concat([w, v])
    if strategy is FusionStrategy.LINEAR_COMB:
        return w @ _as_tensor(params["fuse/k_word"]) + v @ _as_tensor(params["fuse/k_visual"])
    if strategy is FusionStrategy.WEIGHTED_CONCAT:
        if w.shape[-1] != v.shape[-1]:
            raise ConfigError(f"weighted fusion needs equal widths, got {w.shape[-1]} and {v.shape[-1]}")
        lam = T.sigmoid(T.sum(w * v, axis=-1, keepdims=True))
        return T.concat([w, lam * v])
    return w


def lstmp_step(layer_params, x, state):
    """One LSTMP step.  ``state`` is ``(c, h)``; returns ``((c', h'), h')``.

    Gates are laid out ``[input | forget | output | candidate]`` along the
    last axis of the pre-activation.
    """
    w_in = _as_tensor(layer_params["w_input"])
    xw = _as_tensor(x) @ w_in + _as_tensor(layer_params["bias"])
    c, h = state
    return _cell(xw, _as_tensor(c), _as_tensor(h),
                 _as_tensor(layer_params["w_recurrent"]), _as_tensor(layer_params["projection"]))


def _cell(xw, c, h, w_rec, proj):
    H = proj.shape[0]
    z = xw + h @ w_rec
    i = T.sigmoid(z[..., :H])
    f = T.sigmoid(z[..., H:2 * H])
    o = T.sigmoid(z[..., 2 * H:3 * H])
    g = T.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = (o * T.tanh(c_new)) @ proj
    return (c_new, h_new), h_new


def _layer(p, prefix: str, x_seq: Tensor) -> Tensor:
    w_rec = p[f"{prefix}/w_recurrent"]
    proj = p[f"{prefix}/projection"]
    batch, steps = x_seq.shape[0], x_seq.shape[1]
    xw = x_seq @ p[f"{prefix}/w_input"] + p[f"{prefix}/bias"]
    c = Tensor(np.zeros((batch, proj.shape[0])))
    h = Tensor(np.zeros((batch, proj.shape[1])))
    outs = []
    for t in range(steps):
        (c, h), out = _cell(xw[:, t], c, h, w_rec, proj)
        outs.append(out)
    return T.stack(outs, axis=1)


def forward_batch(p: Mapping[str, Tensor], config: ModelConfig, tokens, features) -> Tensor:
    """Logits of shape ``(B, T-1, V)`` for padded ``tokens`` ``(B, T)``.

    ``features`` is ``(B, T, D)`` and is ignored by text-only models.
    ``p`` maps parameter names to tensors (taped or not).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise DimensionError(f"tokens must be (B, T) with T >= 2, got {tokens.shape}")
    fusion = config.fusion
    w = T.take_rows(p["embed/word"], tokens[:, :-1])
    v = None
    if fusion.has_visual:
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[:2] != tokens.shape or feats.shape[2] != config.visual_raw_dim:
            raise DimensionError(
                f"features shape {feats.shape} does not match tokens {tokens.shape} "
                f"with visual_raw_dim={config.visual_raw_dim}"
            )
        v = embed_visual(p, Tensor(feats[:, 1:]))
    x1 = fuse(fusion, w, v, p) if fusion in EARLY_LOCATION else w
    h1 = _layer(p, "lstm1", x1)
    x2 = T.concat([h1, v]) if fusion is FusionStrategy.MIDDLE_CONCAT else h1
    h2 = _layer(p, "lstm2", x2)
    top = T.concat([h2, v]) if fusion is FusionStrategy.LATE_CONCAT else h2
    return top @ p["output/weight"] + p["output/bias"]


def _plain(params: ParamSet) -> dict:
    return {k: Tensor(v) for k, v in params.items()}


def _check_segment(config: ModelConfig, segment: Segment) -> None:
    n = len(segment.tokens)
    if n < 2:
        raise DataError(f"segment {segment.id!r}: need at least 2 tokens, got {n}")
    if n > config.unroll_max:
        raise DataError(
            f"segment {segment.id!r}: length {n} exceeds unroll_max={config.unroll_max}; "
            "split it into chunks first"
        )


def forward_sequence(params: ParamSet, config: ModelConfig, segment: Segment) -> np.ndarray:
    """Logits ``(N-1, V)``; row ``t`` predicts token ``t + 1``."""
    _check_segment(config, segment)
    logits = forward_batch(_plain(params), config, segment.tokens[None, :], segment.features[None])
    return logits.data[0]


def sequence_nll(params: ParamSet, config: ModelConfig, segment: Segment):
    """``(total NLL, per-token NLL array)`` in nats; BOS is never predicted."""
    logits = forward_sequence(params, config, segment)
    logp = T.log_softmax(logits)
    per_token = -logp[np.arange(len(logits)), segment.tokens[1:]]
    return float(per_token.sum()), per_token


def batch_nll(params: ParamSet, config: ModelConfig, tokens, features) -> np.ndarray:
    """Per-position NLL ``(B, T-1)`` without recording a tape."""
    logits = forward_batch(_plain(params), config, tokens, features).data
    logp = T.log_softmax(logits)
    targets = np.asarray(tokens)[:, 1:]
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def batch_loss_and_grads(params: ParamSet, config: ModelConfig, tokens, features, mask):
    """Masked NLL sum over a batch and its gradient for every parameter."""
    tape = Tape()
    p = {k: tape.variable(v) for k, v in params.items()}
    logits = forward_batch(p, config, tokens, features)
    V = config.vocab_size
    targets = np.asarray(tokens)[:, 1:].reshape(-1)
    loss = T.softmax_cross_entropy(T.reshape(logits, (-1, V)), targets,
                                   np.asarray(mask, dtype=np.float64).reshape(-1))
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[t] for k, t in p.items()}
