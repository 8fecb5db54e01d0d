"""scikit-learn style wrapper around the fusion language model."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import FusionStrategy, ModelConfig, ParamSet, forward_sequence, init_params
from .trainer import TrainConfig, corpus_nll, split_dev, train
from .validation import check_segments, feature_dim


class FusionLanguageModel(BaseEstimator):
    """Recurrent LM over wordpieces, optionally conditioned on per-token frames.

    ``fit`` takes a list of :class:`~fusionlm.alignment.Segment`.  ``score``
    returns the mean per-token log-likelihood (higher is better), so the
    estimator plugs into model-selection utilities that maximise scores.

    Parameters left as ``None`` (``vocab_size``, ``visual_raw_dim``) are
    inferred from the vocabulary or the training data.
    """

    def __init__(self, fusion="middle", vocab_size=None, word_emb_dim=64, visual_raw_dim=None,
                 visual_emb_dim=64, lstm_units=256, projection_dim=64, linear_dim=None,
                 unroll_max=70, optimizer="adafactor", learning_rate=0.1, batch_size=32,
                 dev_fraction=0.01, patience=2, max_epochs=10, clip_lstm=1.0,
                 clip_other=10000.0, seed=0, threads=1, shard_size=16, vocab=None):
        self.fusion = fusion
        self.vocab_size = vocab_size
        self.word_emb_dim = word_emb_dim
        self.visual_raw_dim = visual_raw_dim
        self.visual_emb_dim = visual_emb_dim
        self.lstm_units = lstm_units
        self.projection_dim = projection_dim
        self.linear_dim = linear_dim
        self.unroll_max = unroll_max
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.dev_fraction = dev_fraction
        self.patience = patience
        self.max_epochs = max_epochs
        self.clip_lstm = clip_lstm
        self.clip_other = clip_other
        self.seed = seed
        self.threads = threads
        self.shard_size = shard_size
        self.vocab = vocab

    def _model_config(self, X) -> ModelConfig:
        vocab_size = self.vocab_size
        if vocab_size is None:
            vocab_size = len(self.vocab) if self.vocab is not None else int(max(s.tokens.max() for s in X)) + 1
        raw = self.visual_raw_dim if self.visual_raw_dim is not None else feature_dim(X)
        return ModelConfig(
            vocab_size=vocab_size, word_emb_dim=self.word_emb_dim, visual_raw_dim=raw,
            visual_emb_dim=self.visual_emb_dim, lstm_units=self.lstm_units,
            projection_dim=self.projection_dim, unroll_max=self.unroll_max,
            fusion=FusionStrategy.parse(self.fusion), linear_dim=self.linear_dim,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, unroll_max=self.unroll_max, optimizer=self.optimizer,
            learning_rate=self.learning_rate, dev_fraction=self.dev_fraction,
            patience=self.patience, max_epochs=self.max_epochs, seed=self.seed,
            clip_lstm=self.clip_lstm, clip_other=self.clip_other, threads=self.threads,
            shard_size=self.shard_size,
        )

    def fit(self, X, y=None, dev_set=None, on_epoch=None):
        X = check_segments(X)
        config = self._model_config(X)
        X = check_segments(X, dim=config.visual_raw_dim, vocab_size=config.vocab_size)
        tc = self._train_config()
        if dev_set is None:
            X, dev_set = split_dev(X, tc.dev_fraction, tc.seed)
        else:
            dev_set = check_segments(dev_set, dim=config.visual_raw_dim, vocab_size=config.vocab_size)
        result = train(init_params(config, self.seed), config, X, dev_set, tc, on_epoch=on_epoch)
        self.config_ = config
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.optimizer_state_ = result.optimizer_state
        return self

    @classmethod
    def from_params(cls, config: ModelConfig, params: ParamSet, vocab=None, **kwargs):
        """Wrap existing parameters as a fitted estimator."""
        est = cls(fusion=config.fusion.value, vocab_size=config.vocab_size,
                  word_emb_dim=config.word_emb_dim, visual_raw_dim=config.visual_raw_dim,
                  visual_emb_dim=config.visual_emb_dim, lstm_units=config.lstm_units,
                  projection_dim=config.projection_dim, linear_dim=config.linear_dim,
                  unroll_max=config.unroll_max, vocab=vocab, **kwargs)
        est.config_ = config
        est.params_ = params
        est.history_ = []
        est.best_epoch_ = 0
        est.optimizer_state_ = None
        return est

    def nll(self, X) -> tuple:
        """``(total NLL in nats, predicted token count)``."""
        check_is_fitted(self, "params_")
        X = check_segments(X, dim=self.config_.visual_raw_dim, vocab_size=self.config_.vocab_size)
        return corpus_nll(self.params_, self.config_, X, threads=self.threads)

    def perplexity(self, X) -> float:
        total, count = self.nll(X)
        return math.exp(total / count)

    def score(self, X, y=None) -> float:
        total, count = self.nll(X)
        return -total / count

    def predict_log_proba(self, segment) -> np.ndarray:
        """Log next-token distributions ``(N-1, V)`` for one segment."""
        check_is_fitted(self, "params_")
        (segment,) = check_segments([segment], dim=self.config_.visual_raw_dim)
        return T.log_softmax(forward_sequence(self.params_, self.config_, segment))

    def save(self, path, meta=None) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, Checkpoint(self.config_, self.params_, self.vocab,
                                         self.optimizer_state_, dict(meta or {})))

    @classmethod
    def load(cls, path, **kwargs) -> "FusionLanguageModel":
        ckpt = load_checkpoint(path)
        est = cls.from_params(ckpt.config, ckpt.params, ckpt.vocab, **kwargs)
        est.optimizer_state_ = ckpt.optimizer_state
        return est
