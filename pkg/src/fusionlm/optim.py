"""Per-group gradient clipping, plain SGD and factored Adafactor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class ClipPolicy:
    max_norm_lstm: float = 1.0
    max_norm_other: float = 10000.0

    def __post_init__(self):
        if self.max_norm_lstm <= 0 or self.max_norm_other <= 0:
            raise ConfigError("clip norms must be positive")

    def cap(self, group: str) -> float:
        return self.max_norm_lstm if group == "lstm" else self.max_norm_other


def group_norms(grads: Mapping[str, np.ndarray], groups: Mapping[str, str]) -> dict:
    sq = {}
    for name, g in grads.items():
        sq[groups[name]] = sq.get(groups[name], 0.0) + float(np.vdot(g, g))
    return {k: float(np.sqrt(v)) for k, v in sq.items()}


def clip_by_group(grads: Mapping[str, np.ndarray], groups: Mapping[str, str],
                  policy: ClipPolicy = ClipPolicy()) -> dict:
    """Rescale each group whose joint L2 norm exceeds its cap.

    Groups under the cap are returned untouched (same arrays).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
    norms = group_norms(grads, groups)
    out = {}
    for name, g in grads.items():
        norm = norms[groups[name]]
        cap = policy.cap(groups[name])
        out[name] = g * (cap / norm) if norm > cap else g
    return out


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict:
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return {k: p - lr * grads[k] for k, p in params.items()}


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


@dataclass
class AdafactorState:
    """Second-moment accumulators: ``row``/``col`` for matrices, ``full`` otherwise."""

    step: int = 0
    row: dict = field(default_factory=dict)
    col: dict = field(default_factory=dict)
    full: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        out = {}
        for kind in ("row", "col", "full"):
            for name, arr in getattr(self, kind).items():
                out[f"{kind}/{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "AdafactorState":
        st = cls(step=step)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            getattr(st, kind)[name] = np.asarray(arr, dtype=np.float64)
        return st


@dataclass(frozen=True)
class Adafactor:
    """Adafactor without momentum, using the relative step size schedule.

    ``step_size = max(eps2, RMS(p)) * min(1e-2, 1/sqrt(t))`` and the update
    is clipped to RMS ``clip_threshold``.
    """

    decay_exponent: float = 0.8
    clip_threshold: float = 1.0
    eps1: float = 1e-30
    eps2: float = 1e-3
    max_relative_step: float = 1e-2

    def init_state(self) -> AdafactorState:
        return AdafactorState()

    def second_moment(self, name: str, g: np.ndarray, state: AdafactorState, beta2: float) -> np.ndarray:
        g2 = np.square(g) + self.eps1
        if g.ndim == 2:
            r = state.row.get(name)
            c = state.col.get(name)
            if r is None:
                r = np.zeros(g.shape[0])
                c = np.zeros(g.shape[1])
            r = beta2 * r + (1.0 - beta2) * g2.sum(axis=1)
            c = beta2 * c + (1.0 - beta2) * g2.sum(axis=0)
            state.row[name], state.col[name] = r, c
            return np.outer(r, c) / r.sum()
        v = state.full.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = beta2 * v + (1.0 - beta2) * g2
        state.full[name] = v
        return v

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: AdafactorState) -> dict:
        """Return updated params; ``state`` is advanced in place."""
        state.step += 1
        t = state.step
        beta2 = 1.0 - t ** (-self.decay_exponent)
        rho = min(self.max_relative_step, 1.0 / np.sqrt(t))
        out = {}
        for name, p in params.items():
            g = grads[name]
            v_hat = self.second_moment(name, g, state, beta2)
            if not np.isfinite(v_hat).all():
                raise NumericalError(f"non-finite second moment for {name}")
            u = g / np.sqrt(v_hat)
            u = u / max(1.0, _rms(u) / self.clip_threshold)
            alpha = max(self.eps2, _rms(p)) * rho
            out[name] = p - alpha * u
        return out


def adafactor_step(params, grads, state: AdafactorState, hyper: Adafactor = Adafactor()):
    return hyper.step(params, grads, state), state
