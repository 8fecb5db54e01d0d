"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tensor` created through :meth:`Tape.variable` (or produced by an
op that consumed one) records every differentiable op on its tape.  Calling
:meth:`Tape.backward` then walks the record in exact reverse order.  Tensors
built without a tape are plain values: ops on them record nothing, which is
how evaluation and finite-difference passes stay cheap.

Ops never mutate their operands.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "activation",
    "concat",
    "stack",
    "getitem",
    "reshape",
    "sum",
    "take_rows",
    "softmax_cross_entropy",
    "log_softmax",
    "grad_check",
]


class Tensor:
    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        data = np.asarray(data)
        # extended precision is kept only for finite-difference oracles
        if data.dtype != np.longdouble:
            data = data.astype(np.float64, copy=False)
        self.data = data
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Scatter:
    """Sparse gradient contribution: ``grad[index] += value``."""

    __slots__ = ("index", "value", "unbuffered")

    def __init__(self, index, value, unbuffered=False):
        self.index = index
        self.value = value
        # np.add.at semantics for repeated integer indices
        self.unbuffered = unbuffered


class Gradients:
    """Result of a backward pass; unreached tensors get exact zeros."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads


class Tape:
    """Ordered record of executed ops.  One tape per thread."""

    def __init__(self):
        self._nodes: list = []

    def __len__(self):
        return len(self._nodes)

    def variable(self, data) -> Tensor:
        return Tensor(data, tape=self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self._nodes.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> Gradients:
        if loss.tape is not self:
            raise ValueError("loss was not computed on this tape")
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(
                    f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}"
                )
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        owned = set()
        for out, inputs, fn in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            contributions = fn(g)
            for inp, c in zip(inputs, contributions):
                if c is None or inp.tape is None:
                    continue
                key = id(inp)
                if isinstance(c, _Scatter):
                    buf = grads.get(key)
                    if buf is None:
                        buf = np.zeros_like(inp.data)
                        grads[key] = buf
                        owned.add(key)
                    elif key not in owned:
                        buf = buf.copy()
                        grads[key] = buf
                        owned.add(key)
                    if c.unbuffered:
                        np.add.at(buf, c.index, c.value)
                    else:
                        buf[c.index] += c.value
                else:
                    prev = grads.get(key)
                    if prev is None:
                        grads[key] = c
                    else:
                        grads[key] = prev + c
                        owned.add(key)
        return Gradients(grads)


def _result(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., k)`` and a matrix ``b`` of shape ``(k, n)``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        da = g @ bd.T
        if ad.ndim == 1:
            db = np.outer(ad, g)
        else:
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return da, db

    return _result(ad @ bd, (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    nd = parts[0].ndim
    ax = axis % nd
    lead = [p.shape[:ax] + p.shape[ax + 1:] for p in parts]
    if any(p.ndim != nd for p in parts) or any(s != lead[0] for s in lead):
        raise DimensionError(
            "concat: parts disagree outside the concatenation axis: "
            + ", ".join(str(p.shape) for p in parts)
        )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("stack of zero tensors")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: unequal shapes {sorted(shapes)}")
    nd = parts[0].ndim + 1
    ax = axis % nd

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts], axis=ax), parts, backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient is scattered back in place."""
    return _result(x.data[index], (x,), lambda g: (_Scatter(index, g),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    return _result(
        table.data[ids], (table,), lambda g: (_Scatter(ids, g, unbuffered=True),)
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax on raw arrays, max-subtracted."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over rows, in nats.

    ``logits`` is ``(V,)`` or ``(M, V)``; ``weights`` (default all ones) lets
    padded rows contribute exactly nothing.
    """
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    m, v = z.shape
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (m,):
        raise DimensionError(f"targets shape {t.shape} does not match {m} logit rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax(z)
    rows = np.arange(m)
    nll = -logp[rows, t]
    loss = np.dot(w, nll)

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (w * g)[:, None]
        return (d[0] if squeeze else d,)

    return _result(np.asarray(loss), (logits,), backward)


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    coords_per_tensor: int | None = None,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of named tensors to a scalar tensor and must be
    deterministic.  With ``coords_per_tensor`` set, that many coordinates per
    tensor are sampled (seeded) instead of checking every entry.  Passing
    ``dtype=np.longdouble`` runs the finite-difference evaluations in
    extended precision, which keeps round-off below the error being
    measured for gradients much smaller than the function value.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    taped = {k: tape.variable(v) for k, v in base.items()}
    out = f(taped)
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("function value is not finite")
    grads = tape.backward(out)
    rng = np.random.default_rng(seed)
    wide = {k: v.astype(dtype) for k, v in base.items()}

    def value(name, flat_idx, delta):
        work = dict(wide)
        work[name] = wide[name].copy()
        work[name].flat[flat_idx] += delta
        y = f({k: Tensor(v) for k, v in work.items()}).data
        if not np.isfinite(y):
            raise NumericalError(f"non-finite value perturbing {name}[{flat_idx}]")
        return y

    worst = 0.0
    for name, arr in base.items():
        n = arr.size
        if coords_per_tensor is None or coords_per_tensor >= n:
            coords = range(n)
        else:
            coords = rng.choice(n, size=coords_per_tensor, replace=False)
        analytic = grads[taped[name]].reshape(-1)
        for i in coords:
            num = float((value(name, i, epsilon) - value(name, i, -epsilon)) / (2 * epsilon))
            ga = analytic[i]
            err = abs(ga - num) / max(abs(ga), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
