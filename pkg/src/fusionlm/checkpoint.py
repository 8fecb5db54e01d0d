"""Self-describing checkpoint container.

Layout::

    b"FLMCKPT\\0"                      8-byte magic
    uint64 little-endian               header length in bytes
    header                             UTF-8 JSON (sorted keys)
    payload                            concatenated little-endian float64 tensors

The header echoes the model config, carries the vocabulary pieces, a
``format_version`` integer and one index entry per tensor
(``name``, ``group``, ``shape``, ``offset`` in bytes into the payload).
Optimizer accumulators are stored as extra tensors with group ``optimizer``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ParamSet
from .optim import AdafactorState
from .tokenizer import Vocab

MAGIC = b"FLMCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    vocab: Vocab | None = None
    optimizer_state: AdafactorState | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0

    def put(name, group, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "group": group, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes

    for name, arr in ckpt.params.items():
        put(name, ckpt.params.groups[name], arr)
    opt = None
    if ckpt.optimizer_state is not None:
        opt = {"kind": "adafactor", "step": ckpt.optimizer_state.step}
        for name, arr in ckpt.optimizer_state.arrays().items():
            put(f"opt/{name}", "optimizer", arr)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab.pieces) if ckpt.vocab is not None else None,
        "optimizer": opt,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    payload = memoryview(blob)[16 + hlen:]
    tensors, groups, opt_arrays = {}, {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        arr = arr.astype(np.float64)
        if e["group"] == "optimizer":
            opt_arrays[e["name"].removeprefix("opt/")] = arr
        else:
            tensors[e["name"]] = arr
            groups[e["name"]] = e["group"]
    state = None
    if header["optimizer"] is not None:
        state = AdafactorState.from_arrays(header["optimizer"]["step"], opt_arrays)
    vocab = Vocab(tuple(header["vocab"])) if header["vocab"] is not None else None
    return Checkpoint(
        ModelConfig.from_dict(header["config"]), ParamSet(tensors, groups), vocab, state, header["meta"]
    )
