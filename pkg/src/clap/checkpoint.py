"""Checkpoint file format.

Layout::

    CLAPCKPT <version>\\n
    <manifest: one line of JSON>\\n
    <concatenated little-endian tensor blobs>

The manifest echoes the ModelConfig, the training state, and for every tensor
its name, group (param/buffer/velocity), dtype, shape, byte offset and size.
Offsets are relative to the first blob byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClapError, CorruptCheckpoint
from .model import Model, ModelConfig, build
from .tensor import DTYPES, dtype_name

MAGIC = b"CLAPCKPT"
FORMAT_VERSION = 1


@dataclass
class TrainState:
    model: Model
    velocity: dict = field(default_factory=dict)  # param name -> momentum buffer
    epoch: int = 0  # last completed epoch
    best_val_acc: float = -1.0
    best_epoch: int = 0

    def copy(self) -> "TrainState":
        m = build(self.model.config)
        for name, value, _ in self.model.named_tensors():
            m.get(name)[...] = value
        return TrainState(m, {k: v.copy() for k, v in self.velocity.items()},
                          self.epoch, self.best_val_acc, self.best_epoch)


def _entries(state: TrainState):
    for name, value, trainable in state.model.named_tensors():
        yield name, "param" if trainable else "buffer", value
    for name, value in state.velocity.items():
        yield name, "velocity", value


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, group, value in _entries(state):
        dname = dtype_name(value.dtype)
        blob = np.ascontiguousarray(value, dtype=DTYPES[dname]).tobytes()
        tensors.append({"name": name, "group": group, "dtype": dname, "shape": list(value.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.model.config.to_dict(),
        "state": {"epoch": state.epoch, "best_val_acc": state.best_val_acc,
                  "best_epoch": state.best_epoch},
        "payload_bytes": offset,
        "tensors": tensors,
    }
    header = MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n"
    line = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return header + line + b"".join(blobs)


def save_checkpoint(state: TrainState, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)
    return path


def parse_checkpoint(buf: bytes) -> TrainState:
    try:
        first = buf.index(b"\n")
        second = buf.index(b"\n", first + 1)
    except ValueError:
        raise CorruptCheckpoint("missing header lines") from None
    magic, _, version = buf[:first].partition(b" ")
    if magic != MAGIC:
        raise CorruptCheckpoint("not a clap checkpoint")
    if version != str(FORMAT_VERSION).encode():
        raise CorruptCheckpoint(f"unsupported format version {version!r}")
    try:
        manifest = json.loads(buf[first + 1:second])
        config = ModelConfig.from_dict(manifest["config"])
        info = manifest["state"]
        entries = manifest["tensors"]
        payload_bytes = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError, ClapError) as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    payload = buf[second + 1:]
    if len(payload) != payload_bytes:
        raise CorruptCheckpoint(f"payload is {len(payload)} bytes, manifest says {payload_bytes}")

    model = build(config)
    expected = {name: (value, group) for name, group, value in _entries(TrainState(model))}
    velocity, seen = {}, set()
    params = dict(model.named_parameters())
    for e in entries:
        try:
            name, group, dtype = e["name"], e["group"], DTYPES[e["dtype"]]
            shape, offset, nbytes = tuple(e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"bad tensor entry {e!r}") from exc
        if nbytes != math.prod(shape) * dtype.itemsize or offset < 0 or offset + nbytes > len(payload):
            raise CorruptCheckpoint(f"{name}: offset/size out of range")
        data = np.frombuffer(payload, dtype=dtype, count=math.prod(shape), offset=offset).reshape(shape)
        if group == "velocity":
            if name not in params or params[name].shape != shape:
                raise CorruptCheckpoint(f"velocity for unknown or misshapen parameter {name}")
            velocity[name] = data.astype(params[name].dtype)
            continue
        if name not in expected or expected[name][1] != group:
            raise CorruptCheckpoint(f"unexpected tensor {name} ({group})")
        target = expected[name][0]
        if target.shape != shape:
            raise CorruptCheckpoint(f"{name}: shape {shape} != model {target.shape}")
        target[...] = data
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CorruptCheckpoint(f"missing tensors: {sorted(missing)}")
    return TrainState(model, velocity, int(info["epoch"]), float(info["best_val_acc"]),
                      int(info["best_epoch"]))


def load_checkpoint(path) -> TrainState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    return parse_checkpoint(buf)
