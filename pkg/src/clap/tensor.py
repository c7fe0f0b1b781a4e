"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` values in (batch, channels, height, width)
row-major layout. This module adds the few shape operations the network needs
with strict shape checking, plus the raw interchange format::

    f32 3 224 224\\n<little-endian IEEE-754 payload>
"""

from __future__ import annotations

import math

import numpy as np

from .errors import MalformedImage, ShapeMismatch

Tensor = np.ndarray

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in DTYPES.items():
        if dt == dtype.newbyteorder("<"):
            return name
    raise ValueError(f"unsupported dtype {dtype}")


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise ShapeMismatch(f"extents must be positive, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ShapeMismatch(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape} "
            f"({math.prod(new_shape)} elements)"
        )
    return t.reshape(new_shape)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; ``a`` occupies the leading channels."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"non-channel axes differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(t: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if not 0 < at < t.shape[1]:
        raise ShapeMismatch(f"split point {at} outside (0, {t.shape[1]})")
    return t[:, :at], t[:, at:]


def channel_scale(t: Tensor, s: Tensor) -> Tensor:
    """``out[n, c, h, w] = t[n, c, h, w] * s[n, c]``.

    ``s`` may be (N, C) or (N, C, 1, 1).
    """
    n, c = t.shape[:2]
    if s.shape[:2] != (n, c) or any(e != 1 for e in s.shape[2:]):
        raise ShapeMismatch(f"scale {s.shape} does not match channels of {t.shape}")
    s = s.reshape((n, c) + (1,) * (t.ndim - 2))
    return t * s


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


def encode_raw(t: Tensor) -> bytes:
    name = dtype_name(t.dtype)
    header = " ".join([name, *(str(s) for s in t.shape)]) + "\n"
    payload = np.ascontiguousarray(t, dtype=DTYPES[name]).tobytes()
    return header.encode("ascii") + payload


def decode_raw(buf: bytes) -> Tensor:
    nl = buf.find(b"\n")
    if nl < 0:
        raise MalformedImage("raw tensor: missing header line")
    try:
        fields = buf[:nl].decode("ascii").split()
        dtype = DTYPES[fields[0]]
        shape = tuple(int(f) for f in fields[1:])
    except (UnicodeDecodeError, KeyError, ValueError, IndexError) as exc:
        raise MalformedImage(f"raw tensor: bad header {buf[:nl]!r}") from exc
    if not shape or any(s < 1 for s in shape):
        raise MalformedImage(f"raw tensor: bad shape {shape}")
    nbytes = math.prod(shape) * dtype.itemsize
    payload = buf[nl + 1:]
    if len(payload) != nbytes:
        raise MalformedImage(f"raw tensor: expected {nbytes} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
