"""Image codecs and bilinear resampling on (C, H, W) float arrays."""

from __future__ import annotations

import numpy as np

from .errors import MalformedImage


def _ppm_fields(buf: bytes):
    """Parse a P6 header; returns (width, height, maxval, raster_offset)."""
    if not buf.startswith(b"P6"):
        raise MalformedImage("not a binary PPM (missing P6 magic)")
    pos, fields = 2, []
    while len(fields) < 3:
        if pos >= len(buf):
            raise MalformedImage("PPM header truncated")
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise MalformedImage("PPM header truncated")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(buf) and buf[end:end + 1].isdigit():
                end += 1
            fields.append(int(buf[pos:end]))
            pos = end
        else:
            raise MalformedImage(f"unexpected byte {ch!r} in PPM header")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedImage("PPM header truncated")
    return (*fields, pos + 1)


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary PPM (P6) into a float32 (3, H, W) array in [0, 1]."""
    width, height, maxval, start = _ppm_fields(buf)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise MalformedImage(f"PPM header has bad fields {(width, height, maxval)}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * 3 * dtype.itemsize
    raster = buf[start:start + nbytes]
    if len(raster) != nbytes:
        raise MalformedImage(f"PPM raster truncated: {len(raster)} of {nbytes} bytes")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3)
    return (pixels.astype(np.float32) / maxval).transpose(2, 0, 1).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode a (3, H, W) array in [0, 1] as 8-bit P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.transpose(1, 2, 0).tobytes()


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` (C, H, W) at fractional pixel coordinates.

    Coordinates outside the image are clamped to the border (edge replicate).
    Interpolation runs in the image's floating dtype.
    """
    c, h, w = image.shape
    dtype = image.dtype if image.dtype.kind == "f" else np.dtype(np.float64)
    ys, xs = np.broadcast_arrays(ys, xs)
    ys = np.clip(ys, 0, h - 1).astype(dtype, copy=False)
    xs = np.clip(xs, 0, w - 1).astype(dtype, copy=False)
    # coordinates are non-negative after clipping, so truncation is floor
    y0 = ys.astype(np.intp)
    x0 = xs.astype(np.intp)
    wy = ys - y0
    wx = xs - x0
    # one replicated row/column on the far edges keeps every +1 neighbour in range
    padded = np.pad(image.astype(dtype, copy=False), ((0, 0), (0, 1), (0, 1)), mode="edge")
    pw = w + 1
    i00 = y0 * pw
    i00 += x0
    i10 = i00 + pw
    out = np.empty((c,) + i00.shape, dtype=dtype)
    tmp = np.empty(i00.shape, dtype=dtype)
    bottom = np.empty(i00.shape, dtype=dtype)
    for ch, plane in enumerate(padded.reshape(c, -1)):
        right = plane[1:]
        top = out[ch]
        plane.take(i00, out=top)
        right.take(i00, out=tmp)
        tmp -= top
        tmp *= wx
        top += tmp
        plane.take(i10, out=bottom)
        right.take(i10, out=tmp)
        tmp -= bottom
        tmp *= wx
        bottom += tmp
        bottom -= top
        bottom *= wy
        top += bottom
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) or (H, W) with half-pixel-centre alignment."""
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        out = image.copy()
    else:
        ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out = sample_bilinear(image, yy, xx)
    return out[0] if squeeze else out
