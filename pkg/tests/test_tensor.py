import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clap.errors import MalformedImage, ShapeMismatch
from clap.tensor import (channel_scale, concat_channels, decode_raw, encode_raw, reshape,
                         split_channels)


def test_reshape_flatten_bottleneck():
    t = np.arange(16384, dtype=np.float32).reshape(1, 1024, 4, 4)
    flat = reshape(t, (1, 16384))
    assert flat.shape == (1, 16384)
    np.testing.assert_array_equal(flat.ravel(), t.ravel())
    np.testing.assert_array_equal(reshape(flat, (1, 1024, 4, 4)), t)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeMismatch):
        reshape(np.zeros((2, 3)), (4, 2))


def test_concat_gap_vectors():
    a, b = np.ones((1, 1024)), np.zeros((1, 1024))
    out = concat_channels(a, b)
    assert out.shape == (1, 2048)
    assert out[0, :1024].sum() == 1024 and out[0, 1024:].sum() == 0


def test_concat_small():
    out = concat_channels(np.array([[5.0, 7.0]]), np.array([[9.0]]))
    np.testing.assert_array_equal(out, [[5, 7, 9]])


def test_concat_batch_mismatch():
    with pytest.raises(ShapeMismatch):
        concat_channels(np.zeros((1, 3)), np.zeros((2, 3)))


def test_channel_scale():
    out = channel_scale(np.ones((1, 2, 2, 2)), np.array([[0.5, 2.0]]))
    assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == 2.0)


def test_channel_scale_identity_and_error(rng):
    t = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(channel_scale(t, np.ones((2, 3, 1, 1))), t)
    with pytest.raises(ShapeMismatch):
        channel_scale(np.zeros((1, 3, 4, 4)), np.zeros((1, 2)))


shapes = st.lists(st.integers(1, 5), min_size=2, max_size=4)


@given(arrays(np.float64, shapes, elements=st.floats(-1e6, 1e6)))
def test_reshape_roundtrip(t):
    flat = reshape(t, (t.size,))
    np.testing.assert_array_equal(reshape(flat, t.shape), t)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_concat_then_split_recovers(n, ca, cb, hw):
    rng = np.random.default_rng(n * 100 + ca * 10 + cb)
    a = rng.normal(size=(n, ca, hw, hw))
    b = rng.normal(size=(n, cb, hw, hw))
    left, right = split_channels(concat_channels(a, b), ca)
    np.testing.assert_array_equal(left, a)
    np.testing.assert_array_equal(right, b)


@settings(max_examples=30)
@given(arrays(np.float32, shapes, elements=st.floats(-10, 10, width=32)))
def test_raw_roundtrip(t):
    back = decode_raw(encode_raw(t))
    assert back.dtype == np.float32 and back.shape == t.shape
    assert back.tobytes() == t.astype("<f4").tobytes()


def test_raw_header_and_truncation():
    buf = encode_raw(np.zeros((3, 2, 2)))
    assert buf.startswith(b"f64 3 2 2\n")
    with pytest.raises(MalformedImage):
        decode_raw(buf[:-1])
    with pytest.raises(MalformedImage):
        decode_raw(b"f16 2\n\x00\x00\x00\x00")
