import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clap.data import (AugmentParams, Box, DatasetRecord, SplitSpec, allocate, apply_augment,
                       augment, augment_with_params, decode_image, encode_image, load_directory,
                       make_synthetic, read_manifest, split, write_directory)
from clap.errors import DegenerateInput, EmptyDataset, InsufficientData, MalformedImage
from clap.imaging import resize_bilinear, sample_bilinear


# ---------------------------------------------------------------- decoding

def test_ppm_red_pixels():
    buf = b"P6\n2 2\n255\n" + bytes([255, 0, 0] * 4)
    img = decode_image(buf, "ppm_p6")
    assert img.shape == (3, 2, 2)
    assert np.all(img[0] == 1.0) and np.all(img[1:] == 0.0)


def test_ppm_header_comments_and_16bit():
    buf = b"P6 # comment\n1 1\n65535\n" + bytes([0xFF, 0xFF, 0x80, 0x00, 0x00, 0x00])
    img = decode_image(buf, "ppm_p6")
    np.testing.assert_allclose(img.ravel(), [1.0, 0x8000 / 65535, 0.0])


@pytest.mark.parametrize("buf", [
    b"P6\n2 2\n255\n" + bytes(11),  # truncated payload
    b"P5\n1 1\n255\n\x00",
    b"P6\n2\n",
    b"P6\n0 2\n255\n",
    b"",
])
def test_ppm_malformed(buf):
    with pytest.raises(MalformedImage):
        decode_image(buf, "ppm_p6")


def test_ppm_roundtrip_at_8_bits(rng):
    img = np.round(rng.random((3, 5, 4)) * 255) / 255
    back = decode_image(encode_image(img, "ppm_p6"), "ppm_p6")
    np.testing.assert_allclose(back, img, atol=1e-7)


def test_raw_tensor_roundtrip(rng):
    img = rng.random((3, 6, 7)).astype(np.float32)
    back = decode_image(encode_image(img, "raw_tensor"), "raw_tensor")
    assert back.tobytes() == img.tobytes()


def test_raw_tensor_rejects_bad_images():
    with pytest.raises(MalformedImage):
        decode_image(encode_image(np.zeros((1, 2, 2), np.float32), "raw_tensor"), "raw_tensor")
    with pytest.raises(MalformedImage):
        decode_image(encode_image(np.full((3, 2, 2), 2.0, np.float32), "raw_tensor"), "raw_tensor")
    with pytest.raises(MalformedImage):
        decode_image(encode_image(np.zeros((3, 2, 2), np.float32), "raw_tensor")[:-2], "raw_tensor")


# ---------------------------------------------------------------- resampling

def test_sample_bilinear_midpoint_and_clamp():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    out = sample_bilinear(img, np.array([[0.5, -4.0]]), np.array([[0.5, 9.0]]))
    np.testing.assert_allclose(out[0], [[1.5, 1.0]])


def test_resize_identity_and_constant(rng):
    img = rng.random((3, 9, 7))
    np.testing.assert_allclose(resize_bilinear(img, 9, 7), img, atol=1e-12)
    np.testing.assert_allclose(resize_bilinear(np.full((5, 5), 0.25), 13, 3), 0.25)


# ---------------------------------------------------------------- augmentation

def test_augment_identity_parameters(rng):
    img = rng.random((3, 256, 256))
    out = apply_augment(img, AugmentParams(0.0, 1.0, 16, 16))
    np.testing.assert_array_equal(out, img[:, 16:240, 16:240])


def test_augment_shape_and_label(rng):
    rec = DatasetRecord(rng.random((3, 300, 200)).astype(np.float32), 7, "x")
    for _ in range(5):
        out = augment(rec, rng)
        assert out.image.shape == (3, 224, 224) and out.label == 7
        assert out.image.dtype == np.float32
        assert out.image.min() >= 0 and out.image.max() <= 1


def test_augment_rejects_tiny_images(rng):
    with pytest.raises(DegenerateInput):
        augment(DatasetRecord(np.zeros((3, 31, 64)), 0, "x"), rng)


def _symmetric_pattern(n=256):
    # invariant under 180 degree rotation and under the left-right mirror
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n] - c
    pat = 0.5 + 0.25 * np.cos(0.11 * np.abs(x)) * np.cos(0.07 * y) + 0.2 * np.sin(x * x / 900 + y * y / 1500)
    return np.stack([pat, pat ** 2, 1 - pat])


def test_symmetric_pattern_is_symmetric():
    pat = _symmetric_pattern()
    np.testing.assert_array_equal(pat, pat[:, ::-1, ::-1])
    np.testing.assert_array_equal(pat, pat[:, :, ::-1])


@pytest.mark.parametrize("theta", [7.0, 18.5, 25.0])
@pytest.mark.parametrize("scale", [0.8, 1.0, 1.2])
def test_rotation_symmetry(theta, scale):
    pat = _symmetric_pattern()
    plus = apply_augment(pat, AugmentParams(theta, scale, 16, 16))
    minus = apply_augment(pat, AugmentParams(-theta, scale, 16, 16))
    # -theta is the mirror image of +theta on a mirror-symmetric input
    assert np.max(np.abs(plus - minus[:, :, ::-1])) < 1e-6
    rot180 = apply_augment(pat, AugmentParams(theta + 180.0, scale, 16, 16))
    assert np.max(np.abs(plus - rot180)) < 1e-6


def test_augment_draws_within_ranges():
    rec = DatasetRecord(np.zeros((3, 64, 64), np.float32), 0, "x")
    draws = [augment_with_params(rec, np.random.default_rng(i), 64, 56)[1] for i in range(300)]
    angles = [d.angle for d in draws]
    scales = [d.scale for d in draws]
    assert -25 <= min(angles) < -20 and 20 < max(angles) <= 25
    assert 0.75 <= min(scales) < 0.8 and 1.2 < max(scales) <= 1.25
    assert {d.top for d in draws} == set(range(9))


# ---------------------------------------------------------------- splitting

def test_split_sizes_single_class():
    recs = [DatasetRecord(None, 0, f"s{i}") for i in range(100)]
    tr, va, te = split(recs, SplitSpec())
    assert (len(tr), len(va), len(te)) == (60, 20, 20)


def test_split_deterministic_and_disjoint():
    recs = [DatasetRecord(None, i % 3, f"s{i}") for i in range(47)]
    a = split(recs, SplitSpec(seed=4))
    b = split(recs, SplitSpec(seed=4))
    c = split(recs, SplitSpec(seed=5))
    ids = lambda parts: [[r.source_id for r in p] for p in parts]
    assert ids(a) == ids(b) and ids(a) != ids(c)
    flat = sum(ids(a), [])
    assert len(flat) == len(set(flat)) == 47


def test_split_keeps_source_groups_together():
    recs = [DatasetRecord(None, 0, f"leaf{i // 3}") for i in range(30)]
    parts = split(recs, SplitSpec(seed=2))
    where = {}
    for p, part in enumerate(parts):
        for r in part:
            where.setdefault(r.source_id, set()).add(p)
    assert all(len(v) == 1 for v in where.values())
    assert [len(p) for p in parts] == [18, 6, 6]


def test_split_stratified_within_one():
    recs = [DatasetRecord(None, c, f"{c}-{i}") for c, n in enumerate([13, 29, 8]) for i in range(n)]
    fr = (0.6, 0.2, 0.2)
    parts = split(recs, SplitSpec(fr, seed=1))
    for c, n in enumerate([13, 29, 8]):
        for part, f in zip(parts, fr):
            assert abs(sum(r.label == c for r in part) - n * f) < 1


def _feasible(n, fractions):
    """Every count within one of n*f (inclusive), empty exactly where f == 0."""
    ideal = [n * f for f in fractions]
    out = []
    for counts in itertools.product(range(n + 1), repeat=len(fractions)):
        if sum(counts) != n:
            continue
        if all(abs(c - i) <= 1 + 1e-9 and (c > 0) == (f > 0) for c, i, f in zip(counts, ideal, fractions)):
            out.append(counts)
    return out


def test_allocate_exhaustive_small_cases():
    grid = [i / 20 for i in range(21)]
    for n in range(1, 13):
        for a in grid:
            for b in grid:
                c = 1 - a - b
                if c < -1e-9:
                    continue
                fr = (a, b, max(c, 0.0))
                ok = _feasible(n, fr)
                if not ok:
                    with pytest.raises(InsufficientData):
                        allocate(n, fr)
                    continue
                assert tuple(allocate(n, fr)) in ok, (n, fr)


def test_allocate_five_per_class():
    assert allocate(5, (0.6, 0.2, 0.2)) == [3, 1, 1]
    with pytest.raises(InsufficientData):
        allocate(2, (0.6, 0.2, 0.2))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec((0.5, 0.5, 0.5))
    with pytest.raises(InsufficientData):
        split([], SplitSpec())


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 8), st.integers(0, 8), st.integers(1, 8))
def test_allocate_matches_oracle(n, a, b, c):
    total = a + b + c
    fr = (a / total, b / total, c / total)
    ok = _feasible(n, fr)
    if not ok:
        with pytest.raises(InsufficientData):
            allocate(n, fr)
    else:
        assert tuple(allocate(n, fr)) in ok


# ---------------------------------------------------------------- synthetic set

def test_synthetic_balanced_and_boxed():
    recs, boxes = make_synthetic(4, 250, 64, seed=0)
    assert len(recs) == len(boxes) == 1000
    assert np.bincount([r.label for r in recs]).tolist() == [250] * 4
    assert len({r.source_id for r in recs}) == 1000
    for rec, box in zip(recs[::97], boxes[::97]):
        assert rec.image.shape == (3, 64, 64)
        assert rec.image.min() >= 0 and rec.image.max() <= 1
        assert 0 <= box.top < box.bottom <= 64 and 0 <= box.left < box.right <= 64
        side = box.bottom - box.top
        assert 19 <= side <= 28


def test_synthetic_deterministic():
    a, ba = make_synthetic(3, 5, 32, seed=9)
    b, bb = make_synthetic(3, 5, 32, seed=9)
    c, _ = make_synthetic(3, 5, 32, seed=10)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert ba == bb
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_synthetic_three_nn_baseline():
    recs, _ = make_synthetic(4, 250, 64, seed=0)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(recs))
    test_idx, train_idx = order[:200], order[200:]
    x = np.stack([r.image.ravel() for r in recs]).astype(np.float64)
    y = np.array([r.label for r in recs])
    xt, xr = x[test_idx], x[train_idx]
    d = (xt ** 2).sum(1)[:, None] - 2 * xt @ xr.T + (xr ** 2).sum(1)[None]
    nearest = np.argsort(d, axis=1)[:, :3]
    votes = y[train_idx][nearest]
    pred = np.array([np.bincount(v, minlength=4).argmax() for v in votes])
    assert np.mean(pred == y[test_idx]) >= 0.9


def test_box_contains_half_open():
    box = Box(2, 3, 5, 7)
    assert box.contains(2, 3) and box.contains(4, 6)
    assert not box.contains(5, 3) and not box.contains(2, 7)


# ---------------------------------------------------------------- directories

def test_directory_roundtrip(tmp_path):
    recs, _ = make_synthetic(2, 3, 16, seed=1)
    write_directory(tmp_path, recs, ["alpha", "beta"], format="raw_tensor")
    assert read_manifest(tmp_path) == {"alpha": 0, "beta": 1}
    back, names = load_directory(tmp_path)
    assert names == ["alpha", "beta"]
    assert sorted(r.label for r in back) == [0, 0, 0, 1, 1, 1]
    by_id = {r.source_id.split("/")[1].split(".")[0]: r for r in back}
    for r in recs:
        assert by_id[r.source_id].image.tobytes() == r.image.tobytes()


def test_directory_manifest_controls_labels(tmp_path):
    recs, _ = make_synthetic(2, 1, 16, seed=1)
    write_directory(tmp_path, recs, ["zeta", "alpha"], format="ppm_p6")
    back, names = load_directory(tmp_path)
    assert names == ["zeta", "alpha"]
    assert {r.source_id.split("/")[0]: r.label for r in back} == {"zeta": 0, "alpha": 1}


def test_empty_directory(tmp_path):
    with pytest.raises(EmptyDataset):
        load_directory(tmp_path)
    with pytest.raises(EmptyDataset):
        load_directory(tmp_path / "missing")
