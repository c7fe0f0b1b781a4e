"""Dataset records, decoding, augmentation, stratified splits and the
synthetic blob dataset used for desk-scale training runs."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, EmptyDataset, InsufficientData, MalformedImage
from .imaging import decode_ppm, encode_ppm, resize_bilinear, sample_bilinear
from .tensor import decode_raw, encode_raw

IMAGE_SUFFIXES = {".ppm": "ppm_p6", ".tensor": "raw_tensor"}
MANIFEST_NAME = "classes.json"


@dataclass
class DatasetRecord:
    image: np.ndarray  # (3, H, W) float, values in [0, 1]
    label: int
    source_id: str


@dataclass(frozen=True)
class Box:
    """Half-open pixel box ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    def contains(self, y: int, x: int) -> bool:
        return self.top <= y < self.bottom and self.left <= x < self.right


# ---------------------------------------------------------------------------
# decoding


def decode_image(buf: bytes, format: str) -> np.ndarray:
    """Decode ``ppm_p6`` or ``raw_tensor`` bytes into a (3, H, W) array in [0, 1]."""
    if format == "ppm_p6":
        return decode_ppm(buf)
    if format != "raw_tensor":
        raise ValueError(f"unknown image format {format!r}")
    img = decode_raw(buf)
    if img.ndim != 3 or img.shape[0] != 3:
        raise MalformedImage(f"raw image must be (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise MalformedImage("raw image values must lie in [0, 1]")
    return img


def encode_image(image: np.ndarray, format: str) -> bytes:
    if format == "ppm_p6":
        return encode_ppm(image)
    if format == "raw_tensor":
        return encode_raw(image)
    raise ValueError(f"unknown image format {format!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle: float  # degrees
    scale: float
    top: int
    left: int


def sample_augment_params(rng: np.random.Generator, canvas: int = 256, crop: int = 224,
                          max_angle: float = 25.0, max_zoom: float = 0.25) -> AugmentParams:
    angle = rng.uniform(-max_angle, max_angle)
    scale = rng.uniform(1 - max_zoom, 1 + max_zoom)
    top = int(rng.integers(0, canvas - crop + 1))
    left = int(rng.integers(0, canvas - crop + 1))
    return AugmentParams(float(angle), float(scale), top, left)


def apply_augment(image: np.ndarray, params: AugmentParams, crop: int = 224) -> np.ndarray:
    """Rotate by ``params.angle`` and zoom by ``params.scale`` about the canvas
    centre, then cut the ``crop`` window at (top, left). One bilinear pass,
    edge-replicate fill."""
    _, h, w = image.shape
    dtype = image.dtype if image.dtype.kind == "f" else np.dtype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    v = (np.arange(crop) + (params.top - cy)).astype(dtype)[:, None]
    u = (np.arange(crop) + (params.left - cx)).astype(dtype)[None, :]
    theta = math.radians(params.angle)
    cos = dtype.type(math.cos(theta) / params.scale)
    sin = dtype.type(math.sin(theta) / params.scale)
    # affine map, so both coordinate grids are outer sums
    src_x = (cx + cos * u) - sin * v
    src_y = (cy + sin * u) + cos * v
    return sample_bilinear(image, src_y, src_x)


def augment_with_params(rec: DatasetRecord, rng: np.random.Generator, canvas: int = 256,
                        crop: int = 224):
    img = rec.image
    if img.shape[1] < 32 or img.shape[2] < 32:
        raise DegenerateInput(f"image {img.shape[1:]} is smaller than 32x32")
    if img.shape[1:] != (canvas, canvas):
        img = resize_bilinear(img, canvas, canvas)
    params = sample_augment_params(rng, canvas, crop)
    out = apply_augment(img, params, crop).astype(rec.image.dtype, copy=False)
    return DatasetRecord(out, rec.label, rec.source_id), params


def augment(rec: DatasetRecord, rng: np.random.Generator, canvas: int = 256,
            crop: int = 224) -> DatasetRecord:
    """Random rotation in [-25, 25] degrees, zoom in [0.75, 1.25] and a random
    ``crop`` x ``crop`` window of the ``canvas`` x ``canvas`` image."""
    return augment_with_params(rec, rng, canvas, crop)[0]


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fr}")


def allocate(n: int, fractions: Sequence[float]) -> list:
    """Split ``n`` items by ``fractions``: largest-remainder rounding, then
    move single items so every split with a positive fraction is non-empty.
    Every count stays within one item (inclusive) of ``n * fraction``."""
    ideal = [n * f for f in fractions]
    counts = [math.floor(v) for v in ideal]
    order = sorted(range(len(ideal)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    wanted = [i for i, f in enumerate(fractions) if f > 0]
    if n < len(wanted):
        raise InsufficientData(f"{n} items cannot fill {len(wanted)} non-empty splits")
    for i in wanted:
        if counts[i]:
            continue
        donors = [j for j in range(len(counts)) if counts[j] >= 2 and counts[j] >= ideal[j] - 1e-9]
        if not donors:
            raise InsufficientData(f"cannot fill split {i} from {n} items within one of {ideal}")
        j = max(donors, key=lambda d: (counts[d] - ideal[d], -d))
        counts[j] -= 1
        counts[i] += 1
    return counts


def split(records: Sequence[DatasetRecord], spec: SplitSpec = SplitSpec()):
    """Stratified, seeded partition into (train, val, test).

    Records sharing a ``source_id`` always land in the same split.
    """
    if not records:
        raise InsufficientData("no records to split")
    rng = np.random.default_rng(spec.seed)
    by_class: dict = {}
    for rec in records:
        by_class.setdefault(rec.label, {}).setdefault(rec.source_id, []).append(rec)
    parts = ([], [], [])
    for label in sorted(by_class):
        groups = by_class[label]
        ids = sorted(groups)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        counts = allocate(len(ids), spec.fractions)
        start = 0
        for part, count in zip(parts, counts):
            for sid in ids[start:start + count]:
                part.extend(groups[sid])
            start += count
    return parts


# ---------------------------------------------------------------------------
# synthetic blobs


def class_palette(classes: int) -> list:
    return [colorsys.hsv_to_rgb(i / classes, 0.85, 0.95) for i in range(classes)]


def make_synthetic(classes: int, per_class: int, image_size: int = 64, seed: int = 0):
    """Textured colour blobs on a noise background.

    Class ``c`` has its own hue and stripe frequency. Returns ``(records, boxes)``
    where ``boxes[i]`` is the blob's bounding box in ``records[i]``.
    """
    if classes < 2:
        raise ValueError("make_synthetic needs at least 2 classes")
    rng = np.random.default_rng(seed)
    palette = np.array(class_palette(classes), dtype=np.float32)
    size = image_size
    grid = np.arange(size, dtype=np.float32)
    records, boxes = [], []
    for c in range(classes):
        freq = 2.0 + 1.5 * c  # stripe cycles across the blob
        for i in range(per_class):
            img = rng.uniform(0.0, 0.35, size=(3, size, size)).astype(np.float32)
            bh = int(rng.integers(size * 3 // 10, size * 9 // 20 + 1))
            bw = int(rng.integers(size * 3 // 10, size * 9 // 20 + 1))
            top = int(rng.integers(0, size - bh + 1))
            left = int(rng.integers(0, size - bw + 1))
            stripes = 0.8 + 0.2 * np.sin(2 * np.pi * freq * (grid[:bw] / bw))
            patch = palette[c][:, None, None] * stripes[None, None, :]
            img[:, top:top + bh, left:left + bw] = np.broadcast_to(patch, (3, bh, bw))
            records.append(DatasetRecord(img, c, f"synthetic-{c}-{i:05d}"))
            boxes.append(Box(top, left, top + bh, left + bw))
    return records, boxes


# ---------------------------------------------------------------------------
# directory datasets


def read_manifest(root: Path) -> Optional[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return None
    return json.loads(path.read_text())


def write_manifest(path: Path, class_names: Sequence[str]) -> None:
    mapping = {name: i for i, name in enumerate(class_names)}
    Path(path).write_text(json.dumps(mapping, indent=2, sort_keys=True) + "\n")


def load_directory(root, class_index: Optional[dict] = None):
    """Load ``root/<class>/<image>.{ppm,tensor}``.

    Label indices come from ``class_index`` if given, else from ``root``'s
    manifest, else from sorted subdirectory names. Returns
    ``(records, class_names)``.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    if class_index is None:
        class_index = read_manifest(root)
    if class_index is None:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
        class_index = {name: i for i, name in enumerate(names)}
    class_names = [name for name, _ in sorted(class_index.items(), key=lambda kv: kv[1])]
    records = []
    for name in class_names:
        folder = root / name
        if not folder.is_dir():
            continue
        for path in sorted(folder.iterdir()):
            fmt = IMAGE_SUFFIXES.get(path.suffix.lower())
            if fmt is None:
                continue
            img = decode_image(path.read_bytes(), fmt)
            records.append(DatasetRecord(img, class_index[name], f"{name}/{path.name}"))
    if not records:
        raise EmptyDataset(f"no images found under {root}")
    return records, class_names


def write_directory(root, records: Sequence[DatasetRecord], class_names: Sequence[str],
                    format: str = "ppm_p6") -> None:
    root = Path(root)
    suffix = {v: k for k, v in IMAGE_SUFFIXES.items()}[format]
    for rec in records:
        folder = root / class_names[rec.label]
        folder.mkdir(parents=True, exist_ok=True)
        stem = rec.source_id.replace("/", "_")
        (folder / f"{stem}{suffix}").write_bytes(encode_image(rec.image, format))
    write_manifest(root / MANIFEST_NAME, class_names)


def fit_to_input(image: np.ndarray, size: tuple) -> np.ndarray:
    h, w = size
    if image.shape[1:] == (h, w):
        return image
    return resize_bilinear(image, h, w)
