"""Synthetic fine-grained dataset with known discriminative parts.

Every image shares the same construction: a flat background with seeded
Gaussian noise, a centered (jittered) ellipse body, and one small bright
"part" glyph placed uniformly at random inside the body. Only the glyph
pattern depends on the class, so a classifier can succeed only by reading
the part, and the part bounding box is exact ground truth for saliency
localization. Glyphs come in similar-looking pairs, which keeps top-1
accuracy away from the ceiling while leaving the true class inside the
top ranks, the regime where candidate re-ranking can help.

The on-disk container (GZDS) stores 8-bit pixels; generation quantizes to
8 bits first so the in-memory dataset and the file round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, DataFormatError,
                     TruncatedError, VersionError)
from .util import bilinear_resize, derive_seed, new_rng

MAGIC = b"GZDS"
VERSION = 1

# 9x9 binary part motifs in confusable pairs: twin bars bridged top/bottom,
# diagonal/anti-diagonal stripe, ring with gap top/bottom, cross with corner
# dot, H and its transpose.
_GLYPH_ART = [
    [".#######.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#."],
    [".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#######."],
    ["##.......",
     "###......",
     ".###.....",
     "..###....",
     "...###...",
     "....###..",
     ".....###.",
     "......###",
     ".......##"],
    [".......##",
     "......###",
     ".....###.",
     "....###..",
     "...###...",
     "..###....",
     ".###.....",
     "###......",
     "##......."],
    ["###...###",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#########"],
    ["#########",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "#.......#",
     "###...###"],
    ["....#....",
     ".##.#....",
     ".##.#....",
     "....#....",
     "#########",
     "....#....",
     "....#....",
     "....#....",
     "....#...."],
    ["....#....",
     "....#....",
     "....#....",
     "....#....",
     "#########",
     "....#....",
     "....#.##.",
     "....#.##.",
     "....#...."],
    [".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#######.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#.",
     ".#.....#."],
    [".........",
     "#########",
     "....#....",
     "....#....",
     "....#....",
     "....#....",
     "....#....",
     "#########",
     "........."],
]


def _art_to_mask(rows: list[str]) -> np.ndarray:
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


def glyph_masks(num_classes: int, glyph_size: int, seed: int) -> list[np.ndarray]:
    """Per-class binary part motifs; pairwise distinct by construction."""
    base = [_art_to_mask(rows) for rows in _GLYPH_ART]
    if glyph_size != base[0].shape[0]:
        base = [bilinear_resize(m.astype(np.float64), glyph_size, glyph_size) >= 0.5
                for m in base]
    masks = base[:num_classes]
    rng = new_rng(derive_seed(seed, "extra-glyphs"))
    seen = {m.tobytes() for m in masks}
    while len(masks) < num_classes:
        cand = rng.random((glyph_size, glyph_size)) < 0.4
        if cand.sum() >= glyph_size and cand.tobytes() not in seen:
            seen.add(cand.tobytes())
            masks.append(cand)
    return masks


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 64
    channels: int = 3
    noise_sigma: float = 0.1
    background_value: float = 0.25
    body_value: float = 0.55
    part_value: float = 0.95
    glyph_size: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("per-class image counts must be positive")
        if self.image_size < 16:
            raise ConfigError(f"image size too small: {self.image_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if not 1 <= self.glyph_size <= self.image_size // 3:
            raise ConfigError(
                f"glyph size {self.glyph_size} too large for image {self.image_size}")


@dataclass
class Dataset:
    """In-memory split: float32 images in [0,1], labels, part boxes.

    boxes rows are (row, col, height, width); all -1 when unknown (ingested
    data has no part annotations).
    """

    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.images)


def _ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    yy = (np.arange(size) - cy)[:, None] / ay
    xx = (np.arange(size) - cx)[None, :] / ax
    return yy * yy + xx * xx <= 1.0


def _valid_part_centers(size: int, cy: float, cx: float, ay: float, ax: float,
                        half: int) -> np.ndarray:
    """Centers whose glyph box corners all fall inside the ellipse."""
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    ok = np.ones((size, size), dtype=bool)
    for dr in (-half, half):
        for dc in (-half, half):
            yy = (rows + dr - cy) / ay
            xx = (cols + dc - cx) / ax
            ok &= yy * yy + xx * xx <= 1.0
    ok[:half, :] = False
    ok[size - half:, :] = False
    ok[:, :half] = False
    ok[:, size - half:] = False
    return np.argwhere(ok)


def _render_image(spec: SyntheticSpec, glyphs: list[np.ndarray],
                  label: int, global_index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (c,s,s) uint8 image and its part box, from a per-image seed."""
    rng = new_rng(spec.seed ^ global_index)
    s = spec.image_size
    c = spec.channels

    img = np.full((c, s, s), spec.background_value, dtype=np.float64)
    img += spec.noise_sigma * rng.standard_normal((c, s, s))

    cy = s / 2 + rng.uniform(-2.0, 2.0)
    cx = s / 2 + rng.uniform(-2.0, 2.0)
    ay = s * rng.uniform(0.29, 0.36)
    ax = s * rng.uniform(0.36, 0.44)
    body = _ellipse_mask(s, cy, cx, ay, ax)
    body_fill = spec.body_value + rng.uniform(-0.04, 0.04)
    img[:, body] = body_fill

    half = spec.glyph_size // 2
    centers = _valid_part_centers(s, cy, cx, ay, ax, half)
    if len(centers) == 0:
        raise ConfigError("part glyph does not fit inside the body ellipse")
    pr, pc = centers[rng.integers(len(centers))]
    glyph = glyphs[label]
    g = spec.glyph_size
    r0, c0 = pr - half, pc - half
    part_fill = spec.part_value + rng.uniform(-0.05, 0.0)
    region = img[:, r0:r0 + g, c0:c0 + g]
    region[:, glyph] = part_fill

    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    box = np.array([r0, c0, g, g], dtype=np.int16)
    return u8, box


def _render_split(spec: SyntheticSpec, glyphs: list[np.ndarray],
                  per_class: int, index_offset: int) -> Dataset:
    n = per_class * spec.num_classes
    s = spec.image_size
    images = np.empty((n, spec.channels, s, s), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int16)
    for i in range(n):
        label = i % spec.num_classes
        images[i], boxes[i] = _render_image(spec, glyphs, label, index_offset + i)
        labels[i] = label
    return Dataset(images=images.astype(np.float32) / 255.0,
                   labels=labels, boxes=boxes, num_classes=spec.num_classes)


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) splits; per-image seeds are seed XOR index."""
    glyphs = glyph_masks(spec.num_classes, spec.glyph_size, spec.seed)
    n_train = spec.train_per_class * spec.num_classes
    train = _render_split(spec, glyphs, spec.train_per_class, 0)
    test = _render_split(spec, glyphs, spec.test_per_class, n_train)
    return train, test


def erase_parts(ds: Dataset) -> Dataset:
    """Copy of the dataset with every part box blacked out (verification aid)."""
    images = ds.images.copy()
    for i in range(len(ds)):
        r, c, h, w = ds.boxes[i]
        if r >= 0:
            images[i, :, r:r + h, c:c + w] = 0
    return Dataset(images=images, labels=ds.labels.copy(),
                   boxes=ds.boxes.copy(), num_classes=ds.num_classes)


# ---------------------------------------------------------------------------
# localization


def localization_score(maps, boxes) -> float:
    """Fraction of maps whose saliency peak lies inside its ground-truth box.

    Degenerate maps count as misses. maps holds SaliencyMap objects or raw
    2-D grids; boxes rows are (row, col, height, width).
    """
    boxes = np.asarray(boxes)
    if len(maps) == 0:
        raise ValueError("localization_score needs at least one map")
    if len(maps) != len(boxes):
        raise ValueError(f"{len(maps)} maps vs {len(boxes)} boxes")
    hits = 0
    for m, box in zip(maps, boxes):
        grid = m.grid if hasattr(m, "grid") else np.asarray(m)
        if grid.max() <= 0:
            continue
        flat = int(np.argmax(grid))
        r, c = divmod(flat, grid.shape[1])
        br, bc, bh, bw = (int(v) for v in box)
        if br <= r < br + bh and bc <= c < bc + bw:
            hits += 1
    return hits / len(maps)


# ---------------------------------------------------------------------------
# GZDS container


def save_dataset(ds: Dataset, path) -> None:
    import struct

    n, c, s, s2 = ds.images.shape
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", n)
    out += struct.pack("<H", ds.num_classes)
    out += struct.pack("<H", s)
    out += struct.pack("<B", c)
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        out += struct.pack("<H", int(ds.labels[i]))
        out += struct.pack("<4h", *(int(v) for v in ds.boxes[i]))
        out += pixels[i].tobytes()
    Path(path).write_bytes(bytes(out))


def load_dataset(path) -> Dataset:
    import struct

    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a dataset file (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    n = struct.unpack("<I", take(4, "image count"))[0]
    num_classes = struct.unpack("<H", take(2, "class count"))[0]
    side = struct.unpack("<H", take(2, "image side"))[0]
    channels = struct.unpack("<B", take(1, "channel count"))[0]
    if num_classes < 1 or side < 1 or channels < 1:
        raise DataFormatError(f"{path}: invalid dataset header")

    images = np.empty((n, channels, side, side), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int16)
    px = channels * side * side
    for i in range(n):
        labels[i] = struct.unpack("<H", take(2, f"label of image {i}"))[0]
        boxes[i] = struct.unpack("<4h", take(8, f"box of image {i}"))
        images[i] = np.frombuffer(take(px, f"pixels of image {i}"),
                                  dtype=np.uint8).reshape(channels, side, side)
    return Dataset(images=images.astype(np.float32) / 255.0, labels=labels,
                   boxes=boxes, num_classes=num_classes)


def dataset_manifest(spec: SyntheticSpec, train: Dataset, test: Dataset) -> dict:
    return {
        "spec": {k: getattr(spec, k) for k in (
            "num_classes", "train_per_class", "test_per_class", "image_size",
            "channels", "noise_sigma", "background_value", "body_value",
            "part_value", "glyph_size", "seed")},
        "splits": {
            "train": {"file": "train.gzds", "count": len(train)},
            "test": {"file": "test.gzds", "count": len(test)},
        },
    }


# ---------------------------------------------------------------------------
# folder ingest


def _center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    resized = bilinear_resize(img, nh, nw)
    r0 = (nh - size) // 2
    c0 = (nw - size) // 2
    return resized[:, r0:r0 + size, c0:c0 + size]


def ingest_folder(path, image_size: int = 64, manifest_path=None):
    """Build a dataset from class-per-subdirectory PNM images.

    Labels follow subdirectory lexicographic order; every image is resized
    so its short side matches image_size and center-cropped square. Returns
    (dataset, manifest); the manifest is also written to manifest_path
    (default: <path>/manifest.json, pass False to skip).
    """
    from .viz import read_pnm

    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{path} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{path} contains no class subdirectories")

    images, labels, entries = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(f for f in cdir.iterdir() if f.is_file())
        if not files:
            raise ValueError(f"class directory {cdir} is empty")
        for f in files:
            img = read_pnm(f)  # raises DataFormatError naming the file
            if img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            images.append(_center_crop_resize(img, image_size).astype(np.float32))
            labels.append(label)
            entries.append({"file": str(f.relative_to(root)), "label": label})

    ds = Dataset(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
                 boxes=np.full((len(images), 4), -1, dtype=np.int16),
                 num_classes=len(class_dirs))
    manifest = {
        "classes": [d.name for d in class_dirs],
        "image_size": image_size,
        "count": len(images),
        "entries": entries,
    }
    if manifest_path is None:
        manifest_path = root / "manifest.json"
    if manifest_path is not False:
        Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ds, manifest
