"""Evidence pools: discriminative patches mined by erase-and-reground.

A pool is built from the training images a trained classifier already gets
right. For each such image the saliency peak for the true class yields a
level-0 patch; the peak neighborhood is then blacked out and, as long as
the classifier still predicts the true class on the erased image, grounding
repeats to find next-best evidence (level 1, 2, ...). The first failed
re-classification or degenerate map stops that image, so per-source levels
are contiguous from 0. Patches from several grounding methods can be
combined into one ensemble pool (duplicates kept).

The on-disk container (GZPL) stores 8-bit patch pixels plus a JSON sidecar
with pool metadata and per-patch provenance (peak centers and the erase
centers applied before grounding), enough to re-derive any patch from the
source dataset and checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import (BadMagicError, ConfigError, DataFormatError,
                     TruncatedError, VersionError)
from .grounding import (GroundingConfig, erase_batch, extract_patch,
                        ground_grids, peak_grid, rise_masks)
from .network import Model, evidence_spec
from .training import TrainConfig, eval_view, train

MAGIC = b"GZPL"
VERSION = 1

METHOD_CODES = {"eb": 0, "ceb": 1, "gradcam": 2, "rise": 3}
CODE_METHODS = {v: k for k, v in METHOD_CODES.items()}


@dataclass
class EvidencePatch:
    pixels: np.ndarray  # (c, side, side) float32 in [0,1]
    label: int
    level: int
    method: str
    source_id: int  # index into the originating dataset split
    center: tuple[int, int]  # saliency peak (row, col) in the eval view
    erase_centers: tuple = ()  # peaks erased before this patch's grounding


@dataclass
class EvidencePool:
    patches: list = field(default_factory=list)
    num_classes: int = 0
    patch_size: int = 0
    erase_size: int = 0
    levels: int = 0
    methods: tuple = ()
    checkpoint_hash: str | None = None

    def __len__(self) -> int:
        return len(self.patches)

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patches], dtype=np.int64)

    def level_counts(self) -> dict:
        counts: dict = {}
        for p in self.patches:
            counts[p.level] = counts.get(p.level, 0) + 1
        return counts


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap patch pixels to the 8-bit grid the container stores.

    Done at extraction so an in-memory pool and its saved/loaded copy hold
    bit-identical pixels and train identical evidence models.
    """
    u8 = np.clip(np.rint(pixels.astype(np.float64) * 255.0), 0, 255)
    return (u8 / 255.0).astype(np.float32)


def _predict_top1(model: Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = np.empty(len(images), dtype=np.int64)
    for s in range(0, len(images), batch):
        logits = model.forward(images[s:s + batch])
        out[s:s + batch] = np.argmax(logits, axis=1)
    return out


def build_pool(model: Model, dataset: Dataset, cfg: GroundingConfig,
               levels: int = 2, checkpoint_hash: str | None = None,
               batch: int = 64, grounder=None) -> EvidencePool:
    """Mine a pool from the images the model classifies correctly.

    levels is the number of erasing rounds (levels + 1 patches per image at
    most). Patch order is source-major: all levels of one image before the
    next, sources in dataset order. grounder replaces ground_grids when
    given (same signature).
    """
    if levels < 0:
        raise ConfigError(f"levels must be >= 0, got {levels}")
    if grounder is None:
        grounder = ground_grids
    images = eval_view(dataset.images, model.spec.input_size)
    labels = np.asarray(dataset.labels, dtype=np.int64)

    preds = _predict_top1(model, images, batch)
    kept = np.flatnonzero(preds == labels)

    work = images[kept].copy()  # erasing mutates these
    kept_labels = labels[kept]
    n = len(kept)
    active = np.ones(n, dtype=bool)
    prev_center = np.zeros((n, 2), dtype=np.int64)
    erase_hist: list = [[] for _ in range(n)]
    per_source: list = [[] for _ in range(n)]

    masks = None
    if cfg.method == "rise":
        masks = rise_masks(cfg.rise, model.spec.input_size)

    for level in range(levels + 1):
        if level > 0:
            erase_batch(work, prev_center, cfg.erase_size, active)
            for i in np.flatnonzero(active):
                erase_hist[i].append((int(prev_center[i, 0]), int(prev_center[i, 1])))
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            still = _predict_top1(model, work[idx], batch) == kept_labels[idx]
            active[idx[~still]] = False
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        grids = grounder(model, work[idx], kept_labels[idx], cfg, masks=masks)
        for j, i in enumerate(idx):
            pk = peak_grid(grids[j])
            if pk is None:
                active[i] = False
                continue
            per_source[i].append(EvidencePatch(
                pixels=_quantize(extract_patch(work[i], pk, cfg.patch_size)),
                label=int(kept_labels[i]),
                level=level,
                method=cfg.method,
                source_id=int(kept[i]),
                center=pk,
                erase_centers=tuple(erase_hist[i]),
            ))
            prev_center[i] = pk

    patches = [p for plist in per_source for p in plist]
    return EvidencePool(patches=patches, num_classes=dataset.num_classes,
                        patch_size=cfg.patch_size, erase_size=cfg.erase_size,
                        levels=levels, methods=(cfg.method,),
                        checkpoint_hash=checkpoint_hash)


def build_ensemble_pool(model: Model, dataset: Dataset, cfg: GroundingConfig,
                        methods: tuple = ("ceb", "gradcam", "rise"),
                        checkpoint_hash: str | None = None,
                        batch: int = 64, grounder=None) -> EvidencePool:
    """Level-0 pools from several methods concatenated method-major.

    Duplicates across methods are kept; the ensemble is a multiset union.
    """
    if not methods:
        raise ConfigError("ensemble needs at least one grounding method")
    patches: list = []
    for m in methods:
        sub = build_pool(model, dataset, replace(cfg, method=m), levels=0,
                         checkpoint_hash=checkpoint_hash, batch=batch,
                         grounder=grounder)
        patches.extend(sub.patches)
    return EvidencePool(patches=patches, num_classes=dataset.num_classes,
                        patch_size=cfg.patch_size, erase_size=cfg.erase_size,
                        levels=0, methods=tuple(methods),
                        checkpoint_hash=checkpoint_hash)


def pool_dataset(pool: EvidencePool) -> Dataset:
    """View the pool as a labeled image dataset (no boxes)."""
    if len(pool) == 0:
        raise ConfigError("evidence pool is empty")
    images = np.stack([p.pixels for p in pool.patches]).astype(np.float32)
    labels = pool.labels()
    boxes = np.full((len(pool), 4), -1, dtype=np.int16)
    return Dataset(images=images, labels=labels, boxes=boxes,
                   num_classes=pool.num_classes)


def train_evidence_cnn(pool: EvidencePool, cfg: TrainConfig,
                       dtype=np.float32):
    """Train the patch classifier on the pool.

    Patches are enlarged to the training canvas and randomly cropped to the
    evidence input size each draw, same scheme as whole-image training.
    Returns (model, trace).
    """
    ds = pool_dataset(pool)
    spec = evidence_spec(pool.num_classes)
    return train(ds, spec, cfg, dtype=dtype)


# ---------------------------------------------------------------------------
# GZPL container


def save_pool(pool: EvidencePool, path) -> None:
    """Write the binary patch file and its JSON provenance sidecar."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(pool))
    entries = []
    for p in pool.patches:
        c, side, side2 = p.pixels.shape
        if side != side2:
            raise ValueError(f"non-square patch {p.pixels.shape}")
        out += struct.pack("<I", p.source_id)
        out += struct.pack("<B", p.level)
        out += struct.pack("<B", METHOD_CODES[p.method])
        out += struct.pack("<H", p.label)
        out += struct.pack("<H", side)
        out += struct.pack("<B", c)
        u8 = np.clip(np.rint(np.asarray(p.pixels, dtype=np.float64) * 255.0),
                     0, 255).astype(np.uint8)
        out += u8.tobytes()
        entries.append({
            "source_id": p.source_id,
            "level": p.level,
            "method": p.method,
            "label": p.label,
            "center": [int(p.center[0]), int(p.center[1])],
            "erase_centers": [[int(r), int(cc)] for r, cc in p.erase_centers],
        })
    Path(path).write_bytes(bytes(out))
    manifest = {
        "version": VERSION,
        "num_classes": pool.num_classes,
        "patch_size": pool.patch_size,
        "erase_size": pool.erase_size,
        "levels": pool.levels,
        "methods": list(pool.methods),
        "checkpoint": pool.checkpoint_hash,
        "patches": entries,
    }
    _sidecar(path).write_text(json.dumps(manifest, indent=2))


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def load_pool(path) -> EvidencePool:
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
        raise BadMagicError(f"{path}: not an evidence pool file (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise VersionError(f"{path}: unsupported pool version {version}")
    count = struct.unpack("<I", take(4, "patch count"))[0]

    side_json = _sidecar(path)
    if not side_json.exists():
        raise DataFormatError(f"{path}: missing provenance sidecar {side_json}")
    manifest = json.loads(side_json.read_text())
    entries = manifest.get("patches", [])
    if len(entries) != count:
        raise DataFormatError(
            f"{path}: sidecar lists {len(entries)} patches, file has {count}")

    patches = []
    for i in range(count):
        source_id = struct.unpack("<I", take(4, f"source of patch {i}"))[0]
        level = struct.unpack("<B", take(1, f"level of patch {i}"))[0]
        mcode = struct.unpack("<B", take(1, f"method of patch {i}"))[0]
        if mcode not in CODE_METHODS:
            raise DataFormatError(f"{path}: unknown method code {mcode}")
        label = struct.unpack("<H", take(2, f"label of patch {i}"))[0]
        side = struct.unpack("<H", take(2, f"side of patch {i}"))[0]
        channels = struct.unpack("<B", take(1, f"channels of patch {i}"))[0]
        px = channels * side * side
        pixels = np.frombuffer(take(px, f"pixels of patch {i}"), dtype=np.uint8)
        meta = entries[i]
        patches.append(EvidencePatch(
            pixels=pixels.reshape(channels, side, side).astype(np.float32) / 255.0,
            label=label, level=level, method=CODE_METHODS[mcode],
            source_id=source_id,
            center=tuple(meta.get("center", (-1, -1))),
            erase_centers=tuple(tuple(ec) for ec in meta.get("erase_centers", [])),
        ))
    return EvidencePool(
        patches=patches,
        num_classes=manifest["num_classes"],
        patch_size=manifest["patch_size"],
        erase_size=manifest["erase_size"],
        levels=manifest["levels"],
        methods=tuple(manifest.get("methods", ())),
        checkpoint_hash=manifest.get("checkpoint"),
    )


def verify_pool(pool: EvidencePool, model: Model, dataset: Dataset,
                cfg: GroundingConfig, sample: int | None = None,
                grounder=None) -> list:
    """Re-derive patches from source images and report mismatches.

    For each checked patch: apply its recorded erasures to the source eval
    view, re-ground at the stored label with the stored method, and require
    the same peak and byte-identical 8-bit pixels. Returns a list of
    (patch_index, reason) tuples, empty when everything checks out.
    """
    if grounder is None:
        grounder = ground_grids
    images = eval_view(dataset.images, model.spec.input_size)
    indices = range(len(pool)) if sample is None else range(min(sample, len(pool)))
    problems = []
    masks = None
    for i in indices:
        p = pool.patches[i]
        img = images[p.source_id].copy()
        if p.erase_centers:
            stack = img[None]
            for ec in p.erase_centers:
                erase_batch(stack, np.array([ec]), pool.erase_size)
            img = stack[0]
        mcfg = replace(cfg, method=p.method)
        if p.method == "rise" and masks is None:
            masks = rise_masks(mcfg.rise, model.spec.input_size)
        grid = grounder(model, img[None], np.array([p.label]), mcfg,
                        masks=masks)[0]
        pk = peak_grid(grid)
        if pk != tuple(p.center):
            problems.append((i, f"peak {pk} != recorded {tuple(p.center)}"))
            continue
        fresh = extract_patch(img, pk, pool.patch_size)
        a = np.clip(np.rint(fresh.astype(np.float64) * 255), 0, 255).astype(np.uint8)
        b = np.clip(np.rint(p.pixels.astype(np.float64) * 255), 0, 255).astype(np.uint8)
        if a.tobytes() != b.tobytes():
            problems.append((i, "pixels differ after re-derivation"))
    return problems
