"""Small shared utilities: seed derivation and deterministic bilinear resize."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a stage seed from a root seed and a stable stage label.

    Uses SHA-256 of "root:label" so the mapping is stable across processes
    and platforms, unlike the builtin hash().
    """
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def new_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of img to (out_h, out_w) bilinearly.

    Uses half-pixel sample centers with edge clamping, so resizing to the
    same size is the identity and constant images stay constant. Works for
    (h, w), (c, h, w) and (b, c, h, w) arrays alike.
    """
    if img.ndim < 2:
        raise ShapeError(f"bilinear_resize needs at least 2 axes, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid output size ({out_h}, {out_w})")
    h, w = img.shape[-2], img.shape[-1]
    if h == out_h and w == out_w:
        return img.copy()

    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    rows = (np.arange(out_h, dtype=dtype) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w, dtype=dtype) + 0.5) * (w / out_w) - 0.5
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)

    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0).astype(dtype)
    fc = (cols - c0).astype(dtype)

    x = img.astype(dtype, copy=False)
    tl = x[..., r0[:, None], c0[None, :]]
    tr = x[..., r0[:, None], c1[None, :]]
    bl = x[..., r1[:, None], c0[None, :]]
    br = x[..., r1[:, None], c1[None, :]]

    frc = fr[:, None]
    fcc = fc[None, :]
    top = tl + (tr - tl) * fcc
    bot = bl + (br - bl) * fcc
    return top + (bot - top) * frc
