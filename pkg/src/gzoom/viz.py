"""Saliency visualization files and PNM image I/O.

Maps are written as binary PGM (P5) after min-max normalization to 0..255;
overlays blend the normalized map into the red channel at 50% over the
image and are written as binary PPM (P6). The reader handles binary P5/P6
with 8-bit samples, enough to round-trip our own files and ingest simple
external images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError


def normalize_to_bytes(grid: np.ndarray) -> np.ndarray:
    """Min-max normalize a 2-D map to u8; a constant map becomes all zeros."""
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {grid.shape}")
    lo = float(grid.min())
    hi = float(grid.max())
    if hi <= lo:
        return np.zeros(grid.shape, dtype=np.uint8)
    scaled = (grid.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(grid: np.ndarray, path) -> None:
    """Write a saliency map as binary PGM (P5), min-max normalized."""
    data = normalize_to_bytes(grid)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm_overlay(image: np.ndarray, grid: np.ndarray, path) -> None:
    """Write the image with the heatmap blended at 50% into the red channel.

    image is (c,h,w) float in [0,1] with 1 or 3 channels.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected a (c,h,w) image, got shape {image.shape}")
    c, h, w = image.shape
    if grid.shape != (h, w):
        raise ShapeError(f"map shape {grid.shape} does not match image {h}x{w}")
    rgb = np.repeat(image, 3, axis=0) if c == 1 else image[:3]
    heat = normalize_to_bytes(grid).astype(np.float64) / 255.0
    out = 0.5 * rgb.astype(np.float64)
    out[0] += 0.5 * heat
    data = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def write_ppm(image: np.ndarray, path) -> None:
    """Write a (3,h,w) float image in [0,1] as binary PPM (P6)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3,h,w) image, got shape {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def _read_pnm_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse a PNM header, skipping comments; returns (kind, w, h, maxval, offset)."""
    if len(data) < 2 or data[:1] != b"P":
        raise DataFormatError(f"{path}: not a PNM file")
    kind = data[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataFormatError(f"{path}: truncated PNM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise DataFormatError(f"{path}: malformed PNM header")
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    return kind, w, h, maxval, pos


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM into a (c,h,w) float array in [0,1]."""
    data = Path(path).read_bytes()
    kind, w, h, maxval, pos = _read_pnm_header(data, path)
    if kind not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported PNM kind {kind!r} (binary P5/P6 only)")
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    channels = 1 if kind == b"P5" else 3
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataFormatError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0
