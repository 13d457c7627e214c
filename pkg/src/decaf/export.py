"""Slice and line-profile export for inspection.

PNG files are 16-bit grayscale, linearly mapped from the slice minimum to its
maximum; a ``<file>.json`` sidecar records both so the image can be read back
quantitatively. CSV files hold the raw values as float32 with 9 significant
digits, which round-trips float32 exactly.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .volume import PermittivityVolume

AXES = {"z": 0, "x": 1, "y": 2}


def _array(volume, part: str) -> np.ndarray:
    if isinstance(volume, PermittivityVolume):
        if part not in ("re", "im"):
            raise ValueError("part must be 're' or 'im'")
        return getattr(volume, part)
    a = np.asarray(volume, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("volume must be a (nz, nx, ny) array")
    return a


def take_slice(volume, axis: str, index: int, part: str = "re") -> np.ndarray:
    """2D slice of a ``(nz, nx, ny)`` volume; ``axis='z'`` gives an x-y slice."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    a = _array(volume, part)
    ax = AXES[axis]
    if not 0 <= index < a.shape[ax]:
        raise IndexError(f"slice {index} out of range for axis {axis} of length {a.shape[ax]}")
    return np.take(a, index, axis=ax)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_png16(path, image: np.ndarray, meta: dict | None = None) -> Path:
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    u16 = np.round(scaled * 65535).astype(np.uint16)
    Image.fromarray(u16).save(path, format="PNG")
    _sidecar(path).write_text(json.dumps({"min": lo, "max": hi, "shape": list(img.shape), **(meta or {})},
                                         indent=2))
    return path


def read_png16(path) -> np.ndarray:
    """Inverse of :func:`write_png16` up to 16-bit quantization."""
    path = Path(path)
    side = json.loads(_sidecar(path).read_text())
    u16 = np.asarray(Image.open(path), dtype=np.float64)
    return side["min"] + u16 / 65535.0 * (side["max"] - side["min"])


def write_csv(path, image: np.ndarray) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(image, dtype=np.float32), fmt="%.9g", delimiter=",")
    return path


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)


def export_slice(volume, axis: str, index: int, fmt: str, path, part: str = "re") -> Path:
    img = take_slice(volume, axis, index, part)
    if fmt == "png":
        return write_png16(path, img, {"axis": axis, "index": index, "part": part})
    if fmt == "csv":
        return write_csv(path, img)
    raise ValueError(f"unknown export format {fmt!r}; use png or csv")


def line_profile(image: np.ndarray, start, end, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Linearly interpolated values along the segment ``start -> end`` (pixel units).

    Returns ``(t, values)`` with ``t`` the distance from ``start`` in pixels.
    ``n`` defaults to one sample per pixel of length.
    """
    img = np.asarray(image, dtype=np.float64)
    p0, p1 = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    length = float(np.hypot(*(p1 - p0)))
    n = n or int(np.ceil(length)) + 1
    s = np.linspace(0.0, 1.0, n)
    pts = p0[:, None] + (p1 - p0)[:, None] * s[None, :]
    vals = map_coordinates(img, pts, order=1, mode="nearest")
    return s * length, vals


def export_profile(path, image: np.ndarray, start, end, n: int | None = None) -> Path:
    t, vals = line_profile(image, start, end, n)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_px", "value"])
        for a, b in zip(t, vals):
            w.writerow([f"{a:.9g}", f"{b:.17g}"])
    return path
