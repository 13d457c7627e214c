"""Binary file formats. All multi-byte values are little-endian.

DCAF  permittivity volume
    ``"DCAF"``, version u16, nx/ny/nz u32, dx/dy/dz f64, z0 f64, flag u8
    (0 real-only, 1 complex pair), then f32 slices in z order, each slice
    C-ordered over (x, y); the real part fully, then the imaginary part.
DCAM  measurement set
    ``"DCAM"``, P u32, nx u32, ny u32, then P f32 images C-ordered over (x, y).
DCFW  neural-field weights
    ``"DCFW"``, JSON length u32, UTF-8 JSON (encoding + MLP config + tensor
    shapes), then f32 tensors in ``W0, b0, W1, b1, ...`` order. The size depends
    on the network only, never on a grid.
DCDN  denoiser weights
    ``"DCDN"``, then the same layout as DCFW.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserHandle, DncnnLiteConfig
from .encoding import EncodingConfig
from .field import MlpConfig, NeuralField
from .optics import MeasurementSet
from .volume import Grid3D, PermittivityVolume

DCAF_VERSION = 1
_DCAF_HEAD = struct.Struct("<4sH3I4dB")
_DCAM_HEAD = struct.Struct("<4s3I")
_JSON_HEAD = struct.Struct("<4sI")
F32 = np.dtype("<f4")


class FileFormatError(OSError):
    """A file is truncated, has the wrong magic, or carries inconsistent sizes."""


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _expect(buf: bytes, size: int, path) -> None:
    if len(buf) != size:
        raise FileFormatError(f"{path}: expected {size} bytes, found {len(buf)}")


def _magic(buf: bytes, magic: bytes, head: struct.Struct, path):
    if len(buf) < head.size or buf[:4] != magic:
        raise FileFormatError(f"{path}: not a {magic.decode()} file")
    return head.unpack_from(buf)


def _f32(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to write non-finite values")
    return np.ascontiguousarray(a, dtype=F32).tobytes()


# ---------------------------------------------------------------- volumes

def write_volume(path, vol: PermittivityVolume, real_only: bool = False) -> int:
    g = vol.grid
    head = _DCAF_HEAD.pack(b"DCAF", DCAF_VERSION, g.nx, g.ny, g.nz, g.dx, g.dy, g.dz, g.z0,
                           0 if real_only else 1)
    body = _f32(vol.re) + (b"" if real_only else _f32(vol.im))
    Path(path).write_bytes(head + body)
    return len(head) + len(body)


def read_volume(path) -> PermittivityVolume:
    buf = _read(path)
    magic, version, nx, ny, nz, dx, dy, dz, z0, flag = _magic(buf, b"DCAF", _DCAF_HEAD, path)
    if version != DCAF_VERSION:
        raise FileFormatError(f"{path}: unsupported DCAF version {version}")
    if flag not in (0, 1):
        raise FileFormatError(f"{path}: bad channel flag {flag}")
    grid = Grid3D(nx, ny, nz, dx, dy, dz, z0)
    n = nx * ny * nz
    _expect(buf, _DCAF_HEAD.size + 4 * n * (1 + flag), path)
    data = np.frombuffer(buf, dtype=F32, offset=_DCAF_HEAD.size).astype(np.float64)
    re = data[:n].reshape(grid.shape)
    im = data[n:].reshape(grid.shape) if flag else np.zeros(grid.shape)
    return PermittivityVolume(grid, re, im)


# ---------------------------------------------------------------- measurements

def write_measurements(path, meas) -> int:
    images = meas.images if isinstance(meas, MeasurementSet) else np.asarray(meas)
    p, nx, ny = images.shape
    blob = _DCAM_HEAD.pack(b"DCAM", p, nx, ny) + _f32(images)
    Path(path).write_bytes(blob)
    return len(blob)


def read_measurements(path) -> MeasurementSet:
    buf = _read(path)
    _, p, nx, ny = _magic(buf, b"DCAM", _DCAM_HEAD, path)
    _expect(buf, _DCAM_HEAD.size + 4 * p * nx * ny, path)
    images = np.frombuffer(buf, dtype=F32, offset=_DCAM_HEAD.size).astype(np.float64)
    return MeasurementSet(images.reshape(p, nx, ny), meta={"source": str(path)})


# ---------------------------------------------------------------- JSON + tensors

def _write_tensors(path, magic: bytes, header: dict, tensors) -> int:
    header = dict(header, shapes=[list(t.shape) for t in tensors])
    js = json.dumps(header, sort_keys=True).encode()
    blob = _JSON_HEAD.pack(magic, len(js)) + js + b"".join(_f32(t) for t in tensors)
    Path(path).write_bytes(blob)
    return len(blob)


def _read_tensors(path, magic: bytes):
    buf = _read(path)
    _, n = _magic(buf, magic, _JSON_HEAD, path)
    start = _JSON_HEAD.size
    try:
        header = json.loads(buf[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: corrupt JSON header ({exc})") from None
    shapes = [tuple(s) for s in header.get("shapes", [])]
    sizes = [int(np.prod(s)) for s in shapes]
    _expect(buf, start + n + 4 * sum(sizes), path)
    flat = np.frombuffer(buf, dtype=F32, offset=start + n)
    tensors, k = [], 0
    for s, m in zip(shapes, sizes):
        tensors.append(flat[k:k + m].reshape(s).copy())
        k += m
    return header, tensors


def write_weights(path, nf: NeuralField, meta: dict | None = None) -> int:
    header = {"encoding": nf.encoding.to_dict(), "mlp": nf.mlp.to_dict(), "meta": meta or {}}
    return _write_tensors(path, b"DCFW", header, nf.params())


def read_weights(path) -> tuple[NeuralField, dict]:
    header, tensors = _read_tensors(path, b"DCFW")
    try:
        enc = dict(header["encoding"])
        enc["thetas"] = tuple(enc["thetas"])
        nf = NeuralField(EncodingConfig(**enc), MlpConfig(**header["mlp"]), [], [])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad DCFW config ({exc})") from None
    nf.set_params(tensors)
    try:
        nf.check()
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    return nf, header.get("meta", {})


def write_denoiser(path, handle: DenoiserHandle) -> int:
    if handle.kind != "cnn":
        raise ValueError("only cnn denoisers have weights to store")
    header = {"kind": handle.kind, "sigma": handle.sigma, "config": handle.config.to_dict(),
              "meta": handle.meta, "n_layers": len(handle.weights)}
    return _write_tensors(path, b"DCDN", header, list(handle.weights) + list(handle.biases))


def read_denoiser(path) -> DenoiserHandle:
    header, tensors = _read_tensors(path, b"DCDN")
    try:
        cfg = DncnnLiteConfig(**header["config"])
        n = int(header["n_layers"])
        dt = np.dtype(cfg.dtype)
        weights = [t.astype(dt) for t in tensors[:n]]
        biases = [t.astype(dt) for t in tensors[n:]]
        return DenoiserHandle("cnn", float(header["sigma"]), cfg, weights, biases, header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad DCDN header ({exc})") from None
