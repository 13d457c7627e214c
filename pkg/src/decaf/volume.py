"""Grids, permittivity/RI volumes, coordinate normalization and metrics.

Volumes are held in memory as ``(nz, nx, ny)`` arrays, slice-major, so that
``vol.re[q]`` is the q-th axial slice. Computation is float64; files store
float32 (see :mod:`decaf.fileio`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class IdenticalInputsError(ValueError):
    """Raised by :func:`psnr` when the estimate equals the reference."""


@dataclass(frozen=True)
class Grid3D:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    z0: float = 0.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, nx, ny)``."""
        return (self.nz, self.nx, self.ny)

    @property
    def lateral_shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.nx * self.dx, self.ny * self.dy, self.nz * self.dz)

    def z_positions(self) -> np.ndarray:
        return self.z0 + self.dz * np.arange(self.nz)

    def refined(self, fx: int, fy: int, fz: int) -> "Grid3D":
        """Grid spanning the same first-to-last voxel centres ``f`` times denser.

        An axis of ``n`` voxels gets ``(n - 1) * f + 1``, so every ``f``-th
        refined voxel has exactly the normalized coordinate of an original one.
        """
        for f in (fx, fy, fz):
            if int(f) != f or f < 1:
                raise ValueError("refinement factors must be positive integers")

        def count(n, f):
            return (n - 1) * f + 1 if n > 1 else 1

        return Grid3D(count(self.nx, fx), count(self.ny, fy), count(self.nz, fz),
                      self.dx / fx, self.dy / fy, self.dz / fz, self.z0)

    def to_dict(self) -> dict:
        return dict(nx=self.nx, ny=self.ny, nz=self.nz, dx=self.dx, dy=self.dy, dz=self.dz, z0=self.z0)


@dataclass
class PermittivityVolume:
    grid: Grid3D
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.grid.shape or self.im.shape != self.grid.shape:
            raise ValueError(f"volume arrays {self.re.shape}/{self.im.shape} do not match grid {self.grid.shape}")
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ValueError("permittivity volume contains non-finite values")

    @classmethod
    def zeros(cls, grid: Grid3D) -> "PermittivityVolume":
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape))

    def stacked(self) -> np.ndarray:
        """``(2, nz, nx, ny)`` array of (re, im)."""
        return np.stack([self.re, self.im])


@dataclass
class RIVolume:
    grid: Grid3D
    n_re: np.ndarray
    n_im: np.ndarray
    n0: float
    negative_absorption: bool = field(default=False)


@dataclass(frozen=True)
class Metrics:
    psnr_db: float
    mse: float
    mae: float

    def to_dict(self) -> dict:
        return {"psnr_db": self.psnr_db, "mse": self.mse, "mae": self.mae}


def normalize_coords(grid: Grid3D, index) -> tuple[float, float, float]:
    """Map integer voxel index ``(ix, iy, iz)`` to ``[-1, 1]^3``.

    Each axis is mapped independently: first index to -1, last to +1, and a
    single-voxel axis to 0.
    """
    out = []
    for i, n in zip(index, (grid.nx, grid.ny, grid.nz)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for axis of length {n}")
        out.append(0.0 if n == 1 else -1.0 + 2.0 * i / (n - 1))
    return tuple(out)


def axis_coords(n: int) -> np.ndarray:
    """Vectorized :func:`normalize_coords` for one axis."""
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def grid_coords(grid: Grid3D) -> np.ndarray:
    """All normalized coordinates of ``grid`` as a ``(nz*nx*ny, 3)`` array of (x, y, z).

    Row order matches C-order flattening of a ``(nz, nx, ny)`` volume.
    """
    z, x, y = np.meshgrid(axis_coords(grid.nz), axis_coords(grid.nx), axis_coords(grid.ny), indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def permittivity_to_ri(vol: PermittivityVolume, n0: float) -> RIVolume:
    if not n0 > 0:
        raise ValueError("background index n0 must be positive")
    a = n0 ** 2 + vol.re
    n_re = np.sqrt(0.5 * (a + np.sqrt(a ** 2 + vol.im ** 2)))
    if np.any(n_re == 0):
        raise ZeroDivisionError("n_re vanishes at some voxel; n_im is undefined there")
    n_im = vol.im / (2.0 * n_re)
    neg = bool(np.any(n_im < 0))
    if neg:
        log.debug("negative imaginary RI (gain) present in %d voxels", int(np.sum(n_im < 0)))
    return RIVolume(vol.grid, n_re, n_im, n0, negative_absorption=neg)


def ri_to_permittivity(n_re, n_im, n0: float):
    """Inverse of :func:`permittivity_to_ri`: ``n^2 - n0^2`` split into parts."""
    n_re = np.asarray(n_re, dtype=float)
    n_im = np.asarray(n_im, dtype=float)
    return n_re ** 2 - n_im ** 2 - n0 ** 2, 2.0 * n_re * n_im


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _check_shapes(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr_from_mse(peak: float, mse_value: float, squared_peak: bool = True) -> float:
    if mse_value == 0:
        raise IdenticalInputsError("identical inputs: PSNR is unbounded")
    num = peak ** 2 if squared_peak else peak
    return float(10.0 * np.log10(num / mse_value))


def psnr(reference, estimate, squared_peak: bool = True) -> float:
    """Peak signal-to-noise ratio in dB, peak taken as ``max(reference)``.

    ``squared_peak=False`` gives the variant with an unsquared peak.
    """
    reference, estimate = _check_shapes(reference, estimate)
    return psnr_from_mse(float(reference.max()), mse(reference, estimate), squared_peak)


def compare(reference, estimate) -> Metrics:
    return Metrics(psnr(reference, estimate), mse(reference, estimate), mae(reference, estimate))
