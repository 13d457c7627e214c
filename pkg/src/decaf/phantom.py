"""Procedural ellipsoid phantoms, Born-model measurement synthesis, LED presets.

Measurements are synthesized with the same linear model used for
reconstruction (an inverse crime, deliberate at desk scale).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import optics
from .volume import Grid3D, PermittivityVolume

# n_re = 1.075 in vacuum (n0 = 1)
PAPER_MAX_RI_CONTRAST = 0.075
PAPER_DEPS_RE = (1.0 + PAPER_MAX_RI_CONTRAST) ** 2 - 1.0


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    re: float
    im: float = 0.0
    softness: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError("ellipsoid amplitudes must be finite")
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError("semi-axes must be positive")


@dataclass
class PhantomSpec:
    """Ellipsoids in physical um; x/y are centred on the grid, z is absolute."""

    grid: Grid3D
    cells: list[Ellipsoid] = field(default_factory=list)
    seed: int = 0


@dataclass
class NoiseSpec:
    kind: Literal["none", "gaussian"] = "none"
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")
        if self.kind not in ("none", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")


def physical_axes(grid: Grid3D):
    x = (np.arange(grid.nx) - (grid.nx - 1) / 2) * grid.dx
    y = (np.arange(grid.ny) - (grid.ny - 1) / 2) * grid.dy
    return x, y, grid.z_positions()


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def ellipsoid_profile(cell: Ellipsoid, grid: Grid3D) -> np.ndarray:
    """Occupancy in [0, 1] on the ``(nz, nx, ny)`` grid, smooth over ``softness`` um."""
    x, y, z = physical_axes(grid)
    cx, cy, cz = cell.center
    ax, ay, az = cell.semi_axes
    zz, xx, yy = np.meshgrid(z, x, y, indexing="ij")
    rho = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2)
    depth = (1.0 - rho) * min(cell.semi_axes)
    if cell.softness <= 0:
        return (rho <= 1.0).astype(float)
    return _smoothstep(depth / cell.softness + 0.5)


def make_phantom(spec: PhantomSpec) -> PermittivityVolume:
    """Voxelize the cells; overlapping cells take the elementwise maximum."""
    vol = PermittivityVolume.zeros(spec.grid)
    for cell in spec.cells:
        occ = ellipsoid_profile(cell, spec.grid)
        np.maximum(vol.re, cell.re * occ, out=vol.re)
        np.maximum(vol.im, cell.im * occ, out=vol.im)
    return vol


def desk_phantom_spec(grid: Grid3D, seed: int = 0, n_cells: int | None = None,
                      peak: float = PAPER_DEPS_RE) -> PhantomSpec:
    """8-12 seeded cell-like ellipsoids; the first one carries the full ``peak``."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 13)) if n_cells is None else n_cells
    lx, ly, lz = grid.extent
    z_lo, z_hi = grid.z0, grid.z0 + (grid.nz - 1) * grid.dz
    cells = []
    for k in range(n):
        ax, ay = rng.uniform(0.06, 0.14, size=2) * min(lx, ly)
        az = rng.uniform(0.25, 0.4) * max(lz, grid.dz)
        cx = rng.uniform(-0.5 * lx + ax, 0.5 * lx - ax)
        cy = rng.uniform(-0.5 * ly + ay, 0.5 * ly - ay)
        cz = rng.uniform(z_lo + 0.3 * (z_hi - z_lo), z_hi - 0.3 * (z_hi - z_lo))
        amp = peak if k == 0 else peak * rng.uniform(0.4, 1.0)
        cells.append(Ellipsoid((cx, cy, cz), (ax, ay, az), amp, 0.0, softness=1.5 * min(grid.dx, grid.dy)))
    return PhantomSpec(grid, cells, seed)


def add_noise(y: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    if noise.kind == "none" or noise.std == 0:
        return y.copy()
    rng = np.random.default_rng(noise.seed)
    return y + rng.normal(0.0, noise.std, size=y.shape)


def simulate_measurements(vol: PermittivityVolume, setup: optics.OpticalSetup, noise: NoiseSpec | None = None,
                          stack: optics.TransferFunctionStack | None = None) -> optics.MeasurementSet:
    stack = stack or optics.build_tf_stack(setup, vol.grid)
    clean = optics.apply_forward(stack, vol.stacked())
    y = add_noise(clean, noise or NoiseSpec())
    return optics.MeasurementSet(y, meta={"noise": (noise or NoiseSpec()).__dict__})


PRESETS = ("dense89", "annular24", "multiplexed16x6")


def make_setup(preset: str, wavelength: float = 0.515, na: float = 0.65, n0: float = 1.0,
               angle_deg: float = 40.0, ring_fractions=(0.35, 0.55, 0.75, 0.95), **tf_options) -> optics.OpticalSetup:
    """Illumination presets.

    ``annular24``: 24 LEDs on a ring at ``angle_deg`` incidence.
    ``dense89``: square LED matrix; the 89 LEDs inside the brightfield NA.
    ``multiplexed16x6``: four 24-LED rings at illumination NA ``f * na`` for
    ``f`` in ``ring_fractions``; pattern ``g`` lights six LEDs 60 degrees
    apart on ring ``g // 4``.
    """
    if preset == "annular24":
        sources = optics.ring_sources(24, angle_deg, wavelength, n0)
        return optics.OpticalSetup(na, wavelength, n0, sources, "annular", **tf_options)
    if preset == "dense89":
        # lattice points with i^2 + j^2 <= 26 are exactly 89; cut between shells 26 and 29
        r_cut = math.sqrt(27.5)
        distance = r_cut * math.sqrt(1 - (na / n0) ** 2) / (na / n0)
        sources = optics.grid_sources(13, 13, 1.0, distance, wavelength, n0, max_na=na)
        if len(sources) != 89:
            raise RuntimeError(f"dense preset produced {len(sources)} LEDs")
        return optics.OpticalSetup(na, wavelength, n0, sources, "dense", **tf_options)
    if preset == "multiplexed16x6":
        sources = []
        for r, frac in enumerate(ring_fractions):
            angle = math.degrees(math.asin(frac * na / n0))
            ring = optics.ring_sources(24, angle, wavelength, n0, phase0=r * math.pi / 48)
            for j in range(24):
                g = 4 * r + j % 4
                s = ring[j]
                sources.append(optics.IlluminationSource(s.u_p, wavelength, 1.0, g))
        return optics.OpticalSetup(na, wavelength, n0, sources, "multiplexed", **tf_options)
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
