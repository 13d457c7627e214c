"""Transfer functions and the linearized (first Born) IDT forward model.

Conventions
-----------
* Lateral frequencies are ``2*pi*fftfreq(n, d)`` in rad/um, DC at index 0.
* ``fft2`` is unnormalized, ``ifft2`` carries ``1/N``.
* The pupil is an ideal binary disk of radius ``NA * 2*pi/lambda``; ``S(u_p)``
  and the incident intensity ``I_p`` are taken as 1 unless a source weight is
  given.
* The wavenumber is ``k0 = 2*pi/lambda`` and the axial wave vector is
  ``eta(u) = sqrt(k0^2 - |u|^2)``. Shifted frequencies outside the pupil, or at
  or beyond ``k0``, are zeroed before ``eta`` is evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.fft as sfft

from .volume import Grid3D, PermittivityVolume

Modality = Literal["dense", "annular", "multiplexed"]


@dataclass(frozen=True)
class IlluminationSource:
    u_p: tuple[float, float]
    wavelength: float
    weight: float = 1.0
    group_id: int = 0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("source weight must be positive")
        k0 = 2 * math.pi / self.wavelength
        if math.hypot(*self.u_p) > k0 * (1 + 1e-12):
            raise ValueError(f"source {self.u_p} is evanescent (|u_p| > k0={k0:.4f})")


@dataclass
class OpticalSetup:
    """Microscope + illumination description.

    ``absorption_sign`` selects the sign between the two terms of the
    absorption transfer function: ``"printed"`` (difference) or ``"sum"``.
    ``phase_pupil`` selects the first pupil factor of the phase transfer
    function: ``"u"`` (``P*(u)``) or ``"u_p"`` (``P*(u_p)``, as in the
    absorption function).
    """

    na: float
    wavelength: float
    n0: float
    sources: list[IlluminationSource]
    modality: Modality = "annular"
    absorption_sign: Literal["printed", "sum"] = "printed"
    phase_pupil: Literal["u", "u_p"] = "u"

    def __post_init__(self):
        if not 0 < self.na < self.n0:
            raise ValueError("need 0 < NA < n0")
        if not self.sources:
            raise ValueError("setup has no illumination sources")
        if any(abs(s.wavelength - self.wavelength) > 1e-12 for s in self.sources):
            raise ValueError("all sources must share the setup wavelength")
        if self.modality not in ("dense", "annular", "multiplexed"):
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def k0(self) -> float:
        return 2 * math.pi / self.wavelength

    @property
    def cutoff(self) -> float:
        return self.na * self.k0

    def groups(self) -> list[list[int]]:
        """Source indices per measurement, in measurement order."""
        if self.modality != "multiplexed":
            return [[i] for i in range(len(self.sources))]
        ids = sorted({s.group_id for s in self.sources})
        return [[i for i, s in enumerate(self.sources) if s.group_id == g] for g in ids]

    @property
    def n_measurements(self) -> int:
        return len(self.groups())


@dataclass
class TransferFunctionStack:
    """Per-measurement, per-slice transfer functions, each ``(P, Q, nx, ny)`` complex."""

    grid: Grid3D
    h_ph: np.ndarray
    h_ab: np.ndarray

    @property
    def n_measurements(self) -> int:
        return self.h_ph.shape[0]

    @property
    def n_slices(self) -> int:
        return self.h_ph.shape[1]

    def conj(self) -> tuple[np.ndarray, np.ndarray]:
        if not hasattr(self, "_conj"):
            self._conj = (np.conj(self.h_ph), np.conj(self.h_ab))
        return self._conj


@dataclass
class MeasurementSet:
    """Background-removed intensity images, ``(P, nx, ny)``."""

    images: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError("measurement images must be a (P, nx, ny) array")

    @property
    def n_measurements(self) -> int:
        return self.images.shape[0]


def pupil(u, na: float, wavelength: float):
    """Binary circular pupil: 1 where ``|u| <= NA*2*pi/lambda``."""
    u = np.asarray(u, dtype=float)
    r = np.hypot(u[..., 0], u[..., 1])
    out = (r <= na * 2 * math.pi / wavelength).astype(float)
    return float(out) if out.ndim == 0 else out


def axial_wavevector(u, k0: float) -> float:
    r = math.hypot(*u)
    if r > k0:
        raise ValueError(f"evanescent frequency |u|={r} > k0={k0}")
    return math.sqrt(k0 * k0 - r * r)


def frequency_grid(grid: Grid3D) -> tuple[np.ndarray, np.ndarray]:
    """``(ux, uy)`` arrays of shape ``(nx, ny)`` in rad/um."""
    fx = 2 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    fy = 2 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dy)
    return np.meshgrid(fx, fy, indexing="ij")


def _shifted_term(ux, uy, shift, k0, cutoff, depth, eta_i, sign):
    """``P(u + shift) exp(sign*j(eta(u+shift) - eta_i) z) / eta(u+shift)`` with masking."""
    vx = ux + shift[0]
    vy = uy + shift[1]
    r2 = vx * vx + vy * vy
    mask = (r2 <= cutoff * cutoff) & (r2 < k0 * k0)
    eta = np.sqrt(np.where(mask, k0 * k0 - r2, 1.0))
    val = np.exp(sign * 1j * (eta - eta_i) * depth) / eta
    return np.where(mask, val, 0.0)


def _tf_terms(source: IlluminationSource, q: int, dz: float, grid: Grid3D, setup: OpticalSetup):
    k0 = setup.k0
    cut = setup.cutoff
    upx, upy = source.u_p
    eta_i = math.sqrt(max(k0 * k0 - upx * upx - upy * upy, 0.0))
    depth = grid.z0 + q * dz
    ux, uy = frequency_grid(grid)
    minus = _shifted_term(ux, uy, (-upx, -upy), k0, cut, depth, eta_i, -1.0)
    plus = _shifted_term(ux, uy, (upx, upy), k0, cut, depth, eta_i, +1.0)
    p_neg_up = float(math.hypot(upx, upy) <= cut)
    return ux, uy, minus, plus, p_neg_up


def phase_tf(source: IlluminationSource, q: int, dz: float | None, grid: Grid3D, setup: OpticalSetup) -> np.ndarray:
    dz = grid.dz if dz is None else dz
    ux, uy, minus, plus, p_neg_up = _tf_terms(source, q, dz, grid, setup)
    if setup.phase_pupil == "u":
        first = pupil(np.stack([ux, uy], -1), setup.na, setup.wavelength)
    else:
        first = p_neg_up
    pref = 1j * setup.k0 ** 2 / 2 * source.weight
    return pref * (first * minus - p_neg_up * plus)


def absorption_tf(source: IlluminationSource, q: int, dz: float | None, grid: Grid3D, setup: OpticalSetup) -> np.ndarray:
    dz = grid.dz if dz is None else dz
    _, _, minus, plus, p_neg_up = _tf_terms(source, q, dz, grid, setup)
    sign = -1.0 if setup.absorption_sign == "printed" else 1.0
    pref = -setup.k0 ** 2 / 2 * source.weight
    return pref * (p_neg_up * minus + sign * p_neg_up * plus)


def build_tf_stack(setup: OpticalSetup, grid: Grid3D) -> TransferFunctionStack:
    if not setup.sources:
        raise ValueError("empty source list")
    groups = setup.groups()
    shape = (len(groups), grid.nz) + grid.lateral_shape
    h_ph = np.zeros(shape, dtype=np.complex128)
    h_ab = np.zeros(shape, dtype=np.complex128)
    for p, members in enumerate(groups):
        for q in range(grid.nz):
            for i in members:
                src = setup.sources[i]
                h_ph[p, q] += phase_tf(src, q, grid.dz, grid, setup)
                h_ab[p, q] += absorption_tf(src, q, grid.dz, grid, setup)
    return TransferFunctionStack(grid, h_ph, h_ab)


def _as_pair(x) -> np.ndarray:
    if isinstance(x, PermittivityVolume):
        return x.stacked()
    return np.asarray(x, dtype=np.float64)


def apply_forward(stack: TransferFunctionStack, x: np.ndarray) -> np.ndarray:
    """Array form of :func:`forward`: ``(2, Q, nx, ny)`` -> ``(P, nx, ny)``."""
    if x.shape != (2,) + stack.h_ph.shape[1:]:
        raise ValueError(f"volume shape {x.shape} does not match stack {stack.h_ph.shape}")
    xf = sfft.fft2(x, axes=(-2, -1))
    yf = np.einsum("pqxy,qxy->pxy", stack.h_ph, xf[0])
    yf += np.einsum("pqxy,qxy->pxy", stack.h_ab, xf[1])
    return sfft.ifft2(yf, axes=(-2, -1)).real


def apply_adjoint(stack: TransferFunctionStack, y: np.ndarray) -> np.ndarray:
    """Array form of :func:`adjoint`: ``(P, nx, ny)`` -> ``(2, Q, nx, ny)``."""
    if y.shape != (stack.h_ph.shape[0],) + stack.h_ph.shape[2:]:
        raise ValueError(f"measurement shape {y.shape} does not match stack {stack.h_ph.shape}")
    cph, cab = stack.conj()
    yf = sfft.fft2(y, axes=(-2, -1))
    out = np.empty((2,) + stack.h_ph.shape[1:], dtype=np.complex128)
    out[0] = np.einsum("pqxy,pxy->qxy", cph, yf)
    out[1] = np.einsum("pqxy,pxy->qxy", cab, yf)
    return sfft.ifft2(out, axes=(-2, -1)).real


def forward(stack: TransferFunctionStack, vol) -> MeasurementSet:
    """Simulate background-removed intensities ``y_p = Re ifft2(sum_q H X_q)``."""
    return MeasurementSet(apply_forward(stack, _as_pair(vol)))


def adjoint(stack: TransferFunctionStack, meas) -> PermittivityVolume:
    """Exact adjoint of :func:`forward` for the real Euclidean inner products."""
    y = meas.images if isinstance(meas, MeasurementSet) else np.asarray(meas, dtype=np.float64)
    x = apply_adjoint(stack, y)
    return PermittivityVolume(stack.grid, x[0], x[1])


def imaginary_residue(stack: TransferFunctionStack, x: np.ndarray) -> float:
    """``||Im ifft2(yhat)|| / ||Re ifft2(yhat)||`` before the real part is taken."""
    xf = sfft.fft2(_as_pair(x), axes=(-2, -1))
    yf = np.einsum("pqxy,qxy->pxy", stack.h_ph, xf[0]) + np.einsum("pqxy,qxy->pxy", stack.h_ab, xf[1])
    y = sfft.ifft2(yf, axes=(-2, -1))
    return float(np.linalg.norm(y.imag) / max(np.linalg.norm(y.real), 1e-300))


def resolution_limits(setup: OpticalSetup) -> tuple[float, float]:
    """Lateral and axial Fourier-coverage limits in 1/um."""
    na, n0, lam = setup.na, setup.n0, setup.wavelength
    if na >= n0:
        raise ValueError("NA must be smaller than n0")
    return 4 * na / lam, (2 * n0 - 2 * math.sqrt(n0 * n0 - na * na)) / lam


def ring_sources(count: int, angle_deg: float, wavelength: float, n0: float,
                 phase0: float = 0.0, group_id: int = 0) -> list[IlluminationSource]:
    """LEDs equally spaced in azimuth at polar incidence ``angle_deg``."""
    k0 = 2 * math.pi / wavelength
    r = k0 * n0 * math.sin(math.radians(angle_deg))
    out = []
    for i in range(count):
        phi = phase0 + 2 * math.pi * i / count
        out.append(IlluminationSource((r * math.cos(phi), r * math.sin(phi)), wavelength, 1.0, group_id))
    return out


def grid_sources(rows: int, cols: int, pitch: float, distance: float, wavelength: float,
                 n0: float = 1.0, max_na: float | None = None) -> list[IlluminationSource]:
    """Planar LED matrix centred on the optical axis at ``distance`` (same units as ``pitch``).

    With ``max_na`` set, only LEDs whose illumination NA does not exceed it are kept.
    """
    k0 = 2 * math.pi / wavelength
    out = []
    for r in range(rows):
        for c in range(cols):
            px = (r - (rows - 1) / 2) * pitch
            py = (c - (cols - 1) / 2) * pitch
            rho = math.sqrt(px * px + py * py + distance * distance)
            sx, sy = px / rho, py / rho
            if max_na is not None and n0 * math.hypot(sx, sy) > max_na + 1e-12:
                continue
            out.append(IlluminationSource((k0 * n0 * sx, k0 * n0 * sy), wavelength))
    return out


def with_groups(sources: Sequence[IlluminationSource], groups: Sequence[Sequence[int]]) -> list[IlluminationSource]:
    """Assign ``group_id`` from an explicit list of index groups (must be disjoint)."""
    seen = set()
    out = []
    for g, members in enumerate(groups):
        for i in members:
            if i in seen:
                raise ValueError(f"source {i} appears in more than one group")
            seen.add(i)
            s = sources[i]
            out.append(IlluminationSource(s.u_p, s.wavelength, s.weight, g))
    return out
