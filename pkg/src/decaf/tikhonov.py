"""Closed-form Tikhonov baseline, solved frequency by frequency.

Taking the real part of ``ifft2`` couples ``u`` and ``-u``; for a real volume
the forward model is exactly ``Y(u) = H_eff(u) X(u)`` with
``H_eff(u) = (H(u) + conj(H(-u))) / 2``, a ``P x 2Q`` matrix acting on the
spectra of all (re, im) slices. Parseval turns
``||Ax - y||^2 + tau ||x||^2`` into independent ``2Q x 2Q`` Hermitian
positive-definite systems ``(H^H H + tau I) X = H^H Y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, cg

from . import optics
from .volume import PermittivityVolume, psnr


@dataclass
class TikhonovConfig:
    tau: float = 1e-3
    solver: Literal["direct", "cg"] = "direct"
    cg_tol: float = 1e-10
    cg_maxiter: int = 2000

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")


def effective_tf(stack: optics.TransferFunctionStack) -> np.ndarray:
    """``(nx, ny, P, 2Q)`` Hermitian-symmetrized per-frequency system matrices."""
    h = np.concatenate([stack.h_ph, stack.h_ab], axis=1)
    nx, ny = h.shape[-2:]
    ix = (-np.arange(nx)) % nx
    iy = (-np.arange(ny)) % ny
    h_neg = h[..., ix, :][..., iy]
    return np.moveaxis(0.5 * (h + np.conj(h_neg)), (0, 1), (2, 3))


def _direct(stack, y: np.ndarray, tau: float) -> np.ndarray:
    h = effective_tf(stack)
    hh = np.conj(np.swapaxes(h, -1, -2))
    yf = np.moveaxis(sfft.fft2(y, axes=(-2, -1)), 0, -1)[..., None]
    lhs = hh @ h
    n = lhs.shape[-1]
    lhs[..., np.arange(n), np.arange(n)] += tau
    np.linalg.cholesky(lhs)  # raises if not positive definite
    xf = np.linalg.solve(lhs, hh @ yf)[..., 0]
    x = sfft.ifft2(np.moveaxis(xf, -1, 0), axes=(-2, -1)).real
    return x.reshape((2, n // 2) + x.shape[-2:])


def _cg(stack, y: np.ndarray, cfg: TikhonovConfig) -> np.ndarray:
    shape = (2,) + stack.h_ph.shape[1:]
    size = int(np.prod(shape))

    def normal(v):
        x = v.reshape(shape)
        return (optics.apply_adjoint(stack, optics.apply_forward(stack, x)) + cfg.tau * x).ravel()

    op = LinearOperator((size, size), matvec=normal, dtype=np.float64)
    rhs = optics.apply_adjoint(stack, y).ravel()
    sol, info = cg(op, rhs, rtol=cfg.cg_tol, atol=0.0, maxiter=cfg.cg_maxiter)
    if info > 0:
        raise RuntimeError(f"CG did not converge in {info} iterations")
    return sol.reshape(shape)


def tikhonov_reconstruct(stack: optics.TransferFunctionStack, y, cfg: TikhonovConfig) -> PermittivityVolume:
    """Minimize ``||Ax - y||^2 + tau ||x||^2`` over real (re, im) volumes."""
    images = y.images if isinstance(y, optics.MeasurementSet) else np.asarray(y, dtype=np.float64)
    if images.shape != (stack.n_measurements,) + stack.h_ph.shape[2:]:
        raise ValueError(f"measurement shape {images.shape} does not match stack {stack.h_ph.shape}")
    x = _direct(stack, images, cfg.tau) if cfg.solver == "direct" else _cg(stack, images, cfg)
    return PermittivityVolume(stack.grid, x[0], x[1])


def normal_residual(stack, y: np.ndarray, vol: PermittivityVolume, tau: float) -> float:
    """``||A^T(Ax - y) + tau x|| / ||A^T y||``."""
    x = vol.stacked()
    r = optics.apply_adjoint(stack, optics.apply_forward(stack, x) - y) + tau * x
    return float(np.linalg.norm(r) / np.linalg.norm(optics.apply_adjoint(stack, y)))


def tau_sweep(stack, y, reference: np.ndarray, taus, score=None):
    """Reconstruct for every ``tau``; returns ``(best_tau, best_vol, rows)``.

    ``score(vol)`` defaults to PSNR of the real part against ``reference``.
    """
    score = score or (lambda v: psnr(reference, v.re))
    rows = []
    best = None
    for tau in taus:
        vol = tikhonov_reconstruct(stack, y, TikhonovConfig(tau=float(tau)))
        s = score(vol)
        rows.append((float(tau), s))
        if best is None or s > best[2]:
            best = (float(tau), vol, s)
    return best[0], best[1], rows
