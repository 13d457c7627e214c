"""Coordinate encodings for the neural field.

Feature order is frozen so that weight files stay portable:

* positional: ``(sin f0, cos f0, sin f1, cos f1, ...)`` with ``f_l = 2^l * pi``;
* radial: for each rotation ``theta_k`` the rotated ``x'`` block then the
  rotated ``y'`` block, each a positional encoding, i.e. order
  ``(k, coordinate, frequency, sin/cos)``;
* gaussian: all ``sin(2*pi*B v)`` rows, then all ``cos`` rows;
* full encoding: the x-y encoding followed by the positional encoding of z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

DEFAULT_THETAS = (0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8)


@dataclass
class EncodingConfig:
    kind: Literal["radial", "positional", "gaussian"] = "radial"
    l_xy: int = 6
    thetas: tuple[float, ...] = DEFAULT_THETAS
    l_z: int = 6
    gaussian_rows: int = 64
    seed: int = 0
    _b: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.thetas = tuple(float(t) for t in self.thetas)
        if self.kind not in ("radial", "positional", "gaussian"):
            raise ValueError(f"unknown encoding kind {self.kind!r}")
        if self.l_xy < 1 or self.l_z < 1:
            raise ValueError("frequency counts must be >= 1")
        if self.kind == "radial":
            if len(self.thetas) < 1:
                raise ValueError("radial encoding needs at least one angle")
            if any(not 0 <= t < math.pi for t in self.thetas):
                raise ValueError("rotation angles must lie in [0, pi)")
        if self.kind == "gaussian" and self.gaussian_rows < 1:
            raise ValueError("gaussian_rows must be >= 1")

    @property
    def xy_dim(self) -> int:
        if self.kind == "radial":
            return 4 * len(self.thetas) * self.l_xy
        if self.kind == "positional":
            return 4 * self.l_xy
        return 2 * self.gaussian_rows

    @property
    def dim(self) -> int:
        return self.xy_dim + 2 * self.l_z

    @property
    def gaussian_matrix(self) -> np.ndarray:
        if self._b is None:
            self._b = gaussian_matrix(self.gaussian_rows, self.seed)
        return self._b

    def to_dict(self) -> dict:
        return dict(kind=self.kind, l_xy=self.l_xy, thetas=list(self.thetas), l_z=self.l_z,
                    gaussian_rows=self.gaussian_rows, seed=self.seed)


def gaussian_matrix(rows: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((rows, 2))


def positional_encode(t, n_freq: int) -> np.ndarray:
    """``(..., 2*n_freq)`` sin/cos features of ``t``."""
    t = np.asarray(t, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    arg = t[..., None] * freqs
    out = np.empty(t.shape + (2 * n_freq,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def radial_encode(v, cfg: EncodingConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    x, y = v[..., 0], v[..., 1]
    parts = []
    for theta in cfg.thetas:
        c, s = math.cos(theta), math.sin(theta)
        parts.append(positional_encode(c * x - s * y, cfg.l_xy))
        parts.append(positional_encode(s * x + c * y, cfg.l_xy))
    return np.concatenate(parts, axis=-1)


def gaussian_encode(v, cfg: EncodingConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    arg = 2 * np.pi * (v @ cfg.gaussian_matrix.T)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def encode_xy(v, cfg: EncodingConfig) -> np.ndarray:
    if cfg.kind == "radial":
        return radial_encode(v, cfg)
    if cfg.kind == "gaussian":
        return gaussian_encode(v, cfg)
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([positional_encode(v[..., 0], cfg.l_xy), positional_encode(v[..., 1], cfg.l_xy)], axis=-1)


def encode(c, cfg: EncodingConfig) -> np.ndarray:
    """Encode ``(..., 3)`` normalized coordinates into ``(..., cfg.dim)`` features."""
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([encode_xy(c[..., :2], cfg), positional_encode(c[..., 2], cfg.l_z)], axis=-1)
