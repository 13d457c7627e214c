"""Plug-in 2D denoisers ``D = I - R`` for the noise-reduction regularizer.

Three kinds are available:

``identity``
    ``D(x) = x``.
``gaussian-residual``
    ``R = I - G_s`` with a Gaussian blur of std ``s = sigma`` pixels, so
    ``D(x) = G_s x``. Fast, used by default.
``cnn``
    A small residual CNN ("DnCNN-lite"): ten 3x3 convolutions, ReLU after the
    first nine, trained to predict the noise. Inputs are rescaled to [0, 1]
    per slice before inference and mapped back afterwards.

Convolutions use one pixel of reflective padding per layer, so image shape is
preserved and the receptive field is ``1 + 2*layers`` pixels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

NOISE_LEVELS = (1, 2, 3, 4, 5)


def level_to_std(sigma: float) -> float:
    """Noise level on the 0-255 scale to a standard deviation for [0, 1] images."""
    return sigma / 255.0


@dataclass
class DncnnLiteConfig:
    layers: int = 10
    kernel: int = 3
    channels: int = 16
    residual: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")
        if self.layers < 2:
            raise ValueError("need at least two layers")

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * self.layers

    def to_dict(self) -> dict:
        return dict(layers=self.layers, kernel=self.kernel, channels=self.channels,
                    residual=self.residual, dtype=self.dtype)


@dataclass
class DenoiserHandle:
    kind: Literal["cnn", "gaussian-residual", "identity"] = "gaussian-residual"
    sigma: float = 1.0
    config: DncnnLiteConfig | None = None
    weights: list[np.ndarray] | None = None
    biases: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("cnn", "gaussian-residual", "identity"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.kind != "identity" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kind == "cnn" and (self.weights is None or self.config is None):
            raise ValueError("cnn denoiser needs a config and weights")

    def describe(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, **self.meta}


# ---------------------------------------------------------------- convolution

def _pad(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")


def _unpad_adjoint(g):
    """Adjoint of one-pixel reflect padding on the last two axes."""
    h, w = g.shape[-2] - 2, g.shape[-1] - 2
    d = g[..., 1:w + 1].copy()
    d[..., 1] += g[..., 0]
    d[..., w - 2] += g[..., w + 1]
    out = d[..., 1:h + 1, :].copy()
    out[..., 1, :] += d[..., 0, :]
    out[..., h - 2, :] += d[..., h + 1, :]
    return out


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``x`` (N, C, H, W), ``w`` (Cout, C, 3, 3) -> ((N, Cout, H, W), cols)."""
    n, c, h, wd = x.shape
    cols = sliding_window_view(_pad(x), (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, cols, w, x_shape):
    n, c, h, wd = x_shape
    cout = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(cout, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return _unpad_adjoint(dxp), dw, db


# ---------------------------------------------------------------- DnCNN-lite

def init_dncnn(cfg: DncnnLiteConfig, seed: int = 0, zero_last: bool = True):
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    weights, biases = [], []
    for i in range(cfg.layers):
        cin = 1 if i == 0 else cfg.channels
        cout = 1 if i == cfg.layers - 1 else cfg.channels
        std = np.sqrt(2.0 / (cin * 9))
        w = rng.standard_normal((cout, cin, 3, 3)) * std
        if i == cfg.layers - 1 and zero_last:
            w = np.zeros_like(w)
        weights.append(w.astype(dt))
        biases.append(np.zeros(cout, dtype=dt))
    return weights, biases


def dncnn_forward(weights, biases, x: np.ndarray, keep_cache: bool = False):
    """Residual prediction ``R(x)`` for a batch ``x`` of shape (N, H, W)."""
    h = x[:, None].astype(weights[0].dtype)
    cache = []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z, cols = conv3x3(h, w, b)
        if keep_cache:
            cache.append((cols, h.shape, z))
        h = z if i == last else np.maximum(z, 0)
    return h[:, 0], cache


def dncnn_backward(weights, cache, dout):
    g = dout[:, None].astype(weights[0].dtype)
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    last = len(weights) - 1
    for i in range(last, -1, -1):
        cols, shape, z = cache[i]
        if i != last:
            g = g * (z > 0)
        g_in, grads_w[i], grads_b[i] = conv3x3_backward(g, cols, weights[i], shape)
        g = g_in
    return grads_w, grads_b


# ---------------------------------------------------------------- inference

def _check_size(handle: DenoiserHandle, image):
    rf = handle.config.receptive_field
    if min(image.shape[-2:]) < rf:
        raise ValueError(f"image {image.shape[-2:]} smaller than the {rf}-pixel receptive field")


def residual(handle: DenoiserHandle, images: np.ndarray) -> np.ndarray:
    """Noise estimate ``R(x)`` for (H, W) or (N, H, W) input."""
    x = np.asarray(images, dtype=np.float64)
    if handle.kind == "identity":
        return np.zeros_like(x)
    if handle.kind == "gaussian-residual":
        s = (0,) * (x.ndim - 2) + (handle.sigma, handle.sigma)
        return x - gaussian_filter(x, sigma=s, mode="reflect")
    _check_size(handle, x)
    batch = x.reshape((-1,) + x.shape[-2:])
    lo = batch.min(axis=(1, 2), keepdims=True)
    scale = batch.max(axis=(1, 2), keepdims=True) - lo
    scale = np.where(scale > 0, scale, 1.0)
    r, _ = dncnn_forward(handle.weights, handle.biases, (batch - lo) / scale)
    return (r.astype(np.float64) * scale).reshape(x.shape)


def denoise(handle: DenoiserHandle, image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    if handle.kind == "identity":
        return x.copy()
    return x - residual(handle, x)


def apply_raw(handle: DenoiserHandle, images: np.ndarray) -> np.ndarray:
    """CNN denoising without per-slice rescaling (for [0, 1] images)."""
    x = np.asarray(images, dtype=np.float64)
    batch = x.reshape((-1,) + x.shape[-2:])
    r, _ = dncnn_forward(handle.weights, handle.biases, batch)
    return (batch - r).reshape(x.shape)


# ---------------------------------------------------------------- data + training

@dataclass
class TextureDataset:
    clean: np.ndarray
    noise: np.ndarray
    noise_std: float

    def __len__(self):
        return self.clean.shape[0]

    @property
    def noisy(self) -> np.ndarray:
        return self.clean + self.noise


def make_texture_dataset(count: int, size: int, seed: int, noise_std: float,
                         scales=(1.5, 3.0, 6.0, 12.0)) -> TextureDataset:
    """Multi-scale smoothed-noise textures in [0, 1] with AWGN of std ``noise_std``."""
    rng = np.random.default_rng(seed)
    clean = np.empty((count, size, size))
    for k in range(count):
        img = np.zeros((size, size))
        for s in scales:
            layer = gaussian_filter(rng.standard_normal((size, size)), s, mode="wrap")
            img += rng.uniform(0.3, 1.0) * layer / (layer.std() + 1e-12)
        img -= img.min()
        img /= img.max()
        clean[k] = img
    noise = rng.normal(0.0, noise_std, size=clean.shape)
    return TextureDataset(clean, noise, noise_std)


def dncnn_loss(r, noise):
    e = r - noise
    npix = e.size
    loss = (np.sum(e * e) + np.sum(np.abs(e))) / npix
    grad = (2 * e + np.sign(e)) / npix
    return float(loss), grad


def train_dncnn(cfg: DncnnLiteConfig, dataset: TextureDataset, sigma: float, seed: int = 0,
                epochs: int = 30, batch: int = 8, patch: int = 32, lr: float = 2e-3,
                decay: float = 0.93) -> DenoiserHandle:
    """Adam on the residual loss ``||R(x) - n||^2 + ||R(x) - n||_1`` (pixel-averaged).

    The learning rate decays by ``decay`` per epoch. The returned handle's
    ``meta["loss_history"]`` holds the mean loss of each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    from .train import Adam

    rng = np.random.default_rng(seed)
    weights, biases = init_dncnn(cfg, seed)
    params = weights + biases
    opt = Adam(params, lr=lr)
    n = len(dataset)
    size = dataset.clean.shape[-1]
    patch = min(patch, size)
    noisy_all = dataset.noisy
    history = []
    for ep in range(epochs):
        opt.lr = lr * decay ** ep
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            i0, j0 = rng.integers(0, size - patch + 1, size=2)
            sl = (idx, slice(i0, i0 + patch), slice(j0, j0 + patch))
            noisy = noisy_all[sl]
            target = dataset.noise[sl]
            r, cache = dncnn_forward(weights, biases, noisy, keep_cache=True)
            loss, g = dncnn_loss(r.astype(np.float64), target)
            gw, gb = dncnn_backward(weights, cache, g)
            opt.step(params, gw + gb)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("dncnn epoch %d loss %.6g", ep, history[-1])
    return DenoiserHandle("cnn", sigma, cfg, weights, biases,
                          meta={"loss_history": history, "seed": seed, "noise_std": dataset.noise_std})
