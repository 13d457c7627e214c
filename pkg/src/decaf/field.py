"""Coordinate MLP mapping encoded (x, y, z) to (d_eps_re, d_eps_im).

``N`` fully connected layers: ``N-1`` Leaky-ReLU layers of width ``M`` and a
final linear layer to 2 outputs. At layer ``N//2`` (1-based) the encoded
features are concatenated to the layer input. Gradients are derived by hand
for exactly this architecture.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingConfig, encode

log = logging.getLogger(__name__)

RENDER_CHUNK = 1 << 16
# BLAS picks batch-size dependent kernels for very narrow products; padding the
# output width keeps every row's result independent of the batch it sits in.
MIN_GEMM_WIDTH = 16


def _dense(inp: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = w.shape[1]
    if n >= MIN_GEMM_WIDTH:
        return inp @ w
    wp = np.zeros((w.shape[0], MIN_GEMM_WIDTH), dtype=w.dtype)
    wp[:, :n] = w
    return np.ascontiguousarray((inp @ wp)[:, :n])


@dataclass
class MlpConfig:
    n_layers: int = 6
    width: int = 64
    leaky_slope: float = 0.01
    out_dim: int = 2
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_layers < 3:
            raise ValueError("need at least 3 layers")
        if self.width < self.out_dim:
            raise ValueError("hidden width must be >= output width")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def skip_layer(self) -> int:
        """1-based index of the layer whose input receives the skip concatenation."""
        return self.n_layers // 2

    def to_dict(self) -> dict:
        return dict(n_layers=self.n_layers, width=self.width, leaky_slope=self.leaky_slope,
                    out_dim=self.out_dim, seed=self.seed, dtype=self.dtype)


def layer_shapes(in_dim: int, cfg: MlpConfig) -> list[tuple[int, int]]:
    shapes = []
    skip = cfg.skip_layer - 1
    for i in range(cfg.n_layers):
        fan_in = in_dim if i == 0 else cfg.width
        if i == skip:
            fan_in += in_dim
        fan_out = cfg.out_dim if i == cfg.n_layers - 1 else cfg.width
        shapes.append((fan_in, fan_out))
    return shapes


@dataclass
class NeuralField:
    encoding: EncodingConfig
    mlp: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = field(default=0, compare=False)

    @classmethod
    def init(cls, encoding: EncodingConfig, mlp: MlpConfig) -> "NeuralField":
        """He-uniform hidden layers; the output layer starts at zero so the
        untrained field is the background (zero contrast) everywhere."""
        rng = np.random.default_rng(mlp.seed)
        dt = np.dtype(mlp.dtype)
        weights, biases = [], []
        shapes = layer_shapes(encoding.dim, mlp)
        for i, (fan_in, fan_out) in enumerate(shapes):
            if i == len(shapes) - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            weights.append(w.astype(dt))
            biases.append(np.zeros(fan_out, dtype=dt))
        return cls(encoding, mlp, weights, biases)

    @property
    def input_dim(self) -> int:
        return self.encoding.dim

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.mlp.dtype)

    def params(self) -> list[np.ndarray]:
        """Trainable tensors in layer order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights = [np.asarray(p, dtype=self.dtype) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=self.dtype) for p in params[1::2]]
        self.touch()

    def touch(self) -> None:
        """Mark weights as modified; caches from earlier forwards become stale."""
        self.version += 1

    def copy(self) -> "NeuralField":
        return NeuralField(self.encoding, self.mlp, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.version)

    def check(self) -> None:
        shapes = layer_shapes(self.input_dim, self.mlp)
        for (fi, fo), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"layer shape {w.shape}/{b.shape} != {(fi, fo)}")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("non-finite weights")


@dataclass
class ForwardCache:
    version: int
    inputs: list[np.ndarray]
    pre: list[np.ndarray]


def mlp_forward(nf: NeuralField, feats: np.ndarray, keep_cache: bool = True):
    """Run the MLP on a ``(B, D)`` feature batch. Returns ``(out, cache)``."""
    feats = np.asarray(feats, dtype=nf.dtype)
    if feats.ndim != 2 or feats.shape[1] != nf.input_dim:
        raise ValueError(f"features {feats.shape} do not match input_dim {nf.input_dim}")
    single = feats.shape[0] == 1
    if single:
        # BLAS gemv and gemm round differently; keep batch-size independence
        feats = np.concatenate([feats, feats])
    dt_slope = nf.dtype.type(nf.mlp.leaky_slope)
    skip = nf.mlp.skip_layer - 1
    last = nf.mlp.n_layers - 1
    inputs, pre = [], []
    h = feats
    for i, (w, b) in enumerate(zip(nf.weights, nf.biases)):
        inp = np.concatenate([h, feats], axis=1) if i == skip else h
        z = _dense(inp, w)
        z += b
        if keep_cache:
            inputs.append(inp)
            pre.append(z)
        if i == last:
            h = z
        else:
            h = z * dt_slope
            np.maximum(z, h, out=h)
    if single:
        h = h[:1]
        inputs = [a[:1] for a in inputs]
        pre = [a[:1] for a in pre]
    cache = ForwardCache(nf.version, inputs, pre) if keep_cache else None
    return h, cache


def mlp_backward(nf: NeuralField, cache: ForwardCache, dout: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode gradients, returned in :meth:`NeuralField.params` order."""
    if cache is None or cache.version != nf.version:
        raise RuntimeError("stale forward cache: weights changed since the forward pass")
    slope = nf.dtype.type(nf.mlp.leaky_slope)
    keep = nf.dtype.type(1.0 - nf.mlp.leaky_slope)
    skip = nf.mlp.skip_layer - 1
    dz = np.asarray(dout, dtype=nf.dtype)
    n = nf.mlp.n_layers
    grads: list[np.ndarray] = [None] * (2 * n)
    for i in range(n - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i == 0:
            break
        dinp = dz @ nf.weights[i].T
        if i == skip:
            dinp = dinp[:, : nf.mlp.width]
        # leaky-ReLU derivative as slope + (1 - slope) * [z > 0]; masked selects are slow
        dz = (cache.pre[i - 1] > 0).astype(nf.dtype)
        dz *= keep
        dz += slope
        dz *= dinp
    return grads


def field_values(nf: NeuralField, coords: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(nf, encode(coords, nf.encoding), keep_cache=False)
    return out


def render(nf: NeuralField, coords, chunk: int = RENDER_CHUNK) -> np.ndarray:
    """Evaluate the field at ``(B, 3)`` normalized coordinates; returns ``(B, 2)`` float64."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if coords.size and np.abs(coords).max() > 1.0 + 1e-12:
        log.info("rendering %d coordinates outside [-1,1]^3 (extrapolation)",
                 int(np.sum(np.any(np.abs(coords) > 1.0 + 1e-12, axis=1))))
    out = np.empty((coords.shape[0], nf.mlp.out_dim))
    for s in range(0, coords.shape[0], chunk):
        out[s:s + chunk] = field_values(nf, coords[s:s + chunk])
    return out


def render_volume(nf: NeuralField, grid) -> np.ndarray:
    """Render on every voxel of ``grid``; returns ``(2, nz, nx, ny)``."""
    from .volume import grid_coords

    vals = render(nf, grid_coords(grid))
    return vals.T.reshape((2,) + grid.shape)
