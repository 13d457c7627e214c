"""Regularized loss, block partition and block-wise Adam training.

Loss on a block of the volume (the whole grid is the one-block case)::

    total = term1 + alpha * term2 + beta * term3
    term1 = sum charb(A x_block - y_block)           measurement consistency
    term2 = sum_slices ||x - D(x)||^2                x-y noise reduction
    term3 = sum_j charb(x_j - x_{j-1})               z continuity

with ``charb(r) = sqrt(r^2 + eps^2)``. The denoiser term uses stop-gradient on
``D`` so its gradient is ``2 * alpha * (x - D(x))``.

Blocks: the lateral grid is tiled by near-equal core rectangles. Each block's
field is evaluated on its core grown by ``padding`` voxels and multiplied by
feathering weights that form a partition of unity over the grid. A block's
partial measurement is the forward model of that weighted contribution,
cropped to its view (core grown by ``padding + margin``, clipped to the grid).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import optics
from .denoiser import DenoiserHandle, residual
from .field import NeuralField, mlp_backward, mlp_forward, render_volume
from .encoding import encode
from .volume import Grid3D, axis_coords

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LossWeights:
    alpha: float = 0.05
    beta: float = 0.1
    charbonnier_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.charbonnier_eps > 0:
            raise ValueError("charbonnier_eps must be positive")


# ---------------------------------------------------------------- Adam

def adam_update(params, grads, m, v, step: int, lr: float,
                b1: float = ADAM_BETA1, b2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam step in place. ``step`` counts from 1."""
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for p, g, mk, vk in zip(params, grads, m, v):
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * (g * g)
        p -= lr * (mk / bc1) / (np.sqrt(vk / bc2) + eps)


class Adam:
    def __init__(self, params, lr: float = 1e-3):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        adam_update(params, grads, self.m, self.v, self.t, self.lr)


@dataclass
class Schedule:
    lr0: float = 1e-3
    decay: float = 0.1
    period: int = 10000

    def lr(self, step: int) -> float:
        return self.lr0 * self.decay ** (step / self.period)


# ---------------------------------------------------------------- blocks

@dataclass
class Block:
    core: tuple[int, int, int, int]
    padded: tuple[int, int, int, int]
    view: tuple[int, int, int, int]
    feather: np.ndarray = field(repr=False)

    @property
    def padded_slices(self):
        x0, x1, y0, y1 = self.padded
        return slice(x0, x1), slice(y0, y1)

    @property
    def view_slices(self):
        x0, x1, y0, y1 = self.view
        return slice(x0, x1), slice(y0, y1)

    @property
    def padded_shape(self) -> tuple[int, int]:
        x0, x1, y0, y1 = self.padded
        return x1 - x0, y1 - y0


@dataclass
class BlockPartition:
    grid: Grid3D
    blocks: list[Block]
    padding: int
    margin: int

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_coords(self, i: int) -> np.ndarray:
        """Normalized (x, y, z) of block ``i``'s padded window, C-order over (z, x, y)."""
        sx, sy = self.blocks[i].padded_slices
        xs = axis_coords(self.grid.nx)[sx]
        ys = axis_coords(self.grid.ny)[sy]
        zs = axis_coords(self.grid.nz)
        z, x, y = np.meshgrid(zs, xs, ys, indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def assemble(self, parts: list[np.ndarray]) -> np.ndarray:
        """Feather-blend per-block ``(..., bx, by)`` arrays into a full lateral grid."""
        lead = parts[0].shape[:-2]
        out = np.zeros(lead + self.grid.lateral_shape)
        for blk, part in zip(self.blocks, parts):
            sx, sy = blk.padded_slices
            out[..., sx, sy] += part * blk.feather
        return out


def _factor(b: int, nx: int, ny: int) -> tuple[int, int]:
    best = None
    for fx in range(1, b + 1):
        if b % fx:
            continue
        fy = b // fx
        if fx <= nx and fy <= ny and (best is None or abs(fx - fy) < abs(best[0] - best[1])):
            best = (fx, fy)
    if best is None:
        raise ValueError(f"{b} blocks do not fit a {nx}x{ny} lateral grid")
    return best


def _ramp(lo: int, hi: int, plo: int, phi: int, p: int) -> np.ndarray:
    t = np.arange(plo, phi)
    d = np.maximum(lo - t, 0) + np.maximum(t - (hi - 1), 0)
    return 1.0 - d / (p + 1.0)


def partition_blocks(grid: Grid3D, n_blocks: int, padding: int = 4, margin: int | None = None) -> BlockPartition:
    """Tile the lateral grid into ``n_blocks`` near-equal rectangles.

    ``margin`` (view enlargement) defaults to ``padding``.
    """
    if n_blocks < 1:
        raise ValueError("need at least one block")
    if n_blocks > grid.nx * grid.ny:
        raise ValueError("more blocks than lateral pixels")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    margin = padding if margin is None else margin
    fx, fy = _factor(n_blocks, grid.nx, grid.ny)
    ex = np.linspace(0, grid.nx, fx + 1).round().astype(int)
    ey = np.linspace(0, grid.ny, fy + 1).round().astype(int)
    raw = []
    for a in range(fx):
        for b in range(fy):
            core = (ex[a], ex[a + 1], ey[b], ey[b + 1])
            pad = (max(core[0] - padding, 0), min(core[1] + padding, grid.nx),
                   max(core[2] - padding, 0), min(core[3] + padding, grid.ny))
            grow = padding + margin
            view = (max(core[0] - grow, 0), min(core[1] + grow, grid.nx),
                    max(core[2] - grow, 0), min(core[3] + grow, grid.ny))
            w = np.outer(_ramp(core[0], core[1], pad[0], pad[1], padding),
                         _ramp(core[2], core[3], pad[2], pad[3], padding))
            raw.append((core, pad, view, w))
    total = np.zeros(grid.lateral_shape)
    for _, pad, _, w in raw:
        total[pad[0]:pad[1], pad[2]:pad[3]] += w
    blocks = []
    for core, pad, view, w in raw:
        if n_blocks == 1:
            feather = np.ones_like(w)
        else:
            feather = w / total[pad[0]:pad[1], pad[2]:pad[3]]
        blocks.append(Block(tuple(int(v) for v in core), tuple(int(v) for v in pad),
                            tuple(int(v) for v in view), feather))
    return BlockPartition(grid, blocks, padding, margin)


def inject(partition: BlockPartition, i: int, y_view: np.ndarray) -> np.ndarray:
    """``U_i``: place a view-sized measurement stack into a zero full frame."""
    out = np.zeros(y_view.shape[:1] + partition.grid.lateral_shape)
    sx, sy = partition.blocks[i].view_slices
    out[:, sx, sy] = y_view
    return out


def extract(partition: BlockPartition, i: int, y_full: np.ndarray) -> np.ndarray:
    """``U_i^T``: crop a full-frame stack to block ``i``'s view."""
    sx, sy = partition.blocks[i].view_slices
    return y_full[:, sx, sy].copy()


def measurement_separation(psi: dict, y: np.ndarray, partition: BlockPartition, i: int) -> np.ndarray:
    """``y_i = U_i^T (y - sum_{j != i} U_j y_j)`` with ``y_j`` read from ``psi``."""
    if not 0 <= i < partition.n_blocks:
        raise KeyError(f"unknown block id {i}")
    acc = y.copy()
    for j in range(partition.n_blocks):
        if j == i or j not in psi:
            continue
        sx, sy = partition.blocks[j].view_slices
        acc[:, sx, sy] -= psi[j]
    return extract(partition, i, acc)


def block_partial(stack, partition: BlockPartition, i: int, block_vol: np.ndarray) -> np.ndarray:
    """Partial measurement of block ``i`` from its padded ``(2, nz, bx, by)`` field values."""
    full = np.zeros((2, partition.grid.nz) + partition.grid.lateral_shape)
    sx, sy = partition.blocks[i].padded_slices
    full[..., sx, sy] = block_vol * partition.blocks[i].feather
    return extract(partition, i, optics.apply_forward(stack, full))


def assembled_measurement(psi: dict, partition: BlockPartition, n_meas: int) -> np.ndarray:
    out = np.zeros((n_meas,) + partition.grid.lateral_shape)
    for j, yj in psi.items():
        sx, sy = partition.blocks[j].view_slices
        out[:, sx, sy] += yj
    return out


# ---------------------------------------------------------------- loss

def charbonnier(r: np.ndarray, eps: float):
    s = np.sqrt(r * r + eps * eps)
    return float(s.sum()), r / s


def volume_loss(vol: np.ndarray, pred_view: np.ndarray, target: np.ndarray, weights: LossWeights,
                denoiser: DenoiserHandle | None, with_grad: bool = True):
    """Regularizer terms and their gradients on a ``(2, nz, bx, by)`` block volume.

    ``pred_view`` / ``target`` are the block's predicted and target measurements.
    Returns ``(terms, g_meas, g_vol)`` where ``g_meas`` is dL/d(pred_view) and
    ``g_vol`` the regularizer gradient w.r.t. ``vol``.
    """
    eps = weights.charbonnier_eps
    t1, g_meas = charbonnier(pred_view - target, eps)
    g_vol = np.zeros_like(vol) if with_grad else None
    t2 = 0.0
    if denoiser is not None and denoiser.kind != "identity" and (weights.alpha > 0 or not with_grad):
        flat = vol.reshape((-1,) + vol.shape[-2:])
        res = residual(denoiser, flat).reshape(vol.shape)
        t2 = float(np.sum(res * res))
        if with_grad and weights.alpha > 0:
            g_vol += 2.0 * weights.alpha * res
    t3 = 0.0
    if vol.shape[1] > 1 and (weights.beta > 0 or not with_grad):
        t3, gd = charbonnier(vol[:, 1:] - vol[:, :-1], eps)
        if with_grad and weights.beta > 0:
            gd *= weights.beta
            g_vol[:, 1:] += gd
            g_vol[:, :-1] -= gd
    total = t1 + weights.alpha * t2 + weights.beta * t3
    return {"term1": t1, "term2": t2, "term3": t3, "total": total}, g_meas, g_vol


@dataclass
class BlockProblem:
    """Precomputed per-block data: encoded features and lateral geometry."""

    partition: BlockPartition
    feats: list[np.ndarray]

    @classmethod
    def build(cls, nf: NeuralField, partition: BlockPartition) -> "BlockProblem":
        feats = [encode(partition.block_coords(i), nf.encoding).astype(nf.dtype)
                 for i in range(partition.n_blocks)]
        return cls(partition, feats)


def _block_volume(out: np.ndarray, nz: int, shape2d) -> np.ndarray:
    return np.asarray(out, dtype=np.float64).T.reshape((2, nz) + tuple(shape2d))


def block_loss_and_grad(nf: NeuralField, problem: BlockProblem, i: int, stack, target: np.ndarray,
                        weights: LossWeights, denoiser: DenoiserHandle | None):
    """Loss of block ``i`` against its separated measurement and the weight gradients."""
    part = problem.partition
    blk = part.blocks[i]
    grid = part.grid
    out, cache = mlp_forward(nf, problem.feats[i])
    vol = _block_volume(out, grid.nz, blk.padded_shape)
    full = np.zeros((2, grid.nz) + grid.lateral_shape)
    sx, sy = blk.padded_slices
    full[..., sx, sy] = vol * blk.feather
    pred = optics.apply_forward(stack, full)
    vx, vy = blk.view_slices
    terms, g_meas, g_vol = volume_loss(vol, pred[:, vx, vy], target, weights, denoiser)
    g_full = np.zeros_like(pred)
    g_full[:, vx, vy] = g_meas
    g_vol += optics.apply_adjoint(stack, g_full)[..., sx, sy] * blk.feather
    dout = g_vol.reshape(2, -1).T
    grads = mlp_backward(nf, cache, dout)
    return terms, grads


def total_loss(nf: NeuralField, grid: Grid3D, stack, y: np.ndarray, weights: LossWeights,
               denoiser: DenoiserHandle | None):
    """Full-volume loss terms (no gradient)."""
    vol = render_volume(nf, grid)
    pred = optics.apply_forward(stack, vol)
    terms, _, _ = volume_loss(vol, pred, y, weights, denoiser, with_grad=False)
    return terms


def loss_gradient(nf: NeuralField, grid: Grid3D, stack, y: np.ndarray, weights: LossWeights,
                  denoiser: DenoiserHandle | None, problem: BlockProblem | None = None):
    """Full-volume loss and weight gradients: ``(terms, grads)``."""
    problem = problem or BlockProblem.build(nf, partition_blocks(grid, 1, 0))
    return block_loss_and_grad(nf, problem, 0, stack, y, weights, denoiser)


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    field: NeuralField
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    psi: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in self.field.params()]
            self.v = [np.zeros_like(p) for p in self.field.params()]
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


def _log_entry(state: TrainState, problem: BlockProblem, stack, y: np.ndarray, terms: dict | None,
               refresh_psi: bool, weights: LossWeights, denoiser) -> dict:
    """Log record; ``terms`` are the last block loss, or the full-volume loss before training."""
    part = problem.partition
    vol = render_volume(state.field, part.grid)
    y_pred = optics.apply_forward(stack, vol)
    norm = max(float(np.linalg.norm(y_pred)), 1e-300)
    entry = {"iter": state.step, "lr": state.schedule.lr(state.step),
             "mae": float(np.mean(np.abs(y_pred - y)))}
    if terms is None:
        terms, _, _ = volume_loss(vol, y_pred, y, weights, denoiser, with_grad=False)
    entry.update(terms)
    if part.n_blocks > 1:
        stale = assembled_measurement(state.psi, part, y.shape[0])
        entry["psi_stale_residual"] = float(np.linalg.norm(stale - y_pred)) / norm
        if refresh_psi:
            for j, blk in enumerate(part.blocks):
                sx, sy = blk.padded_slices
                state.psi[j] = block_partial(stack, part, j, vol[..., sx, sy])
            fresh = assembled_measurement(state.psi, part, y.shape[0])
            entry["psi_residual"] = float(np.linalg.norm(fresh - y_pred)) / norm
    return entry


def blockwise_adam_train(state: TrainState, partition: BlockPartition, stack, y: np.ndarray,
                         weights: LossWeights, denoiser: DenoiserHandle | None, iters: int,
                         log_every: int = 100, refresh_psi: bool = True,
                         callback: Callable[[dict], None] | None = None) -> TrainState:
    """Block-wise Adam: pick a block, separate its measurement, step, re-predict it.

    Every ``log_every`` iterations (and before the first) the full volume is
    rendered to log the measurement MAE and the Psi consistency residuals; with
    ``refresh_psi`` the logged rendering also refreshes every Psi entry.
    """
    nf = state.field
    problem = BlockProblem.build(nf, partition)
    y = np.asarray(y, dtype=np.float64)
    if not state.history:
        state.history.append(_log_entry(state, problem, stack, y, None, refresh_psi, weights, denoiser))
        if callback:
            callback(state.history[-1])
    params = nf.params()
    terms = None
    for k in range(iters):
        i = int(state.rng.integers(partition.n_blocks))
        target = measurement_separation(state.psi, y, partition, i)
        terms, grads = block_loss_and_grad(nf, problem, i, stack, target, weights, denoiser)
        if not math.isfinite(terms["total"]):
            raise DivergenceError(f"non-finite loss at iteration {state.step} (block {i}): {terms}")
        state.step += 1
        adam_update(params, grads, state.m, state.v, state.step, state.schedule.lr(state.step - 1))
        nf.touch()
        if partition.n_blocks > 1:
            out, _ = mlp_forward(nf, problem.feats[i], keep_cache=False)
            vol_i = _block_volume(out, partition.grid.nz, partition.blocks[i].padded_shape)
            state.psi[i] = block_partial(stack, partition, i, vol_i)
        if state.step % log_every == 0 or k == iters - 1:
            entry = _log_entry(state, problem, stack, y, terms, refresh_psi, weights, denoiser)
            state.history.append(entry)
            log.info("iter %d total %.4g mae %.4g", state.step, terms["total"], entry["mae"])
            if callback:
                callback(entry)
    return state


# ---------------------------------------------------------------- ablation

VARIANTS = ("full", "AC", "NR", "Noreg")


def variant_weights(variant: Literal["full", "AC", "NR", "Noreg"], base: LossWeights) -> LossWeights:
    """full keeps both regularizers, AC drops noise reduction, NR drops axial continuity."""
    if variant == "full":
        return LossWeights(base.alpha, base.beta, base.charbonnier_eps)
    if variant == "AC":
        return LossWeights(0.0, base.beta, base.charbonnier_eps)
    if variant == "NR":
        return LossWeights(base.alpha, 0.0, base.charbonnier_eps)
    if variant == "Noreg":
        return LossWeights(0.0, 0.0, base.charbonnier_eps)
    raise ValueError(f"unknown ablation variant {variant!r}")
