"""End-to-end commands behind the CLI: simulate, reconstruct, tikhonov, render,
evaluate, ablate and denoiser training. Each writes its files into an output
directory together with the resolved run config.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import fileio, optics, train
from .config import ConfigError, RunConfig, resolve
from .denoiser import DenoiserHandle, DncnnLiteConfig, level_to_std, make_texture_dataset, train_dncnn
from .field import NeuralField, render_volume
from .phantom import make_phantom, simulate_measurements
from .tikhonov import tau_sweep, tikhonov_reconstruct
from .volume import Grid3D, IdenticalInputsError, PermittivityVolume, compare, permittivity_to_ri

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "term1", "term2", "term3", "total", "MAE", "lr")


class ShapeMismatchError(ValueError):
    """Input arrays or files disagree in dimensions."""


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def ri_contrast(vol: PermittivityVolume, n0: float) -> np.ndarray:
    """Real refractive-index contrast ``n_re - n0``, the quantity scored by PSNR."""
    return permittivity_to_ri(vol, n0).n_re - n0


def build_problem(cfg: RunConfig):
    grid = cfg.grid.build()
    setup = cfg.setup.build()
    return grid, setup, optics.build_tf_stack(setup, grid)


def load_denoiser(cfg: RunConfig) -> DenoiserHandle:
    d = cfg.denoiser
    if d.kind == "cnn":
        return fileio.read_denoiser(d.weights)
    return DenoiserHandle(d.kind, d.sigma)


def _measurements(cfg: RunConfig, grid: Grid3D, stack, measurements=None) -> np.ndarray:
    """Measurements from an in-memory array, a DCAM path, or (neither given) a fresh simulation."""
    if isinstance(measurements, np.ndarray):
        y = measurements
    else:
        path = measurements or cfg.paths.measurements
        if path is None:
            vol = make_phantom(cfg.phantom.build(grid))
            return simulate_measurements(vol, None, cfg.noise.build(), stack).images
        y = fileio.read_measurements(path).images
    expected = (stack.n_measurements,) + grid.lateral_shape
    if y.shape != expected:
        raise ShapeMismatchError(f"measurements {y.shape} do not match setup/grid {expected}")
    return y


def _reference(cfg: RunConfig, grid: Grid3D, reference=None) -> PermittivityVolume:
    path = reference or cfg.paths.reference
    vol = fileio.read_volume(path) if path else make_phantom(cfg.phantom.build(grid))
    if vol.grid.shape != grid.shape:
        raise ShapeMismatchError(f"reference {vol.grid.shape} does not match grid {grid.shape}")
    return vol


# ---------------------------------------------------------------- simulate

def simulate(cfg: RunConfig, out_dir) -> dict:
    out = _out(out_dir)
    grid, setup, stack = build_problem(cfg)
    vol = make_phantom(cfg.phantom.build(grid))
    meas = simulate_measurements(vol, setup, cfg.noise.build(), stack)
    files = {"phantom": out / "phantom.dcaf", "measurements": out / "measurements.dcam"}
    fileio.write_volume(files["phantom"], vol)
    fileio.write_measurements(files["measurements"], meas)
    resolve(cfg, out)
    log.info("simulated %d images of %dx%d", *meas.images.shape)
    return {k: str(v) for k, v in files.items()}


# ---------------------------------------------------------------- reconstruct

def write_log(path, history: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for e in history:
            w.writerow([e["iter"], *(repr(float(e[k])) for k in ("term1", "term2", "term3", "total", "mae", "lr"))])
    return path


def train_field(cfg: RunConfig, grid: Grid3D, stack, y: np.ndarray, weights=None, callback=None):
    """Train a neural field from ``cfg``; returns the final :class:`train.TrainState`."""
    nf = NeuralField.init(cfg.encoding.build(), cfg.mlp.build())
    p = cfg.partition
    part = train.partition_blocks(grid, p.blocks, p.padding, p.margin)
    state = train.TrainState(nf, cfg.train.schedule(), seed=cfg.train.seed)
    return train.blockwise_adam_train(state, part, stack, y, weights or cfg.loss.build(), load_denoiser(cfg),
                                      cfg.train.iters, cfg.train.log_every, cfg.train.refresh_psi, callback)


def reconstruct(cfg: RunConfig, out_dir, measurements=None, callback=None) -> dict:
    """Train, save weights, and render the volume from the saved float32 weights."""
    out = _out(out_dir)
    grid, _, stack = build_problem(cfg)
    y = _measurements(cfg, grid, stack, measurements)
    t0 = time.perf_counter()
    state = train_field(cfg, grid, stack, y, callback=callback)
    files = {"weights": out / "weights.dcfw", "volume": out / "volume.dcaf", "log": out / "train_log.csv"}
    meta = {"grid": grid.to_dict(), "loss": cfg.loss.model_dump(), "denoiser": load_denoiser(cfg).describe(),
            "iters": state.step, "seconds": time.perf_counter() - t0}
    meta["denoiser"].pop("loss_history", None)
    fileio.write_weights(files["weights"], state.field, meta)
    nf, _ = fileio.read_weights(files["weights"])
    vol = render_volume(nf, grid)
    fileio.write_volume(files["volume"], PermittivityVolume(grid, vol[0], vol[1]))
    write_log(files["log"], state.history)
    resolve(cfg, out)
    return {**{k: str(v) for k, v in files.items()}, "final_mae": state.history[-1]["mae"]}


# ---------------------------------------------------------------- tikhonov

def tikhonov(cfg: RunConfig, out_dir, tau: float | None = None, measurements=None) -> dict:
    """Fixed ``tau`` if given (argument or config); otherwise sweep ``tikhonov.taus``
    against the reference volume and keep the best PSNR."""
    out = _out(out_dir)
    grid, setup, stack = build_problem(cfg)
    y = _measurements(cfg, grid, stack, measurements)
    tau = tau if tau is not None else cfg.tikhonov.tau
    result = {}
    if tau is None:
        ref = ri_contrast(_reference(cfg, grid), setup.n0)
        tau, vol, rows = tau_sweep(stack, y, ref, cfg.tikhonov.taus,
                                   score=lambda v: _psnr_or_inf(ref, ri_contrast(v, setup.n0)))
        result["sweep"] = [{"tau": t, "psnr_db": s} for t, s in rows]
    else:
        vol = tikhonov_reconstruct(stack, y, cfg.tikhonov.build(tau))
    path = out / "tikhonov.dcaf"
    fileio.write_volume(path, vol)
    result.update(tau=tau, volume=str(path))
    (out / "tikhonov.json").write_text(json.dumps(result, indent=2))
    resolve(cfg, out)
    return result


def _psnr_or_inf(ref, est) -> float:
    try:
        return compare(ref, est).psnr_db
    except IdenticalInputsError:
        return float("inf")


# ---------------------------------------------------------------- render

def parse_upsample(text: str) -> tuple[int, int, int]:
    try:
        f = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        f = ()
    if len(f) != 3 or min(f) < 1:
        raise ConfigError(f"upsample must look like 2x2x4, got {text!r}")
    return f


def render(weights_path, grid: Grid3D, out_path, upsample=(1, 1, 1)) -> dict:
    """Render stored weights on ``grid`` refined by ``upsample``; no measurements needed."""
    nf, _ = fileio.read_weights(weights_path)
    fine = grid.refined(*upsample)
    vol = render_volume(nf, fine)
    size = fileio.write_volume(out_path, PermittivityVolume(fine, vol[0], vol[1]))
    return {"volume": str(out_path), "shape": list(fine.shape), "bytes": size}


# ---------------------------------------------------------------- evaluate

def evaluate(reference_path, estimate_path, n0: float, out_path=None) -> dict:
    """PSNR/MSE/MAE of the RI contrast ``n_re - n0`` (and of ``d_eps_re``)."""
    ref = fileio.read_volume(reference_path)
    est = fileio.read_volume(estimate_path)
    if ref.grid.shape != est.grid.shape:
        raise ShapeMismatchError(f"reference {ref.grid.shape} and estimate {est.grid.shape} differ")
    result = {"reference": str(reference_path), "estimate": str(estimate_path), "n0": n0}
    try:
        result["ri"] = compare(ri_contrast(ref, n0), ri_contrast(est, n0)).to_dict()
        result["permittivity_re"] = compare(ref.re, est.re).to_dict()
    except IdenticalInputsError:
        result["identical_inputs"] = True
    if out_path:
        Path(out_path).write_text(json.dumps(result, indent=2))
    return result


# ---------------------------------------------------------------- ablate

def ablate(cfg: RunConfig, out_dir, variants=train.VARIANTS, measurements=None, tikhonov_result=None) -> dict:
    """Train every ablation variant with identical seeds; report PSNR against the
    reference next to the best-tau Tikhonov baseline."""
    out = _out(out_dir)
    grid, setup, stack = build_problem(cfg)
    y = _measurements(cfg, grid, stack, measurements)
    ref = ri_contrast(_reference(cfg, grid), setup.n0)
    if tikhonov_result is None:
        best_tau, tik_vol, _ = tau_sweep(stack, y, ref, cfg.tikhonov.taus,
                                         score=lambda v: _psnr_or_inf(ref, ri_contrast(v, setup.n0)))
        tikhonov_result = {"tau": best_tau, **compare(ref, ri_contrast(tik_vol, setup.n0)).to_dict()}
    rows = []
    base = cfg.loss.build()
    for variant in variants:
        w = train.variant_weights(variant, base)
        t0 = time.perf_counter()
        state = train_field(cfg, grid, stack, y, weights=w)
        vol = render_volume(state.field, grid)
        est = ri_contrast(PermittivityVolume(grid, vol[0], vol[1]), setup.n0)
        m = compare(ref, est)
        rows.append({"variant": variant, "alpha": w.alpha, "beta": w.beta, **m.to_dict(),
                     "final_mae": state.history[-1]["mae"], "seconds": time.perf_counter() - t0})
        log.info("ablation %s: PSNR %.2f dB", variant, m.psnr_db)
    table = {"tikhonov": tikhonov_result, "variants": rows}
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    (out / "ablation.md").write_text(format_table(table))
    resolve(cfg, out)
    return table


def format_table(table: dict) -> str:
    lines = ["| method | alpha | beta | PSNR (dB) | MSE |", "|---|---|---|---|---|"]
    t = table["tikhonov"]
    lines.append(f"| Tikhonov (tau={t['tau']:.0e}) | - | - | {t['psnr_db']:.2f} | {t['mse']:.3e} |")
    names = {"full": "DeCAF", "AC": "DeCAF-AC", "NR": "DeCAF-NR", "Noreg": "DeCAF-Noreg"}
    for r in table["variants"]:
        lines.append(f"| {names.get(r['variant'], r['variant'])} | {r['alpha']:g} | {r['beta']:g} | "
                     f"{r['psnr_db']:.2f} | {r['mse']:.3e} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- denoiser

def denoiser_train(sigma: float, seed: int, out_path, count: int = 64, size: int = 64,
                   epochs: int = 30, channels: int = 16) -> dict:
    """Train DnCNN-lite on procedural textures at noise level ``sigma`` (0-255 scale)."""
    std = level_to_std(sigma)
    data = make_texture_dataset(count, size, seed, std)
    handle = train_dncnn(DncnnLiteConfig(channels=channels), data, sigma, seed, epochs=epochs)
    size_b = fileio.write_denoiser(out_path, handle)
    return {"weights": str(out_path), "bytes": size_b, "final_loss": handle.meta["loss_history"][-1]}
