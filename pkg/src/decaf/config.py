"""JSON run configuration.

One document holds every module's settings. Unknown keys are rejected at
every level, and :func:`resolve` writes the fully-defaulted document next to
a command's outputs so each run can be replayed from it.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import optics, phantom
from .encoding import EncodingConfig
from .field import MlpConfig
from .phantom import Ellipsoid, NoiseSpec, PhantomSpec
from .tikhonov import TikhonovConfig
from .train import LossWeights, Schedule
from .volume import Grid3D


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GridCfg(_Strict):
    nx: int = Field(64, ge=1)
    ny: int = Field(64, ge=1)
    nz: int = Field(8, ge=1)
    dx: float = Field(0.1625, gt=0)
    dy: float = Field(0.1625, gt=0)
    dz: float = Field(0.5, gt=0)
    z0: float = -1.75

    def build(self) -> Grid3D:
        return Grid3D(self.nx, self.ny, self.nz, self.dx, self.dy, self.dz, self.z0)


class RingCfg(_Strict):
    count: int = Field(24, ge=1)
    angle_deg: float = 40.0
    phase0: float = 0.0


class LedGridCfg(_Strict):
    rows: int = Field(13, ge=1)
    cols: int = Field(13, ge=1)
    pitch: float = Field(1.0, gt=0)
    distance: float = Field(..., gt=0)
    max_na: Optional[float] = None


class SetupCfg(_Strict):
    """Either a named ``preset`` or an explicit description of the LEDs.

    Explicit LEDs come from ``leds`` (lateral wave vectors, rad/um), ``ring``
    or ``grid``; ``groups`` lists source indices per multiplexed pattern.
    """

    preset: Optional[Literal["dense89", "annular24", "multiplexed16x6"]] = "annular24"
    na: float = 0.65
    wavelength: float = 0.515
    n0: float = 1.0
    modality: Optional[Literal["dense", "annular", "multiplexed"]] = None
    angle_deg: float = 40.0
    leds: Optional[list[tuple[float, float]]] = None
    ring: Optional[RingCfg] = None
    grid: Optional[LedGridCfg] = None
    groups: Optional[list[list[int]]] = None
    absorption_sign: Literal["printed", "sum"] = "printed"
    phase_pupil: Literal["u", "u_p"] = "u"

    @model_validator(mode="after")
    def _one_source(self):
        given = [x is not None for x in (self.leds, self.ring, self.grid)]
        if any(given) and "preset" not in self.model_fields_set:
            self.preset = None  # explicit LEDs replace the default preset
        if self.preset is not None and any(given):
            raise ValueError("give either a preset or explicit leds/ring/grid, not both")
        if self.preset is None and sum(given) != 1:
            raise ValueError("without a preset exactly one of leds/ring/grid is required")
        return self

    def build(self) -> optics.OpticalSetup:
        tf = dict(absorption_sign=self.absorption_sign, phase_pupil=self.phase_pupil)
        if self.preset is not None:
            return phantom.make_setup(self.preset, self.wavelength, self.na, self.n0, self.angle_deg, **tf)
        if self.leds is not None:
            sources = [optics.IlluminationSource(tuple(u), self.wavelength) for u in self.leds]
        elif self.ring is not None:
            sources = optics.ring_sources(self.ring.count, self.ring.angle_deg, self.wavelength, self.n0,
                                          self.ring.phase0)
        else:
            g = self.grid
            sources = optics.grid_sources(g.rows, g.cols, g.pitch, g.distance, self.wavelength, self.n0, g.max_na)
        modality = self.modality or ("multiplexed" if self.groups else "annular")
        if self.groups is not None:
            sources = optics.with_groups(sources, self.groups)
        return optics.OpticalSetup(self.na, self.wavelength, self.n0, sources, modality, **tf)


class CellCfg(_Strict):
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    re: float
    im: float = 0.0
    softness: float = 0.0


class PhantomCfg(_Strict):
    seed: int = 0
    n_cells: Optional[int] = Field(None, ge=0)
    peak: float = phantom.PAPER_DEPS_RE
    cells: Optional[list[CellCfg]] = None

    def build(self, grid: Grid3D) -> PhantomSpec:
        if self.cells is not None:
            return PhantomSpec(grid, [Ellipsoid(**c.model_dump()) for c in self.cells], self.seed)
        return phantom.desk_phantom_spec(grid, self.seed, self.n_cells, self.peak)


class NoiseCfg(_Strict):
    kind: Literal["none", "gaussian"] = "none"
    std: float = Field(0.0, ge=0)
    seed: int = 0

    def build(self) -> NoiseSpec:
        return NoiseSpec(self.kind, self.std, self.seed)


class EncodingCfg(_Strict):
    kind: Literal["radial", "positional", "gaussian"] = "radial"
    l_xy: int = Field(4, ge=1)
    thetas: list[float] = [0.0, math.pi / 4]
    l_z: int = Field(4, ge=1)
    gaussian_rows: int = Field(64, ge=1)
    seed: int = 0

    def build(self) -> EncodingConfig:
        return EncodingConfig(self.kind, self.l_xy, tuple(self.thetas), self.l_z, self.gaussian_rows, self.seed)


class MlpCfg(_Strict):
    n_layers: int = Field(6, ge=3)
    width: int = Field(64, ge=2)
    leaky_slope: float = Field(0.01, gt=0, lt=1)
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"

    def build(self) -> MlpConfig:
        return MlpConfig(self.n_layers, self.width, self.leaky_slope, 2, self.seed, self.dtype)


class LossCfg(_Strict):
    alpha: float = Field(30.0, ge=0)
    beta: float = Field(30.0, ge=0)
    charbonnier_eps: float = Field(1e-6, gt=0)

    def build(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.charbonnier_eps)


class PartitionCfg(_Strict):
    blocks: int = Field(1, ge=1)
    padding: int = Field(4, ge=0)
    margin: Optional[int] = Field(None, ge=0)


class TrainCfg(_Strict):
    iters: int = Field(1000, ge=0)
    lr0: float = Field(1e-3, gt=0)
    decay: float = Field(0.1, gt=0)
    period: Optional[int] = Field(None, ge=1)
    log_every: int = Field(100, ge=1)
    seed: int = 0
    refresh_psi: bool = True

    def schedule(self) -> Schedule:
        return Schedule(self.lr0, self.decay, self.period or max(self.iters, 1))


class DenoiserCfg(_Strict):
    kind: Literal["cnn", "gaussian-residual", "identity"] = "gaussian-residual"
    sigma: float = Field(1.0, gt=0)
    weights: Optional[str] = None

    @model_validator(mode="after")
    def _weights(self):
        if self.kind == "cnn" and not self.weights:
            raise ValueError("cnn denoiser needs a DCDN weights path")
        return self


class TikhonovCfg(_Strict):
    tau: Optional[float] = Field(None, gt=0)
    taus: list[float] = [10.0 ** e for e in range(-10, 1)]
    solver: Literal["direct", "cg"] = "direct"

    @field_validator("taus")
    @classmethod
    def _positive(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError("taus must be a non-empty list of positive values")
        return v

    def build(self, tau: float) -> TikhonovConfig:
        return TikhonovConfig(tau=tau, solver=self.solver)


class PathsCfg(_Strict):
    out_dir: str = "out"
    measurements: Optional[str] = None
    reference: Optional[str] = None
    weights: Optional[str] = None


class RunConfig(_Strict):
    grid: GridCfg = GridCfg()
    setup: SetupCfg = SetupCfg()
    phantom: PhantomCfg = PhantomCfg()
    noise: NoiseCfg = NoiseCfg()
    encoding: EncodingCfg = EncodingCfg()
    mlp: MlpCfg = MlpCfg()
    loss: LossCfg = LossCfg()
    partition: PartitionCfg = PartitionCfg()
    train: TrainCfg = TrainCfg()
    denoiser: DenoiserCfg = DenoiserCfg()
    tikhonov: TikhonovCfg = TikhonovCfg()
    paths: PathsCfg = PathsCfg()


def _errors(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())


def parse(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_errors(exc)) from None


def load(path) -> RunConfig:
    """Read and validate a JSON config. Missing files raise ``OSError``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    data = cfg.model_dump()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {} if node.get(p) is None else node[p]
                if not isinstance(node[p], dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = value
    return parse(data)


def resolve(cfg: RunConfig, out_dir) -> Path:
    """Write the fully-defaulted config beside the outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg.model_dump(), indent=2, sort_keys=True))
    return path

