"""Scene configuration file: schema, loading and construction of pipeline objects.

Relative paths inside a config resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from objcomposer import io
from objcomposer.compose import ObjectSpec, SceneRequest
from objcomposer.denoise import (AttentionCenter, GMMDenoiser, MixtureComponent, NullReadout,
                                 PatternDenoiser, SyntheticAttentionDenoiser)
from objcomposer.errors import ConfigError
from objcomposer.schedule import NoiseSchedule, make_linear_schedule

_SEED_RE = re.compile(r"^seed:(-?\d+)$")

Vector = Union[list[float], str]
Grid = Union[float, list, str]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ScheduleConfig(_Strict):
    T: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = Field(50, ge=1)
    kind: Literal["linear"] = "linear"


class ObjectConfig(_Strict):
    class_: str = Field(alias="class", min_length=1)
    embedding: Vector = "seed:0"
    denoiser: str
    mask_path: str | None = None

    @field_validator("embedding")
    @classmethod
    def _check_embedding(cls, v):
        if isinstance(v, str) and not _SEED_RE.match(v):
            raise ValueError("embedding must be a list of numbers or 'seed:<int>'")
        return v


class ReadoutConfig(_Strict):
    seed: int = 0
    scale: float = 0.5
    base: Vector | None = None


class CenterConfig(_Strict):
    token: int = Field(ge=0)
    cy: float
    cx: float
    sigma: float = Field(gt=0)


class AttentionConfig(_Strict):
    grid: tuple[int, int] = (16, 16)
    noise: float = Field(0.0, ge=0)
    seed: int = 0
    centers: list[CenterConfig] = []


class ComponentConfig(_Strict):
    weight: float = Field(gt=0)
    target: Grid
    variance: float = Field(ge=0)
    label: str | None = None


class DenoiserConfig(_Strict):
    kind: Literal["pattern", "gmm"]
    target: Grid | None = None
    variance: float = Field(0.01, ge=0)
    null_target: Grid | None = None
    components: list[ComponentConfig] | None = None
    null_readout: ReadoutConfig | None = None
    attention: AttentionConfig | None = None

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "pattern" and self.target is None:
            raise ValueError("pattern denoiser needs a target")
        if self.kind == "gmm" and not self.components:
            raise ValueError("gmm denoiser needs components")
        return self


class InversionConfig(_Strict):
    optimize: bool = True
    inner_steps: int = Field(10, ge=0)
    lr: float = 0.1
    stop_eps: float = 1e-5


class MaskConfig(_Strict):
    bins: int = Field(256, ge=2)


class SceneConfig(_Strict):
    prompt: str
    objects: list[ObjectConfig] = []
    background: str = "background"
    latent_shape: tuple[int, int, int] | None = None
    embedding_dim: int = Field(8, ge=1)
    schedule: ScheduleConfig = ScheduleConfig()
    guidance: float = Field(7.5, ge=0)
    seed: int = 0
    init: str = "noise"
    inversion: InversionConfig = InversionConfig()
    masks: MaskConfig = MaskConfig()
    denoisers: dict[str, DenoiserConfig]
    output_dir: str = "out"

    @field_validator("init")
    @classmethod
    def _check_init(cls, v):
        if v != "noise" and not (v.startswith("invert:") and len(v) > len("invert:")):
            raise ValueError("init must be 'noise' or 'invert:<path>'")
        return v

    @model_validator(mode="after")
    def _check_bindings(self):
        names = [self.background, *(o.denoiser for o in self.objects)]
        unknown = [n for n in names if n not in self.denoisers]
        if unknown:
            raise ValueError(f"unbound denoiser(s): {', '.join(unknown)}")
        if len(set(names[1:])) != len(names) - 1:
            raise ValueError("each object needs its own denoiser binding")
        return self

    @property
    def init_path(self) -> str | None:
        return None if self.init == "noise" else self.init[len("invert:"):]


class LoadedConfig:
    """A validated config plus the directory its relative paths resolve against."""

    def __init__(self, cfg: SceneConfig, base_dir: Path, raw_text: str = ""):
        self.cfg = cfg
        self.base_dir = Path(base_dir)
        self.raw_text = raw_text

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def existing(self, p: str) -> Path:
        q = self.path(p)
        if not q.exists():
            raise ConfigError(f"referenced file not found: {q}")
        return q

    @property
    def config_hash(self) -> str:
        canon = json.dumps(dump_config(self.cfg), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


def parse_config(doc: dict, base_dir: str | Path = ".") -> LoadedConfig:
    try:
        cfg = SceneConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from exc
    return LoadedConfig(cfg, Path(base_dir))


def load_config(path: str | Path) -> LoadedConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    loaded = parse_config(doc, path.parent)
    loaded.raw_text = text
    return loaded


def dump_config(cfg: SceneConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def seeded_vector(spec: Vector, dim: int) -> np.ndarray:
    """Explicit list, or ``"seed:<int>"`` expanded to a standard-normal vector."""
    if isinstance(spec, str):
        m = _SEED_RE.match(spec)
        if not m:
            raise ConfigError(f"bad vector spec {spec!r}")
        return np.random.default_rng(int(m.group(1))).standard_normal(dim)
    vec = np.asarray(spec, dtype=np.float64)
    if vec.shape != (dim,):
        raise ConfigError(f"vector has length {vec.size}, expected {dim}")
    return vec


class Builder:
    """Turns a loaded config into schedule, denoisers and requests."""

    def __init__(self, loaded: LoadedConfig):
        self.loaded = loaded
        self.cfg = loaded.cfg
        self.schedule = self._schedule()
        self.shape = self._latent_shape()

    def _schedule(self) -> NoiseSchedule:
        sc = self.cfg.schedule
        try:
            return make_linear_schedule(sc.T, sc.beta_start, sc.beta_end, sc.steps, kind=sc.kind)
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def _latent_shape(self) -> tuple[int, int, int]:
        if self.cfg.latent_shape is not None:
            return tuple(self.cfg.latent_shape)
        for d in self.cfg.denoisers.values():
            for grid in [d.target, *(c.target for c in d.components or [])]:
                if isinstance(grid, (str, list)):
                    return tuple(self.grid(grid, None).shape)
        raise ConfigError("latent_shape is required when no denoiser target fixes it")

    def grid(self, spec: Grid, shape) -> np.ndarray:
        if isinstance(spec, str):
            arr = np.asarray(io.load_npy(self.loaded.existing(spec)), dtype=np.float64)
        elif isinstance(spec, list):
            arr = np.asarray(spec, dtype=np.float64)
        else:
            return np.full(shape, float(spec))
        if shape is not None and arr.shape != tuple(shape):
            raise ConfigError(f"target grid has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    def denoisers(self) -> dict:
        return {name: self.denoiser(name) for name in self.cfg.denoisers}

    def denoiser(self, name: str):
        d = self.cfg.denoisers[name]
        dim, s, shape = self.cfg.embedding_dim, self.schedule, self.shape
        readout = None
        if d.null_readout is not None:
            r = d.null_readout
            base = None if r.base is None else seeded_vector(r.base, dim)
            readout = NullReadout.seeded(shape, dim, r.seed, r.scale, base)
        try:
            if d.kind == "pattern":
                null_target = None if d.null_target is None else self.grid(d.null_target, shape)
                den = PatternDenoiser(self.grid(d.target, shape), d.variance, s, dim, readout, null_target)
            else:
                comps = [MixtureComponent(c.weight, self.grid(c.target, shape), c.variance, c.label)
                         for c in d.components]
                den = GMMDenoiser(comps, s, dim, readout)
            if d.attention is not None:
                a = d.attention
                centers = [AttentionCenter(c.token, c.cy, c.cx, c.sigma) for c in a.centers]
                den = SyntheticAttentionDenoiser(den, centers, a.grid, a.noise, a.seed)
        except ValueError as exc:
            raise ConfigError(f"denoiser {name!r}: {exc}") from exc
        return den

    def objects(self) -> list[ObjectSpec]:
        out = []
        for o in self.cfg.objects:
            mask = None
            if o.mask_path is not None:
                try:
                    mask = io.read_mask(self.loaded.existing(o.mask_path))
                except ValueError as exc:
                    raise ConfigError(f"mask {o.mask_path}: {exc}") from exc
            out.append(ObjectSpec(seeded_vector(o.embedding, self.cfg.embedding_dim), o.class_,
                                  o.denoiser, mask))
        return out

    def request(self, init="noise") -> SceneRequest:
        return SceneRequest(self.cfg.prompt, self.objects(), self.cfg.background, self.cfg.guidance,
                            self.cfg.seed, init, bins=self.cfg.masks.bins)
