"""Denoiser contract and closed-form analytic denoisers.

Every analytic denoiser here predicts the exact noise ``eps`` for a Gaussian
(or Gaussian-mixture) prior on the clean latent, so samplers built on top of
them can be checked against closed-form answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from objcomposer.schedule import NoiseSchedule
from objcomposer.text import DETERMINERS, tokenize

BACKGROUND, OBJECT, NULL = "background", "object", "null"


@dataclass(frozen=True, eq=False)
class Conditioning:
    """What a denoiser is conditioned on.

    Use the constructors :meth:`background`, :meth:`object` and :meth:`null`
    rather than building one by hand. Reference images are represented by an
    opaque ``embedding`` vector.
    """

    kind: str
    prompt: str | None = None
    embedding: np.ndarray | None = None
    class_phrase: str | None = None

    def __post_init__(self):
        if self.kind not in (BACKGROUND, OBJECT, NULL):
            raise ValueError(f"unknown conditioning kind {self.kind!r}")
        if self.embedding is not None:
            emb = np.array(self.embedding, dtype=np.float64).reshape(-1)
            emb.setflags(write=False)
            object.__setattr__(self, "embedding", emb)
        if self.kind == BACKGROUND and self.prompt is None:
            raise ValueError("background conditioning needs a prompt")
        if self.kind == OBJECT and (self.embedding is None or not self.class_phrase):
            raise ValueError("object conditioning needs an embedding and a class phrase")
        if self.kind == NULL and self.embedding is None:
            raise ValueError("null conditioning needs an embedding")

    @classmethod
    def background(cls, prompt: str) -> "Conditioning":
        return cls(BACKGROUND, prompt=prompt)

    @classmethod
    def object(cls, embedding, class_phrase: str) -> "Conditioning":
        return cls(OBJECT, embedding=embedding, class_phrase=class_phrase)

    @classmethod
    def null(cls, embedding) -> "Conditioning":
        return cls(NULL, embedding=embedding)

    @property
    def embedding_dim(self) -> int | None:
        return None if self.embedding is None else self.embedding.shape[0]

    @property
    def tokens(self) -> list[str]:
        if self.kind == BACKGROUND:
            return tokenize(self.prompt)
        if self.kind == OBJECT:
            return tokenize(self.class_phrase)
        return []


@dataclass
class DenoiserOutput:
    eps: np.ndarray
    attention: np.ndarray | None = None  # (tokens, H_a, W_a), non-negative


class Denoiser(Protocol):
    embedding_dim: int

    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> DenoiserOutput: ...


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance ``eps_uncond + w * (eps_cond - eps_uncond)``.

    Evaluated as ``(1 - w) * eps_uncond + w * eps_cond`` so that ``w = 1`` and
    ``w = 0`` return the respective branch exactly.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {eps_uncond.shape} vs {eps_cond.shape}")
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    return (1.0 - w) * eps_uncond + w * eps_cond


def pattern_eps(z_t: np.ndarray, a_t: float, target: np.ndarray, prior_var: float) -> np.ndarray:
    """Exact noise prediction for the prior ``z_0 ~ N(target, prior_var * I)``."""
    return np.sqrt(1.0 - a_t) * (z_t - np.sqrt(a_t) * target) / (a_t * prior_var + 1.0 - a_t)


@dataclass(frozen=True, eq=False)
class NullReadout:
    """Linear effect of the null embedding: ``eps += B @ (embedding - base)``.

    At ``embedding == base`` the analytic prediction is returned unchanged.
    """

    matrix: np.ndarray  # (latent size, embedding_dim)
    base: np.ndarray

    @classmethod
    def seeded(cls, latent_shape: Sequence[int], embedding_dim: int, seed: int,
               scale: float = 0.5, base: np.ndarray | None = None) -> "NullReadout":
        size = int(np.prod(latent_shape))
        rng = np.random.default_rng(seed)
        # columns have norm ~scale regardless of latent size
        matrix = rng.standard_normal((size, embedding_dim)) * (scale / np.sqrt(size))
        if base is None:
            base = np.zeros(embedding_dim)
        return cls(matrix, np.asarray(base, dtype=np.float64))

    def apply(self, eps: np.ndarray, embedding: np.ndarray) -> np.ndarray:
        if embedding.shape != self.base.shape:
            raise ValueError(f"null embedding has dim {embedding.shape[0]}, expected {self.base.shape[0]}")
        return eps + (self.matrix @ (embedding - self.base)).reshape(eps.shape)


class AnalyticDenoiser:
    """Shared plumbing: schedule lookup, shape checks, null read-out."""

    def __init__(self, schedule: NoiseSchedule, shape: tuple[int, ...], embedding_dim: int = 8,
                 null_readout: NullReadout | None = None):
        self.schedule = schedule
        self.shape = tuple(shape)
        self.embedding_dim = embedding_dim
        self.null_readout = null_readout

    def _analytic_eps(self, z_t: np.ndarray, a_t: float, cond: Conditioning) -> np.ndarray:
        raise NotImplementedError

    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> DenoiserOutput:
        if z_t.shape != self.shape:
            raise ValueError(f"shape mismatch: latent {z_t.shape} vs denoiser {self.shape}")
        if not 0 <= t <= self.schedule.total_steps:
            raise ValueError(f"timestep {t} outside schedule range")
        eps = self._analytic_eps(z_t, float(self.schedule.alpha_bar[t]), cond)
        if cond.kind == NULL and self.null_readout is not None:
            eps = self.null_readout.apply(eps, cond.embedding)
        return DenoiserOutput(eps)


class PatternDenoiser(AnalyticDenoiser):
    """Exact denoiser for a Gaussian prior around one target grid.

    ``null_target`` is the prior mean used for the unconditional branch and
    defaults to ``target``.
    """

    def __init__(self, target: np.ndarray, prior_var: float, schedule: NoiseSchedule,
                 embedding_dim: int = 8, null_readout: NullReadout | None = None,
                 null_target: np.ndarray | None = None):
        if prior_var < 0:
            raise ValueError("prior variance must be non-negative")
        target = np.asarray(target, dtype=np.float64)
        if null_target is not None and np.shape(null_target) != target.shape:
            raise ValueError("null_target shape must match target")
        super().__init__(schedule, target.shape, embedding_dim, null_readout)
        self.target = target
        self.prior_var = float(prior_var)
        self.null_target = target if null_target is None else np.asarray(null_target, dtype=np.float64)

    def _analytic_eps(self, z_t, a_t, cond):
        target = self.null_target if cond.kind == NULL else self.target
        return pattern_eps(z_t, a_t, target, self.prior_var)


@dataclass(frozen=True, eq=False)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    var: float
    label: str | None = None


def _phrase_key(text: str) -> tuple[str, ...]:
    return tuple(tok for tok in tokenize(text) if tok not in DETERMINERS)


class GMMDenoiser(AnalyticDenoiser):
    """Exact denoiser for an isotropic Gaussian-mixture prior.

    Labelled components make the mixture class-conditional: object conditioning
    keeps components whose label matches the class phrase, background
    conditioning keeps those whose label occurs in the prompt, and unlabelled
    components are always kept. Null conditioning, or a selection that keeps
    nothing, uses the whole mixture.
    """

    def __init__(self, components: Sequence[MixtureComponent], schedule: NoiseSchedule,
                 embedding_dim: int = 8, null_readout: NullReadout | None = None):
        if not components:
            raise ValueError("empty component list")
        shape = np.shape(components[0].mean)
        for c in components:
            if np.shape(c.mean) != shape:
                raise ValueError("mismatched component shapes")
            if c.weight <= 0 or c.var < 0:
                raise ValueError("component weights must be positive and variances non-negative")
        total = sum(c.weight for c in components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1")
        super().__init__(schedule, shape, embedding_dim, null_readout)
        self.components = list(components)

    def select(self, cond: Conditioning) -> list[MixtureComponent]:
        if cond.kind == NULL:
            return self.components
        if cond.kind == OBJECT:
            key = _phrase_key(cond.class_phrase)
            keep = lambda label: _phrase_key(label) == key
        else:
            prompt = " ".join(_phrase_key(cond.prompt))
            keep = lambda label: f" {' '.join(_phrase_key(label))} " in f" {prompt} "
        chosen = [c for c in self.components if c.label is None or keep(c.label)]
        return chosen or self.components

    def responsibilities(self, z_t: np.ndarray, a_t: float, comps: Sequence[MixtureComponent]) -> np.ndarray:
        d = z_t.size
        logits = []
        for c in comps:
            v = a_t * c.var + 1.0 - a_t
            r2 = np.sum((z_t - np.sqrt(a_t) * c.mean) ** 2)
            logits.append(np.log(c.weight) - 0.5 * r2 / v - 0.5 * d * np.log(2 * np.pi * v))
        logits = np.array(logits)
        logits -= logits.max()
        r = np.exp(logits)
        return r / r.sum()

    def _analytic_eps(self, z_t, a_t, cond):
        comps = self.select(cond)
        if len(comps) == 1:
            c = comps[0]
            return pattern_eps(z_t, a_t, np.asarray(c.mean, dtype=np.float64), c.var)
        r = self.responsibilities(z_t, a_t, comps)
        eps = np.zeros_like(z_t, dtype=np.float64)
        for rk, c in zip(r, comps):
            eps += rk * pattern_eps(z_t, a_t, np.asarray(c.mean, dtype=np.float64), c.var)
        return eps


@dataclass(frozen=True)
class AttentionCenter:
    token: int
    cy: float
    cx: float
    sigma: float


def gaussian_bump(grid: tuple[int, int], cy: float, cx: float, sigma: float) -> np.ndarray:
    """Isotropic Gaussian (std ``sigma``) on the integer grid, scaled to max 1."""
    yy, xx = np.mgrid[: grid[0], : grid[1]]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return bump / bump.max()


@dataclass
class SyntheticAttentionDenoiser:
    """Wraps a denoiser and emits cross-attention maps with known object locations.

    For background (prompt) conditioning, every prompt token gets an
    ``H_a x W_a`` map: configured tokens carry a Gaussian bump, and all maps get
    ``noise * U[0, 1)`` added from a generator seeded by ``(seed, t)``.
    """

    inner: Denoiser
    centers: Sequence[AttentionCenter]
    grid: tuple[int, int] = (16, 16)
    noise: float = 0.0
    seed: int = 0
    _bumps: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        self._bumps = {}
        for c in self.centers:
            if c.sigma <= 0:
                raise ValueError(f"token {c.token}: sigma must be positive")
            if not (0 <= c.cy <= self.grid[0] - 1 and 0 <= c.cx <= self.grid[1] - 1):
                raise ValueError(f"token {c.token}: center ({c.cy}, {c.cx}) out of bounds for grid {self.grid}")
            if c.token < 0:
                raise ValueError("token index must be non-negative")
            bump = gaussian_bump(self.grid, c.cy, c.cx, c.sigma)
            # several centers on one token merge by pointwise max
            self._bumps[c.token] = np.maximum(self._bumps.get(c.token, 0.0), bump)

    @property
    def embedding_dim(self) -> int:
        return self.inner.embedding_dim

    def attention_maps(self, n_tokens: int, t: int) -> np.ndarray:
        if self._bumps and max(self._bumps) >= n_tokens:
            raise ValueError(f"attention token {max(self._bumps)} beyond prompt length {n_tokens}")
        maps = np.zeros((n_tokens, *self.grid))
        for tok, bump in self._bumps.items():
            maps[tok] = bump
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, t])
            maps += self.noise * rng.random(maps.shape)
        return maps

    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> DenoiserOutput:
        out = self.inner.predict(z_t, t, cond)
        if cond.kind != BACKGROUND:
            return out
        return DenoiserOutput(out.eps, self.attention_maps(len(cond.tokens), t))
