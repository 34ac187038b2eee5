"""The composition loop: per-object and background DDIM updates merged under masks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from objcomposer.attnmask import make_masks
from objcomposer.denoise import Conditioning, Denoiser, cfg_combine
from objcomposer.errors import PipelineError
from objcomposer.invert import InversionTrajectory
from objcomposer.schedule import NoiseSchedule, ddim_step


@dataclass(eq=False)
class ObjectSpec:
    """One reference object: an opaque subject embedding plus its class phrase."""

    subject_embedding: np.ndarray
    class_phrase: str
    denoiser_id: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.class_phrase or not self.class_phrase.strip():
            raise ValueError("class phrase must be non-empty")
        self.subject_embedding = np.asarray(self.subject_embedding, dtype=np.float64).reshape(-1)
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(np.uint8)
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")

    @property
    def conditioning(self) -> Conditioning:
        return Conditioning.object(self.subject_embedding, self.class_phrase)


@dataclass(eq=False)
class SceneRequest:
    """``init`` is either ``"noise"`` or an :class:`InversionTrajectory` to start from."""

    prompt: str
    objects: list[ObjectSpec]
    background_id: str
    guidance_scale: float = 7.5
    seed: int = 0
    init: str | InversionTrajectory = "noise"
    null_embedding: np.ndarray | None = None
    bins: int = 256

    def __post_init__(self):
        ids = [o.denoiser_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("each object needs its own denoiser binding")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")
        if isinstance(self.init, str) and self.init != "noise":
            raise ValueError(f"unknown init {self.init!r}")


def blend(object_latents: Sequence[np.ndarray], masks: Sequence[np.ndarray],
          background_latent: np.ndarray) -> np.ndarray:
    """Pixel-wise average of the object latents whose mask claims the pixel.

    Unclaimed pixels keep the background latent. Masks are ``(H, W)`` and
    apply to every channel.
    """
    if len(object_latents) != len(masks):
        raise ValueError(f"{len(object_latents)} latents but {len(masks)} masks")
    out = np.array(background_latent, dtype=np.float64, copy=True)
    if not object_latents:
        return out
    spatial = out.shape[-2:]
    for z, m in zip(object_latents, masks):
        if z.shape != out.shape or m.shape != spatial:
            raise ValueError(f"shape mismatch: latent {z.shape}, mask {m.shape}, background {out.shape}")
    m = np.stack([np.asarray(mk, dtype=bool) for mk in masks])
    count = m.sum(axis=0)
    claimed = count > 0
    vals = np.stack(object_latents)
    mm = np.broadcast_to(m[:, None], vals.shape)
    # offset from the smallest claiming value: exact when all claimants agree;
    # sorting makes the sum independent of object order
    lo = np.where(mm, vals, np.inf).min(axis=0)
    diffs = np.sort(np.where(mm, vals - lo, 0.0), axis=0).sum(axis=0)
    out[:, claimed] = lo[:, claimed] + diffs[:, claimed] / count[claimed]
    return out


def _guided_update(denoiser: Denoiser, z_t, t, t_prev, cond, null_emb, w, s):
    eps_c = denoiser.predict(z_t, t, cond).eps
    eps_u = denoiser.predict(z_t, t, Conditioning.null(null_emb)).eps
    return ddim_step(z_t, cfg_combine(eps_u, eps_c, w), t, t_prev, s)


def compose_step(z_t: np.ndarray, t: int, t_prev: int, req: SceneRequest, masks: Sequence[np.ndarray],
                 denoisers: Mapping[str, Denoiser], s: NoiseSchedule,
                 null_embed: np.ndarray | None = None) -> np.ndarray:
    """One composed DDIM step: n object updates plus a background update, then :func:`blend`.

    All updates read the same ``z_t``. ``null_embed`` overrides the background
    branch's unconditional embedding (null-text inversion output).
    """
    w = req.guidance_scale
    bg = denoisers[req.background_id]
    default_null = req.null_embedding if req.null_embedding is not None else np.zeros(bg.embedding_dim)
    bg_null = default_null if null_embed is None else null_embed
    try:
        z_bg = _guided_update(bg, z_t, t, t_prev, Conditioning.background(req.prompt), bg_null, w, s)
    except (ValueError, ArithmeticError) as exc:
        raise PipelineError(f"background t={t}", str(exc)) from exc

    z_objs = []
    for i, obj in enumerate(req.objects):
        den = denoisers[obj.denoiser_id]
        null = default_null if den.embedding_dim == len(default_null) else np.zeros(den.embedding_dim)
        try:
            z_objs.append(_guided_update(den, z_t, t, t_prev, obj.conditioning, null, w, s))
        except (ValueError, ArithmeticError) as exc:
            raise PipelineError(f"object {i} t={t}", str(exc)) from exc
    return blend(z_objs, masks, z_bg)


def latent_checksum(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype="<f8").tobytes()).hexdigest()


def request_hash(req: SceneRequest, s: NoiseSchedule) -> str:
    doc = {
        "prompt": req.prompt,
        "objects": [{"class": o.class_phrase, "denoiser": o.denoiser_id,
                     "embedding": latent_checksum(o.subject_embedding),
                     "mask": None if o.mask is None else latent_checksum(o.mask.astype(np.float64))}
                    for o in req.objects],
        "background": req.background_id,
        "guidance": req.guidance_scale,
        "seed": req.seed,
        "init": "noise" if isinstance(req.init, str) else latent_checksum(req.init.z_T),
        "schedule": {"T": s.total_steps, "alpha_bar": latent_checksum(s.alpha_bar),
                     "steps": list(s.inference_steps)},
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def initial_latent(req: SceneRequest, shape: tuple[int, ...]) -> np.ndarray:
    if isinstance(req.init, InversionTrajectory):
        return np.array(req.init.z_T, dtype=np.float64)
    return np.random.default_rng(req.seed).standard_normal(shape)


@dataclass
class CompositionResult:
    latent: np.ndarray
    manifest: dict
    masks: list[np.ndarray] = field(default_factory=list)


def resolve_masks(req: SceneRequest, shape: tuple[int, ...]) -> tuple[list[np.ndarray], list[str]]:
    """Masks for every object plus their provenance (``"user"`` or ``"attention"``)."""
    rec = req.init.attention if isinstance(req.init, InversionTrajectory) else None
    masks = make_masks(rec, req.objects, req.prompt, shape[-2], shape[-1], req.bins)
    return masks, ["user" if o.mask is not None else "attention" for o in req.objects]


def generate(req: SceneRequest, s: NoiseSchedule, denoisers: Mapping[str, Denoiser],
             shape: tuple[int, ...] | None = None,
             null_embeddings: np.ndarray | None = None) -> CompositionResult:
    """Run the full composition loop.

    Starts from seeded Gaussian noise or from the inverted latent, and uses the
    trajectory's per-step null embeddings for the background branch when
    starting from an inversion. The manifest is deterministic for a fixed
    request (no timings).
    """
    missing = [d for d in [req.background_id, *(o.denoiser_id for o in req.objects)] if d not in denoisers]
    if missing:
        raise PipelineError("bind", f"unbound denoiser(s): {', '.join(missing)}")
    if shape is None:
        if isinstance(req.init, InversionTrajectory):
            shape = req.init.z_T.shape
        else:
            shape = getattr(denoisers[req.background_id], "shape", None)
            if shape is None:
                raise PipelineError("init", "latent shape unknown")
    if not s.inference_steps:
        raise PipelineError("schedule", "no inference steps")

    masks, provenance = resolve_masks(req, shape)
    if null_embeddings is None and isinstance(req.init, InversionTrajectory):
        null_embeddings = req.init.null_embeddings
    if null_embeddings is not None and len(null_embeddings) != s.n_inference:
        raise PipelineError("init", f"{len(null_embeddings)} null embeddings for {s.n_inference} steps")

    z = initial_latent(req, shape)
    checksums = [latent_checksum(z)]
    for i, (t, t_prev) in enumerate(s.step_pairs()):
        null = None if null_embeddings is None else null_embeddings[i]
        z = compose_step(z, t, t_prev, req, masks, denoisers, s, null)
        if not np.all(np.isfinite(z)):
            raise PipelineError(f"compose step {i}", "non-finite latent")
        checksums.append(latent_checksum(z))

    manifest = {
        "request_hash": request_hash(req, s),
        "seed": req.seed,
        "init": "noise" if isinstance(req.init, str) else "inverted",
        "n_objects": len(req.objects),
        "mask_provenance": provenance,
        "mask_checksums": [latent_checksum(m.astype(np.float64)) for m in masks],
        "step_checksums": checksums,
        "final_checksum": checksums[-1],
    }
    return CompositionResult(z, manifest, masks)
