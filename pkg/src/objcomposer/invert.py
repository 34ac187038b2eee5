"""DDIM inversion, null-text optimization and attention capture."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from objcomposer.denoise import Conditioning, Denoiser, cfg_combine
from objcomposer.errors import PipelineError
from objcomposer.schedule import NoiseSchedule, ddim_invert_step, ddim_step

log = logging.getLogger(__name__)


@dataclass
class AttentionRecord:
    """Cross-attention heatmaps stored during inversion.

    ``maps[k, j]`` is the ``H_a x W_a`` map of prompt token ``tokens[j]`` at
    ``timesteps[k]``.
    """

    tokens: list[str]
    maps: np.ndarray
    timesteps: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 4 or self.maps.shape[1] != len(self.tokens):
            raise ValueError(f"attention maps must be (steps, {len(self.tokens)}, H, W), got {self.maps.shape}")
        if not np.all(np.isfinite(self.maps)) or np.any(self.maps < 0):
            raise ValueError("attention maps must be finite and non-negative")

    @classmethod
    def empty(cls, tokens=()) -> "AttentionRecord":
        return cls(list(tokens), np.zeros((0, len(tokens), 1, 1)))

    @property
    def n_steps(self) -> int:
        return self.maps.shape[0]

    @property
    def n_entries(self) -> int:
        return self.maps.shape[0] * self.maps.shape[1]


@dataclass
class InversionTrajectory:
    """Result of inverting one latent.

    ``pivots[k]`` is the latent at ``schedule.ascending()[k]``, so ``pivots[0]``
    is the input and ``pivots[-1]`` the fully noised latent. ``null_embeddings[i]``
    is used by the denoising step at ``schedule.inference_steps[i]``.
    """

    pivots: list[np.ndarray]
    schedule: NoiseSchedule
    guidance_scale: float
    null_embeddings: np.ndarray
    attention: AttentionRecord | None = None
    losses: list[dict] = field(default_factory=list)
    optimized: bool = False

    def __post_init__(self):
        n = self.schedule.n_inference
        if len(self.pivots) != n + 1:
            raise ValueError(f"expected {n + 1} pivots, got {len(self.pivots)}")
        if len({p.shape for p in self.pivots}) != 1:
            raise ValueError("pivots must share one shape")
        self.null_embeddings = np.asarray(self.null_embeddings, dtype=np.float64)
        if self.null_embeddings.ndim != 2 or self.null_embeddings.shape[0] != n:
            raise ValueError(f"expected {n} null embeddings, got {self.null_embeddings.shape}")

    @property
    def z_0(self) -> np.ndarray:
        return self.pivots[0]

    @property
    def z_T(self) -> np.ndarray:
        return self.pivots[-1]

    def target_for_step(self, i: int) -> np.ndarray:
        """Pivot the ``i``-th denoising step should land on."""
        return self.pivots[len(self.pivots) - 2 - i]


def ddim_invert(z_0: np.ndarray, denoiser: Denoiser, cond: Conditioning, s: NoiseSchedule,
                null_init: np.ndarray | None = None) -> InversionTrajectory:
    """Run DDIM backwards from ``z_0`` to the last inference step under ``cond`` (w = 1).

    The noise at each step is predicted from the current (less noisy) latent at
    the destination timestep. Attention emitted by the denoiser is kept.
    """
    if not s.inference_steps:
        raise ValueError("no inference steps")
    z = np.asarray(z_0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("input latent must be finite")
    if null_init is None:
        null_init = np.zeros(denoiser.embedding_dim)
    null_init = np.asarray(null_init, dtype=np.float64)

    ts = s.ascending()
    pivots = [z]
    maps, map_steps = [], []
    for t_prev, t in zip(ts, ts[1:]):
        out = denoiser.predict(z, t, cond)
        z = ddim_invert_step(z, out.eps, t_prev, t, s)
        if not np.all(np.isfinite(z)):
            raise PipelineError(f"invert t={t}", "non-finite latent")
        pivots.append(z)
        if out.attention is not None:
            maps.append(out.attention)
            map_steps.append(t)

    attention = None
    if maps:
        attention = AttentionRecord(cond.tokens, np.stack(maps), map_steps)
    nulls = np.tile(null_init, (s.n_inference, 1))
    return InversionTrajectory(pivots, s, 1.0, nulls, attention)


def _fd_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        grad[k] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def null_text_optimize(traj: InversionTrajectory, denoiser: Denoiser, cond: Conditioning, w: float,
                       inner_steps: int = 10, lr: float = 0.1, stop_eps: float = 1e-5,
                       fd_step: float = 1e-3) -> InversionTrajectory:
    """Tune the null embedding per step so guided DDIM at scale ``w`` retraces the pivots.

    Each step minimises ``|ddim_step(z_hat, cfg(eps_null, eps_cond, w)) - pivot|^2``
    by gradient descent with central finite-difference gradients, starting
    from the previous step's embedding. The best iterate is kept, so the final
    loss never exceeds the initial one.
    """
    if w < 1:
        raise ValueError("guidance scale must be >= 1 for null-text optimization")
    if inner_steps < 0:
        raise ValueError("inner_steps must be non-negative")
    s = traj.schedule
    z_hat = traj.z_T
    emb = traj.null_embeddings[0].copy()
    nulls, losses = [], []

    for i, (t, t_prev) in enumerate(s.step_pairs()):
        target = traj.target_for_step(i)
        eps_c = denoiser.predict(z_hat, t, cond).eps

        def advance(e, z=z_hat, eps_c=eps_c, t=t, t_prev=t_prev):
            eps_u = denoiser.predict(z, t, Conditioning.null(e)).eps
            return ddim_step(z, cfg_combine(eps_u, eps_c, w), t, t_prev, s)

        def loss(e, target=target):
            return float(np.sum((advance(e) - target) ** 2))

        initial = loss(emb)
        if not np.isfinite(initial):
            raise PipelineError(f"null-text step {i} (t={t})", "non-finite loss")
        best, best_loss = emb, initial
        cur, cur_loss = emb, initial
        iters = 0
        for _ in range(inner_steps):
            if cur_loss < stop_eps:
                break
            cur = cur - lr * _fd_gradient(loss, cur, fd_step)
            cur_loss = loss(cur)
            iters += 1
            if not np.isfinite(cur_loss):
                raise PipelineError(f"null-text step {i} (t={t})", "non-finite loss")
            if cur_loss < best_loss:
                best, best_loss = cur, cur_loss

        log.debug("null-text step %d t=%d loss %.3e -> %.3e (%d iters)", i, t, initial, best_loss, iters)
        emb = best
        nulls.append(emb.copy())
        losses.append({"step": i, "t": t, "initial": initial, "final": best_loss, "iterations": iters})
        z_hat = advance(emb)

    return dataclasses.replace(traj, guidance_scale=float(w), null_embeddings=np.stack(nulls),
                               losses=losses, optimized=True)


def reconstruct(traj: InversionTrajectory, denoiser: Denoiser, cond: Conditioning, w: float,
                null_embeddings: np.ndarray | None = None) -> np.ndarray:
    """Guided DDIM sampling from ``traj.z_T`` using per-step null embeddings."""
    s = traj.schedule
    nulls = traj.null_embeddings if null_embeddings is None else np.asarray(null_embeddings)
    z = traj.z_T
    for i, (t, t_prev) in enumerate(s.step_pairs()):
        eps_c = denoiser.predict(z, t, cond).eps
        eps_u = denoiser.predict(z, t, Conditioning.null(nulls[i])).eps
        z = ddim_step(z, cfg_combine(eps_u, eps_c, w), t, t_prev, s)
    return z
