"""Noise schedules and the deterministic DDIM update and its inverse.

Latents are plain ``numpy`` arrays of shape ``(C, H, W)``; timesteps are
integer indices into ``NoiseSchedule.alpha_bar``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention sequence plus the inference timestep subsequence.

    ``alpha_bar`` has ``total_steps + 1`` entries with ``alpha_bar[0] == 1``;
    ``inference_steps`` is strictly decreasing (e.g. ``(1000, 980, ..., 20)``).
    """

    total_steps: int
    alpha_bar: np.ndarray
    inference_steps: tuple[int, ...]
    kind: str = field(default="linear", compare=False)

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "inference_steps", tuple(int(t) for t in self.inference_steps))

        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if ab.shape != (self.total_steps + 1,):
            raise ValueError(f"alpha_bar must have {self.total_steps + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        steps = self.inference_steps
        if not steps:
            raise ValueError("no inference steps")
        if any(t < 1 or t > self.total_steps for t in steps):
            raise ValueError(f"inference steps must lie in 1..{self.total_steps}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("inference steps must be strictly decreasing")

    @property
    def n_inference(self) -> int:
        return len(self.inference_steps)

    def step_pairs(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` for each denoising step, ending at ``t_prev == 0``."""
        steps = self.inference_steps
        return [(t, steps[i + 1] if i + 1 < len(steps) else 0) for i, t in enumerate(steps)]

    def ascending(self) -> list[int]:
        """Timesteps visited by inversion: ``0`` followed by the inference steps, increasing."""
        return [0, *reversed(self.inference_steps)]


def make_linear_schedule(T: int, beta_start: float, beta_end: float, n_inference: int,
                         kind: str = "linear") -> NoiseSchedule:
    """Linear-beta DDPM schedule with ``n_inference`` evenly spaced DDIM steps.

    Inference timesteps are ``floor((i + 1) * T / n_inference)`` for
    ``i = 0 .. n_inference - 1`` so the last one is always ``T``.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"beta out of range: need 0 < beta_start <= beta_end < 1, "
                         f"got {beta_start}, {beta_end}")
    if not (1 <= n_inference <= T):
        raise ValueError(f"n_inference must lie in 1..{T}, got {n_inference}")

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    steps = [((i + 1) * T) // n_inference for i in range(n_inference)]
    return NoiseSchedule(T, alpha_bar, tuple(reversed(steps)), kind=kind)


def _check_pair(z: np.ndarray, eps: np.ndarray, t: int, t_prev: int, s: NoiseSchedule):
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: latent {z.shape} vs eps {eps.shape}")
    if not (0 <= t_prev < t <= s.total_steps):
        raise ValueError(f"need 0 <= t_prev < t <= {s.total_steps}, got t={t}, t_prev={t_prev}")


def ddim_update(z_t: np.ndarray, eps: np.ndarray, a_t: float, a_prev: float) -> np.ndarray:
    """DDIM (eta = 0) move from signal level ``a_t`` to ``a_prev`` given a noise prediction."""
    x0 = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Denoise ``z_t`` to timestep ``t_prev < t``."""
    _check_pair(z_t, eps, t, t_prev, s)
    return ddim_update(z_t, eps, s.alpha_bar[t], s.alpha_bar[t_prev])


def ddim_invert_step(z_t_prev: np.ndarray, eps: np.ndarray, t_prev: int, t: int,
                     s: NoiseSchedule) -> np.ndarray:
    """Exact inverse of :func:`ddim_step` for a fixed ``eps``: noise ``z_t_prev`` up to ``t``."""
    _check_pair(z_t_prev, eps, t, t_prev, s)
    return ddim_update(z_t_prev, eps, s.alpha_bar[t_prev], s.alpha_bar[t])
