"""Regenerate the binary fixtures referenced by the configs in ``configs/``.

    python scripts/make_demo_fixtures.py
"""

from pathlib import Path

import numpy as np

from objcomposer import io
from objcomposer.config import Builder, load_config
from objcomposer.compose import SceneRequest, generate

ROOT = Path(__file__).resolve().parents[1] / "configs"


def half_plane_masks(h, w):
    left = np.zeros((h, w), np.uint8)
    left[:, : w // 2] = 1
    io.write_mask(ROOT / "fixtures" / "left_half.pgm", left)
    io.write_mask(ROOT / "fixtures" / "right_half.pgm", 1 - left)


def attention_demo_image():
    """The background model's own sample (w = 1), used as the image to invert."""
    builder = Builder(load_config(ROOT / "demo_attention.json"))
    den = builder.denoisers()
    req = SceneRequest(builder.cfg.prompt, [], builder.cfg.background, 1.0, seed=2024)
    io.save_npy(ROOT / "fixtures" / "attention_image.npy", generate(req, builder.schedule, den, builder.shape).latent)


if __name__ == "__main__":
    (ROOT / "fixtures").mkdir(exist_ok=True)
    half_plane_masks(16, 16)
    attention_demo_image()
