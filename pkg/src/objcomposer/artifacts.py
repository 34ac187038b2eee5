"""On-disk layout of an inversion: NPY tensors plus a JSON index."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from objcomposer import io
from objcomposer.errors import ConfigError
from objcomposer.invert import AttentionRecord, InversionTrajectory
from objcomposer.schedule import NoiseSchedule

INDEX_VERSION = 1


def save_trajectory(traj: InversionTrajectory, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write ``pivots.npy``, ``null_embeddings.npy``, ``attention/token_NNN.npy`` and ``index.json``.

    Each attention file holds one token's ``(steps, H_a, W_a)`` stack.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_npy(out / "pivots.npy", np.stack(traj.pivots))
    io.save_npy(out / "null_embeddings.npy", traj.null_embeddings)

    attention = None
    if traj.attention is not None:
        (out / "attention").mkdir(exist_ok=True)
        files = []
        for j, tok in enumerate(traj.attention.tokens):
            name = f"attention/token_{j:03d}.npy"
            io.save_npy(out / name, traj.attention.maps[:, j])
            files.append({"index": j, "token": tok, "file": name})
        attention = {"tokens": files, "timesteps": traj.attention.timesteps}

    s = traj.schedule
    index = {
        "version": INDEX_VERSION,
        "schedule": {"T": s.total_steps, "inference_steps": list(s.inference_steps),
                     "alpha_bar_file": "alpha_bar.npy"},
        "pivots": "pivots.npy",
        "null_embeddings": "null_embeddings.npy",
        "guidance_scale": traj.guidance_scale,
        "optimized": traj.optimized,
        "losses": traj.losses,
        "attention": attention,
        **(extra or {}),
    }
    io.save_npy(out / "alpha_bar.npy", s.alpha_bar)
    path = out / "index.json"
    io.write_json_atomic(path, index)
    return path


def load_trajectory(index_path: str | Path) -> InversionTrajectory:
    index_path = Path(index_path)
    if not index_path.exists():
        raise ConfigError(f"inversion index not found: {index_path}")
    root = index_path.parent
    try:
        index = json.loads(index_path.read_text())
        sch = index["schedule"]
        alpha_bar = io.load_npy(root / sch["alpha_bar_file"])
        schedule = NoiseSchedule(sch["T"], alpha_bar, tuple(sch["inference_steps"]))
        pivots = list(io.load_npy(root / index["pivots"]).astype(np.float64))
        nulls = io.load_npy(root / index["null_embeddings"])
        attention = None
        if index.get("attention"):
            entries = sorted(index["attention"]["tokens"], key=lambda e: e["index"])
            maps = np.stack([io.load_npy(root / e["file"]) for e in entries], axis=1)
            attention = AttentionRecord([e["token"] for e in entries], maps, index["attention"]["timesteps"])
    except (KeyError, OSError, ValueError) as exc:
        raise ConfigError(f"{index_path}: unreadable inversion index: {exc}") from exc
    return InversionTrajectory(pivots, schedule, index["guidance_scale"], nulls, attention,
                               index.get("losses", []), index.get("optimized", False))
