"""Command-line entry point: ``objcomposer {compose,invert,masks} --config scene.json``.

Exit codes: 0 success, 1 configuration error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from objcomposer import artifacts, io
from objcomposer.attnmask import make_masks, otsu_threshold
from objcomposer.compose import generate, latent_checksum
from objcomposer.config import Builder, LoadedConfig, load_config
from objcomposer.denoise import Conditioning
from objcomposer.errors import ComposerError, ConfigError, PipelineError
from objcomposer.invert import InversionTrajectory, ddim_invert, null_text_optimize, reconstruct

log = logging.getLogger("objcomposer")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _output_dir(loaded: LoadedConfig, override: str | None) -> Path:
    out = Path(override) if override else loaded.path(loaded.cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_schedule(traj: InversionTrajectory, builder: Builder, source: Path):
    s = builder.schedule
    if traj.schedule.inference_steps != s.inference_steps or not np.array_equal(traj.schedule.alpha_bar, s.alpha_bar):
        raise ConfigError(f"{source}: inversion schedule differs from the config schedule")
    if traj.z_T.shape != builder.shape:
        raise ConfigError(f"{source}: latent shape {traj.z_T.shape} differs from {builder.shape}")


def run_inversion(loaded: LoadedConfig, builder: Builder, denoisers: dict) -> InversionTrajectory:
    """Load a saved inversion (``.json`` index) or invert the configured image latent."""
    cfg = loaded.cfg
    if cfg.init_path is None:
        raise ConfigError("this command needs init 'invert:<path>'")
    src = loaded.existing(cfg.init_path)
    if src.suffix.lower() == ".json":
        traj = artifacts.load_trajectory(src)
        _check_schedule(traj, builder, src)
        return traj

    try:
        z0 = io.load_image_latent(src)
    except ValueError as exc:
        raise ConfigError(f"{src}: {exc}") from exc
    if z0.shape != builder.shape:
        raise ConfigError(f"{src}: latent shape {z0.shape} differs from {builder.shape}")
    bg = denoisers[cfg.background]
    cond = Conditioning.background(cfg.prompt)
    try:
        traj = ddim_invert(z0, bg, cond, builder.schedule, np.zeros(bg.embedding_dim))
        inv = cfg.inversion
        if inv.optimize and cfg.guidance >= 1:
            traj = null_text_optimize(traj, bg, cond, cfg.guidance, inv.inner_steps, inv.lr, inv.stop_eps)
    except ValueError as exc:
        raise PipelineError("invert", str(exc)) from exc
    return traj


def cmd_invert(loaded: LoadedConfig, out: Path, figures: bool) -> int:
    builder = Builder(loaded)
    denoisers = builder.denoisers()
    cfg = loaded.cfg
    if cfg.init_path is not None and cfg.init_path.lower().endswith(".json"):
        raise ConfigError("invert needs an image latent (.npy or .pgm), not an index")
    t0 = time.perf_counter()
    traj = run_inversion(loaded, builder, denoisers)
    bg = denoisers[cfg.background]
    cond = Conditioning.background(cfg.prompt)
    w = max(cfg.guidance, 1.0) if traj.optimized else 1.0
    mse = float(np.mean((reconstruct(traj, bg, cond, w) - traj.z_0) ** 2))
    extra = {
        "config_hash": loaded.config_hash,
        "prompt": cfg.prompt,
        "reconstruction_mse": mse,
        "pivot_checksums": [latent_checksum(p) for p in traj.pivots],
    }
    artifacts.save_trajectory(traj, out, extra)

    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "t", "initial_loss", "final_loss", "iterations"])
        for r in traj.losses:
            writer.writerow([r["step"], r["t"], repr(r["initial"]), repr(r["final"]), r["iterations"]])
    if figures and traj.losses:
        from objcomposer import plotting
        plotting.plot_null_losses(traj.losses, out / "figures" / "null_text_loss.png")
    log.info("inverted %d steps in %.2fs; reconstruction mse %.3e", builder.schedule.n_inference,
             time.perf_counter() - t0, mse)
    return 0


def cmd_masks(loaded: LoadedConfig, out: Path, figures: bool) -> int:
    builder = Builder(loaded)
    denoisers = builder.denoisers()
    cfg = loaded.cfg
    objects = builder.objects()
    rec = None
    if any(o.mask is None for o in objects):
        if cfg.init_path is None:
            raise PipelineError("masks", "objects without masks need an attention source (init 'invert:<path>')")
        rec = run_inversion(loaded, builder, denoisers).attention
    heatmaps: list = []
    masks = make_masks(rec, objects, cfg.prompt, builder.shape[-2], builder.shape[-1], cfg.masks.bins, heatmaps)

    (out / "masks").mkdir(exist_ok=True)
    rows, entries = [], []
    for i, (obj, mask, heat) in enumerate(zip(objects, masks, heatmaps)):
        mask_file = f"masks/object_{i:02d}.pgm"
        io.write_mask(out / mask_file, mask)
        entry = {"index": i, "class": obj.class_phrase, "mask": mask_file,
                 "provenance": "user" if heat is None else "attention", "area": int(mask.sum())}
        if heat is not None:
            heat_file = f"masks/heatmap_{i:02d}.npy"
            io.save_npy(out / heat_file, heat)
            entry["heatmap"] = heat_file
            entry["threshold"] = otsu_threshold(heat, cfg.masks.bins)
        entries.append(entry)
        rows.append([i, obj.class_phrase, entry["provenance"], entry.get("threshold", ""), entry["area"]])

    with open(out / "masks.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["object", "class", "provenance", "threshold", "area"])
        writer.writerows(rows)
    io.write_json_atomic(out / "masks" / "manifest.json", {"config_hash": loaded.config_hash, "objects": entries})
    if figures:
        from objcomposer import plotting
        plotting.plot_masks(heatmaps, masks, [o.class_phrase for o in objects], out / "figures" / "masks.png")
    return 0


def cmd_compose(loaded: LoadedConfig, out: Path, figures: bool) -> int:
    t0 = time.perf_counter()
    builder = Builder(loaded)
    denoisers = builder.denoisers()
    cfg = loaded.cfg
    traj = run_inversion(loaded, builder, denoisers) if cfg.init_path is not None else None
    req = builder.request("noise" if traj is None else traj)
    t1 = time.perf_counter()
    result = generate(req, builder.schedule, denoisers, builder.shape)
    t2 = time.perf_counter()

    io.save_npy(out / "final.npy", result.latent)
    io.write_pgm(out / "preview.pgm", io.latent_preview(result.latent))
    manifest = {
        "config_hash": loaded.config_hash,
        "final_npy_sha256": _file_sha256(out / "final.npy"),
        "timings": {"setup_s": t1 - t0, "sampling_s": t2 - t1},
        **result.manifest,
    }
    if traj is not None:
        manifest["reconstruction_mse"] = float(np.mean((result.latent - traj.z_0) ** 2))
        manifest["null_text_losses"] = traj.losses
    io.write_json_atomic(out / "manifest.json", manifest)
    if figures:
        from objcomposer import plotting
        plotting.plot_composition(result.latent, result.masks, [o.class_phrase for o in req.objects],
                                  out / "figures" / "composition.png")
    return 0


COMMANDS = {"compose": cmd_compose, "invert": cmd_invert, "masks": cmd_masks}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objcomposer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("compose", "blend object and background diffusion into one latent"),
                            ("invert", "DDIM + null-text inversion of an image latent"),
                            ("masks", "object masks from inversion attention")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="scene config JSON")
        p.add_argument("--output-dir", help="override the config's output_dir")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        loaded = load_config(args.config)
        out = _output_dir(loaded, args.output_dir)
        return COMMANDS[args.command](loaded, out, args.figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"pipeline error in stage {exc.stage}: {exc}", file=sys.stderr)
        return 2
    except (ComposerError, ValueError, ArithmeticError) as exc:
        print(f"pipeline error in stage {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
