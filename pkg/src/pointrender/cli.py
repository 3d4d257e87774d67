"""Command-line pipeline: prepare, train, render, eval, augment, edit.

Every subcommand exits 0 on success and maps failures to stable codes:
2 for configuration, 3 for data, 4 for numeric problems. The first stderr
line is always `error[E_*]: ...` for machine consumption.
"""

from __future__ import annotations

import dataclasses
import functools
import os
import shutil
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from .augment import AugmentConfig, augment as run_augment
from .errors import ConfigError, DataError, PointRenderError
from .evaluator import evaluate_split, render_view
from .native import load_native
from .rasterizer import rasterize_pyramid
from .scene_io.colmap import save_colmap_model
from .scene_io.ply import save_ply
from .scene_io.scene import Scene, load_manifest, load_scene
from .texture import prune
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PointRenderError as e:
            lines = str(e).splitlines() or [""]
            click.echo(f"error[{e.code}]: {lines[0]}", err=True)
            for line in lines[1:]:
                click.echo(line, err=True)
            sys.exit(e.exit_code)
    return wrapper


def _pick_rasterizer(choice: str):
    """Pyramid function for --raster; missing native falls back with a warning."""
    if choice == "reference":
        return rasterize_pyramid
    native = load_native(required=False)
    if native is not None:
        return native.rasterize_pyramid
    if choice == "native":
        click.echo("native rasterizer not found; falling back to reference",
                   err=True)
    return rasterize_pyramid


def _absolute_manifest(manifest_path: Path) -> str:
    """Manifest text with paths resolved, safe to copy into a checkpoint."""
    raw = load_manifest(manifest_path)
    base = manifest_path.parent
    for key in ("model_dir", "image_dir", "point_cloud"):
        if key in raw:
            p = Path(raw[key])
            raw[key] = str(p if p.is_absolute() else (base / p).resolve())
    return yaml.safe_dump(raw, sort_keys=False)


def _scene_for_checkpoint(ckpt: Path, scene_path: str | None) -> Scene:
    if scene_path is not None:
        return load_scene(scene_path)
    stored = ckpt / "scene.yaml"
    if not stored.exists():
        raise ConfigError(
            f"checkpoint {ckpt} stores no scene reference; pass --scene")
    return load_scene(stored)


raster_option = click.option(
    "--raster", type=click.Choice(["auto", "reference", "native"]),
    default="auto", show_default=True,
    help="Rasterizer backend; auto prefers the accelerated kernel when built.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Seed for all stochastic components "
                                "(default 0, or the config file's value).")


@click.group()
def main():
    """Point-based neural re-rendering pipeline."""


# ------------------------------------------------------------------- prepare

@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True),
              help="Scene manifest to normalize.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--split-k", type=int, default=None,
              help="Override the manifest's held-out stride.")
@click.option("--copy-images", is_flag=True,
              help="Copy image files instead of symlinking.")
@seed_option
@_cli_errors
def prepare(manifest, out, split_k, copy_images, seed):
    """Validate a scene and materialize a normalized directory."""
    torch.manual_seed(seed or 0)
    raw = load_manifest(Path(manifest))
    if split_k is not None:
        raw["split_k"] = split_k
        patched = Path(manifest).parent / ".pointrender_prepare_tmp.yaml"
        patched.write_text(yaml.safe_dump(raw, sort_keys=False))
        try:
            scene = load_scene(patched)
        finally:
            patched.unlink(missing_ok=True)
    else:
        scene = load_scene(manifest)

    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    camera_ids: dict[tuple, int] = {}
    cameras, images = {}, {}
    for view in scene.images:
        if view.image_path is None:
            raise DataError(f"view {view.id} has no backing image file; "
                            f"prepare needs file-backed scenes")
        key = (view.camera.fx, view.camera.fy, view.camera.cx, view.camera.cy,
               view.camera.width, view.camera.height)
        cid = camera_ids.setdefault(key, len(camera_ids) + 1)
        cameras[cid] = view.camera
        images[view.id] = (view.pose, cid, view.image_path.name)
        dst = out / "images" / view.image_path.name
        if dst.exists() or dst.is_symlink():
            dst.unlink()
        if copy_images:
            shutil.copy2(view.image_path, dst)
        else:
            try:
                os.symlink(view.image_path.resolve(), dst)
            except OSError:
                shutil.copy2(view.image_path, dst)

    save_colmap_model(out / "model", cameras, images, scene.cloud, binary=True)
    save_ply(out / "points.ply", scene.cloud)
    (out / "scene.yaml").write_text(yaml.safe_dump(
        {"model_dir": "model", "image_dir": "images",
         "point_cloud": "points.ply", "split_k": raw.get("split_k", 8),
         "name": scene.name}, sort_keys=False))
    click.echo(f"prepared {scene.name}: {len(scene.images)} views "
               f"({len(scene.split.train_ids)} train / "
               f"{len(scene.split.test_ids)} test), {len(scene.cloud)} points "
               f"-> {out}")


# --------------------------------------------------------------------- train

@main.command(name="train")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True),
              help="Scene manifest (scene.yaml).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Training config YAML; defaults apply when omitted.")
@click.option("--out", required=True, type=click.Path(),
              help="Checkpoint directory.")
@click.option("--max-epochs", type=int, default=None, help="Override epochs.")
@click.option("--max-steps", type=int, default=None, help="Override step cap.")
@click.option("--deterministic/--no-deterministic", default=None,
              help="Override the config's determinism flag.")
@seed_option
@_cli_errors
def cmd_train(scene_path, config_path, out, max_epochs, max_steps,
              deterministic, seed):
    """Optimize a neural texture and renderer for one scene."""
    if config_path is not None:
        config_text = Path(config_path).read_text()
        config = TrainConfig.from_yaml(config_text)
    else:
        config_text = None
        config = TrainConfig()
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if max_epochs is not None:
        overrides["max_epochs"] = max_epochs
    if max_steps is not None:
        overrides["max_steps"] = max_steps
    if deterministic is not None:
        overrides["deterministic"] = deterministic
    if overrides:
        config = dataclasses.replace(config, **overrides)
        config_text = None  # overrides invalidate the verbatim echo

    scene = load_scene(scene_path)
    manifest_text = _absolute_manifest(Path(scene_path))
    _, _, train_log = train(scene, config, out_dir=out,
                            scene_manifest=manifest_text,
                            config_text=config_text)
    last = train_log.entries[-1]
    click.echo(f"trained {scene.name}: {last['epoch'] + 1} epochs, "
               f"{last['steps']} steps, final loss {last['loss']:.6g} -> {out}")


# -------------------------------------------------------------------- render

@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True),
              help="Checkpoint directory from train.")
@click.option("--scene", "scene_path", type=click.Path(exists=True),
              help="Scene manifest; defaults to the one stored in the checkpoint.")
@click.option("--view-id", "view_ids", type=int, multiple=True,
              help="View id to render; repeatable.")
@click.option("--test-split", is_flag=True, help="Render every held-out view.")
@click.option("--out", required=True, type=click.Path(), help="PNG directory.")
@raster_option
@seed_option
@_cli_errors
def render(ckpt, scene_path, view_ids, test_split, out, raster, seed):
    """Render chosen views from a trained checkpoint."""
    torch.manual_seed(seed or 0)
    if not view_ids and not test_split:
        raise ConfigError("nothing to render: pass --view-id or --test-split")
    ckpt = Path(ckpt)
    cloud, texture, renderer, _ = load_checkpoint(ckpt)
    scene = _scene_for_checkpoint(ckpt, scene_path)
    ids = list(view_ids) + (list(scene.split.test_ids) if test_split else [])
    known = {im.id for im in scene.images}
    for view_id in ids:
        if view_id not in known:
            raise DataError(f"unknown view id {view_id}; valid ids: "
                            f"{sorted(known)}")
    rasterize = _pick_rasterizer(raster)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image as PILImage
    for view_id in dict.fromkeys(ids):
        view = scene.image(view_id)
        pred = render_view(cloud, texture, renderer, view, rasterize)
        arr = (np.clip(pred, 0.0, 1.0) * 255).round().astype(np.uint8)
        path = out / f"view_{view_id:05d}.png"
        PILImage.fromarray(arr).save(path)
        click.echo(f"rendered view {view_id} -> {path}")


# ---------------------------------------------------------------------- eval

@main.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True),
              help="Checkpoint directory from train.")
@click.option("--scene", "scene_path", type=click.Path(exists=True),
              help="Scene manifest; defaults to the one stored in the checkpoint.")
@click.option("--out", type=click.Path(),
              help="Directory for rendered PNGs and report.jsonl.")
@click.option("--lpips/--no-lpips", "with_lpips", default=None,
              help="Force the perceptual metric on or off (default: if available).")
@raster_option
@seed_option
@_cli_errors
def cmd_eval(ckpt, scene_path, out, with_lpips, raster, seed):
    """Score held-out views of a trained checkpoint."""
    torch.manual_seed(seed or 0)
    ckpt = Path(ckpt)
    cloud, texture, renderer, _ = load_checkpoint(ckpt)
    scene = _scene_for_checkpoint(ckpt, scene_path)
    scene = Scene(images=scene.images, cloud=cloud, split=scene.split,
                  name=scene.name)  # the checkpoint's cloud is authoritative
    report = evaluate_split(scene, texture, renderer, with_lpips=with_lpips,
                            out_dir=out, rasterize=_pick_rasterizer(raster),
                            config_echo={"checkpoint": str(ckpt),
                                         "scene": scene.name})
    click.echo(report.format_table())
    if out is not None:
        report.save_jsonl(Path(out) / "report.jsonl")
        click.echo(f"report -> {Path(out) / 'report.jsonl'}")


# ------------------------------------------------------------------- augment

@main.command(name="augment")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True),
              help="Scene manifest.")
@click.option("--out-ply", required=True, type=click.Path(),
              help="Destination PLY for the augmented cloud.")
@click.option("--provenance", type=click.Path(),
              help="Sidecar JSON path (default: next to the PLY).")
@click.option("--rounds", type=int, default=1, show_default=True)
@click.option("--candidates", type=int, default=None,
              help="Candidates per round (default: half the point count).")
@click.option("--sigma-scale", type=float, default=3.0, show_default=True,
              help="Gaussian std as a multiple of median neighbor distance.")
@click.option("--sigma", type=float, default=None,
              help="Absolute Gaussian std override.")
@click.option("--threshold-percentile", type=float, default=10.0,
              show_default=True)
@click.option("--threshold", "threshold_absolute", type=float, default=None,
              help="Absolute pseudo-density threshold override.")
@click.option("--verify-steps", type=int, default=None,
              help="Training steps per verification round.")
@click.option("--from-scratch", is_flag=True,
              help="Retrain each round from scratch instead of fine-tuning.")
@click.option("--train-config", "train_config_path", type=click.Path(exists=True),
              help="Training config YAML for the verification runs.")
@seed_option
@_cli_errors
def cmd_augment(scene_path, out_ply, provenance, rounds, candidates,
                sigma_scale, sigma, threshold_percentile, threshold_absolute,
                verify_steps, from_scratch, train_config_path, seed):
    """Densify the point cloud by verified Gaussian sampling."""
    scene = load_scene(scene_path)
    config = AugmentConfig(
        n_candidates=candidates, sigma_scale=sigma_scale, sigma=sigma,
        threshold_percentile=threshold_percentile,
        threshold_absolute=threshold_absolute, iterations=rounds,
        verify_train_steps=verify_steps, from_scratch=from_scratch,
        seed=seed if seed is not None else 0)
    train_config = None
    if train_config_path is not None:
        train_config = TrainConfig.from_yaml(Path(train_config_path).read_text())
    if provenance is None:
        provenance = Path(out_ply).with_suffix(".json")
    cloud = run_augment(scene, config, train_config, out_ply=out_ply,
                        provenance_path=provenance)
    click.echo(f"augmented {scene.name}: {len(scene.cloud)} -> {len(cloud)} "
               f"points over {rounds} round(s) -> {out_ply}")


# ---------------------------------------------------------------------- edit

def _parse_box(text: str) -> tuple[np.ndarray, np.ndarray]:
    parts = text.split(",")
    if len(parts) != 6:
        raise ConfigError(f"--box needs 6 comma-separated numbers, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as e:
        raise ConfigError(f"cannot parse --box value: {e}") from e
    corners = vals.reshape(2, 3)
    return corners.min(axis=0), corners.max(axis=0)


@main.command(name="edit")
@click.option("--ckpt", required=True, type=click.Path(exists=True),
              help="Checkpoint to edit.")
@click.option("--out", required=True, type=click.Path(),
              help="Destination checkpoint directory.")
@click.option("--box", "box_text", type=str,
              help="Remove points inside x0,y0,z0,x1,y1,z1.")
@click.option("--point-ids", "ids_text", type=str,
              help="Remove these comma-separated point indices.")
@seed_option
@_cli_errors
def cmd_edit(ckpt, out, box_text, ids_text, seed):
    """Remove points (and their texture rows) from a trained checkpoint."""
    torch.manual_seed(seed or 0)
    if (box_text is None) == (ids_text is None):
        raise ConfigError("pass exactly one of --box or --point-ids")
    ckpt = Path(ckpt)
    cloud, texture, renderer, config = load_checkpoint(ckpt)

    remove = np.zeros(len(cloud), dtype=bool)
    if box_text is not None:
        lo, hi = _parse_box(box_text)
        inside = ((cloud.positions >= lo) & (cloud.positions <= hi)).all(axis=1)
        remove |= inside
    else:
        try:
            ids = [int(p) for p in ids_text.split(",")]
        except ValueError as e:
            raise ConfigError(f"cannot parse --point-ids: {e}") from e
        bad = [i for i in ids if not 0 <= i < len(cloud)]
        if bad:
            raise DataError(f"point ids out of range: {bad} "
                            f"(cloud has {len(cloud)} points)")
        remove[ids] = True

    if remove.all():
        raise DataError("selection removes every point; nothing left to render")
    if not remove.any():
        click.echo("selection matches no points; checkpoint copied unchanged")
        new_cloud, new_texture = cloud, texture
    else:
        new_cloud, new_texture = prune(cloud, texture, ~remove)
    save_checkpoint(out, new_cloud, new_texture, renderer, config)
    stored_scene = ckpt / "scene.yaml"
    if stored_scene.exists():
        shutil.copy2(stored_scene, Path(out) / "scene.yaml")
    click.echo(f"removed {int(remove.sum())} of {len(cloud)} points -> {out}")


if __name__ == "__main__":
    main()
