"""Command-line entry point: ``attenvox <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiments
from .geometry import ViewPose
from .grid import Grid4D
from .io import (ImageFormatError, ManifestError, VolumeFormatError, CheckpointError, load_checkpoint,
                 load_manifest, read_volume, save_checkpoint, write_image, write_manifest, write_volume)
from .metrics import evaluate_views, evaluate_volumes
from .phantom import PHANTOM_BOUNDS, default_phantom, project_phantom, rasterize_ground_truth
from .renderer import Projection, RenderConfig, export_volume, render_view
from .trainer import TrainConfig, TrainingSet, run_schedule

log = logging.getLogger("attenvox")

RENDER_KEYS = {f.name for f in fields(RenderConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class CliError(Exception):
    """Reported as a one-line diagnostic with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p}: invalid JSON ({exc.msg} at line {exc.lineno})")
    if not isinstance(doc, dict):
        raise CliError(f"config file {p}: top level must be an object")
    unknown = set(doc) - TRAIN_KEYS - RENDER_KEYS
    if unknown:
        raise CliError(f"config file {p}: unknown option(s) {', '.join(sorted(unknown))}")
    return doc


def build_configs(args) -> tuple[TrainConfig, RenderConfig]:
    """TrainConfig/RenderConfig defaults, then ``--config`` JSON, then individual flags."""
    doc = _load_config(getattr(args, "config", None))
    flags = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in TRAIN_KEYS | RENDER_KEYS:
            raise CliError(f"--set: unknown option {k!r}")
        flags[k] = _parse_value(v)
    named = {"iterations": "iters", "batch_rays": "batch_rays", "lr0": "lr", "seed": "seed",
             "workers": "workers", "initial_n_t": "n_t", "pixel_model": "pixel_model",
             "step_size": "step_size", "temporal_upscale_iters": "temporal_upscale",
             "spatial_upscale_iters": "spatial_upscale"}
    for key, attr in named.items():
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "dims", None) is not None:
        flags["final_dims"] = (args.dims,) * 3
    if getattr(args, "coarse_stage", False):
        flags["coarse_stage"] = True
    if getattr(args, "no_occupancy", False):
        flags["occupancy"] = False
    merged = {**doc, **flags}
    train_kw = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    render_kw = {k: v for k, v in merged.items() if k in RENDER_KEYS}
    try:
        base = TrainConfig()
        if "iterations" in train_kw:
            # a shorter/longer run keeps the default schedule shape unless it is given explicitly
            base = base.rescaled(int(train_kw["iterations"]))
        if "initial_n_t" in train_kw and int(train_kw["initial_n_t"]) < 2:
            train_kw.setdefault("temporal_upscale_iters", ())
        train = TrainConfig(**{**base.to_dict(), **train_kw})
        render = RenderConfig(**render_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}")
    return train, render


def cmd_phantom(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    field = default_phantom(static=args.static)
    poses = experiments.sweep(args.views, static=args.static, arc_deg=args.arc)
    poses = [ViewPose(p.primary_angle, args.secondary, args.sdd, args.sod or args.sdd / 2.0,
                      args.pixel_spacing, args.rows, args.cols, p.time) for p in poses]
    render = RenderConfig(pixel_model=args.pixel_model)
    projections = experiments.simulate(field, poses, args.noise, args.seed, render)
    entries = []
    for i, proj in enumerate(projections):
        name = Path("images") / f"view_{i:03d}.pgm"
        write_image(out / name, proj.image)
        entries.append((name, proj.pose))
    write_manifest(out / "manifest.json", PHANTOM_BOUNDS, entries)
    if args.held_out > 0:
        (out / "heldout").mkdir(exist_ok=True)
        held = experiments.heldout_poses(args.held_out, max(args.views, 2), static=args.static)
        held_entries = []
        for i, p in enumerate(held):
            pose = ViewPose(p.primary_angle, args.secondary, args.sdd, args.sod or args.sdd / 2.0,
                            args.pixel_spacing, args.rows, args.cols, p.time)
            name = Path(f"view_{i:03d}.pgm")
            write_image(out / "heldout" / name, project_phantom(field, pose, render).image)
            held_entries.append((name, pose))
        write_manifest(out / "heldout" / "manifest.json", PHANTOM_BOUNDS, held_entries)
    times = [0.0] if args.static else (args.gt_times or [0.0, 1 / 3, 2 / 3, 1.0])
    gt = rasterize_ground_truth(field, (args.gt_dims,) * 3, PHANTOM_BOUNDS, times)
    write_volume(out / "ground_truth.json", gt, PHANTOM_BOUNDS, times)
    print(f"wrote {len(projections)} views, manifest and ground truth to {out}")
    return 0


def _projections_from_manifest(path) -> tuple[list[Projection], object]:
    manifest = load_manifest(path)
    images = manifest.load_images()
    return [Projection(img, v.pose) for img, v in zip(images, manifest.views)], manifest


def cmd_reconstruct(args) -> int:
    train_cfg, render_cfg = build_configs(args)
    projections, manifest = _projections_from_manifest(args.manifest)
    out = Path(args.out)
    if out.suffix != ".json":
        out = out.with_suffix(".json")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + "_loss.csv")
    res = run_schedule(TrainingSet.from_projections(projections, manifest.bounds), manifest.bounds,
                       train_cfg, render_cfg, log_path=log_path)
    save_checkpoint(out, res.grid, render_cfg.pixel_model)
    print(f"trained {train_cfg.iterations} iterations in {res.seconds:.1f}s, final loss "
          f"{res.history[-1][1]:.4g}; checkpoint {out}")
    return 0


def _checkpoint(path) -> tuple[Grid4D, RenderConfig]:
    grid, header = load_checkpoint(path)
    return grid, RenderConfig(pixel_model=header.get("pixel_model", "absorbance"))


def cmd_render(args) -> int:
    grid, render_cfg = _checkpoint(args.checkpoint)
    if args.step_size is not None:
        render_cfg = RenderConfig(args.step_size, render_cfg.pixel_model)
    if args.manifest:
        manifest = load_manifest(args.manifest, check_images=False)
        if not 0 <= args.view < len(manifest.views):
            raise CliError(f"--view {args.view} out of range for {len(manifest.views)} views")
        pose = manifest.views[args.view].pose
        if args.time is not None:
            pose = pose.with_time(args.time)
    else:
        pose = ViewPose(args.primary, args.secondary, args.sdd, args.sod or args.sdd / 2.0,
                        args.pixel_spacing, args.rows, args.cols, float(np.clip(args.time or 0.0, 0, 1)))
    image = render_view(pose, grid, render_cfg).image
    if render_cfg.pixel_model == "line_integral" and image.max() > 1.0:
        log.warning("line integrals above 1 are clipped when written as an image")
    write_image(args.out, image)
    print(f"rendered {pose.rows}x{pose.cols} view at t={pose.time:.3f} to {args.out}")
    return 0


def cmd_export(args) -> int:
    grid, _ = _checkpoint(args.checkpoint)
    dims = (args.dims,) * 3 if args.dims else grid.spatial_dims
    times = args.time if args.time else [0.0]
    vols = np.stack([export_volume(grid, t, dims) for t in times])
    data = vols[0] if len(times) == 1 and not args.keep_time_axis else vols
    write_volume(args.out, data, grid.bounds, times)
    print(f"exported volume {list(data.shape)} to {args.out}")
    return 0


def cmd_eval2d(args) -> int:
    grid, render_cfg = _checkpoint(args.checkpoint)
    projections, _ = _projections_from_manifest(args.manifest)
    rendered = [render_view(p.pose, grid, render_cfg).image for p in projections]
    report = evaluate_views(rendered, [p.image for p in projections])
    _emit(report, args.out)
    return 0


def cmd_eval3d(args) -> int:
    grid, _ = _checkpoint(args.checkpoint)
    gt = read_volume(args.ground_truth)
    data = gt.data if gt.data.ndim == 4 else gt.data[None]
    times = gt.times or [0.0]
    if len(times) != data.shape[0]:
        raise CliError(f"ground truth has {data.shape[0]} frames but {len(times)} times")
    pred = [export_volume(grid, t, data.shape[1:]) for t in times]
    report = evaluate_volumes(pred, list(data), times)
    _emit(report, args.out)
    return 0


def _emit(report, out) -> None:
    print(report.to_text())
    if out:
        Path(out).write_text(report.to_json())


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file overriding TrainConfig/RenderConfig defaults")
    p.add_argument("--iters", type=int, help="iterations (schedule is rescaled unless given)")
    p.add_argument("--batch-rays", dest="batch_rays", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dims", type=int, help="final spatial resolution per axis")
    p.add_argument("--n-t", dest="n_t", type=int, help="initial temporal resolution")
    p.add_argument("--temporal-upscale", type=_ints, help="comma-separated iterations")
    p.add_argument("--spatial-upscale", type=_ints, help="comma-separated iterations")
    p.add_argument("--coarse-stage", action="store_true")
    p.add_argument("--no-occupancy", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--pixel-model", choices=("absorbance", "line_integral"))
    p.add_argument("--step-size", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def _add_pose_flags(p):
    p.add_argument("--primary", type=float, default=0.0)
    p.add_argument("--secondary", type=float, default=0.0)
    p.add_argument("--sdd", type=float, default=experiments.SDD_MM)
    p.add_argument("--sod", type=float, default=None, help="defaults to sdd/2")
    p.add_argument("--pixel-spacing", type=float, default=experiments.PIXEL_SPACING_MM)
    p.add_argument("--rows", type=int, default=experiments.DETECTOR_PIXELS)
    p.add_argument("--cols", type=int, default=experiments.DETECTOR_PIXELS)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attenvox", description="Sparse-view 4D attenuation-voxel reconstruction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="simulate projections and ground truth from the default phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--arc", type=float, default=180.0)
    p.add_argument("--static", action="store_true", help="all vessels filled at every time")
    p.add_argument("--noise", type=float, default=0.02, help="noise std as a fraction of the image max")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--held-out", type=int, default=10)
    p.add_argument("--gt-dims", type=int, default=96)
    p.add_argument("--gt-times", type=_floats, default=None)
    p.add_argument("--pixel-model", choices=("absorbance", "line_integral"), default="absorbance")
    _add_pose_flags(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("reconstruct", help="fit a grid to a manifest of projections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint header path (.json)")
    p.add_argument("--log", help="loss log path (default: <out>_loss.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="take the pose from this manifest")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--time", type=float)
    p.add_argument("--step-size", type=float)
    _add_pose_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export", help="export density volume(s) at given time(s)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--time", type=_floats, default=None, help="comma-separated times (default 0)")
    p.add_argument("--dims", type=int)
    p.add_argument("--keep-time-axis", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval2d", help="PSNR/SSIM against the views of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval2d)

    p = sub.add_parser("eval3d", help="3D PSNR/SSIM against a ground-truth volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval3d)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError("attenvox: missing subcommand (phantom, reconstruct, render, export, eval2d, eval3d)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ManifestError, ImageFormatError, VolumeFormatError, CheckpointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
