"""Desk-scale simulation setups shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SceneBounds
from .phantom import (PHANTOM_BOUNDS, NoiseModel, PhantomField, acquisition_poses, add_noise,
                      default_phantom, project_phantom)
from .renderer import Projection, RenderConfig, render_view
from .trainer import TrainConfig, TrainResult, run_schedule
from .metrics import evaluate_views

DETECTOR_PIXELS = 128
PIXEL_SPACING_MM = 1.8  # 128 px * 1.8 mm covers the whole vessel tree at magnification ~2
SDD_MM = 1000.0


def desk_config(iterations: int = 3000, dims: int = 96, n_t: int = 1, **overrides) -> TrainConfig:
    """Default schedule shape (upscale points, occupancy timing) compressed to ``iterations``."""
    base = TrainConfig(final_dims=(dims,) * 3, initial_n_t=n_t,
                       temporal_upscale_iters=TrainConfig.temporal_upscale_iters if n_t > 1 else ())
    cfg = base.rescaled(iterations)
    if overrides:
        cfg = TrainConfig(**{**cfg.to_dict(), **overrides})
    return cfg


def simulate(field: PhantomField, poses, noise_fraction: float = 0.02, seed: int = 0,
             render: RenderConfig = RenderConfig()) -> list[Projection]:
    """Noisy projections, one independent noise seed per view."""
    out = []
    for i, pose in enumerate(poses):
        clean = project_phantom(field, pose, render)
        out.append(add_noise(clean, NoiseModel(noise_fraction, seed=seed * 100003 + i)))
    return out


def sweep(n_views: int, static: bool = False, offset: float = 0.0, arc_deg: float = 180.0):
    times = [0.0] * n_views if static else None
    return acquisition_poses(n_views, arc_deg, sdd=SDD_MM, pixel_spacing=PIXEL_SPACING_MM,
                             rows=DETECTOR_PIXELS, cols=DETECTOR_PIXELS, times=times, offset=offset)


def heldout_poses(n_heldout: int = 10, n_ref: int = 30, static: bool = False):
    """Views halfway (in angle and time) between those of an ``n_ref``-view sweep."""
    between = sweep(n_ref, static=static, offset=0.5)[:n_ref - 1]
    pick = np.linspace(0, len(between) - 1, n_heldout).round().astype(int)
    return [between[i] for i in pick]


@dataclass
class DeskRun:
    result: TrainResult
    heldout_psnr: float
    heldout: list
    rendered: list


def run_desk(field: PhantomField, n_views: int, config: TrainConfig, static: bool = False,
             n_heldout: int = 10, noise_fraction: float = 0.02, seed: int = 0, probe_rays: int = 0,
             bounds: SceneBounds = PHANTOM_BOUNDS) -> DeskRun:
    train = simulate(field, sweep(n_views, static=static), noise_fraction, seed)
    res = run_schedule(train, bounds, config, probe_rays=probe_rays)
    held = [project_phantom(field, p) for p in heldout_poses(n_heldout, static=static)]
    rendered = [render_view(p.pose, res.grid).image for p in held]
    report = evaluate_views(rendered, [p.image for p in held])
    return DeskRun(res, report.mean_psnr, held, rendered)


__all__ = ["desk_config", "simulate", "sweep", "heldout_poses", "run_desk", "default_phantom", "DeskRun"]
