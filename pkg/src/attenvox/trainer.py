"""Fitting a Grid4D to sparse projections.

Mini-batches of detector rays are drawn uniformly from all training views,
rendered at each view's acquisition time, and the mean squared pixel error
is minimized with Adam.  Only voxels that received gradient in the current
batch are updated.  Spatial and temporal resolution grow on a fixed
iteration schedule; the free-space mask is refreshed periodically.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, asdict
from typing import Sequence

import numpy as np

from . import _kernels
from .geometry import RayBundle, SceneBounds, ray_bundle
from .grid import (Grid4D, OccupancyMask, init_grid, insert_time_midpoints, refresh_occupancy,
                   resample_lattice, upscale_spatial, upscale_temporal)
from .renderer import Projection, RenderConfig, render_rays

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_rays: int = 8192
    iterations: int = 20000
    lr0: float = 0.1
    lr_decay_target_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    final_dims: tuple[int, int, int] = (320, 320, 320)
    initial_n_t: int = 4
    temporal_upscale_iters: tuple[int, ...] = (10000,)
    spatial_upscale_iters: tuple[int, ...] = (2000, 4000, 6000)
    initial_spatial_fraction: float = 0.25
    coarse_stage: bool = False
    coarse_iterations: int = 5000
    coarse_fraction: float = 0.25
    sigma_init: float = 1e-4
    occupancy: bool = True
    occupancy_threshold: float = 1e-3
    occupancy_dilation: int = 1
    occupancy_refresh: int = 1000
    occupancy_warmup: int = 1000
    reset_adam_on_upscale: bool = False
    seed: int = 0
    workers: int = 1
    log_every: int = 100

    def __post_init__(self):
        self.final_dims = tuple(int(n) for n in self.final_dims)
        self.temporal_upscale_iters = tuple(int(i) for i in self.temporal_upscale_iters)
        self.spatial_upscale_iters = tuple(int(i) for i in self.spatial_upscale_iters)
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.lr_decay_target_factor <= 1:
            raise ValueError("lr_decay_target_factor must lie in (0, 1]")
        if self.initial_n_t < 1:
            raise ValueError("initial_n_t must be >= 1")
        if len(self.final_dims) != 3 or min(self.final_dims) < 1:
            raise ValueError(f"final_dims must be three positive integers, got {self.final_dims}")
        if not 0 < self.initial_spatial_fraction <= 1:
            raise ValueError("initial_spatial_fraction must lie in (0, 1]")
        for name in ("temporal_upscale_iters", "spatial_upscale_iters"):
            its = getattr(self, name)
            if any(b <= a for a, b in zip(its, its[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {its}")
            if any(i < 0 or i >= self.iterations for i in its):
                raise ValueError(f"{name} entries must lie in [0, iterations), got {its}")
        if self.temporal_upscale_iters and self.initial_n_t < 2:
            raise ValueError("temporal upscaling needs initial_n_t >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def rescaled(self, iterations: int) -> "TrainConfig":
        """Same schedule shape over a different iteration budget.

        Upscale iterations and occupancy warmup/refresh keep their fraction
        of the run; entries that would collide are dropped.
        """
        s = iterations / self.iterations

        def scale(its):
            out = []
            for i in its:
                j = int(round(i * s))
                if 0 <= j < iterations and (not out or j > out[-1]):
                    out.append(j)
            return tuple(out)

        d = self.to_dict()
        d.update(iterations=int(iterations),
                 temporal_upscale_iters=scale(self.temporal_upscale_iters),
                 spatial_upscale_iters=scale(self.spatial_upscale_iters),
                 occupancy_warmup=int(round(self.occupancy_warmup * s)),
                 occupancy_refresh=max(1, int(round(self.occupancy_refresh * s))),
                 coarse_iterations=max(1, int(round(self.coarse_iterations * s))))
        return TrainConfig(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, raw: np.ndarray) -> "AdamState":
        return cls(np.zeros(raw.shape), np.zeros(raw.shape))

    def resample_spatial(self, new_dims):
        self.m = resample_lattice(self.m, new_dims)
        self.v = resample_lattice(self.v, new_dims)

    def upscale_temporal(self):
        self.m = insert_time_midpoints(self.m)
        self.v = insert_time_midpoints(self.v)


@dataclass
class TrainingSet:
    """All training rays flattened across views, with per-ray time and target pixel."""

    rays: RayBundle
    times: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_projections(cls, projections: Sequence[Projection], bounds: SceneBounds) -> "TrainingSet":
        if not projections:
            raise ValueError("at least one training view is required")
        bundles = [ray_bundle(p.pose, bounds) for p in projections]
        rays = RayBundle(
            np.concatenate([b.origins for b in bundles]),
            np.concatenate([b.directions for b in bundles]),
            np.concatenate([b.t_near for b in bundles]),
            np.concatenate([b.t_far for b in bundles]),
            np.concatenate([b.hit for b in bundles]),
            np.concatenate([b.pixels for b in bundles]),
        )
        times = np.concatenate([np.full(len(b), p.pose.time) for b, p in zip(bundles, projections)])
        targets = np.concatenate([np.asarray(p.image, dtype=float).ravel() for p in projections])
        return cls(rays, times, targets)

    def __len__(self):
        return len(self.times)

    def subset(self, idx: np.ndarray) -> tuple[RayBundle, np.ndarray, np.ndarray]:
        r = self.rays
        b = RayBundle(r.origins[idx], r.directions[idx], r.t_near[idx], r.t_far[idx], r.hit[idx], r.pixels[idx])
        return b, self.times[idx], self.targets[idx]


@dataclass
class UpscaleEvent:
    iteration: int
    kind: str
    dims_before: tuple
    dims_after: tuple
    probe_loss_before: float = math.nan
    probe_loss_after: float = math.nan


@dataclass
class TrainResult:
    grid: Grid4D
    adam: AdamState
    history: list = field(default_factory=list)  # (iteration, loss, lr)
    events: list = field(default_factory=list)
    mask: OccupancyMask | None = None
    dims_trace: list = field(default_factory=list)  # (iteration, grid dims)
    seconds: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.asarray([h[1] for h in self.history])


def compute_loss(batch) -> float:
    """Mean squared error over ``(rendered, target)`` pairs or an ``(n, 2)`` array."""
    arr = np.asarray(batch, dtype=float)
    if arr.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    arr = arr.reshape(-1, 2)
    return float(np.mean((arr[:, 0] - arr[:, 1]) ** 2))


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay_target_factor ** (iteration / config.iterations)


def adam_update(grid: Grid4D, adam: AdamState, grad: np.ndarray, lr: float, config: TrainConfig) -> int:
    adam.step += 1
    bias1 = 1.0 - config.adam_beta1 ** adam.step
    bias2 = 1.0 - config.adam_beta2 ** adam.step
    return _kernels.adam_sparse(grid.raw.reshape(-1), grad, adam.m.reshape(-1), adam.v.reshape(-1),
                                lr, config.adam_beta1, config.adam_beta2, config.adam_eps, bias1, bias2)


def train_step(grid: Grid4D, adam: AdamState, data: TrainingSet, config: TrainConfig, iteration: int,
               rng: np.random.Generator, render: RenderConfig = RenderConfig(),
               mask: OccupancyMask | None = None) -> tuple[Grid4D, float]:
    """One Adam step on a uniformly drawn batch of rays. The grid is updated in place."""
    idx = rng.integers(0, len(data), size=config.batch_rays)
    rays, times, targets = data.subset(idx)
    pred, grad = render_rays(grid, rays, times, render, mask=mask,
                             grad_scale=np.full(len(idx), 2.0 / len(idx)), targets=targets,
                             workers=config.workers)
    loss = float(np.mean((pred - targets) ** 2))
    adam_update(grid, adam, grad, lr_schedule(iteration, config), config)
    return grid, loss


def probe_loss(grid: Grid4D, probe: tuple, render: RenderConfig) -> float:
    rays, times, targets = probe
    pred = render_rays(grid, rays, times, render)
    return float(np.mean((pred - targets) ** 2))


def spatial_dims_schedule(config: TrainConfig) -> list[tuple[int, int, int]]:
    """Spatial dims before training and after each listed spatial upscale."""
    dims = tuple(max(1, int(round(n * config.initial_spatial_fraction))) for n in config.final_dims)
    out = [dims]
    for _ in config.spatial_upscale_iters:
        dims = tuple(min(2 * n, f) for n, f in zip(dims, config.final_dims))
        out.append(dims)
    return out


def _run_coarse(data: TrainingSet, bounds: SceneBounds, config: TrainConfig, render: RenderConfig) -> Grid4D:
    dims = tuple(max(1, int(round(n * config.coarse_fraction))) for n in config.final_dims)
    coarse_cfg = TrainConfig(**{**config.to_dict(), "iterations": config.coarse_iterations,
                                "final_dims": dims, "initial_n_t": 1, "initial_spatial_fraction": 1.0,
                                "temporal_upscale_iters": (), "spatial_upscale_iters": (),
                                "coarse_stage": False, "occupancy": False})
    return run_schedule(data, bounds, coarse_cfg, render).grid


def run_schedule(data: TrainingSet | Sequence[Projection], bounds: SceneBounds, config: TrainConfig,
                 render: RenderConfig = RenderConfig(), probe_rays: int = 0,
                 log_path=None) -> TrainResult:
    """Full optimization with progressive spatial/temporal resolution.

    ``probe_rays > 0`` evaluates a fixed ray set immediately before and after
    every upscale so the effect of resampling on the loss can be inspected.
    """
    t_start = time.perf_counter()
    if not isinstance(data, TrainingSet):
        data = TrainingSet.from_projections(data, bounds)
    rng = np.random.default_rng(config.seed)
    dims_plan = spatial_dims_schedule(config)
    grid = init_grid((config.initial_n_t,) + dims_plan[0], bounds, config.sigma_init, dtype=np.float32)
    if config.coarse_stage:
        coarse = _run_coarse(data, bounds, config, render)
        seeded = resample_lattice(coarse.raw.astype(np.float64), dims_plan[0])
        grid.raw[:] = np.broadcast_to(seeded, grid.raw.shape).astype(np.float32)
    adam = AdamState.zeros_like(grid.raw)
    probe = None
    if probe_rays > 0:
        probe_rng = np.random.default_rng(config.seed + 7919)
        probe = data.subset(probe_rng.integers(0, len(data), size=probe_rays))

    result = TrainResult(grid, adam)
    result.dims_trace.append((0, grid.dims))
    spatial_at = {it: k + 1 for k, it in enumerate(config.spatial_upscale_iters)}
    temporal_at = set(config.temporal_upscale_iters)
    mask = None
    log_file = open(log_path, "w") if log_path else None
    try:
        if log_file:
            log_file.write("iteration,loss,lr\n")
        for it in range(config.iterations):
            changed = False
            if it in spatial_at:
                new_dims = dims_plan[spatial_at[it]]
                if new_dims != grid.spatial_dims:
                    grid, adam = _apply_upscale(result, grid, adam, it, "spatial", probe, render, config,
                                                new_dims=new_dims)
                    changed = True
            if it in temporal_at:
                grid, adam = _apply_upscale(result, grid, adam, it, "temporal", probe, render, config)
                changed = True
            if config.occupancy and it >= config.occupancy_warmup:
                due = (it - config.occupancy_warmup) % config.occupancy_refresh == 0
                if mask is None or due or changed:
                    mask = refresh_occupancy(grid, config.occupancy_threshold, config.occupancy_dilation,
                                             config.occupancy_refresh)
            lr = lr_schedule(it, config)
            grid, loss = train_step(grid, adam, data, config, it, rng, render, mask)
            result.history.append((it, loss, lr))
            if log_file and (it % config.log_every == 0 or it == config.iterations - 1):
                log_file.write(f"{it},{loss:.9g},{lr:.9g}\n")
            if it % max(config.log_every, 1) == 0:
                log.debug("iter %d loss %.6g lr %.4g dims %s", it, loss, lr, grid.dims)
    finally:
        if log_file:
            log_file.close()
    result.grid, result.adam, result.mask = grid, adam, mask
    result.seconds = time.perf_counter() - t_start
    return result


def _apply_upscale(result: TrainResult, grid: Grid4D, adam: AdamState, it: int, kind: str, probe,
                   render: RenderConfig, config: TrainConfig, new_dims=None):
    before = probe_loss(grid, probe, render) if probe is not None else math.nan
    dims_before = grid.dims
    if kind == "spatial":
        grid = upscale_spatial(grid, new_dims)
        if config.reset_adam_on_upscale:
            adam = AdamState(np.zeros(grid.raw.shape), np.zeros(grid.raw.shape), adam.step)
        else:
            adam.resample_spatial(new_dims)
    else:
        grid = upscale_temporal(grid)
        if config.reset_adam_on_upscale:
            adam = AdamState(np.zeros(grid.raw.shape), np.zeros(grid.raw.shape), adam.step)
        else:
            adam.upscale_temporal()
    after = probe_loss(grid, probe, render) if probe is not None else math.nan
    result.events.append(UpscaleEvent(it, kind, dims_before, grid.dims, before, after))
    result.dims_trace.append((it, grid.dims))
    log.info("iter %d: %s upscale %s -> %s", it, kind, dims_before, grid.dims)
    return grid, adam
