"""Differentiable ray marching through a :class:`Grid4D`.

Two pixel models are supported.  ``absorbance`` returns the attenuated
fraction ``1 - exp(-L)`` (bright vessels on a dark background), and
``line_integral`` returns ``L = sum(sigma_i * delta_i)`` directly.

Samples sit at the midpoints of consecutive ``step_size`` segments between
the ray's entry and exit of the scene box; the last segment is shortened
to the remaining chord so the segment lengths add up to the chord exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Ray, RayBundle, SceneBounds, ViewPose, ray_bundle
from .grid import Grid4D, OccupancyMask, query_density, sample_raw, sigmoid, softplus

PIXEL_MODELS = ("absorbance", "line_integral")


@dataclass(frozen=True)
class RenderConfig:
    step_size: float | None = None  # None -> half the smallest voxel pitch
    pixel_model: str = "absorbance"
    i0: float = 1.0

    def __post_init__(self):
        if self.pixel_model not in PIXEL_MODELS:
            raise ValueError(f"pixel_model must be one of {PIXEL_MODELS}, got {self.pixel_model!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not self.i0 > 0:
            raise ValueError(f"i0 must be positive, got {self.i0}")

    def step_for(self, grid: Grid4D) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 0.5 * float(grid.pitch.min())


@dataclass
class RaySamples:
    points: np.ndarray   # (K, 3)
    deltas: np.ndarray   # (K,)
    skipped: np.ndarray  # (K,) bool

    def __len__(self):
        return len(self.deltas)


@dataclass
class GradientRecord:
    """Nonzero entries of the derivative of one pixel w.r.t. the flat raw array."""

    indices: np.ndarray
    values: np.ndarray

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        np.add.at(out, self.indices, self.values)
        return out


@dataclass
class Projection:
    image: np.ndarray
    pose: ViewPose


def segment_layout(chord: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint offsets (from t_near) and lengths of the marching segments."""
    n = _kernels.segment_count(float(chord), float(step))
    if n == 0:
        return np.zeros(0), np.zeros(0)
    deltas = np.full(n, float(step))
    deltas[-1] = chord - (n - 1) * step
    mids = np.arange(n) * step + 0.5 * deltas
    return mids, deltas


def sample_ray(ray: Ray, config: RenderConfig | float, mask: OccupancyMask | None = None,
               grid: Grid4D | None = None) -> RaySamples:
    """Regularly spaced samples along a ray; ``grid`` is only needed for the default step."""
    if isinstance(config, RenderConfig):
        if config.step_size is None and grid is None:
            raise ValueError("a grid is required to resolve the default step size")
        step = config.step_for(grid) if config.step_size is None else config.step_size
    else:
        step = float(config)
    if not ray.hit:
        return RaySamples(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool))
    mids, deltas = segment_layout(ray.t_far - ray.t_near, step)
    points = ray.at(ray.t_near + mids).reshape(-1, 3)
    skipped = np.zeros(len(deltas), dtype=bool) if mask is None else ~mask.lookup(points)
    return RaySamples(points, deltas, skipped)


def render_pixel(samples: RaySamples, grid: Grid4D, t: float,
                 config: RenderConfig = RenderConfig()) -> tuple[float, GradientRecord]:
    """Reference (pure numpy) pixel evaluation with its raw-space gradient."""
    sigmas, records = [], []
    for x, skip in zip(samples.points, samples.skipped):
        if skip:
            sigmas.append(0.0)
            records.append(None)
            continue
        s, rec = query_density(x, t, grid)
        sigmas.append(s)
        records.append(rec)
    sigmas = np.asarray(sigmas)
    total = float(np.sum(sigmas * samples.deltas))
    if config.pixel_model == "line_integral":
        value, dpdl = total, 1.0
    else:
        value, dpdl = float(-np.expm1(-total)), float(np.exp(-total))
    idx, val = [], []
    for delta, rec in zip(samples.deltas, records):
        if rec is None or len(rec.indices) == 0:
            continue
        idx.append(rec.indices)
        val.append(dpdl * delta * sigmoid(rec.pre_activation) * rec.weights)
    if not idx:
        return value, GradientRecord(np.zeros(0, np.int64), np.zeros(0))
    idx = np.concatenate(idx)
    val = np.concatenate(val)
    uniq, inverse = np.unique(idx, return_inverse=True)
    merged = np.zeros(len(uniq))
    np.add.at(merged, inverse, val)
    return value, GradientRecord(uniq, merged)


def _mask_args(mask: OccupancyMask | None, grid: Grid4D):
    if mask is None:
        return np.zeros(1, np.uint8), np.ones(3, np.int64), np.ones(3), False
    occ = np.ascontiguousarray(mask.occupied, dtype=np.uint8).reshape(-1)
    mdims = np.asarray(mask.occupied.shape, dtype=np.int64)
    return occ, mdims, mask.bounds.extent / mdims, True


def render_rays(grid: Grid4D, bundle: RayBundle, times, config: RenderConfig = RenderConfig(),
                mask: OccupancyMask | None = None, grad_scale: np.ndarray | None = None,
                targets: np.ndarray | None = None, workers: int = 1):
    """Render many rays with the compiled marcher.

    With ``grad_scale`` (one weight per ray) also returns the dense gradient
    ``sum_r grad_scale[r] * dP_r/draw`` over the flat raw array; with
    ``targets`` as well, each ray is further weighted by its residual
    ``P_r - targets[r]`` (one fused forward/backward pass).  ``workers``
    greater than one splits the rays into that many chunks with separate
    gradient buffers, reduced in chunk order.
    """
    n = len(bundle)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,)).copy()
    dims = np.asarray(grid.dims, dtype=np.int64)
    raw = grid.raw.reshape(-1)
    occ, mdims, mpitch, use_mask = _mask_args(mask, grid)
    line_integral = config.pixel_model == "line_integral"
    step = config.step_for(grid)
    pixels = np.zeros(n)
    want_grad = grad_scale is not None
    scale = np.ascontiguousarray(grad_scale, dtype=np.float64) if want_grad else np.zeros(n)
    args = (raw, dims, grid.bounds.lo, grid.bounds.hi, grid.pitch, float(grid.activation_bias),
            float(grid.outside_raw), np.ascontiguousarray(bundle.origins, dtype=np.float64),
            np.ascontiguousarray(bundle.directions, dtype=np.float64),
            np.ascontiguousarray(bundle.t_near, dtype=np.float64),
            np.ascontiguousarray(bundle.t_far, dtype=np.float64),
            np.ascontiguousarray(bundle.hit, dtype=np.bool_), times, float(step),
            occ, mdims, mpitch, use_mask, line_integral, pixels, scale,
            np.zeros(1) if targets is None else np.ascontiguousarray(targets, dtype=np.float64),
            targets is not None)
    if workers <= 1:
        grad = np.zeros(raw.size if want_grad else 1)
        _kernels.march(*args, grad, want_grad)
    else:
        grads = np.zeros((int(workers), raw.size if want_grad else 1))
        _kernels.march_chunked(*args, grads, want_grad)
        grad = grads.sum(axis=0)
    if want_grad:
        return pixels, grad
    return pixels


def render_view(pose: ViewPose, grid: Grid4D, config: RenderConfig = RenderConfig(),
                mask: OccupancyMask | None = None, workers: int = 1) -> Projection:
    """Full detector image at the pose's (clamped) time; rays missing the box give 0."""
    bundle = ray_bundle(pose, grid.bounds)
    t = float(np.clip(pose.time, 0.0, 1.0))
    pixels = render_rays(grid, bundle, t, config, mask=mask, workers=workers)
    return Projection(pixels.reshape(pose.rows, pose.cols), pose)


def lattice_centers(bounds: SceneBounds, dims) -> np.ndarray:
    """Voxel-center coordinates of a lattice over ``bounds``, shape ``dims + (3,)``."""
    axes = [bounds.lo[a] + (np.arange(n) + 0.5) * bounds.extent[a] / n for a, n in enumerate(dims)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def export_volume(grid: Grid4D, t: float, dims=None) -> np.ndarray:
    """Activated density on a lattice over the grid's bounds at time ``t``."""
    dims = grid.spatial_dims if dims is None else tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"export dims must be three positive integers, got {dims}")
    pts = lattice_centers(grid.bounds, dims).reshape(-1, 3)
    out = np.empty(len(pts))
    chunk = 1 << 18
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = softplus(sample_raw(pts[s:s + chunk], t, grid) + grid.activation_bias)
    return out.reshape(dims)
