"""Analytic dynamic vessel phantom and an exact forward projector.

Vessels are capsules (segment plus radius) of uniform density that fills in
with a smooth-step ramp after the contrast arrival time.  Projections are
computed from exact ray/capsule intersection intervals, with no lattice
anywhere in the path, so data generation never shares a discretization with
reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import SceneBounds, ViewPose, intersect_box, ray_bundle
from .renderer import Projection, RenderConfig, lattice_centers


@dataclass(frozen=True)
class VesselSegment:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    sigma_max: float = 0.05
    arrival_time: float = 0.0
    fill_duration: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.sigma_max < 0:
            raise ValueError(f"sigma_max must be non-negative, got {self.sigma_max}")

    def value(self, t) -> np.ndarray:
        """Density inside the capsule at time(s) ``t``."""
        return self.sigma_max * fill_ramp(t, self.arrival_time, self.fill_duration)


@dataclass(frozen=True)
class PhantomField:
    segments: tuple[VesselSegment, ...] = ()
    background: float = 0.0

    def static(self) -> "PhantomField":
        """Same geometry with every vessel filled from t = 0."""
        return PhantomField(tuple(replace(s, arrival_time=0.0, fill_duration=0.0) for s in self.segments),
                            self.background)


@dataclass(frozen=True)
class NoiseModel:
    gaussian_std_fraction: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_std_fraction < 0:
            raise ValueError("gaussian_std_fraction must be non-negative")


def smoothstep(u):
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def fill_ramp(t, arrival: float, duration: float):
    t = np.asarray(t, dtype=float)
    if duration <= 0:
        return (t >= arrival).astype(float)
    return smoothstep((t - arrival) / duration)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    ap = points - a
    s = np.zeros(len(points)) if denom == 0 else np.clip(ap @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(ap - s[:, None] * ab, axis=-1)


def phantom_density(x, t: float, field: PhantomField) -> np.ndarray | float:
    """Density at one point ``(3,)`` or many points ``(N, 3)`` at time ``t``."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = np.full(len(pts), float(field.background))
    for seg in field.segments:
        inside = _segment_distance(pts, np.asarray(seg.start), np.asarray(seg.end)) <= seg.radius
        out = np.where(inside, np.maximum(out, seg.value(t)), out)
    return float(out[0]) if single else out


def default_phantom(static: bool = False, radii=(3.0, 2.0, 1.5)) -> PhantomField:
    """Deterministic three-generation vessel tree inside the 100 mm cube around the origin.

    The trunk enters from below and fills first; each branch generation
    arrives later than its parent.  ``static=True`` fills every vessel at
    t = 0.
    """
    r0, r1, r2 = radii
    trunk_top = (0.0, 0.0, -5.0)
    left, right = (-24.0, 8.0, 18.0), (22.0, -10.0, 16.0)
    segments = [
        VesselSegment((0.0, 0.0, -46.0), trunk_top, r0, 0.05, 0.0, 0.3),
        VesselSegment(trunk_top, left, r1, 0.05, 0.2, 0.3),
        VesselSegment(trunk_top, right, r1, 0.05, 0.25, 0.3),
        VesselSegment(left, (-38.0, 24.0, 40.0), r2, 0.05, 0.45, 0.3),
        VesselSegment(left, (-20.0, -14.0, 38.0), r2, 0.05, 0.5, 0.3),
        VesselSegment(right, (36.0, 14.0, 38.0), r2, 0.05, 0.5, 0.3),
        VesselSegment(right, (18.0, -30.0, 36.0), r2, 0.05, 0.55, 0.3),
    ]
    phantom = PhantomField(tuple(segments))
    return phantom.static() if static else phantom


PHANTOM_BOUNDS = SceneBounds.cube(50.0)


def _capsule_intervals(origins, dirs, seg: VesselSegment):
    """Entry/exit parameters of each ray through a capsule (nan where it misses).

    The capsule is convex, so its chord is the hull of the chords through
    the finite cylinder and the two end spheres.
    """
    a, b = np.asarray(seg.start), np.asarray(seg.end)
    r2 = seg.radius ** 2
    n = len(origins)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)

    def sphere(c):
        oc = origins - c
        bq = np.einsum("ij,ij->i", oc, dirs)
        cq = np.einsum("ij,ij->i", oc, oc) - r2
        disc = bq * bq - cq
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        return ok, -bq - sq, -bq + sq

    for c in (a, b):
        ok, t0, t1 = sphere(c)
        lo = np.where(ok, np.minimum(lo, t0), lo)
        hi = np.where(ok, np.maximum(hi, t1), hi)

    axis = b - a
    length = np.linalg.norm(axis)
    if length > 0:
        u = axis / length
        oa = origins - a
        d_par = dirs @ u
        o_par = oa @ u
        d_perp = dirs - d_par[:, None] * u
        o_perp = oa - o_par[:, None] * u
        qa = np.einsum("ij,ij->i", d_perp, d_perp)
        qb = np.einsum("ij,ij->i", d_perp, o_perp)
        qc = np.einsum("ij,ij->i", o_perp, o_perp) - r2
        disc = qb * qb - qa * qc
        ok = (qa > 1e-15) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe = np.where(ok, qa, 1.0)
        t0 = (-qb - sq) / safe
        t1 = (-qb + sq) / safe
        # clip the infinite-cylinder chord to the slab 0 <= axial <= length
        with np.errstate(divide="ignore", invalid="ignore"):
            s0 = (0.0 - o_par) / d_par
            s1 = (length - o_par) / d_par
        par = np.abs(d_par) < 1e-15
        smin = np.where(par, np.where((o_par >= 0) & (o_par <= length), -np.inf, np.inf), np.minimum(s0, s1))
        smax = np.where(par, np.where((o_par >= 0) & (o_par <= length), np.inf, -np.inf), np.maximum(s0, s1))
        c0 = np.maximum(t0, smin)
        c1 = np.minimum(t1, smax)
        ok &= c1 > c0
        lo = np.where(ok, np.minimum(lo, c0), lo)
        hi = np.where(ok, np.maximum(hi, c1), hi)
    miss = ~(hi > lo)
    lo[miss] = np.nan
    hi[miss] = np.nan
    return lo, hi


def line_integrals(field: PhantomField, origins, dirs, t: float, bounds: SceneBounds = PHANTOM_BOUNDS):
    """Exact ``int sigma ds`` through the bounds for each ray (piecewise-constant field)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    tn, tf, hit = intersect_box(origins, dirs, bounds)
    n = len(origins)
    if not field.segments:
        return np.where(hit, field.background * (tf - tn), 0.0)
    starts, ends, values = [], [], []
    for seg in field.segments:
        s0, s1 = _capsule_intervals(origins, dirs, seg)
        starts.append(np.clip(s0, tn, tf))
        ends.append(np.clip(s1, tn, tf))
        values.append(float(seg.value(t)))
    starts = np.stack(starts, axis=1)  # (n, S)
    ends = np.stack(ends, axis=1)
    values = np.asarray(values)
    knots = np.concatenate([tn[:, None], tf[:, None], starts, ends], axis=1)
    knots = np.sort(np.where(np.isnan(knots), tf[:, None], knots), axis=1)
    lengths = np.diff(knots, axis=1)
    mids = 0.5 * (knots[:, 1:] + knots[:, :-1])
    covered = (starts[:, None, :] <= mids[:, :, None]) & (mids[:, :, None] <= ends[:, None, :])
    dens = np.max(np.where(covered, values, field.background), axis=2)
    dens = np.maximum(dens, field.background)
    return np.where(hit, np.sum(dens * lengths, axis=1), 0.0)


def _to_pixels(line, config: RenderConfig):
    if config.pixel_model == "line_integral":
        return line
    return -np.expm1(-line)


def project_phantom(field: PhantomField, pose: ViewPose, config: RenderConfig = RenderConfig(),
                    bounds: SceneBounds = PHANTOM_BOUNDS) -> Projection:
    """Noise-free detector image of the phantom at the pose's time."""
    bundle = ray_bundle(pose, bounds)
    line = line_integrals(field, bundle.origins, bundle.directions, pose.time, bounds)
    return Projection(_to_pixels(line, config).reshape(pose.rows, pose.cols), pose)


def quadrature_line_integrals(field: PhantomField, origins, dirs, t: float, step: float,
                              bounds: SceneBounds = PHANTOM_BOUNDS):
    """Midpoint-rule line integrals of :func:`phantom_density`; a cross-check for the exact path."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    tn, tf, hit = intersect_box(origins, dirs, bounds)
    out = np.zeros(len(origins))
    for i in np.flatnonzero(hit):
        chord = tf[i] - tn[i]
        n = max(1, int(np.ceil(chord / step - 1e-9)))
        deltas = np.full(n, step)
        deltas[-1] = chord - (n - 1) * step
        mids = tn[i] + np.arange(n) * step + 0.5 * deltas
        out[i] = float(phantom_density(origins[i] + mids[:, None] * dirs[i], t, field) @ deltas)
    return out


def add_noise(image: Projection, model: NoiseModel) -> Projection:
    """Additive Gaussian noise with std proportional to the image maximum, clamped to [0, 1]."""
    img = image.image
    if model.gaussian_std_fraction == 0:
        return Projection(img.copy(), image.pose)
    rng = np.random.default_rng(model.seed)
    std = model.gaussian_std_fraction * float(img.max())
    noisy = img + rng.normal(0.0, std, size=img.shape)
    return Projection(np.clip(noisy, 0.0, 1.0), image.pose)


def rasterize_ground_truth(field: PhantomField, dims, bounds: SceneBounds, times) -> np.ndarray:
    """Phantom density at voxel centers, shape ``(len(times), h, w, d)``."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    pts = lattice_centers(bounds, dims).reshape(-1, 3)
    return np.stack([phantom_density(pts, float(t), field).reshape(dims) for t in times])


def acquisition_poses(n_views: int, arc_deg: float = 180.0, start_deg: float | None = None,
                      secondary_deg: float = 0.0, sdd: float = 1000.0, sod: float | None = None,
                      pixel_spacing: float = 2.4, rows: int = 128, cols: int = 128,
                      times=None, offset: float = 0.0) -> list[ViewPose]:
    """Evenly spaced rotational sweep; ``offset`` (in view spacings) shifts angle and time together.

    With ``times`` omitted, time advances with angle so that view ``j`` of
    ``M`` sits at normalized position ``(j + offset) / (M - 1)``.
    """
    sod = sdd / 2.0 if sod is None else sod
    start = -arc_deg / 2.0 if start_deg is None else start_deg
    frac = (np.arange(n_views) + offset) / max(n_views - 1, 1)
    if times is None:
        times = np.clip(frac, 0.0, 1.0) if n_views > 1 else np.zeros(1)
    return [ViewPose(float(start + arc_deg * f), secondary_deg, sdd, sod, pixel_spacing, rows, cols, float(tt))
            for f, tt in zip(frac, times)]
