"""C-arm style acquisition geometry.

A view is described the way an angiography system reports it (primary and
secondary angle, source-to-detector distance, pixel spacing) and converted
into a point source plus a flat detector, i.e. a pinhole camera whose image
plane sits behind the object.

World frame: millimeters, isocenter at the origin, +z vertical.  With both
angles at zero the source sits at (0, -sod, 0), the detector normal points
along +y, detector columns run along +x and detector rows along +z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class SceneBounds:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float)
        hi = np.asarray(self.max_corner, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds corners must be 3-vectors")
        if not np.all(lo < hi):
            raise ValueError(f"min_corner {tuple(lo)} must be < max_corner {tuple(hi)} componentwise")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in hi))

    @classmethod
    def cube(cls, half_width: float) -> "SceneBounds":
        h = float(half_width)
        return cls((-h, -h, -h), (h, h, h))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max_corner)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))


@dataclass(frozen=True)
class ViewPose:
    primary_angle: float
    secondary_angle: float
    sdd: float
    sod: float
    pixel_spacing: float
    rows: int
    cols: int
    time: float = 0.0

    def __post_init__(self):
        if not (self.sdd > self.sod > 0):
            raise ValueError(f"need sdd > sod > 0, got sdd={self.sdd}, sod={self.sod}")
        if not self.pixel_spacing > 0:
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"detector must have at least one pixel, got {self.rows}x{self.cols}")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {self.time}")

    def with_time(self, time: float) -> "ViewPose":
        """Copy of the pose at another acquisition time (clamped to [0, 1])."""
        return ViewPose(self.primary_angle, self.secondary_angle, self.sdd, self.sod,
                        self.pixel_spacing, self.rows, self.cols, float(np.clip(time, 0.0, 1.0)))


@dataclass(frozen=True)
class Camera:
    source: np.ndarray
    detector_center: np.ndarray
    row_axis: np.ndarray
    col_axis: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.col_axis, self.row_axis)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    hit: bool

    @property
    def chord(self) -> float:
        return self.t_far - self.t_near if self.hit else 0.0

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def rotation(primary_deg: float, secondary_deg: float) -> np.ndarray:
    """Rig rotation: secondary about the rig x axis, then primary about world z."""
    a = np.deg2rad(primary_deg)
    b = np.deg2rad(secondary_deg)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    return rz @ rx


def pose_to_camera(pose: ViewPose) -> Camera:
    r = rotation(pose.primary_angle, pose.secondary_angle)
    source = r @ np.array([0.0, -pose.sod, 0.0])
    center = r @ np.array([0.0, pose.sdd - pose.sod, 0.0])
    return Camera(source=source, detector_center=center,
                  row_axis=r @ np.array([0.0, 0.0, 1.0]),
                  col_axis=r @ np.array([1.0, 0.0, 0.0]))


def pixel_centers(pose: ViewPose, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """World positions of detector pixel centers, shape ``rows.shape + (3,)``."""
    cam = pose_to_camera(pose)
    u = (np.asarray(cols, dtype=float) + 0.5 - pose.cols / 2.0) * pose.pixel_spacing
    v = (np.asarray(rows, dtype=float) + 0.5 - pose.rows / 2.0) * pose.pixel_spacing
    return (cam.detector_center
            + np.multiply.outer(u, cam.col_axis)
            + np.multiply.outer(v, cam.row_axis))


def intersect_box(origins: np.ndarray, directions: np.ndarray, bounds: SceneBounds):
    """Slab test. Returns ``(t_near, t_far, hit)``; t_near is clipped at the origin."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / directions
        t0 = (bounds.lo - origins) * inv
        t1 = (bounds.hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = directions == 0.0
    inside = (origins >= bounds.lo) & (origins <= bounds.hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return t_near, t_far, hit


@dataclass
class RayBundle:
    """Struct-of-arrays form of many rays, used by the batched renderer."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray
    pixels: np.ndarray  # (n, 2) of (row, col)

    def __len__(self):
        return len(self.t_near)

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.t_near[i]),
                   float(self.t_far[i]), bool(self.hit[i]))


def ray_bundle(pose: ViewPose, bounds: SceneBounds,
               pixel_subset: Sequence[tuple[int, int]] | np.ndarray | None = None) -> RayBundle:
    if pixel_subset is None:
        rr, cc = np.meshgrid(np.arange(pose.rows), np.arange(pose.cols), indexing="ij")
        pixels = np.stack([rr.ravel(), cc.ravel()], axis=-1)
    else:
        pixels = np.asarray(pixel_subset, dtype=np.int64).reshape(-1, 2)
        bad = ((pixels[:, 0] < 0) | (pixels[:, 0] >= pose.rows)
               | (pixels[:, 1] < 0) | (pixels[:, 1] >= pose.cols))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise IndexError(f"pixel {tuple(pixels[i])} outside {pose.rows}x{pose.cols} detector")
    cam = pose_to_camera(pose)
    targets = pixel_centers(pose, pixels[:, 0], pixels[:, 1])
    d = targets - cam.source
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.source, d.shape).copy()
    t_near, t_far, hit = intersect_box(origins, d, bounds)
    return RayBundle(origins, d, t_near, t_far, hit, pixels)


def generate_rays(pose: ViewPose, bounds: SceneBounds,
                  pixel_subset: Iterable[tuple[int, int]] | None = None) -> list[tuple[Ray, tuple[int, int]]]:
    """One ray per requested detector pixel, paired with its ``(row, col)``."""
    b = ray_bundle(pose, bounds, None if pixel_subset is None else list(pixel_subset))
    return [(b.ray(i), (int(b.pixels[i, 0]), int(b.pixels[i, 1]))) for i in range(len(b))]


def assign_view_times(view_count: int) -> list[float]:
    """Uniform normalized times in acquisition order (one view per instant)."""
    if view_count < 1:
        raise ValueError("view_count must be >= 1")
    if view_count == 1:
        return [0.0]
    return [j / (view_count - 1) for j in range(view_count)]
