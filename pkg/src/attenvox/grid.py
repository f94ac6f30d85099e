"""The learnable 4D attenuation lattice.

Raw (pre-activation) values live on a cell-centered lattice of shape
``(n_t, n_h, n_w, n_d)``; h, w, d run along world x, y, z.  Density is
``softplus(raw + activation_bias)``.  Along an axis spanning ``[lo, hi]`` with
``n`` sites, site ``i`` sits at ``lo + (i + 0.5) * (hi - lo) / n``; time knot
``k`` sits at ``k / (n_t - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import SceneBounds

SOFTPLUS_LINEAR_ABOVE = 30.0


def softplus(x):
    x = np.asarray(x, dtype=float)
    out = np.where(x > SOFTPLUS_LINEAR_ABOVE, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))
    return out[()] if out.ndim == 0 else out


def softplus_inverse(y):
    """Pre-activation whose softplus equals ``y`` (y > 0)."""
    y = np.asarray(y, dtype=float)
    out = np.where(y > SOFTPLUS_LINEAR_ABOVE, y, np.log(np.expm1(np.minimum(y, SOFTPLUS_LINEAR_ABOVE))))
    return out[()] if out.ndim == 0 else out


def sigmoid(x):
    """Derivative of softplus, written to avoid overflow for either sign."""
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out[()] if out.ndim == 0 else out


@dataclass
class Grid4D:
    raw: np.ndarray
    bounds: SceneBounds
    activation_bias: float = 0.0
    sigma_init: float = 1e-4

    def __post_init__(self):
        if self.raw.ndim != 4 or min(self.raw.shape) < 1:
            raise ValueError(f"raw must be a non-empty 4D array, got shape {self.raw.shape}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(n) for n in self.raw.shape)

    @property
    def n_t(self) -> int:
        return self.raw.shape[0]

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.raw.shape[1:])

    @property
    def pitch(self) -> np.ndarray:
        return self.bounds.extent / np.asarray(self.spatial_dims, dtype=float)

    @property
    def outside_raw(self) -> float:
        """Raw value reported for queries outside the bounds."""
        return float(softplus_inverse(self.sigma_init) - self.activation_bias)

    @property
    def flat(self) -> np.ndarray:
        """Flattened view, index ``((t*n_h + h)*n_w + w)*n_d + d``."""
        return self.raw.reshape(-1)

    def activate(self, raw_value):
        return softplus(np.asarray(raw_value, dtype=float) + self.activation_bias)

    def density(self) -> np.ndarray:
        return self.activate(self.raw)

    def copy(self) -> "Grid4D":
        return Grid4D(self.raw.copy(), self.bounds, self.activation_bias, self.sigma_init)

    def voxel_centers(self, axis: int) -> np.ndarray:
        """World coordinates of the lattice sites along spatial axis 0, 1 or 2."""
        n = self.spatial_dims[axis]
        return self.bounds.lo[axis] + (np.arange(n) + 0.5) * self.pitch[axis]


@dataclass
class OccupancyMask:
    occupied: np.ndarray
    bounds: SceneBounds
    refresh_interval: int = 1000

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """True where the voxel containing each point is occupied (outside -> False)."""
        points = np.atleast_2d(points)
        dims = np.asarray(self.occupied.shape)
        idx = np.floor((points - self.bounds.lo) / (self.bounds.extent / dims)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < dims), axis=-1)
        idx = np.clip(idx, 0, dims - 1)
        return inside & self.occupied[idx[:, 0], idx[:, 1], idx[:, 2]]


@dataclass
class WeightRecord:
    """Flat raw indices touched by one density query and their weights."""

    indices: np.ndarray
    weights: np.ndarray
    pre_activation: float = 0.0

    def total(self) -> float:
        return float(self.weights.sum())


def init_grid(dims, bounds: SceneBounds, sigma_init: float = 1e-4, dtype=np.float64) -> Grid4D:
    if not sigma_init > 0:
        raise ValueError(f"sigma_init must be positive, got {sigma_init}")
    dims = tuple(int(n) for n in dims)
    if len(dims) != 4 or min(dims) < 1:
        raise ValueError(f"dims must be four positive integers, got {dims}")
    bias = float(softplus_inverse(sigma_init))
    return Grid4D(np.zeros(dims, dtype=dtype), bounds, activation_bias=bias, sigma_init=float(sigma_init))


def activate(raw_value, activation_bias: float = 0.0):
    return softplus(np.asarray(raw_value, dtype=float) + activation_bias)


def axis_weights(coord, lo: float, pitch: float, n: int):
    """Lower/upper site indices and upper weight for linear interpolation along one axis.

    Coordinates between the boundary and the first/last site are clamped
    to that site (edge replication).
    """
    u = (np.asarray(coord, dtype=float) - lo) / pitch - 0.5
    if n == 1:
        zero = np.zeros(np.shape(u), dtype=np.int64)
        return zero, zero, np.zeros(np.shape(u))
    u = np.clip(u, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    return i0, i0 + 1, u - i0


def time_weights(t, n_t: int):
    """Lower/upper knot indices and upper weight; t is clamped to [0, 1]."""
    if n_t == 1:
        zero = np.zeros(np.shape(t), dtype=np.int64)
        return zero, zero, np.zeros(np.shape(t))
    s = np.clip(np.asarray(t, dtype=float), 0.0, 1.0) * (n_t - 1)
    k0 = np.minimum(np.floor(s).astype(np.int64), n_t - 2)
    return k0, k0 + 1, s - k0


def in_bounds(points: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    points = np.atleast_2d(points)
    return np.all((points >= bounds.lo) & (points <= bounds.hi), axis=-1)


def sample_spatial_many(points: np.ndarray, grid: Grid4D) -> np.ndarray:
    """Trilinear interpolation of every time slice; returns shape ``(N, n_t)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, pitch, dims = grid.bounds.lo, grid.pitch, grid.spatial_dims
    ix = [axis_weights(points[:, a], lo[a], pitch[a], dims[a]) for a in range(3)]
    raw = grid.raw
    out = np.zeros((len(points), grid.n_t))
    for cx in (0, 1):
        wx = ix[0][2] if cx else 1.0 - ix[0][2]
        for cy in (0, 1):
            wy = ix[1][2] if cy else 1.0 - ix[1][2]
            for cz in (0, 1):
                wz = ix[2][2] if cz else 1.0 - ix[2][2]
                v = raw[:, ix[0][cx], ix[1][cy], ix[2][cz]]  # (n_t, N)
                out += (wx * wy * wz)[:, None] * v.T
    out[~in_bounds(points, grid.bounds)] = grid.outside_raw
    return out


def sample_spatial(x, grid: Grid4D) -> np.ndarray:
    return sample_spatial_many(np.asarray(x, dtype=float)[None], grid)[0]


def sample_temporal(t: float, per_time_values) -> float:
    values = np.asarray(per_time_values, dtype=float)
    k0, k1, f = time_weights(t, len(values))
    return float((1.0 - f) * values[k0] + f * values[k1])


def sample_raw(points: np.ndarray, t: float, grid: Grid4D) -> np.ndarray:
    """Spatially and temporally interpolated raw values at many points, one time."""
    per_time = sample_spatial_many(points, grid)
    k0, k1, f = time_weights(t, grid.n_t)
    return (1.0 - f) * per_time[:, k0] + f * per_time[:, k1]


def query_density(x, t: float, grid: Grid4D) -> tuple[float, WeightRecord]:
    x = np.asarray(x, dtype=float)
    if not in_bounds(x, grid.bounds)[0]:
        pre = grid.outside_raw + grid.activation_bias
        return float(softplus(pre)), WeightRecord(np.zeros(0, np.int64), np.zeros(0), pre)
    lo, pitch, (nh, nw, nd) = grid.bounds.lo, grid.pitch, grid.spatial_dims
    hx = axis_weights(x[0], lo[0], pitch[0], nh)
    wy = axis_weights(x[1], lo[1], pitch[1], nw)
    dz = axis_weights(x[2], lo[2], pitch[2], nd)
    tk = time_weights(t, grid.n_t)
    idx, wts = [], []
    for ct in (0, 1):
        w_t = tk[2] if ct else 1.0 - tk[2]
        for cx in (0, 1):
            w_x = hx[2] if cx else 1.0 - hx[2]
            for cy in (0, 1):
                w_y = wy[2] if cy else 1.0 - wy[2]
                for cz in (0, 1):
                    w_z = dz[2] if cz else 1.0 - dz[2]
                    flat = ((tk[ct] * nh + hx[cx]) * nw + wy[cy]) * nd + dz[cz]
                    idx.append(int(flat))
                    wts.append(float(w_t * w_x * w_y * w_z))
    uniq, inverse = np.unique(np.asarray(idx), return_inverse=True)
    merged = np.zeros(len(uniq))
    np.add.at(merged, inverse, np.asarray(wts))
    raw_value = float(merged @ grid.flat[uniq])
    pre = raw_value + grid.activation_bias
    return float(softplus(pre)), WeightRecord(uniq, merged, pre)


def insert_time_midpoints(values: np.ndarray) -> np.ndarray:
    """``(n_t, ...) -> (2 n_t - 1, ...)``, old knots kept verbatim, midpoints between."""
    if values.shape[0] < 2:
        raise ValueError("temporal upscaling needs n_t >= 2")
    v = values.astype(np.float64)
    out = np.empty((2 * values.shape[0] - 1,) + values.shape[1:], dtype=np.float64)
    out[0::2] = v
    out[1::2] = 0.5 * (v[:-1] + v[1:])
    return out.astype(values.dtype)


def upscale_temporal(grid: Grid4D) -> Grid4D:
    return Grid4D(insert_time_midpoints(grid.raw), grid.bounds, grid.activation_bias, grid.sigma_init)


def _resample_axis(values: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    n_old = values.shape[axis]
    if n_new == n_old:
        return values
    # new centers expressed in old continuous-index units
    centers = (np.arange(n_new) + 0.5) * (n_old / n_new)
    i0, i1, f = axis_weights(centers, 0.0, 1.0, n_old)
    shape = [1] * values.ndim
    shape[axis] = n_new
    f = f.reshape(shape)
    return (1.0 - f) * np.take(values, i0, axis=axis) + f * np.take(values, i1, axis=axis)


def resample_lattice(values: np.ndarray, new_dims) -> np.ndarray:
    """Trilinear resampling of a ``(n_t, n_h, n_w, n_d)`` array at new voxel centers."""
    out = values.astype(np.float64)
    for axis, n_new in zip((1, 2, 3), new_dims):
        out = _resample_axis(out, axis, int(n_new))
    return out.astype(values.dtype)


def upscale_spatial(grid: Grid4D, new_dims) -> Grid4D:
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or any(n < o for n, o in zip(new_dims, grid.spatial_dims)):
        raise ValueError(f"cannot shrink grid from {grid.spatial_dims} to {new_dims}")
    return Grid4D(resample_lattice(grid.raw, new_dims), grid.bounds, grid.activation_bias, grid.sigma_init)


def refresh_occupancy(grid: Grid4D, threshold: float = 1e-3, dilation: int = 1,
                      refresh_interval: int = 1000) -> OccupancyMask:
    if not threshold > 0:
        raise ValueError(f"occupancy threshold must be positive, got {threshold}")
    # softplus is monotone, so the max over knots can be taken in raw space
    peak = grid.activate(grid.raw.max(axis=0))
    occupied = peak >= threshold
    if dilation > 0 and occupied.any():
        occupied = ndimage.maximum_filter(occupied, size=2 * int(dilation) + 1, mode="constant", cval=False)
    return OccupancyMask(occupied, grid.bounds, refresh_interval)
