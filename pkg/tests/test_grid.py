import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from attenvox.geometry import SceneBounds
from attenvox.grid import (Grid4D, activate, init_grid, insert_time_midpoints, query_density,
                           refresh_occupancy, resample_lattice, sample_raw, sample_spatial,
                           sample_temporal, softplus, softplus_inverse, upscale_spatial,
                           upscale_temporal)


def random_grid(rng, dims, bounds=SceneBounds.cube(1.0)):
    g = init_grid(dims, bounds)
    g.raw[:] = rng.normal(size=dims)
    return g


def brute_weight(coord, lo, pitch, n, i):
    """Hat-function weight of site i, written independently of the library."""
    c = lo + (i + 0.5) * pitch
    first, last = lo + 0.5 * pitch, lo + (n - 0.5) * pitch
    x = min(max(coord, first), last)
    if n == 1:
        return 1.0
    return max(0.0, 1.0 - abs(x - c) / pitch)


def brute_spatial(x, grid):
    out = np.zeros(grid.n_t)
    lo, pitch = grid.bounds.lo, grid.pitch
    for h, w, d in itertools.product(*(range(n) for n in grid.spatial_dims)):
        wt = (brute_weight(x[0], lo[0], pitch[0], grid.spatial_dims[0], h)
              * brute_weight(x[1], lo[1], pitch[1], grid.spatial_dims[1], w)
              * brute_weight(x[2], lo[2], pitch[2], grid.spatial_dims[2], d))
        out += wt * grid.raw[:, h, w, d]
    return out


def brute_temporal(t, values):
    n = len(values)
    if n == 1:
        return values[0]
    knots = np.arange(n) / (n - 1)
    return sum(max(0.0, 1.0 - abs(t - k) * (n - 1)) * v for k, v in zip(knots, values))


def test_init_matches_sigma_init():
    g = init_grid((2, 3, 3, 3), SceneBounds.cube(1), sigma_init=1e-4)
    np.testing.assert_allclose(g.density(), 1e-4, atol=1e-10)


def test_full_scale_length_without_allocating():
    dims = (4, 320, 320, 320)
    g = Grid4D(np.broadcast_to(np.float32(0), dims), SceneBounds.cube(1))
    assert g.raw.size == 4 * 320 ** 3


def test_smallest_grid_length():
    assert init_grid((1, 2, 2, 2), SceneBounds.cube(1)).flat.size == 8


@pytest.mark.parametrize("bad", [(0, 2, 2, 2), (2, 2, 2)])
def test_init_rejects_bad_dims(bad):
    with pytest.raises(ValueError):
        init_grid(bad, SceneBounds.cube(1))


def test_init_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        init_grid((1, 2, 2, 2), SceneBounds.cube(1), sigma_init=0.0)


def test_activation_examples():
    assert activate(0.0) == pytest.approx(np.log(2), abs=1e-12)
    assert abs(activate(50.0) - 50.0) < 1e-9
    v = activate(-50.0)
    assert 0 < v < 1e-20


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20))
def test_activation_monotone_positive(xs):
    xs = np.sort(np.asarray(xs))
    y = softplus(xs)
    assert np.all(np.isfinite(y)) and np.all(y >= 0)
    assert np.all(np.diff(y) >= 0)
    assert np.all(y[xs > -700] > 0)


@given(st.floats(1e-12, 1e3))
def test_softplus_inverse_roundtrip(y):
    assert softplus(softplus_inverse(y)) == pytest.approx(y, rel=1e-9)


def test_sample_at_center_and_centroid(rng):
    g = random_grid(rng, (3, 3, 3, 3))
    centers = [g.voxel_centers(a) for a in range(3)]
    np.testing.assert_allclose(sample_spatial([centers[0][1], centers[1][2], centers[2][0]], g),
                               g.raw[:, 1, 2, 0], atol=1e-14)
    mid = [(c[0] + c[1]) / 2 for c in centers]
    np.testing.assert_allclose(sample_spatial(mid, g), g.raw[:, :2, :2, :2].mean(axis=(1, 2, 3)), atol=1e-14)


def test_spatial_matches_brute_force(rng):
    g = random_grid(rng, (2, 3, 3, 3))
    pts = rng.uniform(-1, 1, size=(200, 3))
    for x in pts:
        np.testing.assert_allclose(sample_spatial(x, g), brute_spatial(x, g), atol=1e-12)


def test_time_knots_and_examples():
    assert sample_temporal(0.25, [0.0, 1.0]) == 0.25
    vals = np.array([3.0, -1.0, 2.5, 7.0])
    for k, t in enumerate([0, 1 / 3, 2 / 3, 1]):
        assert sample_temporal(t, vals) == vals[k]
    assert sample_temporal(-0.5, vals) == vals[0]
    assert sample_temporal(1.5, vals) == vals[-1]


@given(st.floats(0, 1), st.lists(st.floats(-5, 5), min_size=1, max_size=9))
def test_temporal_matches_brute_force(t, values):
    assert sample_temporal(t, values) == pytest.approx(brute_temporal(t, values), abs=1e-12)


def test_query_density_matches_4d_oracle(rng):
    g = random_grid(rng, (4, 3, 3, 3))
    for _ in range(100):
        x = rng.uniform(-1, 1, 3)
        t = rng.uniform()
        sigma, rec = query_density(x, t, g)
        expected = softplus(brute_temporal(t, brute_spatial(x, g)) + g.activation_bias)
        assert sigma == pytest.approx(expected, abs=1e-12)
        assert rec.total() == pytest.approx(1.0, abs=1e-12)
        assert len(rec.indices) <= 16
        assert rec.weights @ g.flat[rec.indices] + g.activation_bias == pytest.approx(rec.pre_activation)


def test_uniform_grid_query():
    g = init_grid((3, 4, 4, 4), SceneBounds.cube(2))
    g.raw[:] = 0.7
    sigma, _ = query_density([0.3, -1.1, 1.9], 0.42, g)
    assert sigma == pytest.approx(float(activate(0.7 + g.activation_bias)), abs=1e-14)


def test_out_of_bounds_returns_init_density():
    g = init_grid((1, 2, 2, 2), SceneBounds.cube(1), sigma_init=1e-4)
    g.raw[:] = 5.0
    sigma, rec = query_density([3.0, 0, 0], 0.0, g)
    assert sigma == pytest.approx(1e-4, rel=1e-9)
    assert len(rec.indices) == 0


@given(st.integers(0, 2 ** 31))
def test_query_is_lipschitz(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, (2, 3, 4, 3))
    x = rng.uniform(-0.9, 0.9, 3)
    t = rng.uniform()
    eps = 1e-6 * g.pitch.min()
    s0, _ = query_density(x, t, g)
    s1, _ = query_density(x + eps * rng.normal(size=3) / np.sqrt(3), t, g)
    spread = g.raw.max() - g.raw.min()
    assert abs(s1 - s0) <= 3 * spread / g.pitch.min() * eps + 1e-15


def test_upscale_temporal_examples():
    g = init_grid((4, 2, 2, 2), SceneBounds.cube(1))
    assert upscale_temporal(g).n_t == 7
    np.testing.assert_allclose(insert_time_midpoints(np.array([1.0, 3.0])), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        upscale_temporal(init_grid((1, 2, 2, 2), SceneBounds.cube(1)))


@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_upscale_temporal_preserves_function(seed, n_t):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=n_t)
    up = insert_time_midpoints(vals)
    for t in np.linspace(0, 1, 101):
        assert abs(sample_temporal(t, up) - sample_temporal(t, vals)) <= 1e-12


def test_upscale_spatial_identity_and_constant(rng):
    g = random_grid(rng, (2, 3, 4, 5))
    np.testing.assert_array_equal(upscale_spatial(g, g.spatial_dims).raw, g.raw)
    c = init_grid((1, 3, 3, 3), SceneBounds.cube(1))
    c.raw[:] = -2.5
    np.testing.assert_allclose(upscale_spatial(c, (7, 5, 9)).raw, -2.5, atol=1e-14)
    with pytest.raises(ValueError):
        upscale_spatial(g, (2, 4, 5))


def test_upscale_spatial_ramp():
    bounds = SceneBounds.cube(1.0)
    g = init_grid((1, 2, 2, 2), bounds)
    coef = np.array([0.3, -1.2, 2.0])
    c = g.voxel_centers(0)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    g.raw[0] = coef[0] * X + coef[1] * Y + coef[2] * Z
    up = upscale_spatial(g, (4, 4, 4))
    nc = up.voxel_centers(0)
    # the represented field is the ramp clamped to the outermost old centers
    cl = np.clip(nc, c[0], c[-1])
    X, Y, Z = np.meshgrid(cl, cl, cl, indexing="ij")
    np.testing.assert_allclose(up.raw[0], coef[0] * X + coef[1] * Y + coef[2] * Z, atol=1e-12)
    inner = slice(1, 3)
    X, Y, Z = np.meshgrid(nc[inner], nc[inner], nc[inner], indexing="ij")
    np.testing.assert_allclose(up.raw[0, inner, inner, inner], coef[0] * X + coef[1] * Y + coef[2] * Z, atol=1e-12)


def test_resample_reproduces_represented_field(rng):
    g = random_grid(rng, (1, 3, 3, 3))
    new = resample_lattice(g.raw, (6, 6, 6))
    up = Grid4D(new, g.bounds, g.activation_bias)
    pts = np.stack(np.meshgrid(*(up.voxel_centers(a) for a in range(3)), indexing="ij"), -1).reshape(-1, 3)
    np.testing.assert_allclose(new.reshape(-1), sample_raw(pts, 0.0, g), atol=1e-12)


def test_occupancy_fresh_grid_empty():
    g = init_grid((2, 5, 5, 5), SceneBounds.cube(1), sigma_init=1e-4)
    assert not refresh_occupancy(g, 1e-3).occupied.any()


def test_occupancy_dilation_block():
    g = init_grid((2, 6, 6, 6), SceneBounds.cube(1))
    g.raw[1, 0, 3, 3] = 20.0
    occ = refresh_occupancy(g, 1e-3, dilation=1).occupied
    expected = np.zeros((6, 6, 6), bool)
    expected[0:2, 2:5, 2:5] = True
    np.testing.assert_array_equal(occ, expected)


@given(st.integers(0, 2 ** 31))
def test_occupancy_empty_means_below_threshold(seed):
    rng = np.random.default_rng(seed)
    g = init_grid((3, 4, 4, 4), SceneBounds.cube(1))
    g.raw[:] = rng.normal(0, 4, size=g.dims)
    occ = refresh_occupancy(g, 1e-3, dilation=0).occupied
    assert np.all(g.density()[:, ~occ] < 1e-3)


def test_occupancy_lookup():
    g = init_grid((1, 4, 4, 4), SceneBounds.cube(1))
    g.raw[0, 3, 0, 0] = 20.0
    mask = refresh_occupancy(g, dilation=0)
    assert mask.lookup(np.array([[0.9, -0.9, -0.9], [0.0, 0, 0], [5.0, 0, 0]])).tolist() == [True, False, False]


def test_occupancy_rejects_threshold():
    with pytest.raises(ValueError):
        refresh_occupancy(init_grid((1, 2, 2, 2), SceneBounds.cube(1)), 0.0)
