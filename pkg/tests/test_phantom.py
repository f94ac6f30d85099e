import numpy as np
import pytest
from hypothesis import given, strategies as st

from attenvox.geometry import SceneBounds, ViewPose, ray_bundle
from attenvox.grid import init_grid, softplus_inverse
from attenvox.phantom import (PHANTOM_BOUNDS, NoiseModel, PhantomField, VesselSegment, acquisition_poses,
                              add_noise, default_phantom, fill_ramp, line_integrals, phantom_density,
                              project_phantom, quadrature_line_integrals, rasterize_ground_truth, smoothstep)
from attenvox.renderer import Projection, RenderConfig, render_view

points = st.lists(st.floats(-50, 50), min_size=3, max_size=3)


def test_before_arrival_is_background():
    f = default_phantom()
    pts = np.random.default_rng(0).uniform(-50, 50, (2000, 3))
    assert np.all(phantom_density(pts, -0.01, f) == f.background)
    field = PhantomField((VesselSegment((0, 0, -10), (0, 0, 10), 2.0, 0.05, 0.5, 0.2),), 0.0)
    assert phantom_density([0.0, 0, 0], 0.3, field) == 0.0


def test_filled_axis_point_is_sigma_max():
    f = default_phantom()
    assert phantom_density([0.0, 0.0, -30.0], 1.0, f) == pytest.approx(0.05)
    for seg in f.segments:
        mid = 0.5 * (np.asarray(seg.start) + np.asarray(seg.end))
        assert phantom_density(mid, seg.arrival_time + seg.fill_duration, f) == pytest.approx(seg.sigma_max)


def test_smoothstep_midpoint():
    assert smoothstep(0.5) == 0.5
    assert fill_ramp(0.5, 0.3, 0.4) == 0.5
    assert fill_ramp(0.2, 0.3, 0.0) == 0.0 and fill_ramp(0.3, 0.3, 0.0) == 1.0


def test_tree_causality_and_size():
    f = default_phantom()
    assert f.segments[0].arrival_time == 0.0
    assert all(s.arrival_time > 0 for s in f.segments[1:])
    assert 5 <= len(f.segments) <= 9
    for s in f.segments:
        assert s.sigma_max == 0.05
        assert np.all(np.abs(s.start) < 50) and np.all(np.abs(s.end) < 50)


def test_static_mode_fills_everything():
    f = default_phantom(static=True)
    for s in f.segments:
        assert s.value(0.0) == s.sigma_max


def test_occupied_fraction_below_five_percent():
    vol = rasterize_ground_truth(default_phantom(static=True), (80, 80, 80), PHANTOM_BOUNDS, [0.0])
    assert 0 < np.mean(vol > 0) < 0.05


def test_refinement_volume_consistency():
    f = default_phantom(static=True)
    # the coarse pitch (~1 mm) must already resolve the thinnest (1.5 mm radius) vessels
    coarse = np.count_nonzero(rasterize_ground_truth(f, (96,) * 3, PHANTOM_BOUNDS, [1.0]))
    fine = np.count_nonzero(rasterize_ground_truth(f, (192,) * 3, PHANTOM_BOUNDS, [1.0]))
    assert fine / coarse == pytest.approx(8.0, rel=0.15)


def test_rasterize_examples():
    assert not rasterize_ground_truth(PhantomField(), (8, 8, 8), PHANTOM_BOUNDS, [0.5]).any()
    vol = rasterize_ground_truth(default_phantom(), (100, 100, 100), PHANTOM_BOUNDS, [0.0, 1.0])
    assert vol.shape == (2, 100, 100, 100)
    # voxel (50, 50, 20) has its center at (0.5, 0.5, -29.5), inside the trunk
    assert vol[1, 50, 50, 20] == pytest.approx(0.05)
    with pytest.raises(ValueError):
        rasterize_ground_truth(PhantomField(), (8, 8), PHANTOM_BOUNDS, [0.0])


@given(points, st.floats(0, 1), st.floats(0, 1))
def test_density_non_decreasing_in_time(x, t0, t1):
    f = default_phantom()
    lo, hi = sorted((t0, t1))
    assert phantom_density(x, lo, f) <= phantom_density(x, hi, f)


@given(points, st.floats(0, 1))
def test_superset_at_end(x, t):
    f = default_phantom()
    assert phantom_density(x, 1.0, f) >= phantom_density(x, t, f)


def test_empty_field_projects_zero():
    pose = ViewPose(20, 5, 1000, 500, 2.0, 16, 16)
    assert not project_phantom(PhantomField(), pose).image.any()


@pytest.mark.parametrize("r, sigma", [(2.0, 0.05), (3.5, 0.1), (1.0, 0.3)])
def test_cylinder_center_chord(r, sigma):
    field = PhantomField((VesselSegment((0, 0, -40), (0, 0, 40), r, sigma),))
    pose = ViewPose(0, 0, 1000, 500, 1.0, 1, 1)
    li = project_phantom(field, pose, RenderConfig(pixel_model="line_integral")).image[0, 0]
    ab = project_phantom(field, pose).image[0, 0]
    assert li == pytest.approx(2 * r * sigma, abs=1e-3)
    assert ab == pytest.approx(1 - np.exp(-2 * r * sigma), abs=1e-3)


def test_exact_projector_matches_fine_quadrature():
    f = default_phantom()
    pose = acquisition_poses(5, pixel_spacing=1.8)[2]
    b = ray_bundle(pose, PHANTOM_BOUNDS, [(r, c) for r in range(0, 128, 9) for c in range(0, 128, 7)])
    exact = line_integrals(f, b.origins, b.directions, 0.7)
    quad = quadrature_line_integrals(f, b.origins, b.directions, 0.7, step=0.01)
    np.testing.assert_allclose(quad, exact, atol=2e-3)


def test_step_halving_stability():
    # the exact projector has no step, so halving the cross-check step converges toward it
    f = default_phantom(static=True)
    b = ray_bundle(acquisition_poses(3, pixel_spacing=1.8)[1], PHANTOM_BOUNDS,
                   [(r, 64) for r in range(0, 128, 4)])
    exact = line_integrals(f, b.origins, b.directions, 0.0)
    e1 = np.abs(quadrature_line_integrals(f, b.origins, b.directions, 0.0, 0.1) - exact).max()
    e2 = np.abs(quadrature_line_integrals(f, b.origins, b.directions, 0.0, 0.05) - exact).max()
    assert e2 <= e1 + 1e-12


def _trunk_chord_absorbance():
    f = default_phantom(static=True)
    seg = f.segments[0]
    return 1 - np.exp(-seg.sigma_max * 100.0)


def test_trunk_contrast_scale():
    assert _trunk_chord_absorbance() == pytest.approx(1 - np.exp(-5), rel=1e-12)


def test_noise_examples():
    clean = Projection(np.full((1024, 1024), 0.5), None)
    assert np.array_equal(add_noise(clean, NoiseModel(0.0)).image, clean.image)
    noisy = add_noise(clean, NoiseModel(0.02, seed=3)).image
    d = noisy - clean.image
    assert 0.009 <= d.std() <= 0.011
    assert abs(d.mean()) < 3 * d.std() / np.sqrt(d.size)
    again = add_noise(clean, NoiseModel(0.02, seed=3)).image
    assert np.array_equal(noisy, again)
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_noise_is_clamped():
    img = Projection(np.linspace(0, 1, 4096).reshape(64, 64), None)
    out = add_noise(img, NoiseModel(0.5, seed=1)).image
    assert out.min() >= 0 and out.max() <= 1


def test_acquisition_time_advances_with_angle():
    poses = acquisition_poses(30)
    angles = [p.primary_angle for p in poses]
    times = [p.time for p in poses]
    assert angles[0] == -90 and angles[-1] == pytest.approx(90)
    np.testing.assert_allclose(times, np.linspace(0, 1, 30))
    assert all(p.sod == 500 for p in poses)


def test_segment_validation():
    with pytest.raises(ValueError):
        VesselSegment((0, 0, 0), (1, 0, 0), 0.0)
    with pytest.raises(ValueError):
        VesselSegment((0, 0, 0), (1, 0, 0), 1.0, sigma_max=-1)


def _render_rasterized(field, pose, n):
    gt = rasterize_ground_truth(field, (n,) * 3, PHANTOM_BOUNDS, [pose.time])
    g = init_grid((1, n, n, n), PHANTOM_BOUNDS)
    g.raw[:] = softplus_inverse(np.maximum(gt, 1e-30)) - g.activation_bias
    return render_view(pose, g, RenderConfig(pixel_model="line_integral")).image


@pytest.fixture(scope="module")
def agreement_images():
    field = default_phantom(static=True)
    pose = acquisition_poses(20, pixel_spacing=1.8, rows=64, cols=64, times=[0.0] * 20)[3]
    ref = project_phantom(field, pose, RenderConfig(pixel_model="line_integral")).image
    return ref, _render_rasterized(field, pose, 256), pose, field


def test_projector_renderer_agreement(agreement_images):
    """Rasterized phantom rendered through the grid vs the analytic projector, per pixel."""
    ref, img, _, _ = agreement_images
    err = np.abs(img - ref)
    assert err.max() < 2e-3, f"max |diff| {err.max():.4g}, mean {err.mean():.4g}, {np.mean(err >= 2e-3):.1%} of pixels >= 2e-3"


def test_projector_renderer_agreement_away_from_walls(agreement_images):
    ref, img, pose, field = agreement_images
    # rays whose line integral is unchanged when every radius grows or shrinks by one voxel
    pitch = 100.0 / 256
    b = ray_bundle(pose, PHANTOM_BOUNDS)
    grow = PhantomField(tuple(VesselSegment(s.start, s.end, s.radius + 2 * pitch, s.sigma_max)
                              for s in field.segments))
    shrink = PhantomField(tuple(VesselSegment(s.start, s.end, s.radius - 2 * pitch, s.sigma_max)
                                for s in field.segments))
    hi = line_integrals(grow, b.origins, b.directions, 0.0)
    lo = line_integrals(shrink, b.origins, b.directions, 0.0)
    clear = (hi == lo).reshape(ref.shape)
    assert clear.mean() > 0.5
    err = np.abs(img - ref)[clear]
    assert err.max() < 2e-3, f"max |diff| {err.max():.4g} on {clear.sum()} wall-free rays"


def test_projector_step_halving():
    # the analytic projector integrates exactly, so the configured step has no effect
    f = default_phantom()
    pose = acquisition_poses(7, pixel_spacing=1.8, rows=48, cols=48)[4]
    a = project_phantom(f, pose, RenderConfig(step_size=0.4)).image
    b = project_phantom(f, pose, RenderConfig(step_size=0.2)).image
    assert np.abs(a - b).max() < 1e-4
