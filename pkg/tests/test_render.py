import math

import numpy as np
import pytest

from photonfield import synth
from photonfield.estimator import EncodingConfig
from photonfield.imaging import luminance
from photonfield.neural_field import HashGridConfig, MlpConfig, PhotonField
from photonfield.phase import hg_eval
from photonfield.photon_map import PhotonMap
from photonfield.photons import InvalidConfigError, LightSource, Photons
from photonfield.render import (Camera, ComposeInputs, Scene, compose, render_neural, render_path_traced,
                                render_photon_map, render_ray_march)
from photonfield.scenes import occupancy_tf, sphere_scene
from photonfield.volume import InvalidInputError, TransferFunction

from conftest import homogeneous_scene

SMALL_CAM = Camera((0.5, -1.3, 0.6), (0.5, 0.5, 0.5), (0, 0, 1), math.radians(40), 8, 8)


def tiny_field(seed=0, zero_output=False):
    f = PhotonField.create(HashGridConfig(levels=2, features_per_level=2, table_size_log2=8),
                           HashGridConfig(levels=2, features_per_level=2, table_size_log2=8, dimensionality=2),
                           MlpConfig(hidden_layers=1, width=8), seed=seed, zero_output=zero_output)
    f.trained_steps = 1
    return f


# compose ---------------------------------------------------------------------------


def test_compose_direct_only():
    L_d = np.array([[[0.2, 0.1, 0.0]]])
    L_i = np.array([[[5.0, 5.0, 5.0]]])
    out = compose(ComposeInputs(L_d, L_i, np.ones((1, 1)), 1.0, 0.0, 1))
    assert np.array_equal(out, [[0.2, 0.1, 0.0]])


def test_compose_half_weights():
    out = compose(ComposeInputs(np.array([[[0.2, 0, 0]]]), np.array([[[0.4, 0, 0]]]), 1.0, 0.5, 0.5, 1))
    assert np.allclose(out, [[0.3, 0, 0]], rtol=0, atol=1e-15)


def test_compose_permutation_invariant():
    rng = np.random.default_rng(0)
    L_d, L_i = rng.random((4, 6, 3)), rng.random((4, 6, 3))
    sig = rng.random((4, 6))
    perm = rng.permutation(6)
    a = compose(ComposeInputs(L_d, L_i, sig, 1.0, 1.0, 6))
    b = compose(ComposeInputs(L_d[:, perm], L_i[:, perm], sig[:, perm], 1.0, 1.0, 6))
    assert np.allclose(a, b, rtol=1e-14)


def test_compose_misses_give_background():
    hit = np.array([[True, False]])
    out = compose(ComposeInputs(np.ones((1, 2, 3)), np.zeros((1, 2, 3)), 1.0, 1.0, 1.0, 2, hit, (0.2, 0.4, 0.6)))
    assert np.allclose(out, [[0.6, 0.7, 0.8]])


def test_compose_validation():
    with pytest.raises(InvalidInputError):
        compose(ComposeInputs(np.ones((1, 1, 3)), np.ones((1, 1, 3)), 1.0, 1.5, 0.0, 1))
    with pytest.raises(InvalidInputError):
        compose(ComposeInputs(np.ones((1, 2, 3)), np.ones((1, 2, 3)), 1.0, 1.0, 0.0, 3))


# shared behaviour ------------------------------------------------------------------


def all_backends(scene, camera, spp=4, seed=0):
    pm = PhotonMap(Photons.empty())
    return {
        "neural": render_neural(scene, tiny_field(), EncodingConfig(), camera, spp, seed),
        "photon_map": render_photon_map(scene, pm, camera, spp, 16, 0.1, 0.0, seed),
        "path": render_path_traced(scene, camera, spp, 4, seed),
        "march": render_ray_march(scene, camera, 0.05),
    }


def test_vacuum_gives_background_for_every_backend(empty_scene):
    for name, fb in all_backends(empty_scene, SMALL_CAM).items():
        assert np.array_equal(fb.image, np.broadcast_to(empty_scene.background, fb.image.shape)), name


def test_zero_spp_is_rejected(small_slab):
    with pytest.raises(InvalidInputError):
        render_neural(small_slab, tiny_field(), EncodingConfig(), SMALL_CAM, 0, 0)
    with pytest.raises(InvalidInputError):
        render_path_traced(small_slab, SMALL_CAM, 0)


def test_field_mismatch_is_rejected(small_slab):
    f = tiny_field()
    with pytest.raises(InvalidConfigError):
        render_neural(small_slab, f, EncodingConfig(4), SMALL_CAM, 1, 0)
    f.trained_steps = 0
    with pytest.raises(InvalidConfigError):
        render_neural(small_slab, f, EncodingConfig(), SMALL_CAM, 1, 0)


def test_photon_map_rejects_unknown_phase(small_slab, small_map):
    with pytest.raises(InvalidConfigError):
        render_photon_map(small_slab, small_map, SMALL_CAM, 1, 16, 0.1, 0.35, 0)


def test_empty_map_renders_direct_light_only(small_slab):
    fb = render_photon_map(small_slab, PhotonMap(Photons.empty()), SMALL_CAM, 8, 16, 0.1, 0.0, 3)
    assert np.array_equal(fb.indirect, np.zeros_like(fb.indirect))
    assert np.allclose(fb.image, fb.direct, rtol=1e-14, atol=0)
    assert fb.image.max() > 0


def test_backends_share_first_interactions_and_direct_light(small_slab, small_map):
    neural = render_neural(small_slab, tiny_field(), EncodingConfig(), SMALL_CAM, 4, 7)
    pmap = render_photon_map(small_slab, small_map, SMALL_CAM, 4, 32, 0.1, 0.0, 7)
    path = render_path_traced(small_slab, SMALL_CAM, 4, 16, 7)
    assert np.array_equal(neural.direct, pmap.direct)
    assert np.array_equal(neural.direct, path.direct)
    assert np.array_equal(neural.counts, pmap.counts)
    assert not np.array_equal(neural.indirect, pmap.indirect)


@pytest.mark.parametrize("render", ["neural", "photon_map", "path"])
def test_tile_size_does_not_change_image(small_slab, small_map, render):
    f = tiny_field(1)

    def run(tile):
        if render == "neural":
            return render_neural(small_slab, f, EncodingConfig(), SMALL_CAM, 3, 11, tile_pixels=tile)
        if render == "photon_map":
            return render_photon_map(small_slab, small_map, SMALL_CAM, 3, 32, 0.1, 0.0, 11, tile_pixels=tile)
        return render_path_traced(small_slab, SMALL_CAM, 3, 8, 11, tile_pixels=tile)

    a, b, c = run(4096), run(7), run(4096)
    assert np.array_equal(a.rgb, b.rgb)
    assert a.image.tobytes() == c.image.tobytes()


# path tracer -----------------------------------------------------------------------


def _box_interval(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (0.0 - o) / d
        t1 = (1.0 - o) / d
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.maximum(lo, 0.0), hi


def single_scatter_quadrature(scene, camera, sigma_t, albedo, g, n=4000):
    """Midpoint-rule integral of attenuated single scattering in a homogeneous unit box."""
    o, d = camera.generate_rays()
    light = np.array(scene.lights[0].position)
    intensity = scene.lights[0].intensity[0]
    out = np.zeros(o.shape[0])
    for i in range(o.shape[0]):
        a, b = _box_interval(o[i], d[i])
        if b <= a:
            continue
        t = a + (np.arange(n) + 0.5) / n * (b - a)
        x = o[i] + t[:, None] * d[i]
        v = light - x
        dist = np.linalg.norm(v, axis=1)
        wl = v / dist[:, None]
        _, exit_t = _box_interval(x, wl)
        inside = np.minimum(exit_t, dist)
        shadow = np.exp(-sigma_t * inside)
        view = np.exp(-sigma_t * (t - a))
        phase = hg_eval(g, wl @ d[i])
        f = view * sigma_t * albedo * phase * shadow * intensity / dist ** 2
        out[i] = f.sum() * (b - a) / n
    return out


def test_single_scatter_matches_quadrature():
    scene = homogeneous_scene(density_scale=2.0, albedo=0.8)
    fb = render_path_traced(scene, SMALL_CAM, 10_000, max_bounces=1, rng=5)
    ref = single_scatter_quadrature(scene, SMALL_CAM, 2.0, 0.8, 0.0)
    ours = luminance(fb.image).mean()
    assert abs(ours - ref.mean()) / ref.mean() < 0.03


def test_variance_drops_with_spp(small_slab):
    def pixel_variance(spp):
        imgs = np.stack([luminance(render_path_traced(small_slab, SMALL_CAM, spp, 8, seed).image)
                         for seed in range(8)])
        return imgs.var(axis=0).mean()

    assert pixel_variance(1) > pixel_variance(64)


def test_path_tracer_multi_bounce_adds_light():
    scene = homogeneous_scene(density_scale=4.0, albedo=0.95)
    one = render_path_traced(scene, SMALL_CAM, 256, max_bounces=1, rng=2).image.mean()
    many = render_path_traced(scene, SMALL_CAM, 256, max_bounces=16, rng=2).image.mean()
    assert many > 1.2 * one


def test_path_tracer_rejects_zero_bounces(small_slab):
    with pytest.raises(InvalidInputError):
        render_path_traced(small_slab, SMALL_CAM, 1, max_bounces=0)


# photon map ------------------------------------------------------------------------


def test_more_photons_converge_to_reference():
    from photonfield.photons import TraceConfig, trace_photons
    from photonfield.scenes import slab_scene

    scene = slab_scene(dims=16)
    cam = Camera((0.5, 0.5, -1.0), (0.5, 0.5, 0.5), (0, 1, 0), math.radians(40), 16, 16)

    def indirect(n, seed):
        pm = PhotonMap(trace_photons(scene.medium, scene.lights, TraceConfig(n, phase_set=(0.0,), seed=seed)))
        return render_photon_map(scene, pm, cam, 16, 64, math.inf, 0.0, 0).indirect

    ref = indirect(1_000_000, 100)
    errs = np.array([[np.mean((indirect(n, s) - ref) ** 2) for n in (10_000, 100_000, 1_000_000)]
                     for s in range(3)])
    med = np.median(errs, axis=0)
    assert med[0] > med[1] > med[2]


# neural ----------------------------------------------------------------------------


def test_sphere_coverage():
    scene = sphere_scene(dims=32)
    scene = Scene(scene.grid, scene.tf, scene.lights, scene.density_scale, (0.2, 0.3, 0.4))
    cam = Camera((0.5, -1.5, 0.5), (0.5, 0.5, 0.5), (0, 0, 1), math.radians(35), 32, 32)
    fb = render_neural(scene, tiny_field(2), EncodingConfig(), cam, 16, 1)
    o, d = cam.generate_rays()
    c = np.array([0.5, 0.5, 0.5])
    miss = np.linalg.norm(np.cross(c - o, d), axis=1)
    covering = (miss < 0.9 * 0.25).reshape(32, 32)
    assert covering.sum() > 50
    differs = np.any(fb.image != np.array(scene.background), axis=-1)
    assert differs[covering].mean() >= 0.99


# ray marcher -----------------------------------------------------------------------


def _opaque_box(rgb=(0.9, 0.5, 0.25)):
    grid = synth.constant((4, 4, 4), 1.0)
    return grid, TransferFunction.constant((*rgb, 1.0))


def test_ray_march_opaque_face_lit():
    grid, tf = _opaque_box()
    cam = Camera((0.5, 0.5, -1.0), (0.5, 0.5, 0.5), (0, 1, 0), math.radians(10), 1, 1)
    lit = Scene(grid, tf, (LightSource((0.5, 0.5, -2.0), (1, 1, 1)),), 1000.0)
    step = 0.01
    img = render_ray_march(lit, cam, step).image[0, 0]
    first = 1 - math.exp(-1000.0 * step)  # opacity of the first step, unshadowed
    assert np.allclose(img, np.array([0.9, 0.5, 0.25]) * first, atol=1e-3)


def test_ray_march_opaque_face_shadowed():
    grid, tf = _opaque_box()
    cam = Camera((0.5, 0.5, -1.0), (0.5, 0.5, 0.5), (0, 1, 0), math.radians(10), 1, 1)
    dark = Scene(grid, tf, (LightSource((0.5, 0.5, 3.0), (1, 1, 1)),), 1000.0)
    assert np.all(render_ray_march(dark, cam, 0.01).image < 1e-6)


def test_ray_march_step_refinement(small_slab):
    cam = Camera((0.5, -1.3, 0.6), (0.5, 0.5, 0.5), (0, 0, 1), math.radians(40), 16, 16)
    h = 0.02
    coarse = render_ray_march(small_slab, cam, 4 * h).image
    mid = render_ray_march(small_slab, cam, h).image
    fine = render_ray_march(small_slab, cam, h / 2).image
    assert np.mean((mid - fine) ** 2) < np.mean((mid - coarse) ** 2)


def test_ray_march_is_deterministic(small_slab):
    a = render_ray_march(small_slab, SMALL_CAM, 0.02).image
    b = render_ray_march(small_slab, SMALL_CAM, 0.02).image
    assert a.tobytes() == b.tobytes()


def test_camera_validation():
    with pytest.raises(InvalidInputError):
        Camera((0, 0, 0), (0, 0, 1), (0, 0, 1))
    with pytest.raises(InvalidInputError):
        Camera((0, 0, 0), (1, 0, 0), fov_y=math.pi)
    with pytest.raises(InvalidInputError):
        Camera((0, 0, 0), (1, 0, 0), width=0)


def test_rays_point_through_pixel_centres():
    cam = Camera((0, 0, 0), (1, 0, 0), (0, 0, 1), math.radians(90), 2, 2)
    _, d = cam.generate_rays()
    assert d.shape == (4, 3)
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
    # top-left pixel looks left (+y) and up (+z)
    assert d[0, 1] > 0 and d[0, 2] > 0
    assert d[3, 1] < 0 and d[3, 2] < 0
