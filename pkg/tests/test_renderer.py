import hashlib

import numpy as np
import pytest

from fovray.noise import gen_stbn, gen_uniform_noise
from fovray.renderer import (
    OrbitPathSpec,
    RenderSettings,
    Scene,
    frame_to_raw,
    load_camera_path,
    load_raw_frame,
    orbit_cameras,
    render_flythrough,
    render_full,
    render_pixel,
    render_sparse_compact,
    render_sparse_direct,
    render_sparse_naive,
    save_camera_path,
    shadow_transmittance,
)
from fovray.sample_maps import (
    FoveaConfig,
    SampleMask,
    TauMap,
    build_sample_mask,
    build_tau_map,
    compact_mask,
)
from fovray.volume import (
    Camera,
    Light,
    Ray,
    TransferFunction,
    VolumeGrid,
    make_procedural_volume,
)


@pytest.fixture(scope="module")
def scene():
    vol = make_procedural_volume("sphere_shells", (32, 32, 32))
    return Scene(volume=vol, tf=TransferFunction.default(),
                 light=Light(direction=(-1.0, -1.0, -0.5), intensity=(1.0, 1.0, 1.0)))


@pytest.fixture(scope="module")
def cam():
    return Camera(position=(80.0, 60.0, 90.0), look_at=(16.0, 16.0, 16.0),
                  fov_y=40.0, width=64, height=36)


@pytest.fixture(scope="module")
def stbn32():
    return gen_stbn(32, 32, 8, seed=3)


def homogeneous_scene(alpha_ref=0.3):
    data = np.full((16, 16, 16), 0.5, dtype=np.float32)
    vol = VolumeGrid(dims=(16, 16, 16), spacing=(1.0, 1.0, 1.0), data=data, value_range=(0, 1))
    lut = np.array([[1, 1, 1, alpha_ref], [1, 1, 1, alpha_ref]], dtype=np.float32)
    return Scene(volume=vol, tf=TransferFunction(lut=lut), light=None)


class TestRenderPixel:
    def test_miss_returns_background(self, scene):
        settings = RenderSettings(background=(0.1, 0.2, 0.3, 1.0))
        ray = Ray(origin=np.array([200.0, 200.0, 200.0]), direction=np.array([0.0, 1.0, 0.0]))
        rgba, depth = render_pixel(scene, ray, settings)
        np.testing.assert_allclose(rgba, [0.1, 0.2, 0.3, 1.0], atol=1e-12)
        assert depth == 0.0

    def test_unoccluded_shadow_transmittance_is_one(self, scene):
        # point above the volume, light from above: shadow ray exits immediately
        pt = np.array([[16.0, 33.5, 16.0]])
        t = shadow_transmittance(scene, pt, RenderSettings())
        assert t[0] == pytest.approx(1.0, abs=1e-9)

    def test_homogeneous_matches_beer_lambert(self):
        scene = homogeneous_scene(alpha_ref=0.3)
        cam = Camera(position=(8.0, 8.0, -40.0), look_at=(8.0, 8.0, 8.0),
                     fov_y=4.0, width=3, height=3)
        for step in (0.25, 0.1):
            fr = render_full(scene, cam, RenderSettings(step_size=step, early_term_alpha=1.1))
            kappa = -np.log(1.0 - 0.3)
            analytic = 1.0 - np.exp(-kappa * 16.0)
            assert fr.rgba[1, 1, 3] == pytest.approx(analytic, rel=0.02)


class TestRenderFull:
    def test_empty_volume_is_background(self):
        data = np.zeros((8, 8, 8), dtype=np.float32)
        vol = VolumeGrid(dims=(8, 8, 8), spacing=(1, 1, 1), data=data, value_range=(0, 0))
        lut = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=np.float32)
        scene = Scene(volume=vol, tf=TransferFunction(lut=lut), light=None)
        cam = Camera(position=(4, 4, -20), look_at=(4, 4, 4), width=8, height=8)
        fr = render_full(scene, cam, RenderSettings(background=(0.5, 0.0, 0.0, 1.0)))
        np.testing.assert_allclose(fr.rgba[..., 0], 0.5, atol=1e-6)
        np.testing.assert_allclose(fr.rgba[..., 3], 1.0, atol=1e-6)

    def test_deterministic(self, scene, cam):
        a = render_full(scene, cam)
        b = render_full(scene, cam)
        assert np.array_equal(a.rgba, b.rgba)
        assert np.array_equal(a.depth, b.depth)

    def test_golden_image_hash(self, scene):
        cam = Camera(position=(80.0, 60.0, 90.0), look_at=(16.0, 16.0, 16.0),
                     fov_y=40.0, width=160, height=90)
        fr = render_full(scene, cam)
        digest = hashlib.sha256(fr.rgba.tobytes()).hexdigest()
        assert digest == GOLDEN_SPHERE_SHELLS_160x90

    def test_early_termination_bounded_effect(self, scene, cam):
        loose = render_full(scene, cam, RenderSettings(early_term_alpha=0.99))
        exact = render_full(scene, cam, RenderSettings(early_term_alpha=1.1))
        assert np.max(np.abs(loose.rgba - exact.rgba)) <= 0.01 + 1e-6


class TestSparseNaive:
    def test_full_mask_equals_render_full(self, scene, cam):
        mask = SampleMask(bits=np.ones((36, 64), dtype=bool))
        sp = render_sparse_naive(scene, cam, mask)
        full = render_full(scene, cam)
        assert np.array_equal(sp.rgba, full.rgba)

    def test_empty_mask_all_zero(self, scene, cam):
        mask = SampleMask(bits=np.zeros((36, 64), dtype=bool))
        sp = render_sparse_naive(scene, cam, mask)
        assert np.all(sp.rgba == 0)
        assert sp.work_items == 0

    def test_nonzero_pixels_subset_of_mask(self, scene, cam, stbn32):
        tau = TauMap(values=np.full((36, 64), 0.3))
        mask = build_sample_mask(stbn32, 2, tau)
        sp = render_sparse_naive(scene, cam, mask)
        nonzero = np.any(sp.rgba != 0, axis=-1)
        assert np.all(mask.bits[nonzero])

    def test_dims_mismatch_rejected(self, scene, cam):
        with pytest.raises(ValueError, match="mask dims"):
            render_sparse_naive(scene, cam, SampleMask(bits=np.ones((4, 4), dtype=bool)))


class TestSparseCompact:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_equals_naive_on_random_masks(self, scene, cam, stbn32, seed):
        rng = np.random.default_rng(seed)
        cfg = FoveaConfig(focus=(rng.uniform(0, 64), rng.uniform(0, 36)),
                          sigma=rng.uniform(0.05, 1.0), base_density=rng.uniform(0.02, 0.3))
        mask = build_sample_mask(stbn32, seed, build_tau_map(cfg, (36, 64)))
        a = render_sparse_naive(scene, cam, mask)
        b = render_sparse_compact(scene, cam, compact_mask(mask))
        assert np.array_equal(a.rgba, b.rgba)
        assert np.array_equal(a.depth, b.depth)

    def test_single_entry(self, scene, cam):
        bits = np.zeros((36, 64), dtype=bool)
        bits[20, 30] = True
        lst = compact_mask(SampleMask(bits=bits))
        sp = render_sparse_compact(scene, cam, lst)
        assert sp.work_items == 1
        nonzero = np.any(sp.rgba != 0, axis=-1)
        assert nonzero.sum() <= 1
        assert sp.mask.bits[20, 30]

    def test_work_count_equals_k(self, scene, cam, stbn32):
        tau = TauMap(values=np.full((36, 64), 0.17))
        mask = build_sample_mask(stbn32, 1, tau)
        lst = compact_mask(mask)
        sp = render_sparse_compact(scene, cam, lst)
        assert sp.work_items == lst.count == int(mask.bits.sum())

    def test_out_of_range_indices_rejected(self, scene, cam):
        from fovray.sample_maps import CompactIndexList

        lst = CompactIndexList(coords=np.array([[100, 2]]), dims=(36, 64))
        with pytest.raises(ValueError, match="out of film range"):
            render_sparse_compact(scene, cam, lst)


class TestSparseDirect:
    def test_duplicates_recompute(self, scene, cam):
        positions = np.array([[10, 10], [10, 10], [11, 10]])
        sp = render_sparse_direct(scene, cam, positions)
        assert sp.work_items == 3
        assert sp.mask.bits.sum() == 2

    def test_full_coverage_equals_render_full(self, scene, cam):
        us, vs = np.meshgrid(np.arange(64), np.arange(36))
        positions = np.stack([us.ravel(), vs.ravel()], axis=1)
        sp = render_sparse_direct(scene, cam, positions)
        full = render_full(scene, cam)
        assert np.array_equal(sp.rgba, full.rgba)

    def test_unique_coverage_matches_collision_model(self):
        rng = np.random.default_rng(4)
        h, w = 36, 64
        n = h * w
        k = int(0.5 * n)
        fracs = []
        for _ in range(30):
            idx = rng.integers(0, n, size=k)
            fracs.append(len(np.unique(idx)) / n)
        expected = 1.0 - (1.0 - 1.0 / n) ** k
        assert np.mean(fracs) == pytest.approx(expected, rel=0.1)


class TestFlythrough:
    def test_static_path_frames_identical(self, scene):
        cam = Camera(position=(80, 60, 90), look_at=(16, 16, 16), width=32, height=18)
        frames, rows = render_flythrough(scene, [cam, cam], mode="full")
        assert len(rows) == 2
        assert np.array_equal(frames[0].rgba, frames[1].rgba)

    def test_path_emits_row_per_frame(self, scene):
        spec = OrbitPathSpec(n_frames=500)
        cams = orbit_cameras(spec, scene.volume, width=16, height=9)
        vol = make_procedural_volume("sphere_shells", (8, 8, 8))
        small = Scene(volume=vol, tf=scene.tf, light=None)
        frames, rows = render_flythrough(small, cams, RenderSettings(step_size=1.0), mode="full")
        assert len(rows) == 500
        assert [r[0] for r in rows] == list(range(500))

    def test_compact_full_tau_matches_full_render_cost(self, scene, stbn32):
        cam = Camera(position=(80, 60, 90), look_at=(16, 16, 16), width=64, height=36)
        fovea = FoveaConfig(focus=(32, 18), sigma=0.0, base_density=0.0)  # tau == 1
        frames, _ = render_flythrough(scene, [cam], mode="compact", noise=stbn32, fovea=fovea)
        assert frames[0].work_items == 64 * 36
        full = render_full(scene, cam)
        assert np.array_equal(frames[0].rgba, full.rgba)

    def test_requires_noise_and_fovea_for_sparse_modes(self, scene, cam):
        with pytest.raises(ValueError, match="needs a noise stack"):
            render_flythrough(scene, [cam], mode="compact")

    def test_work_scaling_monotone_smoke(self, scene, stbn32):
        cam = Camera(position=(80, 60, 90), look_at=(16, 16, 16), width=64, height=36)
        times = []
        for tau in (0.05, 0.3, 1.0):
            mask = build_sample_mask(stbn32, 0, TauMap(values=np.full((36, 64), tau)))
            best = min(
                render_sparse_compact(scene, cam, compact_mask(mask)).render_ms
                for _ in range(3)
            )
            times.append(best)
        assert times[0] < times[-1]


class TestCameraPathIO:
    def test_roundtrip(self, tmp_path, scene):
        spec = OrbitPathSpec(n_frames=5)
        cams = orbit_cameras(spec, scene.volume, width=32, height=18)
        save_camera_path(cams, tmp_path / "path.json", spec=spec)
        back = load_camera_path(tmp_path / "path.json")
        assert len(back) == 5
        np.testing.assert_allclose(back[2].position, cams[2].position)
        assert back[0].width == 32

    def test_orbit_looks_at_center(self, scene):
        cams = orbit_cameras(OrbitPathSpec(n_frames=8), scene.volume, 32, 18)
        for c in cams:
            np.testing.assert_allclose(c.look_at, scene.volume.center(), atol=1e-9)


class TestFrameIO:
    def test_raw_roundtrip(self, tmp_path, scene, cam):
        fr = render_full(scene, cam)
        frame_to_raw(fr, tmp_path / "f.raw")
        back = load_raw_frame(tmp_path / "f.raw", (36, 64))
        assert np.array_equal(back, fr.rgba)


GOLDEN_SPHERE_SHELLS_160x90 = "be47e7e86eaa47b07c7e0395a753a348844857a618006160f2dcdeead4407c0f"
