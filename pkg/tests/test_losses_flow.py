import numpy as np
import pytest

import fovray.autograd as ag
from fovray.autograd import Tensor
from fovray.flow import FlowField, analytic_flow, estimate_flow, flow_to_color, luma
from fovray.losses import (
    LossWeights,
    PerceptualProxy,
    frame_weight,
    l1_mean,
    spatial_loss,
    temporal_loss,
    total_loss,
    warp,
)
from fovray.volume import Camera


def const_frames(values, shape=(1, 3, 8, 8)):
    return [np.full(shape, v, dtype=np.float32) for v in values]


def zero_flow_provider(prev, cur):
    h, w = prev.shape[:2]
    return FlowField(vectors=np.zeros((h, w, 2)))


class TestSpatialLoss:
    def test_single_frame_sequence_is_zero(self):
        rng = np.random.default_rng(0)
        pred = [rng.random((1, 3, 8, 8)).astype(np.float32)]
        gt = [rng.random((1, 3, 8, 8)).astype(np.float32)]
        loss = spatial_loss(pred, gt, perceptual=None)
        assert float(loss.data) == 0.0

    def test_identical_sequences_zero_with_proxy(self):
        rng = np.random.default_rng(1)
        seq = [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(3)]
        proxy = PerceptualProxy(seed=0)
        loss = spatial_loss(seq, seq, perceptual=proxy)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-7)

    def test_frame_weights_exact(self):
        assert frame_weight(0) == 0.0
        assert frame_weight(2) == pytest.approx(1.0 - np.exp(-1.0), abs=1e-9)
        assert frame_weight(2) == pytest.approx(0.632121, abs=1e-6)
        assert frame_weight(0, floor=0.05) == 0.05

    def test_unit_error_scales_by_frame_weight(self):
        t = 5
        base = const_frames([0.0] * t)
        for i in range(t):
            pred = const_frames([0.0] * t)
            pred[i] = np.full((1, 3, 8, 8), 1.0, dtype=np.float32)
            loss = spatial_loss(pred, base, perceptual=None)
            expected = frame_weight(i) * LossWeights().spatial_l1 * 1.0
            assert float(loss.data) == pytest.approx(expected, rel=1e-6)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="lengths differ"):
            spatial_loss(const_frames([0, 0]), const_frames([0]), perceptual=None)


class TestTemporalLoss:
    def test_static_identical_sequences_zero(self):
        seq = const_frames([0.3, 0.3, 0.3])
        loss = temporal_loss(seq, seq, zero_flow_provider)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-8)

    def test_two_frame_hand_evaluation(self):
        # predictions differ by c between frames, ground truth is static:
        # pairwise term = l3 * c, warped-predecessor term = l4 * c
        c = 0.25
        pred = const_frames([0.5, 0.5 + c])
        gt = const_frames([0.4, 0.4])
        w = LossWeights()
        loss = temporal_loss(pred, gt, zero_flow_provider, w)
        assert float(loss.data) == pytest.approx(w.temporal_l1 * c + w.flow * c, rel=1e-6)

    def test_pairwise_term_structure(self):
        # offsets a_i make each pair contribute |a_i - a_j|; independent
        # double-loop oracle fixes both the count t(t-1)/2 and the values
        t = 5
        offsets = [0.0, 0.13, 0.4, 0.21, 0.9]
        gt = const_frames([0.2] * t)
        pred = const_frames([0.2 + a for a in offsets])
        w = LossWeights(flow=0.0)
        loss = temporal_loss(pred, gt, zero_flow_provider, w)
        pairs = [(i, j) for i in range(1, t) for j in range(i)]
        assert len(pairs) == t * (t - 1) // 2
        expected = sum(abs(offsets[i] - offsets[j]) for i, j in pairs) * w.temporal_l1
        assert float(loss.data) == pytest.approx(expected, rel=1e-5)

    def test_pairwise_invariant_to_global_constant(self):
        rng = np.random.default_rng(2)
        t = 4
        pred = [rng.random((1, 3, 8, 8)).astype(np.float32) for _ in range(t)]
        gt = [rng.random((1, 3, 8, 8)).astype(np.float32) for _ in range(t)]
        w = LossWeights(flow=0.0)
        a = temporal_loss(pred, gt, zero_flow_provider, w)
        shift = 0.17
        pred2 = [p + shift for p in pred]
        gt2 = [g + shift for g in gt]
        b = temporal_loss(pred2, gt2, zero_flow_provider, w)
        assert float(a.data) == pytest.approx(float(b.data), rel=1e-5)

    def test_short_sequence_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            temporal_loss(const_frames([0.1]), const_frames([0.1]), zero_flow_provider)


class TestTotalLoss:
    def test_linear_combination(self):
        one = Tensor(np.asarray(1.0, dtype=np.float32))
        zero = Tensor(np.asarray(0.0, dtype=np.float32))
        assert float(total_loss(one, zero).data) == pytest.approx(0.8)
        assert float(total_loss(zero, one).data) == pytest.approx(1.0)
        assert float(total_loss(one, one).data) == pytest.approx(1.8)


class TestWarp:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(3)
        img = rng.random((1, 3, 6, 6)).astype(np.float32)
        out = warp(img, np.zeros((6, 6, 2)))
        np.testing.assert_allclose(out.data, img, atol=1e-7)

    def test_integer_shift_with_edge_clamp(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        flow = np.zeros((4, 4, 2))
        flow[..., 0] = 1.0  # content moves +x; sample from x-1
        out = warp(img, flow)
        np.testing.assert_allclose(out.data[0, 0, :, 1:], img[0, 0, :, :3], atol=1e-7)
        np.testing.assert_allclose(out.data[0, 0, :, 0], img[0, 0, :, 0], atol=1e-7)

    def test_linear_in_image(self):
        rng = np.random.default_rng(4)
        a = rng.random((1, 2, 5, 5)).astype(np.float32)
        b = rng.random((1, 2, 5, 5)).astype(np.float32)
        flow = rng.uniform(-1, 1, (5, 5, 2))
        lhs = warp(a + 2.0 * b, flow).data
        rhs = warp(a, flow).data + 2.0 * warp(b, flow).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestPerceptualProxy:
    def test_identity_zero_and_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.random((1, 3, 32, 32)).astype(np.float32)
        b = rng.random((1, 3, 32, 32)).astype(np.float32)
        proxy = PerceptualProxy(seed=1)
        assert float(proxy(a, a).data) == pytest.approx(0.0, abs=1e-8)
        ab = float(proxy(a, b).data)
        ba = float(proxy(b, a).data)
        assert ab == pytest.approx(ba, rel=1e-6)
        assert ab > 0

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(6)
        a = rng.random((1, 3, 16, 16)).astype(np.float32)
        b = rng.random((1, 3, 16, 16)).astype(np.float32)
        x = float(PerceptualProxy(seed=3)(a, b).data)
        y = float(PerceptualProxy(seed=3)(a, b).data)
        assert x == y

    def test_blur_scores_worse_than_identity(self, rendered_frame_64):
        from scipy import ndimage

        sharp = rendered_frame_64
        blurred = np.stack([
            ndimage.uniform_filter(sharp[0, c], size=5) for c in range(3)
        ])[None]
        proxy = PerceptualProxy(seed=0)
        assert float(proxy(sharp, blurred).data) > float(proxy(sharp, sharp).data)


@pytest.fixture(scope="module")
def rendered_frame_64():
    from fovray.renderer import Scene, render_full
    from fovray.volume import Light, TransferFunction, make_procedural_volume

    vol = make_procedural_volume("box_lattice", (24, 24, 24))
    scene = Scene(volume=vol, tf=TransferFunction.default(),
                  light=Light(direction=(-1, -1, -0.5)))
    cam = Camera(position=(60, 45, 70), look_at=(12, 12, 12), fov_y=40, width=64, height=64)
    fr = render_full(scene, cam)
    return np.moveaxis(fr.rgba[..., :3], -1, 0)[None].astype(np.float32)


class TestEstimateFlow:
    def test_identical_frames_zero(self):
        rng = np.random.default_rng(7)
        img = rng.random((64, 64, 3))
        field = estimate_flow(img, img)
        assert np.all(field.vectors == 0)

    def test_flat_frames_zero(self):
        a = np.full((64, 64, 3), 0.5)
        field = estimate_flow(a, a + 0.1)
        assert np.all(field.vectors == 0)

    @pytest.mark.parametrize("shift", [(3, 2), (-4, 1), (2, -3)])
    def test_recovers_global_translation(self, shift):
        from scipy import ndimage

        rng = np.random.default_rng(8)
        base = ndimage.gaussian_filter(rng.random((80, 80)), 1.5)
        dx, dy = shift
        prev = base
        cur = np.roll(base, shift=(dy, dx), axis=(0, 1))
        field = estimate_flow(prev, cur)
        inner = field.vectors[12:-12, 12:-12]
        med = np.median(inner.reshape(-1, 2), axis=0)
        assert abs(med[0] - dx) < 0.5
        assert abs(med[1] - dy) < 0.5

    def test_dims_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


class TestAnalyticFlow:
    def test_identical_cameras_zero(self):
        cam = Camera(position=(0, 0, -10), look_at=(0, 0, 0), width=16, height=16)
        depth = np.full((16, 16), 10.0)
        field = analytic_flow(depth, cam, cam)
        np.testing.assert_allclose(field.vectors, 0.0, atol=1e-9)

    def test_horizontal_truck_on_frontoparallel_plane(self):
        from fovray.volume import generate_rays

        w, h, z0, dx = 32, 24, 10.0, 0.4
        cam_cur = Camera(position=(0, 0, 0), look_at=(0, 0, 1), up=(0, 1, 0),
                         fov_y=50.0, width=w, height=h)
        cam_prev = Camera(position=(-dx, 0, 0), look_at=(-dx, 0, 1), up=(0, 1, 0),
                          fov_y=50.0, width=w, height=h)
        us, vs = np.meshgrid(np.arange(w), np.arange(h))
        _, dirs = generate_rays(cam_cur, us.ravel(), vs.ravel())
        depth = (z0 / dirs[:, 2]).reshape(h, w)  # plane z = z0
        field = analytic_flow(depth, cam_prev, cam_cur)
        tan_half = np.tan(np.deg2rad(25.0))
        expected = dx * w / (2.0 * z0 * tan_half * (w / h))
        np.testing.assert_allclose(field.vectors[..., 0], expected, atol=1e-9)
        np.testing.assert_allclose(field.vectors[..., 1], 0.0, atol=1e-9)

    def test_zero_depth_pixels_get_zero_flow(self):
        cam_a = Camera(position=(0, 0, -10), look_at=(0, 0, 0), width=8, height=8)
        cam_b = Camera(position=(1, 0, -10), look_at=(1, 0, 0), width=8, height=8)
        depth = np.zeros((8, 8))
        depth[4, 4] = 10.0
        field = analytic_flow(depth, cam_a, cam_b)
        assert field.vectors[0, 0, 0] == 0.0
        assert field.vectors[4, 4, 0] != 0.0


class TestFlowCrossOracle:
    def test_estimate_agrees_with_analytic_on_rendered_pair(self):
        from fovray.renderer import Scene, render_full
        from fovray.volume import Light, TransferFunction, make_procedural_volume

        vol = make_procedural_volume("box_lattice", (24, 24, 24))
        scene = Scene(volume=vol, tf=TransferFunction.default(),
                      light=Light(direction=(-1, -1, -0.5)))
        w = h = 64
        cam_prev = Camera(position=(60.0, 40.0, 70.0), look_at=(12, 12, 12),
                          fov_y=38, width=w, height=h)
        cam_cur = Camera(position=(61.5, 40.0, 70.0), look_at=(13.5, 12, 12),
                         fov_y=38, width=w, height=h)
        fr_prev = render_full(scene, cam_prev)
        fr_cur = render_full(scene, cam_cur)
        est = estimate_flow(fr_prev.rgba[..., :3], fr_cur.rgba[..., :3])
        ana = analytic_flow(fr_cur.depth.astype(np.float64), cam_prev, cam_cur)
        sel = fr_cur.depth > 0
        err = np.linalg.norm(est.vectors[sel] - ana.vectors[sel], axis=-1)
        assert np.median(err) < 1.0


class TestFlowViz:
    def test_color_wheel_shape_and_range(self):
        rng = np.random.default_rng(9)
        field = FlowField(vectors=rng.uniform(-3, 3, (16, 16, 2)))
        rgb = flow_to_color(field)
        assert rgb.shape == (16, 16, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_luma_weights(self):
        img = np.zeros((2, 2, 3))
        img[..., 1] = 1.0
        np.testing.assert_allclose(luma(img), 0.587)
