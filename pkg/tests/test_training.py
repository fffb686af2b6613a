import numpy as np
import pytest

from fovray.losses import LossWeights
from fovray.network import DESK_BLOCKS, NetConfig, init_network
from fovray.noise import gen_stbn
from fovray.training import (
    AugmentProbs,
    EvalClip,
    SequenceSample,
    TrainConfig,
    augment,
    build_eval_clip,
    evaluate,
    masks_for_sequence,
    sample_fovea,
    slice_dataset,
    split_dataset,
    train,
    validate_psnr,
)


@pytest.fixture(scope="module")
def noise():
    return gen_stbn(32, 32, 8, seed=4)


def smooth_video(n_frames, h, w, seed=0):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random((h, w, 3)), 2.0)
    frames = []
    for i in range(n_frames):
        shifted = np.roll(base, shift=i, axis=1)
        rgba = np.concatenate([shifted, np.ones((h, w, 1))], axis=-1)
        frames.append(rgba.astype(np.float32))
    return frames


def tiny_dataset(noise, n_frames=16, hw=64, tile=32, seq_len=8, seed=0):
    frames = smooth_video(n_frames, hw, hw, seed=seed)
    return slice_dataset(frames, noise, seq_len=seq_len, tile=tile,
                         rng=np.random.default_rng(seed), source_id="vid")


class TestSliceDataset:
    def test_segment_and_tile_counts(self, noise):
        frames = smooth_video(32, 128, 128)
        samples = slice_dataset(frames, noise, seq_len=16, tile=64,
                                rng=np.random.default_rng(0))
        assert len(samples) == 2 * 4

    def test_too_few_frames_gives_nothing(self, noise):
        frames = smooth_video(15, 64, 64)
        assert slice_dataset(frames, noise, seq_len=16, tile=64) == []

    def test_tiles_partition_every_pixel(self, noise):
        frames = smooth_video(8, 64, 96)
        samples = slice_dataset(frames, noise, seq_len=8, tile=32,
                                rng=np.random.default_rng(1))
        cover = np.zeros((64, 96), dtype=int)
        tiles_x = 96 // 32
        for s in samples:
            ty, tx = divmod(s.tile_index, tiles_x)
            cover[ty * 32:(ty + 1) * 32, tx * 32:(tx + 1) * 32] += 1
        assert np.all(cover == 1)

    def test_masks_match_fovea_policy_shapes(self, noise):
        samples = tiny_dataset(noise)
        s = samples[0]
        assert s.masks.shape == (8, 1, 32, 32)
        assert set(np.unique(s.masks)).issubset({0.0, 1.0})
        assert s.network_input().shape == (8, 5, 32, 32)


class TestSplitDataset:
    def test_disjoint_at_segment_level(self, noise):
        frames = smooth_video(64, 64, 64)
        samples = slice_dataset(frames, noise, seq_len=8, tile=32,
                                rng=np.random.default_rng(2), source_id="a")
        train_s, val_s, test_s = split_dataset(samples, np.random.default_rng(3))
        keys = lambda part: {(s.source_id, s.segment) for s in part}
        assert not keys(train_s) & keys(val_s)
        assert not keys(train_s) & keys(test_s)
        assert not keys(val_s) & keys(test_s)
        assert len(train_s) + len(val_s) + len(test_s) == len(samples)


class TestAugment:
    def _sample(self, noise):
        return tiny_dataset(noise)[0]

    def test_zero_probs_identity(self, noise):
        s = self._sample(noise)
        probs = AugmentProbs(colors=0, flip_horizontal=0, flip_vertical=0,
                             grayscale=0, static=0, padding=0)
        out = augment(s, np.random.default_rng(0), probs)
        assert np.array_equal(out.gt_rgba, s.gt_rgba)
        assert np.array_equal(out.masks, s.masks)

    def test_horizontal_flip_is_involution(self, noise):
        s = self._sample(noise)
        probs = AugmentProbs(colors=0, flip_horizontal=1.0, flip_vertical=0,
                             grayscale=0, static=0, padding=0)
        once = augment(s, np.random.default_rng(0), probs)
        twice = augment(once, np.random.default_rng(1), probs)
        assert not np.array_equal(once.gt_rgba, s.gt_rgba)
        assert np.array_equal(twice.gt_rgba, s.gt_rgba)

    def test_seeded_reproducibility(self, noise):
        s = self._sample(noise)
        a = augment(s, np.random.default_rng(42))
        b = augment(s, np.random.default_rng(42))
        assert np.array_equal(a.gt_rgba, b.gt_rgba)
        assert np.array_equal(a.masks, b.masks)

    def test_static_repeats_one_frame(self, noise):
        s = self._sample(noise)
        probs = AugmentProbs(colors=0, flip_horizontal=0, flip_vertical=0,
                             grayscale=0, static=1.0, padding=0)
        out = augment(s, np.random.default_rng(5), probs)
        for i in range(1, out.seq_len):
            assert np.array_equal(out.gt_rgba[i], out.gt_rgba[0])
        assert not np.array_equal(out.masks[1], out.masks[0])  # masks still advance

    def test_padding_keeps_shape(self, noise):
        s = self._sample(noise)
        probs = AugmentProbs(colors=0, flip_horizontal=0, flip_vertical=0,
                             grayscale=0, static=0, padding=1.0, padding_max=4)
        out = augment(s, np.random.default_rng(6), probs)
        assert out.gt_rgba.shape == s.gt_rgba.shape
        assert out.masks.shape == s.masks.shape


class TestTrainLoop:
    def _net(self):
        return init_network(NetConfig.from_string("e8-e8-e12-d16-d12-d8-d8"), seed=1)

    def test_determinism_same_seed(self, noise):
        data = tiny_dataset(noise)[:2]
        cfg = TrainConfig(epochs=2, batch_size=2, seq_len=8, tile=32, seed=9)
        _, rows_a = train(cfg, self._net(), data)
        _, rows_b = train(cfg, self._net(), data)
        assert [r[3] for r in rows_a] == [r[3] for r in rows_b]

    def test_final_lr_hits_minimum(self, noise):
        data = tiny_dataset(noise)[:1]
        cfg = TrainConfig(epochs=3, batch_size=1, seq_len=8, tile=32, seed=0)
        _, rows = train(cfg, self._net(), data)
        assert rows[-1][2] == pytest.approx(1e-8, rel=1e-6)
        assert rows[0][2] == pytest.approx(1.25e-3, rel=1e-6)

    def test_one_step_per_sequence_batch(self, noise):
        data = tiny_dataset(noise)  # 2 segments x 4 tiles = 8 samples
        cfg = TrainConfig(epochs=1, batch_size=4, seq_len=8, tile=32, seed=0)
        _, rows = train(cfg, self._net(), data)
        assert len(rows) == 2  # ceil(8 / 4) steps

    def test_nan_data_aborts_with_step(self, noise):
        data = tiny_dataset(noise)[:1]
        bad = SequenceSample(gt_rgba=np.full_like(data[0].gt_rgba, np.nan),
                             masks=data[0].masks)
        cfg = TrainConfig(epochs=1, batch_size=1, seq_len=8, tile=32, seed=0)
        with pytest.raises(RuntimeError, match="step 0"):
            train(cfg, self._net(), [bad])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            train(TrainConfig(epochs=1), self._net(), [])

    def test_log_and_checkpoint_written(self, noise, tmp_path):
        data = tiny_dataset(noise)[:1]
        cfg = TrainConfig(epochs=1, batch_size=1, seq_len=8, tile=32, seed=0)
        net, _ = train(cfg, self._net(), data, log_path=tmp_path / "log.csv",
                       checkpoint_path=tmp_path / "net.ckpt")
        text = (tmp_path / "log.csv").read_text()
        assert text.splitlines()[1].startswith("step,epoch,lr,loss,L_s,L_t,val_psnr")
        from fovray.network import load_network

        net2, meta = load_network(tmp_path / "net.ckpt")
        assert meta["train_config"]["seq_len"] == 8
        assert meta["optimizer"] == "adamw"

    def test_overfit_smoke_loss_drops(self, noise):
        data = tiny_dataset(noise)[:1]
        cfg = TrainConfig(epochs=60, batch_size=1, seq_len=8, tile=32, seed=3,
                          lr0=3e-3,
                          augment=AugmentProbs(colors=0, flip_horizontal=0,
                                               flip_vertical=0, grayscale=0,
                                               static=0, padding=0))
        _, rows = train(cfg, self._net(), data)
        first, last = rows[0][3], rows[-1][3]
        assert last < 0.5 * first


class TestEvaluate:
    def test_full_density_passthrough_scores_cap(self):
        from fovray.metrics import PSNR_CAP_DB, build_quality_report

        rng = np.random.default_rng(0)
        gt = [rng.random((32, 32, 3)) for _ in range(4)]
        rep = build_quality_report(gt, gt)
        assert np.all(rep.psnr == PSNR_CAP_DB)

    def test_evaluate_runs_and_reports(self, noise):
        net = init_network(NetConfig.from_string("e8-e8-e12-d16-d12-d8-d8"), seed=2)
        frames = smooth_video(6, 32, 32)
        cfg = sample_fovea(np.random.default_rng(1), (32, 32))
        clip = build_eval_clip(frames, noise, cfg)
        preds, rep = evaluate(net, clip)
        assert len(preds) == 6
        assert rep.n_frames == 6
        assert np.isnan(rep.tpsnr[0])

    def test_reset_at_changes_downstream_frames(self, noise):
        net = init_network(NetConfig.from_string("e8-e8-e12-d16-d12-d8-d8"), seed=2)
        frames = smooth_video(4, 32, 32)
        cfg = sample_fovea(np.random.default_rng(2), (32, 32))
        clip = build_eval_clip(frames, noise, cfg)
        carried, _ = evaluate(net, clip)
        reset, _ = evaluate(net, clip, reset_at=(2,))
        assert np.array_equal(carried[1], reset[1])
        assert not np.array_equal(carried[2], reset[2])

    def test_validate_psnr_runs(self, noise):
        net = init_network(NetConfig.from_string("e8-e8-e12-d16-d12-d8-d8"), seed=2)
        data = tiny_dataset(noise)[:1]
        val = validate_psnr(net, data)
        assert np.isfinite(val)
