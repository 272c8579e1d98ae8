import numpy as np
import pytest

from mvp_lab import autodiff as ad
from mvp_lab.encoder import (EncoderConfig, RegionFeatureMap, encode_clip, encode_clips,
                             encode_sequence, init_encoder)
from mvp_lab.harness import finite_diff_gradcheck
from mvp_lab.sampling import ClipTensor

DEFAULT = EncoderConfig()


@pytest.fixture(scope="module")
def params64():
    return init_encoder(DEFAULT, seed=0, dtype=np.float64)


def random_clips(n, rng=None, hw=(32, 32)):
    rng = rng or np.random.default_rng(0)
    return rng.random((n, 8, *hw, 3))


class TestInit:
    def test_default_output_grid(self):
        assert DEFAULT.output_grid == (2, 2, 2, 64)

    def test_same_seed_identical_weights(self):
        a = init_encoder(DEFAULT, seed=3)
        b = init_encoder(DEFAULT, seed=3)
        for name, t in a.flat().items():
            np.testing.assert_array_equal(t.data, b.flat()[name].data)

    def test_param_count_stable(self):
        a = init_encoder(DEFAULT, seed=0)
        b = init_encoder(DEFAULT, seed=1)
        assert a.n_parameters() == b.n_parameters() > 0

    def test_init_std_matches_fan_in_law(self, params64):
        # every 2-D weight: sample std within 20% of 1/sqrt(fan_in)
        for name, t in params64.flat().items():
            # positional embeddings are not projections; no fan-in law applies
            if t.data.ndim != 2 or "ln" in name or "pos" in name:
                continue
            fan_in = t.data.shape[0]
            expected = 1.0 / np.sqrt(fan_in)
            got = t.data.std()
            assert abs(got - expected) < 0.2 * expected, (name, got, expected)

    def test_invalid_dims_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(patch=(3, 8, 8))
        with pytest.raises(ValueError):
            EncoderConfig(stage_dims=(33, 64), stage_heads=(2, 2))
        with pytest.raises(ValueError):
            EncoderConfig(pool_spatial=3)


class TestEncode:
    def test_output_shape(self, params64):
        maps = encode_clips(params64, random_clips(3))
        assert maps.shape == (3, 2, 2, 2, 64)
        assert np.isfinite(maps.data).all()

    def test_shape_mismatch_rejected(self, params64):
        with pytest.raises(ValueError, match="does not match encoder config"):
            encode_clips(params64, np.zeros((2, 8, 16, 16, 3)))

    def test_eval_mode_deterministic(self, params64):
        clips = random_clips(2)
        a = encode_clips(params64, clips).data
        b = encode_clips(params64, clips).data
        np.testing.assert_array_equal(a, b)

    def test_different_clips_give_different_maps(self, params64):
        rng = np.random.default_rng(1)
        maps = encode_clips(params64, random_clips(2, rng)).data
        assert not np.allclose(maps[0], maps[1])

    def test_encode_clip_wraps_clip_tensor(self, params64):
        clip = ClipTensor(values=random_clips(1)[0], video_id=4, clip_index=7)
        fmap = encode_clip(clip, params64)
        assert isinstance(fmap, RegionFeatureMap)
        assert fmap.values.shape == (2, 2, 2, 64)
        assert (fmap.video_id, fmap.clip_index) == (4, 7)

    def test_encode_sequence_elementwise_and_ordered(self, params64):
        clips = [ClipTensor(v, 0, i) for i, v in enumerate(random_clips(3))]
        seq = encode_sequence(clips, params64)
        assert len(seq) == 3
        for clip, fmap in zip(clips, seq):
            single = encode_clip(clip, params64)
            np.testing.assert_array_equal(fmap.values.data, single.values.data)
        # permuting inputs permutes outputs identically
        perm = encode_sequence([clips[2], clips[0], clips[1]], params64)
        np.testing.assert_array_equal(perm[0].values.data, seq[2].values.data)

    def test_empty_sequence(self, params64):
        assert encode_sequence([], params64) == []

    def test_no_cross_clip_information_flow(self, params64):
        # perturb clip j: maps for i != j stay bit-identical in batched encode
        clips = random_clips(3)
        base = encode_clips(params64, clips).data
        clips2 = clips.copy()
        clips2[1] += 0.25
        out = encode_clips(params64, clips2).data
        np.testing.assert_array_equal(out[0], base[0])
        np.testing.assert_array_equal(out[2], base[2])
        assert not np.allclose(out[1], base[1])

    def test_gradient_flows_to_input(self, params64):
        x = ad.Tensor(random_clips(1), requires_grad=True)
        out = encode_clips(params64, x)
        ad.tsum(ad.mul(out, out)).backward()
        assert x.grad is not None and np.isfinite(x.grad).all()
        assert x.grad.shape == x.shape


class TestGradcheck:
    def test_encoder_finite_difference(self):
        err = finite_diff_gradcheck("encoder", seed=0, eps=1e-5, n_coords=48)
        assert err < 1e-4, err

    def test_patch_embed(self):
        assert finite_diff_gradcheck("patch_embed", seed=0) < 1e-4

    def test_attention_block(self):
        assert finite_diff_gradcheck("attention_block", seed=0) < 1e-4

    def test_mlp_block(self):
        assert finite_diff_gradcheck("mlp_block", seed=0) < 1e-4

    def test_positional_add_is_linear_and_exact(self):
        assert finite_diff_gradcheck("positional_add", seed=0) < 1e-7

    def test_layer_norm(self):
        assert finite_diff_gradcheck("layer_norm", seed=0) < 1e-4
