import numpy as np
import pytest

from mvp_lab import sampling, synthcorpus as sc
from mvp_lab.sampling import PairSpec, n_predictions, partition, sample_pair


@pytest.fixture(scope="module")
def video():
    g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
    tl = sc.sample_timeline(g, np.random.default_rng(0), 20)
    return sc.render_video(tl, (32, 32), 5)


class TestNPredictions:
    def test_paper_formula(self):
        assert n_predictions(8, 2) == 4
        assert n_predictions(8, 1) == 8

    def test_nondivisible_stride_is_hard_error(self):
        with pytest.raises(ValueError, match="stride must divide future length"):
            n_predictions(8, 3)

    def test_bad_stride(self):
        with pytest.raises(ValueError, match="stride"):
            n_predictions(8, 0)


class TestPartition:
    def test_index_arithmetic(self, video):
        clips = partition(video, video_id=0)
        assert len(clips) == 20
        np.testing.assert_array_equal(clips[2].values, video.frames[16:24])
        assert clips[2].clip_index == 2

    def test_concatenation_recovers_video(self, video):
        clips = partition(video)
        rebuilt = np.concatenate([c.values for c in clips], axis=0)
        np.testing.assert_array_equal(rebuilt, video.frames)

    def test_clip_count_matches_timeline_for_corpus(self):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        corpus = sc.generate_corpus(g, 0, 8, 12, (32, 32))
        for i in range(corpus.n_videos):
            v = corpus.video(i)
            assert len(partition(v)) == v.timeline.total_clips

    def test_rejects_nondivisible_frame_count(self, video):
        bad = sc.SyntheticVideo(frames=video.frames[:-3], timeline=video.timeline,
                                summary=video.summary, video_seed=0)
        with pytest.raises(ValueError, match="not divisible"):
            partition(bad)

    def test_all_clips_have_eight_frames(self, video):
        assert all(c.values.shape[0] == 8 for c in partition(video))


class TestPairSpec:
    def test_n_p_derivation(self):
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("fixed", 1))
        assert spec.n_predictions == 4

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            PairSpec(n_obs=0, n_future=8, stride=1, k_mode=("fixed", 1))
        with pytest.raises(ValueError):
            PairSpec(n_obs=4, n_future=8, stride=3, k_mode=("fixed", 1))
        with pytest.raises(ValueError):
            PairSpec(n_obs=4, n_future=8, stride=1, k_mode=("fixed", 0))
        with pytest.raises(ValueError):
            PairSpec(n_obs=4, n_future=8, stride=1, k_mode=("random", 3, 2))
        with pytest.raises(ValueError):
            PairSpec(n_obs=4, n_future=8, stride=1, k_mode=("sometimes", 1))

    def test_offset_parsing(self):
        assert PairSpec.parse_offset("fixed:4") == ("fixed", 4)
        assert PairSpec.parse_offset("random:1:8") == ("random", 1, 8)
        with pytest.raises(ValueError):
            PairSpec.parse_offset("uniform:1:8")


class TestSamplePair:
    def test_fixed_offset_geometry(self, video):
        clips = partition(video, video_id=0)
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("fixed", 1))
        for seed in range(50):
            pair = sample_pair(clips, spec, np.random.default_rng(seed))
            assert pair.future[0].clip_index == pair.observed[0].clip_index + 5
            assert len(pair.observed) == 4 and len(pair.future) == 8
            assert pair.offset == 1

    def test_no_overlap_between_windows(self, video):
        clips = partition(video, video_id=0)
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("random", 1, 8))
        for seed in range(100):
            pair = sample_pair(clips, spec, np.random.default_rng(seed))
            obs_idx = {c.clip_index for c in pair.observed}
            fut_idx = {c.clip_index for c in pair.future}
            assert not obs_idx & fut_idx
            assert max(fut_idx) < 20

    def test_too_short_video_error_names_minimum(self, video):
        clips = partition(video)[:10]
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("fixed", 1))
        with pytest.raises(ValueError, match="required minimum 13"):
            sample_pair(clips, spec, np.random.default_rng(0))

    def test_reproducible_for_fixed_seed(self, video):
        clips = partition(video)
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("random", 1, 8))
        a = sample_pair(clips, spec, np.random.default_rng(7))
        b = sample_pair(clips, spec, np.random.default_rng(7))
        assert a.start == b.start and a.offset == b.offset

    def test_random_offset_uniform(self):
        # 10k draws of K in [1, 8]: each bin within +/-5% of uniform
        spec = PairSpec(n_obs=4, n_future=8, stride=2, k_mode=("random", 1, 8))
        rng = np.random.default_rng(0)
        counts = np.zeros(9)
        for _ in range(10_000):
            _, k = sampling.sample_pair_indices(20, spec, rng)
            counts[k] += 1
        freq = counts[1:] / 10_000
        assert np.all(np.abs(freq - 0.125) < 0.125 * 0.4), freq
        # tighter aggregate check: chi-square-like deviation stays small
        assert abs(freq.sum() - 1.0) < 1e-12

    def test_start_uniform_over_valid_range(self):
        spec = PairSpec(n_obs=2, n_future=2, stride=1, k_mode=("fixed", 1))
        rng = np.random.default_rng(1)
        starts = [sampling.sample_pair_indices(10, spec, rng)[0] for _ in range(5000)]
        counts = np.bincount(starts, minlength=6)
        assert counts.argmin() >= 0 and len(counts) == 6
        freq = counts / 5000
        assert np.all(np.abs(freq - 1 / 6) < 0.03), freq
