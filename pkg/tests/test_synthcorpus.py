import numpy as np
import pytest

from mvp_lab import synthcorpus as sc


def two_atomic_grammar(dur: int = 4) -> sc.ActionGrammar:
    """One complex action: exactly two fixed-duration atomics."""
    templates = (sc.AtomicTemplate(0, 1, dur, dur), sc.AtomicTemplate(1, 0, dur, dur))
    return sc.ActionGrammar(n_verbs=2, n_nouns=2, complex_actions=(templates,), seed=0)


class TestBuildGrammar:
    def test_deterministic_for_fixed_seed(self):
        a = sc.build_grammar(0, 4, 4, 2)
        b = sc.build_grammar(0, 4, 4, 2)
        assert a.to_dict() == b.to_dict()
        assert a.n_complex == 2
        for templates in a.complex_actions:
            assert 2 <= len(templates) <= 5

    def test_rejects_counts_below_minimums(self):
        with pytest.raises(ValueError, match="n_verbs < 2"):
            sc.build_grammar(0, 1, 4, 2)
        with pytest.raises(ValueError, match="n_nouns < 2"):
            sc.build_grammar(0, 4, 1, 2)
        with pytest.raises(ValueError, match="n_complex"):
            sc.build_grammar(0, 4, 4, 0)

    def test_different_seeds_differ(self):
        a = sc.build_grammar(1, 4, 4, 2)
        b = sc.build_grammar(2, 4, 4, 2)
        assert a.to_dict() != b.to_dict()

    def test_templates_distinct_within_complex(self):
        g = sc.build_grammar(3, 6, 6, 4)
        for templates in g.complex_actions:
            pairs = [(t.verb, t.noun) for t in templates]
            assert len(pairs) == len(set(pairs))

    def test_grammar_covers_all_classes_when_slots_allow(self):
        g = sc.build_grammar(0, 6, 6, 4)
        verbs = {t.verb for ts in g.complex_actions for t in ts}
        nouns = {t.noun for ts in g.complex_actions for t in ts}
        assert verbs == set(range(6))
        assert nouns == set(range(6))

    def test_roundtrip_serialization(self):
        g = sc.build_grammar(5, 5, 4, 3)
        assert sc.ActionGrammar.from_dict(g.to_dict()).to_dict() == g.to_dict()


class TestSampleTimeline:
    def test_unique_tiling_for_degenerate_grammar(self):
        g = two_atomic_grammar(dur=4)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 16)
        got = [(s.complex_id, s.atomic_index, s.start_clip, s.end_clip) for s in tl.spans]
        assert got == [(0, 0, 0, 4), (0, 1, 4, 8), (0, 0, 8, 12), (0, 1, 12, 16)]

    def test_spans_contiguous_and_cover(self):
        g = sc.build_grammar(0, 4, 4, 3)
        for seed in range(20):
            tl = sc.sample_timeline(g, np.random.default_rng(seed), 30)
            tl.validate()  # raises on any gap/overlap/short cover
            assert tl.spans[0].start_clip == 0
            assert tl.spans[-1].end_clip == 30

    def test_too_short_video_rejected(self):
        g = two_atomic_grammar(dur=4)  # minimum instance = 8 clips
        with pytest.raises(ValueError, match="below the largest minimum"):
            sc.sample_timeline(g, np.random.default_rng(0), 7)

    def test_complex_choice_uniform(self):
        g = sc.build_grammar(0, 4, 4, 2)
        rng = np.random.default_rng(123)
        counts = np.zeros(2)
        for _ in range(1000):
            tl = sc.sample_timeline(g, rng, 24)
            first = tl.instance_sequence()[0]
            counts[first] += 1
        freq = counts / counts.sum()
        assert np.all(np.abs(freq - 0.5) < 0.05), freq  # within +/-10% of uniform

    def test_atomic_order_matches_template(self):
        g = sc.build_grammar(0, 5, 5, 3)
        tl = sc.sample_timeline(g, np.random.default_rng(3), 40)
        for s in tl.spans:
            t = g.complex_actions[s.complex_id][s.atomic_index]
            assert (s.verb, s.noun) == (t.verb, t.noun)


class TestRenderVideo:
    def test_frame_shape_and_range(self):
        g = two_atomic_grammar(dur=2)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 4)
        v = sc.render_video(tl, (32, 32), 0)
        assert v.frames.shape == (32, 32, 32, 3)
        assert v.frames.dtype == np.float32
        assert v.frames.min() >= 0.0 and v.frames.max() <= 1.0

    def test_t_frames_multiple_of_clip_len(self):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        tl = sc.sample_timeline(g, np.random.default_rng(1), 11)
        v = sc.render_video(tl, (32, 32), 1)
        assert v.frames.shape[0] % sc.CLIP_LEN == 0

    def test_bit_identical_rerender(self):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        tl = sc.sample_timeline(g, np.random.default_rng(2), 12)
        a = sc.render_video(tl, (32, 32), np.random.default_rng(99))
        b = sc.render_video(tl, (32, 32), np.random.default_rng(99))
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.video_seed == b.video_seed

    def test_verb_edit_is_clip_local(self):
        # changing one span's verb must change only that span's clips
        g = sc.build_grammar(0, 4, 4, 2)
        tl = sc.sample_timeline(g, np.random.default_rng(5), 16)
        target = tl.spans[1]
        new_verb = (target.verb + 1) % 4
        edited_spans = list(tl.spans)
        edited_spans[1] = sc.Span(target.complex_id, target.atomic_index, new_verb,
                                  target.noun, target.start_clip, target.end_clip)
        tl2 = sc.ActionTimeline(tl.total_clips, tuple(edited_spans), tl.n_verbs, tl.n_nouns)
        a = sc.render_video(tl, (32, 32), 42).frames
        b = sc.render_video(tl2, (32, 32), 42).frames
        for clip in range(tl.total_clips):
            sl = slice(clip * sc.CLIP_LEN, (clip + 1) * sc.CLIP_LEN)
            inside = target.start_clip <= clip < target.end_clip
            if inside:
                assert not np.array_equal(a[sl], b[sl])
            else:
                np.testing.assert_array_equal(a[sl], b[sl])

    def test_rejects_tiny_frames(self):
        g = two_atomic_grammar(dur=2)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 4)
        with pytest.raises(ValueError, match="at least 16x16"):
            sc.render_video(tl, (8, 8), 0)

    def test_motifs_distinguish_verbs_and_nouns(self):
        # same seed, single span, sweep over all motifs: frames must differ
        seen = []
        for verb in range(sc.MAX_MOTIFS):
            spans = (sc.Span(0, 0, verb, 0, 0, 2), sc.Span(0, 1, verb, 1, 2, 4))
            tl = sc.ActionTimeline(4, spans, sc.MAX_MOTIFS, sc.MAX_MOTIFS)
            seen.append(sc.render_video(tl, (32, 32), 0, noise_sigma=0.0).frames)
        for i in range(len(seen)):
            for j in range(i + 1, len(seen)):
                assert not np.array_equal(seen[i], seen[j])


class TestSummarize:
    def test_template_tokens(self):
        g = two_atomic_grammar(dur=2)
        # two instances: c0 then c0 (single complex grammar)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 8)
        assert sc.summarize(tl).tokens == (sc.BOS_TOKEN, 2, 2, sc.EOS_TOKEN)

    def test_permuted_complex_order_changes_tokens(self):
        spans_a = (sc.Span(0, 0, 0, 0, 0, 2), sc.Span(0, 1, 1, 1, 2, 4),
                   sc.Span(1, 0, 2, 2, 4, 6), sc.Span(1, 1, 3, 3, 6, 8))
        spans_b = (sc.Span(1, 0, 2, 2, 0, 2), sc.Span(1, 1, 3, 3, 2, 4),
                   sc.Span(0, 0, 0, 0, 4, 6), sc.Span(0, 1, 1, 1, 6, 8))
        ta = sc.ActionTimeline(8, spans_a, 4, 4)
        tb = sc.ActionTimeline(8, spans_b, 4, 4)
        assert sc.summarize(ta).tokens != sc.summarize(tb).tokens

    def test_collision_rate_matches_instance_sequences(self):
        g = sc.build_grammar(0, 4, 4, 3)
        rng = np.random.default_rng(7)
        summaries, sequences = [], []
        for _ in range(100):
            tl = sc.sample_timeline(g, rng, 24)
            summaries.append(sc.summarize(tl).tokens)
            sequences.append(tl.instance_sequence())
        # summaries collide exactly when complex-action sequences collide
        assert len(set(summaries)) == len(set(sequences))
        for s_i, q_i in zip(summaries, sequences):
            for s_j, q_j in zip(summaries, sequences):
                assert (s_i == s_j) == (q_i == q_j)


class TestLabelsForWindow:
    def brute_force(self, tl: sc.ActionTimeline, start: int, end: int):
        verb_mh = np.zeros(tl.n_verbs, dtype=np.uint8)
        noun_mh = np.zeros(tl.n_nouns, dtype=np.uint8)
        per_clip = []
        for clip in range(start, end):
            for s in tl.spans:  # linear scan per clip
                if s.start_clip <= clip < s.end_clip:
                    verb_mh[s.verb] = 1
                    noun_mh[s.noun] = 1
                    per_clip.append((s.verb, s.noun))
                    break
        return verb_mh, noun_mh, per_clip

    def test_full_window_on_two_atomic_example(self):
        g = two_atomic_grammar(dur=4)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 16)
        vm, nm, _ = sc.labels_for_window(tl, 0, 16)
        assert vm.tolist() == [1, 1]
        assert nm.tolist() == [1, 1]

    def test_single_clip_window(self):
        g = two_atomic_grammar(dur=4)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 16)
        _, _, per_clip = sc.labels_for_window(tl, 5, 6)
        assert per_clip == [(tl.spans[1].verb, tl.spans[1].noun)]

    def test_rejects_bad_windows(self):
        g = two_atomic_grammar(dur=4)
        tl = sc.sample_timeline(g, np.random.default_rng(0), 16)
        for start, end in [(4, 4), (6, 5), (-1, 3), (0, 17)]:
            with pytest.raises(ValueError):
                sc.labels_for_window(tl, start, end)

    def test_matches_brute_force_on_random_windows(self):
        g = sc.build_grammar(0, 5, 5, 3)
        rng = np.random.default_rng(11)
        for _ in range(500):
            tl = sc.sample_timeline(g, rng, 24)
            start = int(rng.integers(0, 23))
            end = int(rng.integers(start + 1, 25))
            got = sc.labels_for_window(tl, start, end)
            want = self.brute_force(tl, start, end)
            np.testing.assert_array_equal(got[0], want[0])
            np.testing.assert_array_equal(got[1], want[1])
            assert got[2] == want[2]

    def test_union_window_is_or_of_adjacent_windows(self):
        g = sc.build_grammar(0, 5, 5, 3)
        rng = np.random.default_rng(13)
        tl = sc.sample_timeline(g, rng, 24)
        for mid in (4, 9, 15):
            va, na, _ = sc.labels_for_window(tl, 0, mid)
            vb, nb, _ = sc.labels_for_window(tl, mid, 24)
            vu, nu, _ = sc.labels_for_window(tl, 0, 24)
            np.testing.assert_array_equal(vu, va | vb)
            np.testing.assert_array_equal(nu, na | nb)


class TestCorpus:
    def test_generation_deterministic(self):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        a = sc.generate_corpus(g, 7, 6, 12, (32, 32))
        b = sc.generate_corpus(g, 7, 6, 12, (32, 32))
        np.testing.assert_array_equal(a.frames_u8, b.frames_u8)
        assert [t.to_dict() for t in a.timelines] == [t.to_dict() for t in b.timelines]

    def test_coverage_of_all_classes(self):
        g = sc.build_grammar(0, 6, 6, 4)
        corpus = sc.generate_corpus(g, 0, 200, 24, (32, 32))
        verbs, nouns = set(), set()
        for tl in corpus.timelines:
            for s in tl.spans:
                verbs.add(s.verb)
                nouns.add(s.noun)
        assert verbs == set(range(6))
        assert nouns == set(range(6))

    def test_clip_block_matches_video_frames(self):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        corpus = sc.generate_corpus(g, 1, 3, 10, (32, 32))
        block = corpus.clip_block(2, 3, 2)
        video = corpus.video(2)
        np.testing.assert_array_equal(
            block.reshape(16, 32, 32, 3), video.frames[24:40])

    def test_save_load_roundtrip(self, tmp_path):
        g = sc.build_grammar(0, 4, 4, 2, atomics_range=(2, 3), duration_range=(1, 2))
        corpus = sc.generate_corpus(g, 3, 4, 8, (32, 32))
        sc.save_corpus(corpus, str(tmp_path / "corpus"))
        loaded = sc.load_corpus(str(tmp_path / "corpus"))
        np.testing.assert_array_equal(loaded.frames_u8, corpus.frames_u8)
        assert [t.to_dict() for t in loaded.timelines] == [t.to_dict() for t in corpus.timelines]
        assert [s.tokens for s in loaded.summaries] == [s.tokens for s in corpus.summaries]
        np.testing.assert_array_equal(loaded.video_seeds, corpus.video_seeds)
