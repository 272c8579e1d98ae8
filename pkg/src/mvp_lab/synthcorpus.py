"""Procedural multiscale activity videos.

A corpus is generated from an action grammar: complex actions decompose
into ordered atomic actions, each atomic action is a (verb, noun) pair
rendered as a moving shape. The noun picks the shape and color, the verb
picks the motion pattern, so noun identity is readable per-frame while
verb identity only exists across frames. Timelines tile a video with
complex-action instances; summaries and per-window labels come along as
ground truth for the forecasting probes.

Determinism contract: everything is a pure function of integer seeds.
Per-clip pixel noise is seeded by (video_seed, clip_index) and per-span
motion jitter by (video_seed, span_start, salt), so edits to one span
leave every other clip bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

CLIP_LEN = 8  # frames per clip, fixed

BOS_TOKEN = 0
EOS_TOKEN = 1
COMPLEX_TOKEN_BASE = 2

MAX_MOTIFS = 8  # distinct motion patterns / shapes the renderer supports

_SPAN_JITTER_SALT = 7919

_PALETTE = np.array([
    [1.00, 0.35, 0.35],
    [0.35, 1.00, 0.40],
    [0.40, 0.55, 1.00],
    [1.00, 0.95, 0.40],
    [1.00, 0.50, 1.00],
    [0.45, 1.00, 1.00],
    [1.00, 0.70, 0.35],
    [0.82, 0.82, 0.82],
])

_BACKGROUND = 0.12


# ---------------------------------------------------------------------------
# grammar and timeline types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AtomicTemplate:
    verb: int
    noun: int
    dur_min: int  # clips
    dur_max: int


@dataclass(frozen=True)
class ActionGrammar:
    n_verbs: int
    n_nouns: int
    complex_actions: tuple[tuple[AtomicTemplate, ...], ...]
    seed: int

    def validate(self):
        if self.n_verbs < 2 or self.n_nouns < 2:
            raise ValueError("grammar needs n_verbs >= 2 and n_nouns >= 2")
        for i, templates in enumerate(self.complex_actions):
            if len(templates) < 2:
                raise ValueError(f"complex action {i} has fewer than 2 atomic templates")
            for t in templates:
                if not (0 <= t.verb < self.n_verbs and 0 <= t.noun < self.n_nouns):
                    raise ValueError(f"complex action {i} references class out of range")
                if t.dur_min < 1 or t.dur_max < t.dur_min:
                    raise ValueError(f"complex action {i} has invalid duration range")

    @property
    def n_complex(self) -> int:
        return len(self.complex_actions)

    def min_instance_clips(self, complex_id: int) -> int:
        return sum(t.dur_min for t in self.complex_actions[complex_id])

    def to_dict(self) -> dict:
        return {
            "n_verbs": self.n_verbs,
            "n_nouns": self.n_nouns,
            "seed": self.seed,
            "complex_actions": [
                [[t.verb, t.noun, t.dur_min, t.dur_max] for t in templates]
                for templates in self.complex_actions
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ActionGrammar":
        actions = tuple(
            tuple(AtomicTemplate(*entry) for entry in templates)
            for templates in d["complex_actions"]
        )
        g = ActionGrammar(d["n_verbs"], d["n_nouns"], actions, d["seed"])
        g.validate()
        return g


@dataclass(frozen=True)
class Span:
    complex_id: int
    atomic_index: int
    verb: int
    noun: int
    start_clip: int
    end_clip: int


@dataclass(frozen=True)
class ActionTimeline:
    total_clips: int
    spans: tuple[Span, ...]
    n_verbs: int
    n_nouns: int

    def validate(self):
        if not self.spans:
            raise ValueError("timeline has no spans")
        cursor = 0
        for s in self.spans:
            if s.start_clip != cursor or s.end_clip <= s.start_clip:
                raise ValueError("spans must be contiguous and non-empty")
            cursor = s.end_clip
        if cursor != self.total_clips:
            raise ValueError("spans must cover [0, total_clips)")

    def clip_actions(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-clip (verb, noun) arrays of length total_clips."""
        verbs = np.empty(self.total_clips, dtype=np.int64)
        nouns = np.empty(self.total_clips, dtype=np.int64)
        for s in self.spans:
            verbs[s.start_clip:s.end_clip] = s.verb
            nouns[s.start_clip:s.end_clip] = s.noun
        return verbs, nouns

    def instance_sequence(self) -> tuple[int, ...]:
        """Complex-action ids in order of instance starts."""
        return tuple(s.complex_id for s in self.spans if s.atomic_index == 0)

    def to_dict(self) -> dict:
        return {
            "total_clips": self.total_clips,
            "n_verbs": self.n_verbs,
            "n_nouns": self.n_nouns,
            "spans": [[s.complex_id, s.atomic_index, s.verb, s.noun, s.start_clip, s.end_clip]
                      for s in self.spans],
        }

    @staticmethod
    def from_dict(d: dict) -> "ActionTimeline":
        spans = tuple(Span(*row) for row in d["spans"])
        tl = ActionTimeline(d["total_clips"], spans, d["n_verbs"], d["n_nouns"])
        tl.validate()
        return tl


@dataclass(frozen=True)
class SummaryTokens:
    tokens: tuple[int, ...]

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class SyntheticVideo:
    frames: np.ndarray  # (T_frames, F_h, F_w, 3) float32 in [0, 1]
    timeline: ActionTimeline
    summary: SummaryTokens
    video_seed: int


# ---------------------------------------------------------------------------
# grammar construction
# ---------------------------------------------------------------------------

def build_grammar(seed: int, n_verbs: int, n_nouns: int, n_complex: int,
                  atomics_range: tuple[int, int] = (2, 5),
                  duration_range: tuple[int, int] = (2, 4)) -> ActionGrammar:
    """Sample an action grammar.

    Each complex action gets 2-5 atomic templates, distinct (verb, noun)
    pairs within the complex. A covering set of pairs touching every verb
    and noun class is distributed across the complex actions first (when
    slots allow), so that large corpora exercise the full vocabulary.
    """
    if n_verbs < 2:
        raise ValueError("n_verbs < 2")
    if n_nouns < 2:
        raise ValueError("n_nouns < 2")
    if n_complex < 1:
        raise ValueError("n_complex < 1")
    if n_verbs > MAX_MOTIFS or n_nouns > MAX_MOTIFS:
        raise ValueError(f"renderer supports at most {MAX_MOTIFS} verb/noun motifs")
    lo, hi = atomics_range
    if not (2 <= lo <= hi <= 5):
        raise ValueError("atomics_range must lie within [2, 5]")

    rng = np.random.default_rng(np.random.SeedSequence([seed, n_verbs, n_nouns, n_complex]))
    counts = rng.integers(lo, hi + 1, size=n_complex)

    # covering pairs: every verb and every noun appears at least once
    n_cover = max(n_verbs, n_nouns)
    verbs = rng.permutation(n_verbs)
    nouns = rng.permutation(n_nouns)
    cover = [(int(verbs[i % n_verbs]), int(nouns[i % n_nouns])) for i in range(n_cover)]
    if n_cover > counts.sum():
        # grow template counts (up to the cap) until the covering set fits
        order = rng.permutation(n_complex)
        i = 0
        while n_cover > counts.sum() and counts.min() < hi:
            c = order[i % n_complex]
            if counts[c] < hi:
                counts[c] += 1
            i += 1
    rng.shuffle(cover)

    def draw_duration():
        d_lo = int(rng.integers(duration_range[0], duration_range[1] + 1))
        d_hi = int(rng.integers(d_lo, duration_range[1] + 1))
        return d_lo, d_hi

    actions = []
    cursor = 0
    for c in range(n_complex):
        pairs: list[tuple[int, int]] = []
        while len(pairs) < counts[c] and cursor < len(cover):
            cand = cover[cursor]
            cursor += 1
            if cand not in pairs:
                pairs.append(cand)
        while len(pairs) < counts[c]:
            cand = (int(rng.integers(n_verbs)), int(rng.integers(n_nouns)))
            if cand not in pairs:
                pairs.append(cand)
        templates = tuple(AtomicTemplate(v, n, *draw_duration()) for v, n in pairs)
        actions.append(templates)

    grammar = ActionGrammar(n_verbs, n_nouns, tuple(actions), seed)
    grammar.validate()
    return grammar


# ---------------------------------------------------------------------------
# timeline sampling
# ---------------------------------------------------------------------------

def sample_timeline(grammar: ActionGrammar, rng: np.random.Generator,
                    total_clips: int) -> ActionTimeline:
    """Tile [0, total_clips) with complex-action instances.

    Instances are drawn uniformly over complex ids; atomic durations are
    uniform in each template's range. The final instance is truncated at
    the video boundary.
    """
    grammar.validate()
    min_required = max(grammar.min_instance_clips(c) for c in range(grammar.n_complex))
    if total_clips < min_required:
        raise ValueError(
            f"total_clips={total_clips} is below the largest minimum instance "
            f"duration {min_required}")

    spans: list[Span] = []
    cursor = 0
    while cursor < total_clips:
        c = int(rng.integers(grammar.n_complex))
        for a_idx, t in enumerate(grammar.complex_actions[c]):
            dur = int(rng.integers(t.dur_min, t.dur_max + 1))
            dur = min(dur, total_clips - cursor)
            if dur == 0:
                break
            spans.append(Span(c, a_idx, t.verb, t.noun, cursor, cursor + dur))
            cursor += dur

    timeline = ActionTimeline(total_clips, tuple(spans), grammar.n_verbs, grammar.n_nouns)
    timeline.validate()
    return timeline


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(noun: int, dx: np.ndarray, dy: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Boolean mask (F, H, W) for shape `noun` with half-size s per frame."""
    r = np.sqrt(dx * dx + dy * dy)
    if noun == 0:    # disk
        return r <= s
    if noun == 1:    # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.9 * s
    if noun == 2:    # diamond
        return np.abs(dx) + np.abs(dy) <= 1.2 * s
    if noun == 3:    # ring
        return (r <= s) & (r >= 0.55 * s)
    if noun == 4:    # plus
        return ((np.abs(dx) <= 0.35 * s) & (np.abs(dy) <= s)) | \
               ((np.abs(dy) <= 0.35 * s) & (np.abs(dx) <= s))
    if noun == 5:    # triangle (apex up)
        return (dy <= s * 0.6) & (dy >= -s) & (np.abs(dx) <= 0.65 * (s * 0.6 - dy))
    if noun == 6:    # hollow square
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= 0.95 * s) & (cheb >= 0.55 * s)
    if noun == 7:    # x-cross
        return ((np.abs(dx - dy) <= 0.45 * s) | (np.abs(dx + dy) <= 0.45 * s)) & \
               (np.maximum(np.abs(dx), np.abs(dy)) <= s)
    raise ValueError(f"unsupported noun motif {noun}")


def _motion_path(verb: int, n_frames: int, h: int, w: int, size: float,
                 jitter: np.ndarray, phase: float):
    """Center coordinates (cx, cy) and half-size arrays over a span's frames."""
    u = np.arange(n_frames) / max(n_frames - 1, 1)
    margin = size + 1.5
    cxm, cym = w / 2.0 + jitter[0], h / 2.0 + jitter[1]
    amp_x, amp_y = w / 2.0 - margin, h / 2.0 - margin
    lo_x, hi_x = margin, w - 1 - margin
    lo_y, hi_y = margin, h - 1 - margin
    sizes = np.full(n_frames, size)
    if verb == 0:    # sweep left -> right
        cx, cy = lo_x + (hi_x - lo_x) * u, np.full(n_frames, cym)
    elif verb == 1:  # sweep top -> bottom
        cx, cy = np.full(n_frames, cxm), lo_y + (hi_y - lo_y) * u
    elif verb == 2:  # diagonal sweep
        cx, cy = lo_x + (hi_x - lo_x) * u, lo_y + (hi_y - lo_y) * u
    elif verb == 3:  # orbit
        ang = 2 * np.pi * u + phase
        cx, cy = w / 2.0 + amp_x * np.cos(ang), h / 2.0 + amp_y * np.sin(ang)
    elif verb == 4:  # horizontal zigzag
        cx, cy = cxm + amp_x * np.sin(4 * np.pi * u + phase), np.full(n_frames, cym)
    elif verb == 5:  # pulse in place
        cx, cy = np.full(n_frames, cxm), np.full(n_frames, cym)
        sizes = size * (0.55 + 0.45 * (1 + np.sin(4 * np.pi * u + phase)) / 2)
    elif verb == 6:  # vertical bounce
        cx, cy = np.full(n_frames, cxm), cym + amp_y * np.sin(4 * np.pi * u + phase)
    elif verb == 7:  # inward spiral
        ang = 3 * np.pi * u + phase
        shrink = 1.0 - 0.7 * u
        cx = w / 2.0 + amp_x * shrink * np.cos(ang)
        cy = h / 2.0 + amp_y * shrink * np.sin(ang)
    else:
        raise ValueError(f"unsupported verb motif {verb}")
    return cx, cy, sizes


def _render_frames_u8(timeline: ActionTimeline, frame_hw: tuple[int, int],
                      video_seed: int, noise_sigma: float) -> np.ndarray:
    h, w = frame_hw
    if h < 16 or w < 16:
        raise ValueError("frame size must be at least 16x16")
    if timeline.n_verbs > MAX_MOTIFS or timeline.n_nouns > MAX_MOTIFS:
        raise ValueError(f"renderer supports at most {MAX_MOTIFS} verb/noun motifs")
    t_frames = timeline.total_clips * CLIP_LEN
    frames = np.full((t_frames, h, w, 3), _BACKGROUND, dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base_size = min(h, w) * 0.17

    for span in timeline.spans:
        f0, f1 = span.start_clip * CLIP_LEN, span.end_clip * CLIP_LEN
        jrng = np.random.default_rng(
            np.random.SeedSequence([video_seed, span.start_clip, _SPAN_JITTER_SALT]))
        jitter = jrng.uniform(-2.0, 2.0, size=2)
        phase = jrng.uniform(0, 2 * np.pi)
        cx, cy, sizes = _motion_path(span.verb, f1 - f0, h, w, base_size, jitter, phase)
        dx = xx[None] - cx[:, None, None]
        dy = yy[None] - cy[:, None, None]
        mask = _shape_mask(span.noun, dx, dy, sizes[:, None, None])
        color = _PALETTE[span.noun]
        frames[f0:f1] += mask[..., None] * (color - _BACKGROUND)

    # per-clip noise keeps counterfactual edits clip-local
    if noise_sigma > 0:
        for c in range(timeline.total_clips):
            crng = np.random.default_rng(np.random.SeedSequence([video_seed, c]))
            block = frames[c * CLIP_LEN:(c + 1) * CLIP_LEN]
            block += crng.normal(0.0, noise_sigma, size=block.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return np.round(frames * 255.0).astype(np.uint8)


def frames_to_float(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float32) / np.float32(255.0)


def render_video(timeline: ActionTimeline, frame_hw: tuple[int, int],
                 rng: np.random.Generator | int, noise_sigma: float = 0.06) -> SyntheticVideo:
    """Render a timeline to frames; deterministic given the video seed.

    `rng` may be a Generator (a 63-bit video seed is drawn from it) or an
    explicit integer seed.
    """
    if isinstance(rng, (int, np.integer)):
        video_seed = int(rng)
    else:
        video_seed = int(rng.integers(2 ** 63))
    u8 = _render_frames_u8(timeline, frame_hw, video_seed, noise_sigma)
    return SyntheticVideo(frames=frames_to_float(u8), timeline=timeline,
                          summary=summarize(timeline), video_seed=video_seed)


# ---------------------------------------------------------------------------
# summaries and labels
# ---------------------------------------------------------------------------

def summary_vocab_size(n_complex: int) -> int:
    return COMPLEX_TOKEN_BASE + n_complex


def summarize(timeline: ActionTimeline) -> SummaryTokens:
    """Templated summary: BOS, one token per complex-action instance, EOS."""
    tokens = (BOS_TOKEN,) + tuple(COMPLEX_TOKEN_BASE + c for c in timeline.instance_sequence()) \
        + (EOS_TOKEN,)
    if len(tokens) > 32:
        raise ValueError("summary exceeds 32 tokens; video too long for the template")
    return SummaryTokens(tokens)


def labels_for_window(timeline: ActionTimeline, start_clip: int, end_clip: int):
    """Multi-hot verb/noun labels plus per-clip actions for a clip window."""
    if not (0 <= start_clip < end_clip <= timeline.total_clips):
        raise ValueError(
            f"window [{start_clip}, {end_clip}) invalid for {timeline.total_clips} clips")
    verbs, nouns = timeline.clip_actions()
    wv, wn = verbs[start_clip:end_clip], nouns[start_clip:end_clip]
    verb_mh = np.zeros(timeline.n_verbs, dtype=np.uint8)
    noun_mh = np.zeros(timeline.n_nouns, dtype=np.uint8)
    verb_mh[np.unique(wv)] = 1
    noun_mh[np.unique(wn)] = 1
    per_clip = list(zip(wv.tolist(), wn.tolist()))
    return verb_mh, noun_mh, per_clip


# ---------------------------------------------------------------------------
# corpus container and disk format
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    grammar: ActionGrammar
    seed: int
    clips_per_video: int
    frame_hw: tuple[int, int]
    noise_sigma: float
    frames_u8: np.ndarray          # (n_videos, T_frames, H, W, 3)
    timelines: list[ActionTimeline]
    summaries: list[SummaryTokens]
    video_seeds: np.ndarray        # (n_videos,) int64

    @property
    def n_videos(self) -> int:
        return len(self.timelines)

    def video(self, i: int) -> SyntheticVideo:
        return SyntheticVideo(frames=frames_to_float(self.frames_u8[i]),
                              timeline=self.timelines[i], summary=self.summaries[i],
                              video_seed=int(self.video_seeds[i]))

    def clip_block(self, video_id: int, start_clip: int, n_clips: int,
                   dtype=np.float32) -> np.ndarray:
        """(n_clips, CLIP_LEN, H, W, 3) float frames for consecutive clips."""
        f0 = start_clip * CLIP_LEN
        f1 = f0 + n_clips * CLIP_LEN
        block = self.frames_u8[video_id, f0:f1].astype(dtype) / dtype(255.0)
        return block.reshape(n_clips, CLIP_LEN, *block.shape[1:])


def _render_one(args) -> tuple[ActionTimeline, SummaryTokens, int, np.ndarray]:
    grammar_dict, seed, idx, clips_per_video, frame_hw, noise_sigma = args
    grammar = ActionGrammar.from_dict(grammar_dict)
    rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
    timeline = sample_timeline(grammar, rng, clips_per_video)
    video_seed = int(rng.integers(2 ** 63))
    u8 = _render_frames_u8(timeline, frame_hw, video_seed, noise_sigma)
    return timeline, summarize(timeline), video_seed, u8


def generate_corpus(grammar: ActionGrammar, seed: int, n_videos: int,
                    clips_per_video: int, frame_hw: tuple[int, int] = (32, 32),
                    noise_sigma: float = 0.06, workers: int | None = None) -> Corpus:
    """Generate a corpus; each video depends only on (seed, video index).

    `workers` > 1 renders videos in a process pool; the result is identical
    to the sequential path because every video is independently seeded.
    """
    if n_videos < 1:
        raise ValueError("n_videos < 1")
    grammar.validate()
    if workers is None:
        workers = int(os.environ.get("MVP_LAB_THREADS", "1"))

    args = [(grammar.to_dict(), seed, i, clips_per_video, frame_hw, noise_sigma)
            for i in range(n_videos)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_render_one, args, chunksize=8))
    else:
        results = [_render_one(a) for a in args]

    h, w = frame_hw
    frames = np.empty((n_videos, clips_per_video * CLIP_LEN, h, w, 3), dtype=np.uint8)
    timelines, summaries, seeds = [], [], np.empty(n_videos, dtype=np.int64)
    for i, (tl, summ, vseed, u8) in enumerate(results):
        frames[i] = u8
        timelines.append(tl)
        summaries.append(summ)
        seeds[i] = vseed
    return Corpus(grammar=grammar, seed=seed, clips_per_video=clips_per_video,
                  frame_hw=frame_hw, noise_sigma=noise_sigma, frames_u8=frames,
                  timelines=timelines, summaries=summaries, video_seeds=seeds)


def save_corpus(corpus: Corpus, out_dir: str):
    """Write manifest.json plus per-video raw float32 frames and JSON sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "sidecars"), exist_ok=True)
    entries = []
    for i in range(corpus.n_videos):
        frames_name = f"videos/v{i:06d}.f32"
        sidecar_name = f"sidecars/v{i:06d}.json"
        fl = frames_to_float(corpus.frames_u8[i])
        fl.astype("<f4").tofile(os.path.join(out_dir, frames_name))
        tl = corpus.timelines[i]
        verb_mh, noun_mh, _ = labels_for_window(tl, 0, tl.total_clips)
        sidecar = {
            "timeline": tl.to_dict(),
            "summary": list(corpus.summaries[i].tokens),
            "labels": {"verb_multi_hot": verb_mh.tolist(),
                       "noun_multi_hot": noun_mh.tolist()},
            "video_seed": int(corpus.video_seeds[i]),
        }
        with open(os.path.join(out_dir, sidecar_name), "w") as f:
            json.dump(sidecar, f)
        entries.append({"id": i, "frames": frames_name, "sidecar": sidecar_name,
                        "total_clips": tl.total_clips})
    manifest = {
        "format": "mvp-lab-corpus-v1",
        "grammar": corpus.grammar.to_dict(),
        "seed": corpus.seed,
        "n_videos": corpus.n_videos,
        "clips_per_video": corpus.clips_per_video,
        "frame_hw": list(corpus.frame_hw),
        "noise_sigma": corpus.noise_sigma,
        "videos": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_corpus(in_dir: str) -> Corpus:
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "mvp-lab-corpus-v1":
        raise ValueError(f"unrecognized corpus format in {in_dir}")
    grammar = ActionGrammar.from_dict(manifest["grammar"])
    h, w = manifest["frame_hw"]
    n = manifest["n_videos"]
    clips = manifest["clips_per_video"]
    frames = np.empty((n, clips * CLIP_LEN, h, w, 3), dtype=np.uint8)
    timelines, summaries = [], []
    seeds = np.empty(n, dtype=np.int64)
    for entry in manifest["videos"]:
        i = entry["id"]
        fl = np.fromfile(os.path.join(in_dir, entry["frames"]), dtype="<f4")
        fl = fl.reshape(clips * CLIP_LEN, h, w, 3)
        frames[i] = np.round(fl * 255.0).astype(np.uint8)
        with open(os.path.join(in_dir, entry["sidecar"])) as f:
            sidecar = json.load(f)
        timelines.append(ActionTimeline.from_dict(sidecar["timeline"]))
        summaries.append(SummaryTokens(tuple(sidecar["summary"])))
        seeds[i] = sidecar["video_seed"]
    return Corpus(grammar=grammar, seed=manifest["seed"], clips_per_video=clips,
                  frame_hw=(h, w), noise_sigma=manifest["noise_sigma"], frames_u8=frames,
                  timelines=timelines, summaries=summaries, video_seeds=seeds)
