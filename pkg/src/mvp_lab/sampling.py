"""Clip partitioning and observed/future pair sampling.

Videos are split into non-overlapping 8-frame clips. A pretraining pair
is an observed window of N_O clips and a future window of N_F clips that
starts K clips after the observed window ends (offset K >= 1, measured in
clips). The temporal stride S spaces the prediction horizons, giving
N_P = N_F / S predictions per pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthcorpus import CLIP_LEN, SyntheticVideo


@dataclass(frozen=True)
class ClipTensor:
    values: np.ndarray  # (CLIP_LEN, F_h, F_w, 3)
    video_id: int | None
    clip_index: int

    def __post_init__(self):
        if self.values.shape[0] != CLIP_LEN:
            raise ValueError(f"clips must have exactly {CLIP_LEN} frames")


@dataclass(frozen=True)
class PairSpec:
    """Observed/future sampling geometry.

    k_mode is ("fixed", k) or ("random", k_min, k_max); offsets are in
    clips and always >= 1 so future targets never overlap the observed
    window.
    """
    n_obs: int
    n_future: int
    stride: int
    k_mode: tuple

    def __post_init__(self):
        if self.n_obs < 1 or self.n_future < 1:
            raise ValueError("n_obs and n_future must be >= 1")
        n_predictions(self.n_future, self.stride)  # validates divisibility
        mode = self.k_mode[0]
        if mode == "fixed":
            if len(self.k_mode) != 2 or self.k_mode[1] < 1:
                raise ValueError("fixed offset must be ('fixed', k) with k >= 1")
        elif mode == "random":
            if len(self.k_mode) != 3 or not (1 <= self.k_mode[1] <= self.k_mode[2]):
                raise ValueError("random offset must be ('random', k_min, k_max) with 1 <= k_min <= k_max")
        else:
            raise ValueError(f"unknown offset mode {mode!r}")

    @property
    def n_predictions(self) -> int:
        return n_predictions(self.n_future, self.stride)

    @property
    def k_max(self) -> int:
        return self.k_mode[1] if self.k_mode[0] == "fixed" else self.k_mode[2]

    def min_clips(self) -> int:
        return self.n_obs + self.k_max + self.n_future

    def draw_offset(self, rng: np.random.Generator) -> int:
        if self.k_mode[0] == "fixed":
            return self.k_mode[1]
        return int(rng.integers(self.k_mode[1], self.k_mode[2] + 1))

    @staticmethod
    def parse_offset(text: str) -> tuple:
        """Parse CLI offset syntax: 'fixed:4' or 'random:1:8'."""
        parts = text.split(":")
        if parts[0] == "fixed" and len(parts) == 2:
            return ("fixed", int(parts[1]))
        if parts[0] == "random" and len(parts) == 3:
            return ("random", int(parts[1]), int(parts[2]))
        raise ValueError(f"cannot parse offset spec {text!r}")


@dataclass(frozen=True)
class ObservedFuturePair:
    observed: tuple[ClipTensor, ...]
    future: tuple[ClipTensor, ...]
    offset: int
    start: int


def n_predictions(n_future: int, stride: int) -> int:
    """N_P = N_F / S, erroring on non-divisibility rather than flooring."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_future % stride != 0:
        raise ValueError(f"stride must divide future length: {n_future} % {stride} != 0")
    return n_future // stride


def partition(video: SyntheticVideo, video_id: int | None = None) -> list[ClipTensor]:
    """Split a video into consecutive 8-frame clips."""
    t_frames = video.frames.shape[0]
    if t_frames % CLIP_LEN != 0:
        raise ValueError(f"frame count {t_frames} not divisible by {CLIP_LEN}")
    n = t_frames // CLIP_LEN
    return [ClipTensor(video.frames[i * CLIP_LEN:(i + 1) * CLIP_LEN], video_id, i)
            for i in range(n)]


def sample_pair_indices(n_clips: int, spec: PairSpec, rng: np.random.Generator) -> tuple[int, int]:
    """Draw (start, offset) for a pair; shared by array and ClipTensor paths."""
    k = spec.draw_offset(rng)
    span = spec.n_obs + k + spec.n_future
    if n_clips < spec.min_clips():
        raise ValueError(
            f"video too short: {n_clips} clips < required minimum {spec.min_clips()} "
            f"(n_obs={spec.n_obs} + k_max={spec.k_max} + n_future={spec.n_future})")
    start = int(rng.integers(0, n_clips - span + 1))
    return start, k


def sample_pair(clips: list[ClipTensor], spec: PairSpec,
                rng: np.random.Generator) -> ObservedFuturePair:
    """Sample an observed/future pair from a partitioned video."""
    start, k = sample_pair_indices(len(clips), spec, rng)
    f0 = start + spec.n_obs + k
    observed = tuple(clips[start:start + spec.n_obs])
    future = tuple(clips[f0:f0 + spec.n_future])
    return ObservedFuturePair(observed=observed, future=future, offset=k, start=start)
