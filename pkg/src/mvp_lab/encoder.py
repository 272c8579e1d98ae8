"""Clip encoder: one 8-frame clip -> (L, H, W, D) region feature map.

A small two-stage transformer stands in for a hierarchical video encoder:
spacetime patches are embedded and attended within the clip, spatially
pooled between stages, then temporally pooled to the output grid. There
is no classification token; downstream consumers meanpool regions when
they need a clip vector. The encoder is strictly clip-local: no operation
mixes information across clips in a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .sampling import ClipTensor


@dataclass(frozen=True)
class EncoderConfig:
    clip_len: int = 8
    frame_hw: tuple[int, int] = (32, 32)
    patch: tuple[int, int, int] = (2, 8, 8)       # (t, h, w) patch size
    stage_dims: tuple[int, int] = (32, 64)
    stage_heads: tuple[int, int] = (2, 2)
    stage_blocks: tuple[int, int] = (1, 1)
    pool_spatial: int = 2    # spatial pooling factor between stages
    pool_temporal: int = 2   # temporal pooling factor after stage 2
    mlp_ratio: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        pt, ph, pw = self.patch
        fh, fw = self.frame_hw
        if self.clip_len % pt or fh % ph or fw % pw:
            raise ValueError("patch size must divide clip length and frame size")
        t1, h1, w1 = self.clip_len // pt, fh // ph, fw // pw
        if h1 % self.pool_spatial or w1 % self.pool_spatial or t1 % self.pool_temporal:
            raise ValueError("pooling factors must divide the token grid")
        if any(d <= 0 for d in self.stage_dims) or any(h <= 0 for h in self.stage_heads):
            raise ValueError("stage dims and heads must be positive")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h:
                raise ValueError("stage dim must be divisible by head count")

    @property
    def grid1(self) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return (self.clip_len // pt, self.frame_hw[0] // ph, self.frame_hw[1] // pw)

    @property
    def grid2(self) -> tuple[int, int, int]:
        t1, h1, w1 = self.grid1
        return (t1, h1 // self.pool_spatial, w1 // self.pool_spatial)

    @property
    def output_grid(self) -> tuple[int, int, int, int]:
        """(L, H, W, D) of the emitted region feature map."""
        t2, h2, w2 = self.grid2
        return (t2 // self.pool_temporal, h2, w2, self.stage_dims[1])

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * 3


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict  # nested dict of Tensors

    def flat(self, prefix: str = "encoder") -> dict[str, Tensor]:
        return nn.flatten_params(self.tensors, prefix + ".")

    def n_parameters(self) -> int:
        return sum(t.size for t in self.flat().values())


@dataclass(frozen=True)
class RegionFeatureMap:
    values: Tensor  # (L, H, W, D)
    video_id: int | None = None
    clip_index: int | None = None


def init_encoder(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Scaled-normal init (std 1/sqrt(fan_in)); deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E0C]))
    d1, d2 = config.stage_dims
    t1, h1, w1 = config.grid1
    _, h2, w2 = config.grid2
    tensors = {
        "patch_w": nn.param(rng, (config.patch_dim, d1), config.patch_dim, dtype),
        "patch_b": nn.zeros_param((d1,), dtype),
        "pos1": nn.param(rng, (t1 * h1 * w1, d1), d1, dtype),
        "stage1": [nn.init_block(rng, d1, config.mlp_ratio * d1, dtype)
                   for _ in range(config.stage_blocks[0])],
        "proj12_w": nn.param(rng, (d1, d2), d1, dtype),
        "proj12_b": nn.zeros_param((d2,), dtype),
        "pos2": nn.param(rng, (t1 * h2 * w2, d2), d2, dtype),
        "stage2": [nn.init_block(rng, d2, config.mlp_ratio * d2, dtype)
                   for _ in range(config.stage_blocks[1])],
        "final_ln_g": nn.ones_param((d2,), dtype),
        "final_ln_b": nn.zeros_param((d2,), dtype),
    }
    return EncoderParams(config=config, tensors=tensors)


def _check_clip_shape(clips: np.ndarray, config: EncoderConfig):
    expect = (config.clip_len, *config.frame_hw, 3)
    if clips.shape[-4:] != expect:
        raise ValueError(f"clip shape {clips.shape[-4:]} does not match encoder config {expect}")


def _dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return ad.mul(x, keep)


def encode_clips(params: EncoderParams, clips, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Encode a batch of clips: (N, 8, F_h, F_w, 3) -> (N, L, H, W, D).

    Deterministic unless dropout > 0 and train=True. Each batch item is
    processed independently (attention never crosses the batch axis).
    """
    cfg = params.config
    p = params.tensors
    dtype = p["patch_w"].dtype
    if isinstance(clips, Tensor):
        x = clips
    else:
        x = Tensor(np.asarray(clips, dtype=dtype))
    _check_clip_shape(x.data, cfg)
    if x.ndim == 4:
        x = ad.reshape(x, (1, *x.shape))
    n = x.shape[0]
    pt, ph, pw = cfg.patch
    t1, h1, w1 = cfg.grid1
    d1, d2 = cfg.stage_dims

    # spacetime patches -> tokens
    x = ad.reshape(x, (n, t1, pt, h1, ph, w1, pw, 3))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = ad.reshape(x, (n, t1 * h1 * w1, cfg.patch_dim))
    x = nn.linear(x, p["patch_w"], p["patch_b"])
    x = ad.add(x, p["pos1"])
    drop = cfg.dropout if train else 0.0
    if drop > 0:
        x = _dropout(x, drop, rng)
    for block in p["stage1"]:
        x = nn.transformer_block(x, block, cfg.stage_heads[0])
        if drop > 0:
            x = _dropout(x, drop, rng)

    # spatial pooling between stages
    ps = cfg.pool_spatial
    _, h2, w2 = cfg.grid2
    x = ad.reshape(x, (n, t1, h2, ps, w2, ps, d1))
    x = ad.tmean(x, axis=(3, 5))
    x = ad.reshape(x, (n, t1 * h2 * w2, d1))
    x = nn.linear(x, p["proj12_w"], p["proj12_b"])
    x = ad.add(x, p["pos2"])
    for block in p["stage2"]:
        x = nn.transformer_block(x, block, cfg.stage_heads[1])
        if drop > 0:
            x = _dropout(x, drop, rng)

    # temporal pooling to the output grid
    pt2 = cfg.pool_temporal
    l_out = t1 // pt2
    x = ad.reshape(x, (n, l_out, pt2, h2, w2, d2))
    x = ad.tmean(x, axis=2)
    x = nn.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
    return x


def encode_clip(clip, params: EncoderParams) -> RegionFeatureMap:
    """Encode a single clip to its region feature map."""
    if isinstance(clip, ClipTensor):
        values = encode_clips(params, clip.values[None])
        return RegionFeatureMap(values=ad.reshape(values, values.shape[1:]),
                                video_id=clip.video_id, clip_index=clip.clip_index)
    values = encode_clips(params, np.asarray(clip)[None])
    return RegionFeatureMap(values=ad.reshape(values, values.shape[1:]))


def encode_sequence(clips, params: EncoderParams) -> list[RegionFeatureMap]:
    """Elementwise encode_clip over a clip sequence, order preserved."""
    return [encode_clip(c, params) for c in clips]
