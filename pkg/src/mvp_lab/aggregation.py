"""Temporal context aggregation over clip sequences.

Three pieces:

* `spatial_mha` — multi-head self-attention computed independently per
  spatial location over the stacked temporal axis (clips x L). Spatial
  mixing already happened inside the clip encoder, so attending across
  locations is deliberately not done here.
* `observed_summary` — a one-layer transformer encoder over meanpooled
  clip tokens; the last position's output summarizes the observed
  sequence for downstream probes.
* `causal_targets` — prediction targets for the future sequence: for each
  horizon p in {S, 2S, ..., N_F}, aggregate the first p clips of the
  future window per region. The default aggregator is a causal cumulative
  meanpool; a causal-attention variant sits behind `mode="attention"`.
  Targets are gradient-stopped by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import RegionFeatureMap
from .sampling import n_predictions


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise ValueError("feature dim must be divisible by head count")

    def flat(self, prefix: str = "agg") -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}


@dataclass
class SummaryParams:
    pos: Tensor            # (max_len, D) learned positional embeddings
    block: dict            # one transformer encoder block
    ln_g: Tensor
    ln_b: Tensor
    n_heads: int = 1

    def flat(self, prefix: str = "hphi") -> dict[str, Tensor]:
        out = {f"{prefix}.pos": self.pos, f"{prefix}.ln_g": self.ln_g,
               f"{prefix}.ln_b": self.ln_b}
        out.update(nn.flatten_params(self.block, f"{prefix}.block."))
        return out


@dataclass(frozen=True)
class ContextualizedRegions:
    values: Tensor          # (..., N_clips*L, H, W, D)
    n_clips: int
    l_per_clip: int


@dataclass(frozen=True)
class TargetSet:
    values: object          # ndarray or Tensor, (..., N_P, L*H*W, D)
    horizons: tuple[int, ...]  # clip counts aggregated per row: (S, 2S, ..., N_F)


@dataclass(frozen=True)
class SequenceSummary:
    z: Tensor               # (D,) or (B, D)


def init_attention(d: int, n_heads: int, seed: int, dtype=np.float32) -> AttentionParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA66]))
    return AttentionParams(
        w_q=nn.param(rng, (d, d), d, dtype), w_k=nn.param(rng, (d, d), d, dtype),
        w_v=nn.param(rng, (d, d), d, dtype), w_o=nn.param(rng, (d, d), d, dtype),
        n_heads=n_heads)


def init_summary(d: int, seed: int, max_len: int = 64, n_heads: int = 1,
                 mlp_ratio: int = 2, dtype=np.float32) -> SummaryParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D1]))
    return SummaryParams(pos=nn.param(rng, (max_len, d), d, dtype),
                         block=nn.init_block(rng, d, mlp_ratio * d, dtype),
                         ln_g=nn.ones_param((d,), dtype), ln_b=nn.zeros_param((d,), dtype),
                         n_heads=n_heads)


def _stack_maps(maps) -> tuple[Tensor, bool]:
    """Normalize input to a Tensor (B, N, L, H, W, D); returns (x, batched)."""
    if isinstance(maps, (list, tuple)):
        if not maps:
            raise ValueError("need at least one feature map")
        vals = [m.values if isinstance(m, RegionFeatureMap) else ad.as_tensor(m) for m in maps]
        x = ad.stack(vals, axis=0)
        return ad.reshape(x, (1, *x.shape)), False
    x = ad.as_tensor(maps)
    if x.ndim == 5:
        return ad.reshape(x, (1, *x.shape)), False
    if x.ndim == 6:
        return x, True
    raise ValueError(f"expected (N, L, H, W, D) or (B, N, L, H, W, D), got {x.shape}")


def spatial_mha(maps, params: AttentionParams, causal: bool = False) -> ContextualizedRegions:
    """Per-spatial-location MHA over the stacked temporal axis.

    Input: sequence of N region maps (L, H, W, D), or an equivalent
    stacked tensor. For each location (h, w) the N*L temporal entries are
    projected to queries/keys/values and attended; locations never mix.
    Output shape matches the stacked input: (..., N*L, H, W, D).
    """
    x, batched = _stack_maps(maps)
    b, n, l, h, w, d = x.shape
    if d != params.w_q.shape[0]:
        raise ValueError(f"feature dim {d} does not match attention params {params.w_q.shape[0]}")
    t = n * l
    x = ad.reshape(x, (b, t, h, w, d))
    x = ad.transpose(x, (0, 2, 3, 1, 4))          # (B, H, W, T, D)
    x = ad.reshape(x, (b * h * w, t, d))
    out = nn.multi_head_attention(x, params.w_q, params.w_k, params.w_v, params.w_o,
                                  params.n_heads, causal=causal)
    out = ad.reshape(out, (b, h, w, t, d))
    out = ad.transpose(out, (0, 3, 1, 2, 4))      # (B, T, H, W, D)
    if not batched:
        out = ad.reshape(out, (t, h, w, d))
    return ContextualizedRegions(values=out, n_clips=n, l_per_clip=l)


def clip_tokens(maps) -> Tensor:
    """Meanpool each map over (L, H, W): (..., N, L, H, W, D) -> (..., N, D)."""
    x, batched = _stack_maps(maps)
    tok = ad.tmean(x, axis=(2, 3, 4))
    return tok if batched else ad.reshape(tok, tok.shape[1:])


def observed_summary(maps, params: SummaryParams) -> SequenceSummary:
    """Summarize an observed sequence: transformer over clip tokens, last position."""
    x, batched = _stack_maps(maps)
    tok = ad.tmean(x, axis=(2, 3, 4))             # (B, N, D)
    n = tok.shape[1]
    if n > params.pos.shape[0]:
        raise ValueError(f"sequence length {n} exceeds positional table {params.pos.shape[0]}")
    tok = ad.add(tok, params.pos[:n])
    tok = nn.transformer_block(tok, params.block, params.n_heads)
    tok = nn.layer_norm(tok, params.ln_g, params.ln_b)
    z = tok[:, n - 1]                              # (B, D)
    if not batched:
        z = ad.reshape(z, (z.shape[-1],))
    return SequenceSummary(z=z)


def causal_targets(future_maps, stride: int, mode: str = "meanpool",
                   params: AttentionParams | None = None,
                   stop_grad: bool = True) -> TargetSet:
    """Multiscale targets from a future clip sequence.

    Row p (1-based) aggregates exactly the first p*stride future clips of
    each flattened region, so row p is independent of any clip beyond its
    horizon. `mode="meanpool"` is the cumulative-mean default;
    `mode="attention"` runs causal spatial MHA and reads out each horizon
    clip's contextualized regions.
    """
    x, batched = _stack_maps(future_maps)
    b, n_f, l, h, w, d = x.shape
    n_p = n_predictions(n_f, stride)
    horizons = tuple(stride * (p + 1) for p in range(n_p))
    r = l * h * w

    if mode == "meanpool":
        data = x.data
        flat = data.reshape(b, n_f, r, d)
        csum = np.cumsum(flat, axis=1)
        idx = np.array(horizons) - 1
        vals = csum[:, idx] / np.array(horizons, dtype=data.dtype)[None, :, None, None]
        if stop_grad or not x.requires_grad:
            out = vals if batched else vals[0]
            return TargetSet(values=out, horizons=horizons)
        # gradient-carrying variant built from tape ops
        flat_t = ad.reshape(x, (b, n_f, r, d))
        rows = [ad.tmean(flat_t[:, :hz], axis=1) for hz in horizons]
        out_t = ad.stack(rows, axis=1)
        if not batched:
            out_t = ad.reshape(out_t, (n_p, r, d))
        return TargetSet(values=out_t, horizons=horizons)

    if mode == "attention":
        if params is None:
            raise ValueError("attention mode requires AttentionParams")
        if stop_grad:
            with ad.no_grad():
                ctx = spatial_mha(x, params, causal=True)
        else:
            ctx = spatial_mha(x, params, causal=True)
        vals = ctx.values if ctx.values.ndim == 5 else ad.reshape(ctx.values, (1, *ctx.values.shape))
        rows = [ad.reshape(vals[:, (hz - 1) * l: hz * l], (b, r, d)) for hz in horizons]
        out_t = ad.stack(rows, axis=1)
        if stop_grad:
            out_t = out_t.detach()
        result = out_t if batched else ad.reshape(out_t, (n_p, r, d))
        if stop_grad:
            result = result.data if isinstance(result, Tensor) else result
        return TargetSet(values=result, horizons=horizons)

    raise ValueError(f"unknown causal target mode {mode!r}")
