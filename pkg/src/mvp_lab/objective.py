"""Prediction heads and contrastive objectives.

The main loss treats every (batch item, horizon, region) triple as an
anchor: the predicted region feature must identify its own aggregated
future target among all other targets in the batch, across horizons and
regions. Baselines: a CPC-style loss that predicts uncontextualized
per-clip features of the immediately following clips, and a two-view
sequence-level InfoNCE.

Similarities are raw dot products by default (`normalize=True` switches
to cosine). Temperatures divide the similarity before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .aggregation import ContextualizedRegions, SequenceSummary, TargetSet


@dataclass
class PredictionHeads:
    """One two-layer MLP per prediction horizon; no weight sharing."""
    heads: list  # each {"w1", "b1", "w2", "b2"}
    nonlinearity: str = "relu"

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def flat(self, prefix: str = "heads") -> dict[str, Tensor]:
        return nn.flatten_params(self.heads, prefix + ".")


@dataclass
class LossReport:
    loss: Tensor                 # scalar mean over anchors (optimization target)
    total: float                 # sum over anchors
    per_horizon: np.ndarray      # (N_P,) mean loss per horizon
    anchor_count: int
    tau: float

    @property
    def mean(self) -> float:
        return float(self.loss.data)


@dataclass(frozen=True)
class PredictionSet:
    values: Tensor               # (..., N_P, L*H*W, D)


def init_heads(n_p: int, d: int, hidden: int, seed: int, dtype=np.float32) -> PredictionHeads:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    heads = [{
        "w1": nn.param(rng, (d, hidden), d, dtype),
        "b1": nn.zeros_param((hidden,), dtype),
        "w2": nn.param(rng, (hidden, d), hidden, dtype),
        "b2": nn.zeros_param((d,), dtype),
    } for _ in range(n_p)]
    return PredictionHeads(heads=heads)


def predict_future(ctx: ContextualizedRegions, heads: PredictionHeads) -> PredictionSet:
    """Apply each horizon head to the final observed timestep's regions.

    Takes the last clip's L contextualized entries at every spatial
    location -> (L*H*W, D) and maps them through every head, stacking to
    (N_P, L*H*W, D) (batch axis leading when the context is batched).
    """
    x = ctx.values
    batched = x.ndim == 5
    if not batched:
        x = ad.reshape(x, (1, *x.shape))
    b, t, h, w, d = x.shape
    l = ctx.l_per_clip
    last = x[:, t - l: t]                          # (B, L, H, W, D)
    last = ad.reshape(last, (b, l * h * w, d))
    outs = []
    for head in heads.heads:
        outs.append(nn.mlp2(last, head["w1"], head["b1"], head["w2"], head["b2"],
                            nonlinearity=heads.nonlinearity))
    vals = ad.stack(outs, axis=1)                  # (B, N_P, R, D)
    if not batched:
        vals = ad.reshape(vals, vals.shape[1:])
    return PredictionSet(values=vals)


def _as_batched_triplet(x) -> Tensor:
    """Coerce PredictionSet/TargetSet/array to a Tensor (B, N_P, R, D)."""
    if isinstance(x, PredictionSet):
        x = x.values
    elif isinstance(x, TargetSet):
        x = x.values
    t = ad.as_tensor(x)
    if t.ndim == 3:
        t = ad.reshape(t, (1, *t.shape))
    if t.ndim != 4:
        raise ValueError(f"expected (B, N_P, R, D) or (N_P, R, D), got {t.shape}")
    return t


def mvp_info_nce(preds, targets, tau: float, normalize: bool = False) -> LossReport:
    """Region-level InfoNCE over all anchors.

    For anchor (b, j, n) the positive is its own target; the denominator
    adds every other (b', j', n') target in the batch. Sum and mean over
    anchors are both reported; the mean is the optimization target.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = _as_batched_triplet(preds)
    z = _as_batched_triplet(targets)
    if p.shape != z.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {z.shape}")
    if not (np.isfinite(p.data).all() and np.isfinite(z.data).all()):
        raise ValueError("non-finite values in predictions or targets")
    b, n_p, r, d = p.shape
    m = b * n_p * r
    pf = ad.reshape(p, (m, d))
    zf = ad.reshape(z, (m, d))
    if normalize:
        pf = ad.l2_normalize(pf, axis=-1)
        zf = ad.l2_normalize(zf, axis=-1)
    logits = ad.mul(ad.matmul(pf, ad.transpose(zf, (1, 0))), 1.0 / tau)
    log_p = ad.log_softmax(logits, axis=-1)
    diag = ad.getitem(log_p, (np.arange(m), np.arange(m)))
    losses = ad.neg(diag)
    loss_mean = ad.tmean(losses)
    per_h = losses.data.reshape(b, n_p, r).mean(axis=(0, 2))
    return LossReport(loss=loss_mean, total=float(losses.data.sum()),
                      per_horizon=per_h, anchor_count=m, tau=tau)


def similarity_matrix(preds, targets, normalize: bool = False) -> np.ndarray:
    """(M, M) anchor-vs-target similarity matrix (no tape)."""
    p = _as_batched_triplet(preds).data
    z = _as_batched_triplet(targets).data
    m, d = p.shape[0] * p.shape[1] * p.shape[2], p.shape[3]
    pf = p.reshape(m, d)
    zf = z.reshape(m, d)
    if normalize:
        pf = pf / np.maximum(np.linalg.norm(pf, axis=-1, keepdims=True), 1e-12)
        zf = zf / np.maximum(np.linalg.norm(zf, axis=-1, keepdims=True), 1e-12)
    return pf @ zf.T


def accuracy_from_similarities(sims: np.ndarray) -> float:
    """Fraction of rows whose diagonal strictly beats every other entry."""
    m = sims.shape[0]
    diag = np.diag(sims).copy()
    off = sims.copy()
    np.fill_diagonal(off, -np.inf)
    return float(np.mean(diag > off.max(axis=1)))


def pretrain_region_accuracy(preds, targets, normalize: bool = False) -> float:
    """Share of anchors ranking their own target first; ties count as misses."""
    return accuracy_from_similarities(similarity_matrix(preds, targets, normalize))


def cvrl_seq_loss(summary_a, summary_b, tau: float, normalize: bool = False) -> Tensor:
    """Symmetric two-view InfoNCE over sequence summaries.

    Positives are the two views of the same video; negatives are the other
    batch items' views. Averaged over both directions.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    za = summary_a.z if isinstance(summary_a, SequenceSummary) else ad.as_tensor(summary_a)
    zb = summary_b.z if isinstance(summary_b, SequenceSummary) else ad.as_tensor(summary_b)
    if za.ndim != 2 or zb.ndim != 2 or za.shape != zb.shape:
        raise ValueError("expected matching (B, D) summary batches")
    b = za.shape[0]
    if b < 2:
        raise ValueError("two-view InfoNCE needs batch size >= 2 (no negatives otherwise)")
    if normalize:
        za = ad.l2_normalize(za, axis=-1)
        zb = ad.l2_normalize(zb, axis=-1)
    idx = (np.arange(b), np.arange(b))
    logits_ab = ad.mul(ad.matmul(za, ad.transpose(zb, (1, 0))), 1.0 / tau)
    loss_ab = ad.neg(ad.tmean(ad.getitem(ad.log_softmax(logits_ab, axis=-1), idx)))
    logits_ba = ad.mul(ad.matmul(zb, ad.transpose(za, (1, 0))), 1.0 / tau)
    loss_ba = ad.neg(ad.tmean(ad.getitem(ad.log_softmax(logits_ba, axis=-1), idx)))
    return ad.mul(ad.add(loss_ab, loss_ba), 0.5)


def single_clip_targets(future_maps, stride: int) -> np.ndarray:
    """No-aggregation ablation targets: the single clip at each horizon.

    Keeps the multiscale horizon positions {S, 2S, ..., N_F} but drops the
    causal aggregation, exposing the uncontextualized clip features.
    """
    x = future_maps.data if isinstance(future_maps, Tensor) else np.asarray(future_maps)
    if x.ndim == 5:
        x = x[None]
    b, n_f, l, h, w, d = x.shape
    if n_f % stride:
        raise ValueError(f"stride must divide future length: {n_f} % {stride} != 0")
    idx = np.arange(stride, n_f + 1, stride) - 1
    return x[:, idx].reshape(b, len(idx), l * h * w, d)


def cpc_targets(future_maps, n_p: int) -> np.ndarray:
    """Uncontextualized region features of the first n_p future clips."""
    x = future_maps.data if isinstance(future_maps, Tensor) else np.asarray(future_maps)
    if x.ndim == 5:
        x = x[None]
    b, n_f, l, h, w, d = x.shape
    if n_f < n_p:
        raise ValueError(f"need at least {n_p} future clips, got {n_f}")
    return x[:, :n_p].reshape(b, n_p, l * h * w, d)


def cpc_loss(ctx: ContextualizedRegions, future_maps, heads: PredictionHeads,
             tau: float, normalize: bool = False) -> LossReport:
    """CPC-style loss: predict per-clip future features at horizons 1..N_P.

    Identical anchor structure to `mvp_info_nce`, but the target for
    horizon p is the (gradient-stopped) feature of the single future clip
    p, with no multiscale aggregation.
    """
    preds = predict_future(ctx, heads)
    targets = cpc_targets(future_maps, heads.n_heads)
    return mvp_info_nce(preds, targets, tau, normalize=normalize)
