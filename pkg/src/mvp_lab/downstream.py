"""Forecasting probes and their metrics.

Three tasks on top of a frozen backbone summary vector:

* order-agnostic forecasting — multilabel verb/noun prediction, scored by
  mean average precision over classes;
* order-specific forecasting — per-timestep verb/noun classification,
  scored by normalized edit distance between action sequences;
* summary retrieval — dual-encoder contrastive alignment between video
  summaries and templated text summaries, scored by Recall@K.

Probe heads are linear (or bilinear projections for retrieval); backbone
parameters never enter a probe optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .synthcorpus import SummaryTokens

BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# probe heads
# ---------------------------------------------------------------------------

@dataclass
class AgnosticHeads:
    w_verb: Tensor
    b_verb: Tensor
    w_noun: Tensor
    b_noun: Tensor

    def flat(self, prefix: str = "probe_agnostic") -> dict[str, Tensor]:
        return {f"{prefix}.w_verb": self.w_verb, f"{prefix}.b_verb": self.b_verb,
                f"{prefix}.w_noun": self.w_noun, f"{prefix}.b_noun": self.b_noun}


@dataclass
class SpecificHeads:
    steps: list  # per timestep: {"w_verb", "b_verb", "w_noun", "b_noun"}

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def flat(self, prefix: str = "probe_specific") -> dict[str, Tensor]:
        return nn.flatten_params(self.steps, prefix + ".")


@dataclass
class TextEncoder:
    """Bag-of-tokens text encoder: mean of learned token embeddings."""
    table: Tensor  # (vocab, D_L)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


@dataclass
class RetrievalHeads:
    w_video: Tensor   # (D, D_J)
    w_text: Tensor    # (D_L, D_J)
    text_encoder: TextEncoder

    def flat(self, prefix: str = "probe_summary") -> dict[str, Tensor]:
        return {f"{prefix}.w_video": self.w_video, f"{prefix}.w_text": self.w_text,
                f"{prefix}.text_table": self.text_encoder.table}


def init_agnostic_heads(d: int, n_verbs: int, n_nouns: int, dtype=np.float32) -> AgnosticHeads:
    # zero init: multilabel logistic regression on frozen features is convex
    return AgnosticHeads(w_verb=nn.zeros_param((d, n_verbs), dtype),
                         b_verb=nn.zeros_param((n_verbs,), dtype),
                         w_noun=nn.zeros_param((d, n_nouns), dtype),
                         b_noun=nn.zeros_param((n_nouns,), dtype))


def init_specific_heads(d: int, n_verbs: int, n_nouns: int, n_steps: int,
                        dtype=np.float32) -> SpecificHeads:
    steps = [{"w_verb": nn.zeros_param((d, n_verbs), dtype),
              "b_verb": nn.zeros_param((n_verbs,), dtype),
              "w_noun": nn.zeros_param((d, n_nouns), dtype),
              "b_noun": nn.zeros_param((n_nouns,), dtype)} for _ in range(n_steps)]
    return SpecificHeads(steps=steps)


def init_text_encoder(vocab_size: int, d_text: int, seed: int, dtype=np.float32) -> TextEncoder:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E87]))
    return TextEncoder(table=nn.param(rng, (vocab_size, d_text), d_text, dtype))


def init_retrieval_heads(d: int, d_text: int, d_joint: int, vocab_size: int, seed: int,
                         dtype=np.float32) -> RetrievalHeads:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2E7]))
    return RetrievalHeads(w_video=nn.param(rng, (d, d_joint), d, dtype),
                          w_text=nn.param(rng, (d_text, d_joint), d_text, dtype),
                          text_encoder=init_text_encoder(vocab_size, d_text, seed, dtype))


# ---------------------------------------------------------------------------
# order-agnostic task
# ---------------------------------------------------------------------------

def order_agnostic_forward(z, heads: AgnosticHeads) -> tuple[Tensor, Tensor]:
    """Elementwise class probabilities from the frozen summary vector."""
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, *z.shape))
    p_verb = ad.sigmoid(nn.linear(z, heads.w_verb, heads.b_verb))
    p_noun = ad.sigmoid(nn.linear(z, heads.w_noun, heads.b_noun))
    return p_verb, p_noun


def bce_multilabel(p, y, counter: dict | None = None) -> Tensor:
    """Binary cross-entropy summed over classes, mean over batch.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; clamped entries
    are tallied into `counter["clamped"]` when a counter is given.
    """
    p = ad.as_tensor(p)
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    lo, hi = BCE_EPS, 1.0 - BCE_EPS
    inside = (p.data >= lo) & (p.data <= hi)
    if counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + int((~inside).sum())
    if not inside.all():
        mask = inside.astype(p.dtype)
        p = ad.add(ad.mul(p, mask), np.clip(p.data, lo, hi) * (1.0 - mask))
    term = ad.add(ad.mul(ad.log(p), y_arr), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y_arr))
    per_item = ad.neg(ad.tsum(term, axis=-1))
    return ad.tmean(per_item)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class: mean precision at each positive, ranked by score."""
    order = np.argsort(-scores, kind="stable")
    rel = labels[order] > 0
    n_pos = int(rel.sum())
    if n_pos == 0:
        return float("nan")
    cum_tp = np.cumsum(rel)
    precision = cum_tp / np.arange(1, len(rel) + 1)
    return float(precision[rel].sum() / n_pos)


def mean_ap_detailed(scores: np.ndarray, labels: np.ndarray):
    """Per-class APs; classes with no positives are skipped and reported."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("scores and labels must both be (B, C)")
    per_class = np.array([average_precision(scores[:, c], labels[:, c])
                          for c in range(scores.shape[1])])
    skipped = [c for c in range(scores.shape[1]) if np.isnan(per_class[c])]
    if len(skipped) == scores.shape[1]:
        raise ValueError(f"no class has a positive label; empty classes: {skipped}")
    return float(np.nanmean(per_class)), per_class, skipped


def mean_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean average precision over classes with at least one positive."""
    value, _, _ = mean_ap_detailed(scores, labels)
    return value


# ---------------------------------------------------------------------------
# order-specific task
# ---------------------------------------------------------------------------

def order_specific_forward(z, heads: SpecificHeads) -> list[tuple[Tensor, Tensor]]:
    """Per-timestep (verb logits, noun logits) from the same frozen vector."""
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, *z.shape))
    return [(nn.linear(z, s["w_verb"], s["b_verb"]), nn.linear(z, s["w_noun"], s["b_noun"]))
            for s in heads.steps]


def sequence_ce_loss(logit_pairs, verb_targets: np.ndarray, noun_targets: np.ndarray) -> Tensor:
    """Cross-entropy summed over timesteps and both vocabularies, batch mean."""
    verb_targets = np.asarray(verb_targets)
    noun_targets = np.asarray(noun_targets)
    b = verb_targets.shape[0]
    rows = np.arange(b)
    total = None
    for t, (lv, ln_) in enumerate(logit_pairs):
        nll_v = ad.neg(ad.tmean(ad.getitem(ad.log_softmax(lv, axis=-1), (rows, verb_targets[:, t]))))
        nll_n = ad.neg(ad.tmean(ad.getitem(ad.log_softmax(ln_, axis=-1), (rows, noun_targets[:, t]))))
        step = ad.add(nll_v, nll_n)
        total = step if total is None else ad.add(total, step)
    return total


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two token sequences (DP)."""
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[lb]


def edit_distance(pred_seq, gt_seq, component: str = "action") -> float:
    """Normalized edit distance between equal-length action sequences.

    Tokens are (verb, noun) pairs; `component` picks what must match:
    "action" (both), "verb", or "noun". Result is divided by the sequence
    length.
    """
    if len(pred_seq) == 0 or len(gt_seq) == 0:
        raise ValueError("sequences must be non-empty")
    if len(pred_seq) != len(gt_seq):
        raise ValueError(f"sequence lengths differ: {len(pred_seq)} != {len(gt_seq)}")
    if component == "action":
        a = [tuple(t) for t in pred_seq]
        b = [tuple(t) for t in gt_seq]
    elif component == "verb":
        a = [t[0] for t in pred_seq]
        b = [t[0] for t in gt_seq]
    elif component == "noun":
        a = [t[1] for t in pred_seq]
        b = [t[1] for t in gt_seq]
    else:
        raise ValueError(f"unknown component {component!r}")
    return levenshtein(a, b) / len(gt_seq)


# ---------------------------------------------------------------------------
# summary retrieval task
# ---------------------------------------------------------------------------

def text_encode(tokens, enc: TextEncoder) -> Tensor:
    """Mean token embedding of a summary (order-invariant by design)."""
    ids = np.asarray(tokens.tokens if isinstance(tokens, SummaryTokens) else tokens,
                     dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= enc.vocab_size:
        bad = ids[(ids < 0) | (ids >= enc.vocab_size)]
        raise ValueError(f"unknown token id(s) {sorted(set(bad.tolist()))} for vocab {enc.vocab_size}")
    return ad.tmean(ad.getitem(enc.table, ids), axis=0)


def text_encode_batch(token_seqs, enc: TextEncoder) -> Tensor:
    return ad.stack([text_encode(t, enc) for t in token_seqs], axis=0)


def summary_contrastive(c_batch, f_batch, tau: float) -> Tensor:
    """Video-to-text InfoNCE over projected pairs; batch mean.

    For each video b the positive is its own summary; the denominator adds
    every other summary in the batch. Only the video-to-text direction is
    computed.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    c = ad.as_tensor(c_batch)
    f = ad.as_tensor(f_batch)
    if c.ndim != 2 or f.ndim != 2 or c.shape[0] != f.shape[0]:
        raise ValueError("expected matching (B, D_J) batches")
    b = c.shape[0]
    if b < 2:
        raise ValueError("summary retrieval loss needs batch size >= 2")
    logits = ad.mul(ad.matmul(c, ad.transpose(f, (1, 0))), 1.0 / tau)
    idx = (np.arange(b), np.arange(b))
    return ad.neg(ad.tmean(ad.getitem(ad.log_softmax(logits, axis=-1), idx)))


def recall_at_k(sim: np.ndarray, k: int) -> float:
    """Fraction of rows whose diagonal ranks in the top k.

    Row i's ground truth is column i; ties are broken by ascending column
    index, so a tied diagonal wins only against higher-index columns.
    """
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError("similarity matrix must be square")
    n = sim.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for {n} candidates")
    hits = 0
    cols = np.arange(n)
    for i in range(n):
        row = sim[i]
        d = row[i]
        rank = int((row > d).sum() + ((row == d) & (cols < i)).sum())
        hits += rank < k
    return hits / n
