"""Layers, initializers, and optimizers built on the autodiff Tensor.

Parameters are plain `Tensor`s with `requires_grad=True`, grouped into
dicts keyed by dotted names. Layer functions are stateless: they take the
input tensor plus the parameter tensors they consume.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = 1e9  # additive mask magnitude; exp(-1e9) underflows to exactly 0


# -- initialization ---------------------------------------------------------------

def scaled_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    """Normal init with std 1/sqrt(fan_in)."""
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def param(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(scaled_normal(rng, shape, fan_in, dtype), requires_grad=True, name=name)


def zeros_param(shape, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones_param(shape, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


# -- layers -----------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    # flatten leading axes so the projection is one large GEMM
    shape = x.shape
    if x.ndim > 2:
        x = ad.reshape(x, (-1, shape[-1]))
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    if len(shape) > 2:
        out = ad.reshape(out, (*shape[:-1], w.shape[-1]))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    m = ad.tmean(x, axis=-1, keepdims=True)
    c = ad.sub(x, m)
    v = ad.tmean(ad.mul(c, c), axis=-1, keepdims=True)
    normed = ad.div(c, ad.sqrt(ad.add(v, eps)))
    return ad.add(ad.mul(normed, gain), bias)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (exact erf form; smooth everywhere)."""
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    return ad.mul(ad.mul(x, 0.5), ad.add(ad.erf(ad.mul(x, inv_sqrt2)), 1.0))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, D) -> (..., n_heads, T, D/n_heads)."""
    *batch, t, d = x.shape
    dh = d // n_heads
    x = ad.reshape(x, (*batch, t, n_heads, dh))
    axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    return ad.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., n_heads, T, dh) -> (..., T, n_heads*dh)."""
    *batch, h, t, dh = x.shape
    axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    x = ad.transpose(x, axes)
    return ad.reshape(x, (*batch, t, h * dh))


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    """Additive (T, T) mask: 0 where key <= query index, -MASK_NEG above."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -MASK_NEG
    return m


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q, k, v: (..., T, dh). Scaling is 1/sqrt(dh). The additive mask
    broadcasts over leading axes; masked logits underflow to weight 0.
    """
    dh = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                    1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask.astype(scores.dtype))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v)


def multi_head_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                         n_heads: int, causal: bool = False) -> Tensor:
    """Pure multi-head self-attention, no residual: (..., T, D) -> (..., T, D)."""
    q = split_heads(linear(x, w_q), n_heads)
    k = split_heads(linear(x, w_k), n_heads)
    v = split_heads(linear(x, w_v), n_heads)
    mask = causal_mask(x.shape[-2], dtype=x.dtype) if causal else None
    out = merge_heads(attention(q, k, v, mask))
    return linear(out, w_o)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
         nonlinearity: str = "gelu") -> Tensor:
    h = linear(x, w1, b1)
    h = ad.relu(h) if nonlinearity == "relu" else gelu(h)
    return linear(h, w2, b2)


def transformer_block(x: Tensor, p: dict, n_heads: int, causal: bool = False) -> Tensor:
    """Pre-LN encoder block: x + MHA(LN(x)); then x + MLP(LN(x))."""
    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    x = ad.add(x, multi_head_attention(h, p["w_q"], p["w_k"], p["w_v"], p["w_o"], n_heads, causal))
    h = layer_norm(x, p["ln2_g"], p["ln2_b"])
    return ad.add(x, mlp2(h, p["mlp_w1"], p["mlp_b1"], p["mlp_w2"], p["mlp_b2"]))


def init_block(rng: np.random.Generator, d: int, hidden: int, dtype=np.float64) -> dict:
    return {
        "w_q": param(rng, (d, d), d, dtype),
        "w_k": param(rng, (d, d), d, dtype),
        "w_v": param(rng, (d, d), d, dtype),
        "w_o": param(rng, (d, d), d, dtype),
        "ln1_g": ones_param((d,), dtype),
        "ln1_b": zeros_param((d,), dtype),
        "mlp_w1": param(rng, (d, hidden), d, dtype),
        "mlp_b1": zeros_param((hidden,), dtype),
        "mlp_w2": param(rng, (hidden, d), hidden, dtype),
        "mlp_b2": zeros_param((d,), dtype),
        "ln2_g": ones_param((d,), dtype),
        "ln2_b": zeros_param((d,), dtype),
    }


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a nested dict/list of Tensors into dotted names."""
    flat: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        flat[prefix.rstrip(".")] = tree
    elif isinstance(tree, dict):
        for k in tree:
            flat.update(flatten_params(tree[k], f"{prefix}{k}."))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            flat.update(flatten_params(v, f"{prefix}{i}."))
    else:
        raise TypeError(f"cannot flatten {type(tree)} at {prefix!r}")
    return flat


# -- optimizers ---------------------------------------------------------------------

class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for p in self.params.values():
            if p.grad is None:
                continue
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * p.grad).astype(p.data.dtype, copy=False)


class Adam:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= (self.lr * self.weight_decay) * p.data
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
    if kind == "adam":
        return Adam(params, lr, weight_decay)
    if kind == "sgd":
        return SGD(params, lr, weight_decay)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
