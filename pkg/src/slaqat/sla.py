"""Sparse Linear Attention: a top-k masked softmax branch plus a kernelized
linear-attention branch mixed in through a trainable output projection.

Conventions: ``q, k, v`` are ``N×d``; projection matrices in :class:`SlaParams`
act on the right (``Q = X @ W_Q``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamGroup, Tensor

LIN_EPS = 1e-8


def keep_count(n, keep_ratio):
    """Keys kept per query: max(1, ceil(λ·N))."""
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError(f"keep ratio must be in [0, 1], got {keep_ratio}")
    return max(1, min(n, math.ceil(keep_ratio * n - 1e-9)))


def topk_mask(scores, keep_ratio):
    """Boolean mask keeping the k largest entries of each row.

    Ties resolve toward the lowest column index (stable sort on descending score).
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    n_rows, n = s.shape
    k = keep_count(n, keep_ratio)
    if k == n:
        return np.ones(s.shape, dtype=bool)
    order = np.argsort(-s, axis=-1, kind="stable")[:, :k]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def attention_scores(q, k):
    d = q.shape[-1]
    return T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(d))


def dense_branch(q, k, v):
    """Softmax(QKᵀ/√d)·V."""
    return T.matmul(T.softmax_rows(attention_scores(q, k)), v)


def sparse_branch(q, k, v, keep_ratio):
    """Top-k masked softmax attention; masked weights are exactly zero."""
    s = attention_scores(q, k)
    mask = topk_mask(s, keep_ratio)
    return T.matmul(T.softmax_rows(s, mask), v)


def linear_branch(q, k, v):
    """Kernel attention with φ = ELU + 1, computed in O(N·d²)."""
    phi_q = T.elu_plus_one(q)
    phi_k = T.elu_plus_one(k)
    kv = T.matmul(T.transpose(phi_k), v)                     # d×d
    z = T.transpose(T.sum_rows(T.transpose(phi_k)))           # 1×d
    num = T.matmul(phi_q, kv)                                 # N×d
    den = T.sum_rows(phi_q * z)                               # N×1
    return num / (den + LIN_EPS)


def sla_combine(q, k, v, keep_ratio, out_proj):
    """O_sparse + out_proj(O_lin); ``out_proj`` maps N×d -> N×d."""
    return sparse_branch(q, k, v, keep_ratio) + out_proj(linear_branch(q, k, v))


@dataclass
class SlaParams:
    W_Q: ParamGroup
    W_K: ParamGroup
    W_V: ParamGroup
    W_O: ParamGroup
    keep_ratio: float = 0.2

    def __post_init__(self):
        keep_count(1, self.keep_ratio)
        for g in (self.W_Q, self.W_K, self.W_V):
            g.freeze()
        self.W_O.unfreeze()

    @classmethod
    def random(cls, d, keep_ratio, rng, w_o=None):
        def group(name, trainable=False):
            return ParamGroup(name, Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))), trainable)
        wo = ParamGroup("W_O", Tensor(np.zeros((d, d)) if w_o is None else w_o), True)
        return cls(group("W_Q"), group("W_K"), group("W_V"), wo, keep_ratio)

    def groups(self):
        return [self.W_Q, self.W_K, self.W_V, self.W_O]


def project_qkv(x, params: SlaParams):
    return (T.matmul(x, params.W_Q.tensor), T.matmul(x, params.W_K.tensor),
            T.matmul(x, params.W_V.tensor))


def dense_attention(x, params: SlaParams):
    q, k, v = project_qkv(T.as_tensor(x), params)
    return dense_branch(q, k, v)


def sla_forward(x, params: SlaParams):
    q, k, v = project_qkv(T.as_tensor(x), params)
    return sla_combine(q, k, v, params.keep_ratio, lambda o: T.matmul(o, params.W_O.tensor))


def attention_flops(n, d, keep_ratio=1.0, variant="dense"):
    """Closed-form FLOPs of one token-mixing pass (projections of Q/K/V excluded).

    dense: 2N²d scores + 2N²d AV + N² softmax.
    sla:   2N²d scores + 2kNd sparse AV + kN masked softmax
           + 6Nd² linear branch + 2Nd² output projection, with k = kept keys per row.
    """
    if n < 1 or d < 1:
        raise ValueError("N and d must be >= 1")
    if variant == "dense":
        return 2 * n * n * d + 2 * n * n * d + n * n
    if variant == "sla":
        kept = keep_count(n, keep_ratio) * n
        return 2 * n * n * d + 2 * kept * d + kept + 6 * n * d * d + 2 * n * d * d
    raise ValueError(f"unknown variant {variant!r}")
