"""
Sparse linear attention on a single sequence
============================================

The student's attention keeps only the top fraction of keys per query in a
softmax branch and hands the rest of the context to a cheap kernelized
branch, whose output is mixed in through a learned projection.
"""

import numpy as np

from slaqat import tensor as T
from slaqat.sla import (SlaParams, attention_flops, dense_attention, linear_branch, project_qkv,
                        sla_forward, sparse_branch, topk_mask)

rng = np.random.default_rng(1)
n, d = 12, 8
x = rng.standard_normal((n, d)).astype(np.float32)
params = SlaParams.random(d, keep_ratio=0.25, rng=rng)
q, k, v = project_qkv(T.Tensor(x), params)

# which keys survive for each query
scores = (q.data @ k.data.T) / np.sqrt(d)
mask = topk_mask(scores, 0.25)
print("keys kept per query:", mask.sum(axis=1))
print(mask.astype(int))

# on its own, the masked softmax drifts away from full attention
dense = dense_attention(x, params).data
sparse = sparse_branch(q, k, v, 0.25).data
print("sparse vs dense, max abs diff:", np.abs(sparse - dense).max())

# keeping every key gives back dense attention exactly
params.keep_ratio = 1.0
print("keep=1, zero W_O, diff to dense:", np.abs(sla_forward(x, params).data - dense).max())
params.keep_ratio = 0.25

# the linear branch is what the trainable projection gets to work with
lin = linear_branch(q, k, v).data
print("linear branch output norm:", np.linalg.norm(lin))

# closed-form cost of one mixing pass: the N^2 softmax work shrinks with the keep ratio,
# but the linear branch adds O(N d^2), so the win only shows at long sequences
for n_tok in (128, 512, 2048, 8192):
    ratio = attention_flops(n_tok, 64, 1.0, "dense") / attention_flops(n_tok, 64, 0.2, "sla")
    print(f"N={n_tok:5d}  dense/SLA FLOPs = {ratio:.3f}")
