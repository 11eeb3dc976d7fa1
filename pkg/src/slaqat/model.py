"""Toy pre-norm transformer used as dense teacher and SLA student."""
from __future__ import annotations

import copy
import fnmatch
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .sla import dense_branch, keep_count, sla_combine
from .tensor import ParamGroup, Tensor


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 64
    d_in: int = 32
    d_out: int = 32
    mlp_ratio: int = 2

    def validate(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2")
        if self.d_in < 1 or self.d_out < 1 or self.mlp_ratio < 1:
            raise ValueError("d_in, d_out and mlp_ratio must be >= 1")

    def to_dict(self):
        return asdict(self)


class DenseAttention(Module):
    """Single-head softmax attention without output projection."""

    def __init__(self, name, d, rng):
        super().__init__()
        s = 1.0 / math.sqrt(d)
        self.W_Q = Linear.init(f"{name}.W_Q", d, d, rng, bias=False, scale=s)
        self.W_K = Linear.init(f"{name}.W_K", d, d, rng, bias=False, scale=s)
        self.W_V = Linear.init(f"{name}.W_V", d, d, rng, bias=False, scale=s)

    def mix(self, q, k, v):
        return dense_branch(q, k, v)

    def forward(self, x, batch, n_tokens):
        q, k, v = self.W_Q(x), self.W_K(x), self.W_V(x)
        outs = []
        for b in range(batch):
            lo, hi = b * n_tokens, (b + 1) * n_tokens
            outs.append(self.mix(T.slice_rows(q, lo, hi), T.slice_rows(k, lo, hi),
                                 T.slice_rows(v, lo, hi)))
        return outs[0] if batch == 1 else T.concat_rows(outs)

    def flops(self, n):
        from .sla import attention_flops
        return attention_flops(n, self.W_Q.d_out, 1.0, "dense")


class SLAAttention(DenseAttention):
    """Sparse linear attention; only ``W_O`` is trainable."""

    def __init__(self, name, dense: DenseAttention, keep_ratio):
        Module.__init__(self)
        keep_count(1, keep_ratio)
        self.W_Q, self.W_K, self.W_V = dense.W_Q, dense.W_K, dense.W_V
        d = self.W_Q.d_out
        self.W_O = Linear(ParamGroup(f"{name}.W_O.weight", T.zeros((d, d)), trainable=True))
        self.keep_ratio = keep_ratio

    def mix(self, q, k, v):
        # out_proj stored d_out×d_in, so Proj(O) = O·W_Oᵀ
        return sla_combine(q, k, v, self.keep_ratio, self.W_O)

    def flops(self, n):
        from .sla import attention_flops
        return attention_flops(n, self.W_Q.d_out, self.keep_ratio, "sla")


class MLP(Module):
    def __init__(self, name, d, hidden, rng):
        super().__init__()
        self.fc1 = Linear.init(f"{name}.fc1", d, hidden, rng)
        self.fc2 = Linear.init(f"{name}.fc2", hidden, d, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, name, d, mlp_ratio, rng):
        super().__init__()
        self.norm1 = LayerNorm(f"{name}.norm1", d)
        self.attn = DenseAttention(f"{name}.attn", d, rng)
        self.norm2 = LayerNorm(f"{name}.norm2", d)
        self.mlp = MLP(f"{name}.mlp", d, d * mlp_ratio, rng)


class Blocks(Module):
    def __init__(self, blocks):
        super().__init__()
        for i, b in enumerate(blocks):
            setattr(self, str(i), b)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)


class ToyTransformer(Module):
    """embed -> L × [x + attn(norm1(x)); x + mlp(norm2(x))] -> head.

    Input is ``B×N×d_in`` (or ``N×d_in`` for a single sequence).
    """

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        config.validate()
        object.__setattr__(self, "config", config)
        d = config.d_model
        self.embed = Linear.init("embed", config.d_in, d, rng)
        self.blocks = Blocks([Block(f"blocks.{i}", d, config.mlp_ratio, rng)
                              for i in range(config.layers)])
        self.head = Linear.init("head", d, config.d_out, rng)
        object.__setattr__(self, "hook_patterns", [])
        object.__setattr__(self, "hook_records", [])

    def attention_modules(self):
        return [(n, m) for n, m in self.named_modules() if isinstance(m, DenseAttention)]

    def forward(self, x):
        x = T.as_tensor(x)
        single = x.data.ndim == 2
        batch, n_tokens = (1, x.shape[0]) if single else x.shape[:2]
        self.hook_records.clear()
        h = self.embed(T.reshape(x, (batch * n_tokens, x.shape[-1])))
        for i, blk in enumerate(self.blocks):
            a = blk.attn(blk.norm1(h), batch, n_tokens)
            name = f"blocks.{i}.attn"
            if any(fnmatch.fnmatchcase(name, p) for p in self.hook_patterns):
                self.hook_records.append(HookRecord(name, a if T.active_tape() else a.detach()))
            h = h + a
            h = h + blk.mlp(blk.norm2(h))
        y = self.head(h)
        return y if single else T.reshape(y, (batch, n_tokens, self.config.d_out))

    def register_hooks(self, pattern="*attn*"):
        """Capture attention-module outputs on every forward; returns matched names."""
        names = [n for n, _ in self.attention_modules() if fnmatch.fnmatchcase(n, pattern)]
        if not names:
            raise ValueError(f"hook pattern {pattern!r} matched no attention module")
        self.hook_patterns.append(pattern)
        return names

    def trainable_groups(self):
        return [p for p in self.param_groups() if p.trainable]

    def n_params(self):
        return sum(p.numel for p in self.param_groups())

    def flops(self, n_tokens, batch=1):
        """Closed-form forward FLOPs: linear layers plus attention mixing."""
        from .qlinear import linear_layers
        rows = batch * n_tokens
        total = sum(m.flops(rows) for _, m in linear_layers(self))
        total += batch * sum(m.flops(n_tokens) for _, m in self.attention_modules())
        return total

    def attention_flops(self, n_tokens, batch=1):
        return batch * sum(m.flops(n_tokens) for _, m in self.attention_modules())


@dataclass
class HookRecord:
    name: str
    value: Tensor


def build_teacher(config: ModelConfig, seed=0) -> ToyTransformer:
    """Seeded dense transformer with every parameter frozen."""
    model = ToyTransformer(config, np.random.default_rng(seed))
    for p in model.param_groups():
        p.freeze()
    return model


def derive_student(teacher: ToyTransformer, keep_ratio=0.2) -> ToyTransformer:
    """Copy the teacher, swap each attention for SLA with a zero ``W_O``.

    All inherited parameters stay frozen; only the ``W_O`` projections train.
    """
    student = copy.deepcopy(teacher)
    object.__setattr__(student, "hook_patterns", [])
    object.__setattr__(student, "hook_records", [])
    for p in student.param_groups():
        p.freeze()
    for name, attn in student.attention_modules():
        student.set_module(name, SLAAttention(name, attn, keep_ratio))
    for p in student.param_groups():
        if p.name.endswith(".W_O.weight"):
            p.unfreeze()
    return student


def set_keep_ratio(model: ToyTransformer, keep_ratio):
    keep_count(1, keep_ratio)
    for _, m in model.attention_modules():
        if isinstance(m, SLAAttention):
            m.keep_ratio = keep_ratio


def trainable_summary(model: ToyTransformer):
    total = model.n_params()
    trainable = sum(p.numel for p in model.trainable_groups())
    return {"total_params": total, "trainable_params": trainable,
            "trainable_fraction": trainable / total}
