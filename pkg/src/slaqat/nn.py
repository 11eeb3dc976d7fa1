"""Tiny module system: named children, named parameter groups, Linear, LayerNorm."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamGroup, Tensor


class Module:
    """Base class tracking child modules and parameter groups in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_params", {})

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, ParamGroup):
            self._params[key] = value
        object.__setattr__(self, key, value)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_params(self, prefix=""):
        """Yield (qualified name, ParamGroup); qualified names are unique."""
        for mod_name, mod in self.named_modules(prefix):
            for key, p in mod._params.items():
                yield (f"{mod_name}.{key}" if mod_name else key), p

    def param_groups(self):
        return [p for _, p in self.named_params()]

    def get_module(self, path):
        mod = self
        for part in path.split("."):
            mod = mod._children[part]
        return mod

    def set_module(self, path, new):
        parent_path, _, leaf = path.rpartition(".")
        parent = self.get_module(parent_path) if parent_path else self
        if leaf not in parent._children:
            raise KeyError(path)
        setattr(parent, leaf, new)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x Wᵀ + b with W stored ``d_out×d_in``."""

    def __init__(self, weight: ParamGroup, bias: ParamGroup | None = None):
        super().__init__()
        self.weight = weight
        if bias is not None:
            self.bias = bias
        else:
            object.__setattr__(self, "bias", None)

    @classmethod
    def init(cls, name, d_in, d_out, rng, bias=True, scale=None):
        scale = (1.0 / np.sqrt(d_in)) if scale is None else scale
        w = ParamGroup(f"{name}.weight", Tensor(rng.normal(0.0, scale, (d_out, d_in))))
        b = ParamGroup(f"{name}.bias", Tensor(np.zeros(d_out))) if bias else None
        return cls(w, b)

    @property
    def d_in(self):
        return self.weight.tensor.shape[1]

    @property
    def d_out(self):
        return self.weight.tensor.shape[0]

    def effective_weight(self, x):
        return self.weight.tensor

    def forward(self, x):
        lead = x.shape[:-1]
        x2 = T.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
        y = T.linear(x2, self.effective_weight(x2), None if self.bias is None else self.bias.tensor)
        return T.reshape(y, lead + (self.d_out,)) if x.data.ndim != 2 else y

    def flops(self, rows):
        f = 2 * rows * self.d_in * self.d_out
        return f + (rows * self.d_out if self.bias is not None else 0)


class LayerNorm(Module):
    def __init__(self, name, d, eps=1e-5):
        super().__init__()
        self.weight = ParamGroup(f"{name}.weight", Tensor(np.ones(d)))
        self.bias = ParamGroup(f"{name}.bias", Tensor(np.zeros(d)))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight.tensor, self.bias.tensor, self.eps)
