"""FP8 fake-quant linear layers, selective quantization policies, weight-only export."""
from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fp8 import Axis, QuantizedTensor, fake_quant_ste, quantize_scaled
from .nn import Linear, Module
from .tensor import ParamGroup, Tensor


class FakeQuantLinear(Linear):
    """Linear layer whose forward sees FP8-quantized weights and activations.

    Weights use one scale per output row, activations one scale per token.
    Both go through straight-through nodes, so the backward pass treats the
    quantizers as identity.
    """

    def __init__(self, weight, bias=None, enable_act_quant=True, enabled=True):
        super().__init__(weight, bias)
        self.enable_act_quant = enable_act_quant
        self.enabled = enabled

    @classmethod
    def wrap(cls, linear: Linear, enable_act_quant=True):
        return cls(linear.weight, linear.bias, enable_act_quant=enable_act_quant)

    def quantized_input(self, x):
        if self.enabled and self.enable_act_quant:
            return fake_quant_ste(x, Axis.PER_TOKEN)
        return x

    def effective_weight(self, x):
        if not self.enabled:
            return self.weight.tensor
        return fake_quant_ste(self.weight.tensor, Axis.PER_OUTPUT_ROW)

    def forward(self, x):
        lead = x.shape[:-1]
        x2 = T.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
        xq = self.quantized_input(x2)
        y = T.linear(xq, self.effective_weight(x2), None if self.bias is None else self.bias.tensor)
        return T.reshape(y, lead + (self.d_out,)) if x.data.ndim != 2 else y


def fq_forward(layer: FakeQuantLinear, x):
    return layer(T.as_tensor(x))


class WeightOnlyLinear(Module):
    """Deployment linear: FP8 codes + per-row scales, full-precision activations."""

    def __init__(self, name, wq: QuantizedTensor, bias: ParamGroup | None = None):
        super().__init__()
        if wq.axis is not Axis.PER_OUTPUT_ROW:
            raise ValueError("weight-only layers need per-output-row scales")
        object.__setattr__(self, "name", name)
        self.wq = wq
        if bias is not None:
            bias.freeze()
            self.bias = bias
        else:
            object.__setattr__(self, "bias", None)
        # weights are immutable after export, so the dequantized copy never goes stale
        self._w = Tensor(wq.dequantize())

    @property
    def d_in(self):
        return self.wq.shape[1]

    @property
    def d_out(self):
        return self.wq.shape[0]

    def dequantized_weight(self):
        return self._w

    def forward(self, x):
        lead = x.shape[:-1]
        x2 = T.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
        y = T.linear(x2, self._w, None if self.bias is None else self.bias.tensor)
        return T.reshape(y, lead + (self.d_out,)) if x.data.ndim != 2 else y

    def flops(self, rows):
        f = 2 * rows * self.d_in * self.d_out
        return f + (rows * self.d_out if self.bias is not None else 0)

    def weight_bytes(self):
        return self.wq.nbytes


def export_weight_only(layer: Linear, name=None) -> WeightOnlyLinear:
    """Replace the float weight with FP8 codes and per-row scales."""
    name = name or layer.weight.name.rsplit(".", 1)[0]
    wq = quantize_scaled(layer.weight.tensor, Axis.PER_OUTPUT_ROW)
    return WeightOnlyLinear(name, wq, layer.bias)


@dataclass
class QuantPolicy:
    """Which linear layers get FP8 fake quantization.

    A layer qualifies when its name matches an include glob, matches no
    exclude glob, and holds at least ``min_params`` parameters.
    """

    include: list = field(default_factory=lambda: ["blocks.*"])
    exclude: list = field(default_factory=lambda: ["*norm*"])
    min_params: int = 0
    enable_act_quant: bool = True

    def matches(self, name, n_params):
        if not any(fnmatch.fnmatchcase(name, p) for p in self.include):
            return False
        if any(fnmatch.fnmatchcase(name, p) for p in self.exclude):
            return False
        return n_params >= self.min_params

    def to_dict(self):
        return {"include": list(self.include), "exclude": list(self.exclude),
                "min_params": self.min_params, "enable_act_quant": self.enable_act_quant}


def _n_params(layer):
    n = layer.weight.numel
    return n + (layer.bias.numel if layer.bias is not None else 0)


def linear_layers(model: Module):
    """(name, layer) for every linear-like module, in module order."""
    return [(n, m) for n, m in model.named_modules()
            if isinstance(m, (Linear, WeightOnlyLinear))]


def apply_policy(model: Module, policy: QuantPolicy) -> int:
    """Swap matching plain ``Linear`` modules for ``FakeQuantLinear``.

    Returns the number of layers converted by this call; layers already
    converted are left alone, so reapplying a policy converts nothing.
    """
    matched = 0
    converted = 0
    for name, mod in linear_layers(model):
        if isinstance(mod, WeightOnlyLinear) or not policy.matches(name, _n_params(mod)):
            continue
        matched += 1
        if isinstance(mod, FakeQuantLinear):
            continue
        model.set_module(name, FakeQuantLinear.wrap(mod, policy.enable_act_quant))
        converted += 1
    if matched == 0:
        warnings.warn(f"quantization policy matched no layers: {policy}", stacklevel=2)
    return converted


def set_quantization(model: Module, enabled: bool):
    """Toggle every FakeQuantLinear in ``model`` on or off."""
    for _, mod in model.named_modules():
        if isinstance(mod, FakeQuantLinear):
            mod.enabled = enabled


def export_model(model: Module) -> int:
    """Convert all FakeQuantLinear modules to WeightOnlyLinear in place."""
    n = 0
    for name, mod in linear_layers(model):
        if isinstance(mod, FakeQuantLinear):
            model.set_module(name, export_weight_only(mod, name))
            n += 1
    return n


def weight_bytes(layer) -> int:
    if isinstance(layer, WeightOnlyLinear):
        return layer.weight_bytes()
    return 4 * layer.weight.numel


def fq_backward_contract(layer: FakeQuantLinear, x, g):
    """Closed-form gradients (grad_x, grad_W, grad_b) = (G·Wq, Gᵀ·Xq, colsum G)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    g = np.asarray(g, dtype=np.float32)
    w = layer.weight.tensor.data
    if layer.enabled:
        wq = quantize_scaled(w, Axis.PER_OUTPUT_ROW).dequantize()
        xq = quantize_scaled(x, Axis.PER_TOKEN).dequantize() if layer.enable_act_quant else x
    else:
        wq, xq = w, x
    return g @ wq, g.T @ xq, g.sum(axis=0)
