"""Sparse linear attention students with FP8-aware QAT, on a numpy tape."""
from .fp8 import Axis, QuantizedTensor, fake_quant_ste, fp8_decode, fp8_encode, quantize_scaled
from .model import ModelConfig, build_teacher, derive_student
from .qlinear import FakeQuantLinear, QuantPolicy, WeightOnlyLinear, apply_policy, export_weight_only
from .sla import SlaParams, attention_flops, dense_attention, sla_forward
from .tensor import ParamGroup, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Axis", "QuantizedTensor", "fake_quant_ste", "fp8_decode", "fp8_encode", "quantize_scaled",
    "ModelConfig", "build_teacher", "derive_student",
    "FakeQuantLinear", "QuantPolicy", "WeightOnlyLinear", "apply_policy", "export_weight_only",
    "SlaParams", "attention_flops", "dense_attention", "sla_forward",
    "ParamGroup", "Tape", "Tensor", "backward",
]
