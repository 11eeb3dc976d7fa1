"""Quantization sensitivity scoring and efficiency accounting."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .qlinear import FakeQuantLinear, WeightOnlyLinear, linear_layers

KURTOSIS_CONVENTION = "pearson"  # fourth standardized moment, normal -> 3


@dataclass
class LayerSensitivity:
    name: str
    dyn_range: float
    outlier_frac: float
    kurtosis: float
    score: float


def sensitivity_score(w):
    """(dyn_range, outlier_frac, kurtosis, score) for one weight tensor.

    score = 0.4·max|W|/10 + 0.3·(fraction beyond 3σ) + 0.3·kurtosis/10, with
    population moments.  A (near-)constant tensor has no outliers and its
    kurtosis is reported as 0.
    """
    w = np.asarray(w.data if isinstance(w, T.Tensor) else w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("empty weight tensor")
    dyn = float(np.max(np.abs(w)))
    centered = w - w.mean()
    sigma = float(np.sqrt(np.mean(centered ** 2)))
    if sigma < 1e-12:
        r_out, kurt = 0.0, 0.0
    else:
        r_out = float(np.mean(np.abs(centered) > 3.0 * sigma))
        kurt = float(np.mean(centered ** 4) / sigma ** 4)
    score = 0.4 * dyn / 10.0 + 0.3 * r_out + 0.3 * kurt / 10.0
    return dyn, r_out, kurt, score


def _layer_weight(layer):
    if isinstance(layer, WeightOnlyLinear):
        return layer.dequantized_weight().data
    return layer.weight.tensor.data


def model_report(model):
    """Per-linear-layer sensitivity, highest score first (ties keep module order)."""
    rows = [LayerSensitivity(name, *sensitivity_score(_layer_weight(layer)))
            for name, layer in linear_layers(model)]
    return sorted(rows, key=lambda r: -r.score)


SENSITIVITY_FIELDS = ["name", "dyn_range", "outlier_frac", "kurtosis", "score"]


def sensitivity_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SENSITIVITY_FIELDS)
    for r in report:
        w.writerow([getattr(r, f) for f in SENSITIVITY_FIELDS])
    return buf.getvalue()


def sensitivity_json(report):
    return json.dumps({"kurtosis_convention": KURTOSIS_CONVENTION,
                       "layers": [asdict(r) for r in report]}, indent=1)


# ---------------------------------------------------------------------------
# efficiency
# ---------------------------------------------------------------------------

def param_bytes(model):
    """Storage bytes of all parameters as currently represented."""
    total = 0
    for _, layer in linear_layers(model):
        if isinstance(layer, WeightOnlyLinear):
            total += layer.weight_bytes()
    for p in model.param_groups():
        total += 4 * p.numel
    return total


def quantized_weight_bytes(model):
    """(float32 bytes, fp8 codes+scales bytes) over the layers that get quantized.

    A layer counts when it is a FakeQuantLinear or already exported.
    """
    full = fp8 = 0
    for _, layer in linear_layers(model):
        if isinstance(layer, WeightOnlyLinear):
            d_out, d_in = layer.wq.shape
        elif isinstance(layer, FakeQuantLinear):
            d_out, d_in = layer.weight.tensor.shape
        else:
            continue
        full += 4 * d_out * d_in
        fp8 += d_out * d_in + 4 * d_out
    return full, fp8


@dataclass
class EffReport:
    variant: str
    n_tokens: int
    d_model: int
    keep_ratio: float
    attention_flops: int
    total_flops: int
    param_bytes: int
    param_bytes_fp32: int
    quantized_weight_bytes_fp32: int
    quantized_weight_bytes_fp8: int
    peak_tensor_bytes: int
    repeats: int
    warmup: int
    latency_mean_s: float
    latency_min_s: float
    latency_samples_s: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


EFF_FIELDS = [f for f in EffReport.__dataclass_fields__ if f != "latency_samples_s"]

BENCH_SCHEMA = {
    "type": "object",
    "required": ["reports"],
    "properties": {
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(EffReport.__dataclass_fields__),
                "properties": {
                    "variant": {"type": "string"},
                    "n_tokens": {"type": "integer", "minimum": 1},
                    "d_model": {"type": "integer", "minimum": 1},
                    "keep_ratio": {"type": "number", "minimum": 0, "maximum": 1},
                    "attention_flops": {"type": "integer", "minimum": 0},
                    "total_flops": {"type": "integer", "minimum": 0},
                    "param_bytes": {"type": "integer", "minimum": 0},
                    "param_bytes_fp32": {"type": "integer", "minimum": 0},
                    "quantized_weight_bytes_fp32": {"type": "integer", "minimum": 0},
                    "quantized_weight_bytes_fp8": {"type": "integer", "minimum": 0},
                    "peak_tensor_bytes": {"type": "integer", "minimum": 0},
                    "repeats": {"type": "integer", "minimum": 3},
                    "warmup": {"type": "integer", "minimum": 1},
                    "latency_mean_s": {"type": "number", "minimum": 0},
                    "latency_min_s": {"type": "number", "minimum": 0},
                    "latency_samples_s": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
    },
}


def _keep_ratio(model):
    ratios = [getattr(m, "keep_ratio", 1.0) for _, m in model.attention_modules()]
    return float(ratios[0]) if ratios else 1.0


def benchmark(model, variant, n_tokens, repeats=3, warmup=1, batch=1, seed=0):
    """Time ``repeats`` forwards after ``warmup`` untimed ones, single-threaded."""
    if repeats < 3 or warmup < 1:
        raise ValueError("benchmark needs repeats >= 3 and warmup >= 1")
    cfg = model.config
    x = np.random.default_rng(seed).standard_normal((batch, n_tokens, cfg.d_in)).astype(np.float32)
    samples = []
    with threadpool_limits(limits=1), T.no_grad():
        for _ in range(warmup):
            model(x)
        with T.track_allocations() as stats:
            for _ in range(repeats):
                t0 = time.perf_counter()
                model(x)
                samples.append(time.perf_counter() - t0)
    q_full, q_fp8 = quantized_weight_bytes(model)
    n_params = sum(p.numel for p in model.param_groups()) + sum(
        layer.wq.codes.size for _, layer in linear_layers(model) if isinstance(layer, WeightOnlyLinear))
    return EffReport(
        variant=variant, n_tokens=n_tokens, d_model=cfg.d_model, keep_ratio=_keep_ratio(model),
        attention_flops=model.attention_flops(n_tokens, batch),
        total_flops=model.flops(n_tokens, batch),
        param_bytes=param_bytes(model), param_bytes_fp32=4 * n_params,
        quantized_weight_bytes_fp32=q_full, quantized_weight_bytes_fp8=q_fp8,
        peak_tensor_bytes=stats.peak, repeats=repeats, warmup=warmup,
        latency_mean_s=float(np.mean(samples)), latency_min_s=float(np.min(samples)),
        latency_samples_s=samples,
    )


def reports_json(reports):
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=1)


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EFF_FIELDS)
    for r in reports:
        w.writerow([getattr(r, f) for f in EFF_FIELDS])
    return buf.getvalue()
