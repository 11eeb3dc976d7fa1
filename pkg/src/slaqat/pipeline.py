"""End-to-end runs shared by the CLI and the demo scripts."""
from __future__ import annotations

import dataclasses

from .analysis import benchmark, param_bytes
from .distill import make_dataset, prepare_student, run_qat
from .model import build_teacher, derive_student, trainable_summary
from .qlinear import export_model
from .sla import attention_flops


def train(cfg):
    """Build the teacher, derive the student and run QAT. Returns (teacher, student, log)."""
    tc = cfg.train
    teacher = build_teacher(cfg.model, tc.seed)
    student = derive_student(teacher, tc.keep_ratio)
    data = make_dataset(cfg.model.d_in, tc.n_tokens, tc.n_train, tc.n_eval, tc.seed + 1)
    log, student = run_qat(teacher, student, data, tc)
    return teacher, student, log


# (name, uses SLA, uses QAT); "original" is the untouched dense teacher
ABLATION_VARIANTS = [
    ("full", True, True),
    ("sla_no_qat", True, False),
    ("no_sla_qat", False, True),
    ("original", False, False),
]

ABLATION_FIELDS = ["variant", "sla", "qat", "keep_ratio", "initial_eval_mse", "final_eval_mse",
                   "attention_flops", "reference_attention_flops", "param_bytes_deploy",
                   "trainable_params"]


def ablate(cfg):
    """Run the four SLA± / QAT± variants; returns one row dict per variant.

    Without SLA the student keeps its linear branch but the sparse branch sees
    every key (keep ratio 1), so it still has the same trainable projections.
    """
    rows = []
    n_ref = cfg.bench.reference_n_tokens
    d = cfg.model.d_model
    for name, sla, qat in ABLATION_VARIANTS:
        keep = cfg.train.keep_ratio if sla else 1.0
        if name == "original":
            teacher = build_teacher(cfg.model, cfg.train.seed)
            rows.append({
                "variant": name, "sla": False, "qat": False, "keep_ratio": 1.0,
                "initial_eval_mse": 0.0, "final_eval_mse": 0.0,
                "attention_flops": teacher.attention_flops(cfg.train.n_tokens),
                "reference_attention_flops": cfg.model.layers * attention_flops(n_ref, d, 1.0, "dense"),
                "param_bytes_deploy": param_bytes(teacher), "trainable_params": 0,
            })
            continue
        tc = dataclasses.replace(cfg.train, keep_ratio=keep, quantize=qat)
        _, student, log = train(dataclasses.replace(cfg, train=tc))
        trainable = trainable_summary(student)["trainable_params"]
        if qat:
            export_model(student)
        rows.append({
            "variant": name, "sla": sla, "qat": qat, "keep_ratio": keep,
            "initial_eval_mse": log.initial_eval_mse, "final_eval_mse": log.final_eval_mse,
            "attention_flops": student.attention_flops(tc.n_tokens),
            "reference_attention_flops": cfg.model.layers * attention_flops(n_ref, d, keep, "sla"),
            "param_bytes_deploy": param_bytes(student), "trainable_params": trainable,
        })
    return rows


def bench(cfg):
    """Benchmark the dense teacher, the SLA student (fp32, fake-quant) and its FP8 export."""
    bc = cfg.bench
    teacher = build_teacher(cfg.model, cfg.train.seed)
    student = derive_student(teacher, cfg.train.keep_ratio)
    variants = [("dense_teacher", teacher), ("sla_fp32", student)]
    fq = derive_student(teacher, cfg.train.keep_ratio)
    prepare_student(fq, cfg.train)
    variants.append(("sla_fake_quant", fq))
    exported = derive_student(teacher, cfg.train.keep_ratio)
    prepare_student(exported, cfg.train)
    export_model(exported)
    variants.append(("sla_fp8_weight_only", exported))
    reports = [benchmark(m, name, bc.n_tokens, bc.repeats, bc.warmup, bc.batch, cfg.train.seed)
               for name, m in variants]
    d = cfg.model.d_model
    reference = {
        "n_tokens": bc.reference_n_tokens, "d_model": d, "keep_ratio": cfg.train.keep_ratio,
        "dense_attention_flops": attention_flops(bc.reference_n_tokens, d, 1.0, "dense"),
        "sla_attention_flops": attention_flops(bc.reference_n_tokens, d, cfg.train.keep_ratio, "sla"),
    }
    reference["dense_over_sla"] = reference["dense_attention_flops"] / reference["sla_attention_flops"]
    return reports, reference

