"""Partial attention distillation and the FP8-aware QAT loop."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import ToyTransformer
from .qlinear import QuantPolicy, apply_policy, set_quantization
from .tensor import NonFiniteError, Tape


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.1
    lr: float = 1e-2
    lr_qat_divisor: float = 10.0
    epochs_qat: int = 1
    pretrain_epochs: int = 0
    batch: int = 4
    enable_act_quant: bool = True
    quantize: bool = True
    use_kd: bool = True
    keep_ratio: float = 0.2
    n_tokens: int = 128
    n_train: int = 32
    n_eval: int = 8
    seed: int = 0
    policy: QuantPolicy = field(default_factory=QuantPolicy)

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lr <= 0 or self.lr_qat_divisor <= 0:
            raise ValueError("lr and lr_qat_divisor must be > 0")
        if self.epochs_qat < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs_qat must be >= 1 and pretrain_epochs >= 0")
        if self.batch < 1 or self.n_train < self.batch or self.n_eval < 1 or self.n_tokens < 1:
            raise ValueError("need batch >= 1, n_train >= batch, n_eval >= 1, n_tokens >= 1")
        if not 0.0 <= self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must be in [0, 1]")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    initial_eval_mse: float = float("nan")
    # wall-clock seconds per epoch; kept out of the serialized log so reruns compare equal
    wall_times: list = field(default_factory=list)

    @property
    def final_eval_mse(self):
        return self.epochs[-1]["eval_mse"] if self.epochs else self.initial_eval_mse

    def to_dict(self):
        return {"initial_eval_mse": self.initial_eval_mse, "steps": self.steps,
                "epochs": self.epochs}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def steps_csv(self):
        buf = io.StringIO()
        fields = ["step", "stage", "epoch", "task_loss", "kd_loss", "total_loss", "w_o_norm"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in self.steps:
            w.writerow({k: row[k] for k in fields})
        return buf.getvalue()


def toy_task_loss(student_out, targets):
    """Mean squared error against the teacher's full-precision outputs."""
    return T.mse(student_out, targets)


def attn_kd_loss(teacher_records, student_records):
    """Mean over modules of MSE(student, stopgrad(teacher))."""
    if len(teacher_records) != len(student_records) or not teacher_records:
        raise ValueError("need the same nonzero number of teacher and student records")
    total = None
    for t, s in zip(teacher_records, student_records):
        tv = getattr(t, "value", t)
        sv = getattr(s, "value", s)
        if tv.shape != sv.shape:
            raise ValueError(f"record shape mismatch: {tv.shape} vs {sv.shape}")
        term = T.mse(sv, T.stopgrad(tv))
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_records))


def total_loss(task, kd, gamma):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return task + kd * gamma


def sgd_step(groups, grads, lr):
    """In-place SGD on trainable groups only."""
    for g in groups:
        if g.trainable and g.name in grads:
            g.tensor.data -= np.float32(lr) * grads[g.name]


def make_dataset(d_in, n_tokens, n_train, n_eval, seed):
    rng = np.random.default_rng(seed)
    x_train = rng.standard_normal((n_train, n_tokens, d_in)).astype(np.float32)
    x_eval = rng.standard_normal((n_eval, n_tokens, d_in)).astype(np.float32)
    return x_train, x_eval


def evaluate(student, x_eval, y_eval, batch):
    with T.no_grad():
        errs = []
        for i in range(0, len(x_eval), batch):
            out = student(x_eval[i:i + batch])
            errs.append(np.mean((out.data.astype(np.float64) - y_eval[i:i + batch]) ** 2)
                        * len(out.data))
    return float(np.sum(errs) / len(x_eval))


def teacher_outputs(teacher, x, batch):
    with T.no_grad():
        return np.concatenate([teacher(x[i:i + batch]).data for i in range(0, len(x), batch)])


def prepare_student(student, config: TrainConfig):
    """Apply the quantization policy (if QAT is on); returns converted-layer count."""
    if not config.quantize:
        return 0
    policy = QuantPolicy(**{**config.policy.to_dict(),
                            "enable_act_quant": config.enable_act_quant})
    return apply_policy(student, policy)


def _train_epoch(teacher, student, x_train, y_train, config, lr, stage, epoch, log):
    use_kd = config.use_kd
    if use_kd:
        for m in (teacher, student):
            if not m.hook_patterns:
                m.register_hooks("*attn*")
    groups = student.trainable_groups()
    order = np.random.default_rng([config.seed, epoch, 0 if stage == "pretrain" else 1]) \
        .permutation(len(x_train))
    for i in range(0, len(order) - config.batch + 1, config.batch):
        idx = np.sort(order[i:i + config.batch])
        xb = x_train[idx]
        with T.no_grad():
            teacher(xb)
            t_records = list(teacher.hook_records)
        try:
            with Tape() as tape:
                out = student(xb)
                task = toy_task_loss(out, y_train[idx])
                if use_kd:
                    kd = attn_kd_loss(t_records, student.hook_records)
                    loss = total_loss(task, kd, config.gamma)
                else:
                    kd, loss = None, task
                grads = T.backward(tape, loss, groups)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at {stage} step {len(log.steps)}: {exc}") from exc
        sgd_step(groups, grads, lr)
        w_o = np.sqrt(sum(float(np.sum(g.tensor.data.astype(np.float64) ** 2)) for g in groups))
        log.steps.append({
            "step": len(log.steps) + 1, "stage": stage, "epoch": epoch,
            "task_loss": task.item(), "kd_loss": kd.item() if kd is not None else 0.0,
            "total_loss": loss.item(), "w_o_norm": w_o,
        })


def run_qat(teacher: ToyTransformer, student: ToyTransformer, data, config: TrainConfig):
    """Train the student's ``W_O`` projections against the frozen teacher.

    ``data`` is ``(x_train, x_eval)``; targets are teacher outputs. An optional
    full-precision stage runs first at the base learning rate, then the QAT
    stage runs with fake quantization on and the rate divided by
    ``lr_qat_divisor``.  Returns ``(log, student)``.
    """
    config.validate()
    x_train, x_eval = data
    y_train = teacher_outputs(teacher, x_train, config.batch)
    y_eval = teacher_outputs(teacher, x_eval, config.batch)
    log = TrainLog()

    prepare_student(student, config)
    set_quantization(student, False)
    for ep in range(config.pretrain_epochs):
        t0 = time.perf_counter()
        _train_epoch(teacher, student, x_train, y_train, config, config.lr, "pretrain", ep + 1, log)
        log.wall_times.append(time.perf_counter() - t0)

    set_quantization(student, True)
    log.initial_eval_mse = evaluate(student, x_eval, y_eval, config.batch)
    lr = config.lr / config.lr_qat_divisor
    for ep in range(config.epochs_qat):
        t0 = time.perf_counter()
        _train_epoch(teacher, student, x_train, y_train, config, lr, "qat", ep + 1, log)
        log.epochs.append({"epoch": ep + 1,
                           "eval_mse": evaluate(student, x_eval, y_eval, config.batch)})
        log.wall_times.append(time.perf_counter() - t0)
    return log, student


def config_to_dict(config: TrainConfig):
    d = asdict(config)
    d["policy"] = config.policy.to_dict()
    return d
