"""
Training only the output projections
====================================

Build a frozen dense teacher, derive a student whose attention layers are
sparse-linear with zero-initialized ``W_O``, then run one epoch of FP8-aware
training with the partial attention distillation term.
"""

import numpy as np

from slaqat import tensor as T
from slaqat.distill import TrainConfig, make_dataset, run_qat
from slaqat.model import ModelConfig, build_teacher, derive_student, trainable_summary

model_cfg = ModelConfig(layers=4, d_model=64, d_in=32, d_out=32)
train_cfg = TrainConfig(keep_ratio=0.2, gamma=0.1, epochs_qat=1)

teacher = build_teacher(model_cfg, seed=0)
student = derive_student(teacher, keep_ratio=train_cfg.keep_ratio)
print(trainable_summary(student))

# before training, a full keep ratio reproduces the teacher exactly
check = derive_student(teacher, keep_ratio=1.0)
x = np.random.default_rng(0).standard_normal((1, 16, 32)).astype(np.float32)
with T.no_grad():
    print("student(keep=1) vs teacher:", np.abs(check(x).data - teacher(x).data).max())

data = make_dataset(model_cfg.d_in, train_cfg.n_tokens, train_cfg.n_train, train_cfg.n_eval, seed=1)
log, student = run_qat(teacher, student, data, train_cfg)

print(f"eval MSE vs teacher: {log.initial_eval_mse:.6f} -> {log.final_eval_mse:.6f}")
for row in log.steps:
    print(f"step {row['step']:2d}  task {row['task_loss']:.5f}  kd {row['kd_loss']:.5f}  "
          f"|W_O| {row['w_o_norm']:.4f}")
