import numpy as np
import pytest

from slaqat import tensor as T
from slaqat.distill import TrainConfig, make_dataset, run_qat
from slaqat.model import (ModelConfig, SLAAttention, build_teacher, derive_student, set_keep_ratio,
                          trainable_summary)

SMALL = ModelConfig(layers=3, d_model=8, d_in=4, d_out=3)


def snapshot(model):
    return {p.name: p.tensor.data.copy() for p in model.param_groups()}


def test_build_is_deterministic():
    a, b = snapshot(build_teacher(SMALL, 7)), snapshot(build_teacher(SMALL, 7))
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = snapshot(build_teacher(SMALL, 8))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_shapes(rng):
    model = build_teacher(SMALL)
    with T.no_grad():
        assert model(rng.standard_normal((2, 5, 4))).shape == (2, 5, 3)
        assert model(rng.standard_normal((5, 4))).shape == (5, 3)


def test_batched_equals_per_sequence(rng):
    model = build_teacher(SMALL)
    x = rng.standard_normal((3, 5, 4)).astype(np.float32)
    with T.no_grad():
        whole = model(x).data
        for b in range(3):
            np.testing.assert_allclose(whole[b], model(x[b]).data, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        build_teacher(ModelConfig(layers=0))
    with pytest.raises(ValueError):
        build_teacher(ModelConfig(d_model=1))


def test_teacher_fully_frozen():
    assert build_teacher(SMALL).trainable_groups() == []


class TestStudent:
    def test_full_keep_reproduces_teacher(self, rng):
        teacher = build_teacher(SMALL, 3)
        student = derive_student(teacher, 1.0)
        x = rng.standard_normal((2, 9, 4)).astype(np.float32)
        with T.no_grad():
            np.testing.assert_allclose(student(x).data, teacher(x).data, atol=1e-5)

    def test_only_w_o_trainable(self):
        student = derive_student(build_teacher(SMALL), 0.2)
        names = [p.name for p in student.trainable_groups()]
        assert names == [f"blocks.{i}.attn.W_O.weight" for i in range(3)]
        s = trainable_summary(student)
        assert s["trainable_params"] == 3 * 8 * 8
        assert s["trainable_fraction"] == pytest.approx(3 * 64 / student.n_params())

    def test_teacher_not_aliased(self):
        teacher = build_teacher(SMALL)
        student = derive_student(teacher, 0.2)
        student.get_module("blocks.0.attn.W_Q").weight.tensor.data[:] = 0
        assert np.any(teacher.get_module("blocks.0.attn.W_Q").weight.tensor.data != 0)

    def test_attention_swapped(self):
        student = derive_student(build_teacher(SMALL), 0.3)
        mods = student.attention_modules()
        assert len(mods) == 3 and all(isinstance(m, SLAAttention) for _, m in mods)
        set_keep_ratio(student, 0.7)
        assert all(m.keep_ratio == 0.7 for _, m in mods)

    def test_frozen_params_stable_through_training(self):
        teacher = build_teacher(SMALL, 0)
        student = derive_student(teacher, 0.5)
        before = snapshot(student)
        cfg = TrainConfig(n_tokens=6, n_train=100, n_eval=2, batch=1, lr=0.1, lr_qat_divisor=1.0)
        run_qat(teacher, student, make_dataset(4, 6, 100, 2, 1), cfg)
        after = snapshot(student)
        assert after.keys() == before.keys()
        for name in before:
            same = before[name].tobytes() == after[name].tobytes()
            assert same != name.endswith("W_O.weight"), name


class TestHooks:
    def test_one_record_per_attention(self, rng):
        model = build_teacher(SMALL)
        assert model.register_hooks("*attn*") == ["blocks.0.attn", "blocks.1.attn", "blocks.2.attn"]
        with T.no_grad():
            model(rng.standard_normal((1, 5, 4)))
        assert [r.name for r in model.hook_records] == ["blocks.0.attn", "blocks.1.attn",
                                                        "blocks.2.attn"]
        assert all(r.value.shape == (5, 8) for r in model.hook_records)

    def test_records_are_per_pass(self, rng):
        model = build_teacher(SMALL)
        model.register_hooks("blocks.1.*")
        with T.no_grad():
            model(rng.standard_normal((5, 4)))
            first = model.hook_records[0].value.data.copy()
            model(rng.standard_normal((5, 4)))
        assert len(model.hook_records) == 1
        assert not np.array_equal(first, model.hook_records[0].value.data)

    def test_teacher_records_carry_no_graph(self, rng):
        model = build_teacher(SMALL)
        model.register_hooks()
        with T.no_grad():
            model(rng.standard_normal((5, 4)))
        assert all(not r.value.requires_grad for r in model.hook_records)

    def test_bad_pattern(self):
        with pytest.raises(ValueError):
            build_teacher(SMALL).register_hooks("nothing*")


def test_named_params_consistent():
    model = derive_student(build_teacher(SMALL), 0.2)
    groups = model.param_groups()
    names = [g.name for g in groups]
    assert len(set(names)) == len(names)
    for g in groups:
        module, _, attr = g.name.rpartition(".")
        assert getattr(model.get_module(module), attr) is g


def test_flops_positive_and_attention_share(rng):
    model = build_teacher(SMALL)
    assert model.flops(16) > model.attention_flops(16) > 0
    assert model.flops(16, batch=2) == 2 * model.flops(16)
