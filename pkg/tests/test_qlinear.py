import warnings

import numpy as np
import pytest

from slaqat import tensor as T
from slaqat.fp8 import Axis, fp8_decode, grid_spacing, quantize_scaled
from slaqat.model import ModelConfig, build_teacher, derive_student
from slaqat.nn import LayerNorm, Linear
from slaqat.qlinear import (FakeQuantLinear, QuantPolicy, WeightOnlyLinear, apply_policy,
                            export_model, export_weight_only, fq_backward_contract, fq_forward,
                            linear_layers)
from slaqat.tensor import ParamGroup, Tensor

from conftest import REF_TABLE


def make_layer(rng, d_in=6, d_out=4, act=True, scale=1.0):
    w = ParamGroup("l.weight", Tensor(rng.standard_normal((d_out, d_in)) * scale), trainable=True)
    b = ParamGroup("l.bias", Tensor(rng.standard_normal(d_out)), trainable=True)
    return FakeQuantLinear(w, b, enable_act_quant=act)


def plain(layer, x):
    return T.matmul(x, T.transpose(layer.weight.tensor)) + layer.bias.tensor


def tape_grads(layer, x, g):
    xt = Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        y = layer(xt)
        grads = tape.backward(T.sum_all(y * g))
    return grads[xt], grads[layer.weight.tensor], grads[layer.bias.tensor]


class TestForward:
    def test_disabled_is_plain_linear(self, rng):
        layer = make_layer(rng)
        layer.enabled = False
        x = rng.standard_normal((5, 6)).astype(np.float32)
        assert fq_forward(layer, x).data.tobytes() == plain(layer, Tensor(x)).data.tobytes()

    def test_on_grid_inputs_are_exact(self, rng):
        grid = np.array(REF_TABLE[:0x7F])
        w = rng.choice(grid, (4, 6)) * rng.choice([-1, 1], (4, 6))
        x = rng.choice(grid, (3, 6)) * rng.choice([-1, 1], (3, 6))
        w[:, 0] = 448.0
        x[:, 0] = 448.0
        layer = FakeQuantLinear(ParamGroup("w", Tensor(w)), ParamGroup("b", T.zeros(4)))
        expect = plain(layer, Tensor(x)).data
        np.testing.assert_array_equal(fq_forward(layer, x).data, expect)

    def test_error_bounded_by_grid_halfulp(self, rng):
        layer = make_layer(rng)
        x = rng.standard_normal((8, 6)).astype(np.float32)
        got = fq_forward(layer, x).data.astype(np.float64)
        exact = x.astype(np.float64) @ layer.weight.tensor.data.T.astype(np.float64) \
            + layer.bias.tensor.data
        qx = quantize_scaled(x, Axis.PER_TOKEN)
        qw = quantize_scaled(layer.weight.tensor, Axis.PER_OUTPUT_ROW)
        # per-element bounds on |x - xq| and |W - Wq| from the scaled grid half-spacing
        dx = grid_spacing(fp8_decode(qx.codes)) / 2 * qx.scales[:, None]
        dw = grid_spacing(fp8_decode(qw.codes)) / 2 * qw.scales[:, None]
        xa, wa = np.abs(x), np.abs(layer.weight.tensor.data)
        bound = dx @ wa.T + xa @ dw.T + dx @ dw.T
        assert np.all(np.abs(got - exact) <= bound * 1.01 + 1e-5)

    def test_3d_input_uses_flattened_tokens(self, rng):
        layer = make_layer(rng)
        x = rng.standard_normal((2, 3, 6)).astype(np.float32)
        y = fq_forward(layer, x)
        assert y.shape == (2, 3, 4)
        np.testing.assert_array_equal(y.data.reshape(6, 4), fq_forward(layer, x.reshape(6, 6)).data)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            fq_forward(make_layer(rng), np.ones((2, 5)))


class TestBackward:
    def test_disabled_matches_plain_gradients(self, rng):
        layer = make_layer(rng)
        layer.enabled = False
        x = rng.standard_normal((5, 6)).astype(np.float32)
        g = rng.standard_normal((5, 4)).astype(np.float32)
        got = tape_grads(layer, x, g)
        xt = Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            ref = tape.backward(T.sum_all(plain(layer, xt) * g))
        np.testing.assert_array_equal(got[0], ref[xt])
        np.testing.assert_array_equal(got[1], ref[layer.weight.tensor])
        np.testing.assert_array_equal(got[2], ref[layer.bias.tensor])

    def test_no_act_quant_uses_raw_x(self, rng):
        layer = make_layer(rng, act=False)
        x = rng.standard_normal((5, 6)).astype(np.float32)
        g = rng.standard_normal((5, 4)).astype(np.float32)
        _, gw, _ = tape_grads(layer, x, g)
        np.testing.assert_allclose(gw, g.T @ x, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("act", [True, False])
    def test_matches_closed_form(self, rng, act):
        for _ in range(20):
            layer = make_layer(rng, act=act, scale=float(rng.uniform(0.01, 10)))
            x = (rng.standard_normal((7, 6)) * rng.uniform(0.1, 50)).astype(np.float32)
            g = rng.standard_normal((7, 4)).astype(np.float32)
            got = tape_grads(layer, x, g)
            expect = fq_backward_contract(layer, x, g)
            for a, e in zip(got, expect):
                np.testing.assert_array_equal(a, e)


def test_export_matches_weight_only_fake_quant(rng):
    layer = make_layer(rng, act=False)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    wo = export_weight_only(layer)
    assert isinstance(wo, WeightOnlyLinear)
    np.testing.assert_array_equal(wo(Tensor(x)).data, fq_forward(layer, x).data)
    assert wo.weight_bytes() == 6 * 4 + 4 * 4


def test_weight_only_is_immutable_and_full_precision_activations(rng):
    layer = make_layer(rng, act=True)
    wo = export_weight_only(layer)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    expect = x @ wo.wq.dequantize().T + layer.bias.tensor.data
    np.testing.assert_allclose(wo(Tensor(x)).data, expect, rtol=1e-6, atol=1e-6)
    assert not layer.bias.trainable


class TestPolicy:
    @pytest.fixture
    def model(self):
        return derive_student(build_teacher(ModelConfig(layers=2, d_model=8, d_in=4, d_out=4), 0), 0.5)

    def test_include_all(self, model):
        n_linear = len(linear_layers(model))
        assert apply_policy(model, QuantPolicy(include=["*"], exclude=[], min_params=0)) == n_linear
        assert all(isinstance(m, FakeQuantLinear) for _, m in linear_layers(model))

    def test_norms_untouched(self, model):
        apply_policy(model, QuantPolicy(include=["*"], exclude=["*norm*"]))
        norms = [m for _, m in model.named_modules() if isinstance(m, LayerNorm)]
        assert len(norms) == 4 and all(type(m) is LayerNorm for m in norms)

    def test_min_params_exempts_toy_layers(self, model):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert apply_policy(model, QuantPolicy(include=["*"], min_params=10 ** 6)) == 0
        assert caught

    def test_default_exempts_embed_and_head(self, model):
        apply_policy(model, QuantPolicy())
        kinds = {n: type(m) for n, m in linear_layers(model)}
        assert kinds["embed"] is Linear and kinds["head"] is Linear
        assert kinds["blocks.0.attn.W_O"] is FakeQuantLinear
        assert kinds["blocks.1.mlp.fc2"] is FakeQuantLinear

    def test_idempotent(self, model):
        assert apply_policy(model, QuantPolicy()) > 0
        assert apply_policy(model, QuantPolicy()) == 0

    def test_policy_predicate(self):
        p = QuantPolicy(include=["blocks.*"], exclude=["*fc2"], min_params=10)
        assert p.matches("blocks.0.mlp.fc1", 10)
        assert not p.matches("blocks.0.mlp.fc2", 100)
        assert not p.matches("head", 100)
        assert not p.matches("blocks.0.mlp.fc1", 9)

    def test_params_shared_not_copied(self, model):
        before = model.get_module("blocks.0.mlp.fc1").weight
        apply_policy(model, QuantPolicy())
        assert model.get_module("blocks.0.mlp.fc1").weight is before

    def test_export_model_replaces_all_fake_quant(self, model, rng):
        apply_policy(model, QuantPolicy(enable_act_quant=False))
        x = rng.standard_normal((2, 5, 4)).astype(np.float32)
        with T.no_grad():
            expect = model(x).data
        assert export_model(model) == 2 * 6
        with T.no_grad():
            np.testing.assert_array_equal(model(x).data, expect)
