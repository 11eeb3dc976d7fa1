"""Random instance generators for finite-difference checks, one per op."""
import numpy as np

from slaqat import tensor as T


def _shape(rng, rank=2):
    return tuple(int(n) for n in rng.integers(1, 9, size=rank))


def _case_binary(op, positive_rhs=False):
    def make(rng):
        s = _shape(rng)
        b = rng.standard_normal(s)
        if positive_rhs:
            b = np.abs(b) + 0.5
        return op, [rng.standard_normal(s), b]
    return make


def _case_broadcast(rng):
    s = _shape(rng)
    return T.add, [rng.standard_normal(s), rng.standard_normal(s[1:])]


def _case_rowdiv(rng):
    s = _shape(rng)
    return T.div, [rng.standard_normal(s), np.abs(rng.standard_normal((s[0], 1))) + 0.5]


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 9, size=3))
    return T.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def _case_linear(rng):
    n, d_in, d_out = (int(v) for v in rng.integers(1, 9, size=3))
    args = [rng.standard_normal((n, d_in)), rng.standard_normal((d_out, d_in))]
    if rng.random() < 0.5:
        return T.linear, args
    return T.linear, args + [rng.standard_normal(d_out)]


def _case_unary(op, lo=-2.0, hi=2.0, avoid=None):
    def make(rng):
        x = rng.uniform(lo, hi, _shape(rng))
        if avoid is not None:
            x = np.where(np.abs(x - avoid) < 0.05, x + 0.1, x)
        return op, [x]
    return make


def _case_max_rows(rng):
    s = _shape(rng)
    # distinct, well separated entries so the argmax is stable under perturbation
    x = rng.permutation(s[0] * s[1]).reshape(s) * 0.1 + rng.uniform(0, 0.01, s)
    return T.max_rows, [x]


def _case_softmax_masked(rng):
    s = _shape(rng)
    mask = rng.random(s) < 0.6
    mask[np.arange(s[0]), rng.integers(0, s[1], s[0])] = True
    return (lambda x: T.softmax_rows(x, mask)), [rng.standard_normal(s)]


def _case_layer_norm(rng):
    s = (int(rng.integers(1, 9)), int(rng.integers(2, 9)))
    x = rng.standard_normal(s)
    # near-constant rows make the normalization so curved that h=1e-3 steps are no longer local
    while np.min(x.std(axis=1)) < 0.3:
        x = rng.standard_normal(s)
    return T.layer_norm, [x, rng.standard_normal(s[1]), rng.standard_normal(s[1])]


def _case_mse(rng):
    s = _shape(rng)
    return (lambda a, b: T.mse(a, b)), [rng.standard_normal(s), rng.standard_normal(s)]


def _case_slice_concat(rng):
    s = (int(rng.integers(2, 9)), int(rng.integers(1, 9)))
    cut = int(rng.integers(1, s[0]))

    def f(x):
        return T.concat_rows([T.slice_rows(x, cut, s[0]) * 2.0, T.slice_rows(x, 0, cut)])
    return f, [rng.standard_normal(s)]


def _case_reshape(rng):
    s = _shape(rng)
    return (lambda x: T.reshape(x, (-1,))), [rng.standard_normal(s)]


GRAD_CASES = {
    "add": _case_binary(T.add),
    "add_broadcast": _case_broadcast,
    "sub": _case_binary(T.sub),
    "mul": _case_binary(T.mul),
    "div": _case_binary(T.div, positive_rhs=True),
    "div_rowvector": _case_rowdiv,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "transpose": _case_unary(T.transpose),
    "reshape": _case_reshape,
    "slice_concat": _case_slice_concat,
    "exp": _case_unary(T.exp),
    "sqrt": _case_unary(T.sqrt, 0.5, 3.0),
    "tanh": _case_unary(T.tanh),
    "relu": _case_unary(T.relu, avoid=0.0),
    "gelu": _case_unary(T.gelu),
    "elu_plus_one": _case_unary(T.elu_plus_one, avoid=0.0),
    "sum_all": _case_unary(T.sum_all),
    "mean": _case_unary(T.mean),
    "sum_rows": _case_unary(T.sum_rows),
    "max_rows": _case_max_rows,
    "softmax_rows": _case_unary(T.softmax_rows),
    "softmax_rows_masked": _case_softmax_masked,
    "layer_norm": _case_layer_norm,
    "mse": _case_mse,
}
