import itertools
import math

import numpy as np
import pytest

from slaqat import tensor as T


# ---------------------------------------------------------------------------
# E4M3FN reference: enumerate all bytes from the bit layout, pure Python
# ---------------------------------------------------------------------------

def ref_decode(byte):
    s = (byte >> 7) & 1
    e = (byte >> 3) & 0xF
    m = byte & 0x7
    if e == 0xF and m == 0x7:
        return math.nan
    if e == 0:
        mag = 2.0 ** -6 * (m / 8)
    else:
        mag = 2.0 ** (e - 7) * (1 + m / 8)
    return -mag if s else mag


REF_TABLE = [ref_decode(b) for b in range(256)]


def ref_encode(x):
    """Nearest representable by exhaustive search; ties to even mantissa; saturating."""
    if math.isnan(x):
        return 0xFF if math.copysign(1.0, x) < 0 else 0x7F
    neg = math.copysign(1.0, x) < 0
    a = min(abs(x), 448.0)
    best, best_err = None, None
    for b in range(0x7F):  # non-negative finite codes
        err = abs(REF_TABLE[b] - a)
        if best is None or err < best_err or (err == best_err and (b & 1) == 0):
            best, best_err = b, err
    return best | 0x80 if neg else best


def ref_spacing(a):
    """Gap between consecutive E4M3 values around magnitude a."""
    a = abs(a)
    if a < 2.0 ** -6:
        return 2.0 ** -9
    return 2.0 ** (math.floor(math.log2(a)) - 3)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_grad(f, arrays, wrt, weights, h_rel=1e-3):
    """Central differences of sum(f(*arrays) * weights) w.r.t. arrays[wrt].

    The forward runs on float32 tensors outside any tape; accumulation of the
    scalar happens in float64.

    Returns ``(grad, floor)`` where ``floor`` bounds the per-element error the
    float32 forward itself injects: each output carries up to one ulp of
    rounding, so the weighted sum is uncertain by about eps32·Σ|w·out|, and
    dividing by the step turns that into an absolute gradient uncertainty.
    """
    base = [np.array(a, dtype=np.float32) for a in arrays]
    x = base[wrt]
    grad = np.zeros(x.shape, dtype=np.float64)
    floor = np.zeros(x.shape, dtype=np.float64)
    eps = float(np.finfo(np.float32).eps)

    def evaluate(vals):
        with T.no_grad():
            out = f(*[T.Tensor(v) for v in vals])
        return out.data.astype(np.float64)

    def scalar(vals):
        return float(np.sum(evaluate(vals) * weights))

    magnitude = float(np.sum(np.abs(evaluate(base) * weights)))

    for idx in itertools.product(*[range(n) for n in x.shape]):
        h = h_rel * max(1.0, abs(float(x[idx])))
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        hp = float(xp[idx]) - float(x[idx])
        hm = float(x[idx]) - float(xm[idx])
        vp = list(base)
        vp[wrt] = xp
        vm = list(base)
        vm[wrt] = xm
        grad[idx] = (scalar(vp) - scalar(vm)) / (hp + hm)
        floor[idx] = 2.0 * eps * magnitude / (hp + hm)
    return grad, floor


def analytic_grad(f, arrays, weights):
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = f(*ts)
        loss = T.sum_all(out * weights.astype(np.float32))
        grads = tape.backward(loss)
    return [grads.get(t, np.zeros(t.shape, dtype=np.float32)) for t in ts]


def grad_rel_error(analytic, numeric, floor=0.0):
    """Max deviation beyond the oracle's rounding floor, relative to the gradient scale."""
    scale = max(float(np.max(np.abs(numeric))), 1e-6)
    excess = np.maximum(np.abs(analytic - numeric) - floor, 0.0)
    return float(np.max(excess)) / scale


def check_grads(f, arrays, rng):
    with T.no_grad():
        out = f(*[T.Tensor(a) for a in arrays])
    weights = rng.standard_normal(out.shape)
    an = analytic_grad(f, arrays, weights)
    worst = 0.0
    for i in range(len(arrays)):
        num, floor = numeric_grad(f, arrays, i, weights)
        worst = max(worst, grad_rel_error(an[i], num, floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        for key, value in report.user_properties:
            if key == "criterion":
                crit = value
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ACCEPTANCE_RESULTS[crit] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c.split(":")[0])):
        terminalreporter.write_line(f"{ACCEPTANCE_RESULTS[crit]}  criterion {crit}")
