"""Software FP8 E4M3FN codec and scaled fake quantization.

E4M3FN: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits, subnormals,
no infinities; 0x7F / 0xFF are NaN and the largest finite magnitude is 448.
Encoding rounds to nearest, ties to even, and saturates at +-448.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, straight_through

FP8_MAX = 448.0
FP8_MIN = -448.0
EPS = 1e-8

_MIN_NORMAL_EXP = -6
_MANT_BITS = 3


def _build_table():
    codes = np.arange(256, dtype=np.uint16)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    mant = (codes & 0x7).astype(np.float64)
    normal = np.ldexp(1.0 + mant / 8.0, exp.astype(np.int64) - 7)
    sub = np.ldexp(mant / 8.0, _MIN_NORMAL_EXP)
    vals = sign * np.where(exp == 0, sub, normal)
    vals[(codes & 0x7F) == 0x7F] = np.nan
    return vals


#: decoded value of every byte, float64 (exact)
DECODE_TABLE = _build_table()
_POS_VALUES = DECODE_TABLE[:0x7F]  # codes 0x00..0x7E, ascending, all finite


def fp8_decode(codes):
    """Decode bytes to float32 values (NaN for 0x7F / 0xFF)."""
    codes = np.asarray(codes, dtype=np.uint8)
    return DECODE_TABLE[codes].astype(DTYPE)


def _round_magnitude(a):
    """Round non-negative float64 magnitudes onto the E4M3 grid (nearest-even)."""
    a = np.minimum(a, FP8_MAX)
    _, e = np.frexp(a)  # a = f * 2**e, f in [0.5, 1)
    exp = np.maximum(e - 1, _MIN_NORMAL_EXP)
    spacing = np.ldexp(1.0, exp - _MANT_BITS)
    q = np.rint(a / spacing) * spacing
    return np.minimum(q, FP8_MAX)


def fp8_encode(x):
    """Encode float values to E4M3FN bytes.

    NaN maps to 0x7F (0xFF if the sign bit is set); out-of-range values
    saturate to +-448.  The sign of zero is preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    nan = np.isnan(x)
    neg = np.signbit(x)
    mag = _round_magnitude(np.where(nan, 0.0, np.abs(x)))
    idx = np.searchsorted(_POS_VALUES, mag).astype(np.uint8)
    codes = np.where(neg, idx | 0x80, idx).astype(np.uint8)
    codes[nan] = np.where(neg[nan], 0xFF, 0x7F)
    return codes


def fp8_round(x):
    """Round to the nearest E4M3 value (decode of encode), as float32."""
    return fp8_decode(fp8_encode(x))


def grid_spacing(x):
    """Local E4M3 spacing at magnitude |x| (spacing of the binade containing it)."""
    a = np.minimum(np.abs(np.asarray(x, dtype=np.float64)), FP8_MAX)
    _, e = np.frexp(a)
    exp = np.maximum(e - 1, _MIN_NORMAL_EXP)
    return np.ldexp(1.0, exp - _MANT_BITS)


class Axis(enum.Enum):
    PER_OUTPUT_ROW = "per_output_row"
    PER_TOKEN = "per_token"


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # uint8, original shape
    scales: np.ndarray  # float32, one per row / token
    axis: Axis
    shape: tuple

    def __post_init__(self):
        rows = int(np.prod(self.shape[:-1])) if len(self.shape) > 1 else 1
        if self.scales.shape != (rows,):
            raise ValueError(f"expected {rows} scales, got {self.scales.shape}")
        if not np.all(self.scales > 0):
            raise ValueError("scales must be positive")

    def dequantize(self):
        vals = fp8_decode(self.codes).reshape(-1, self.shape[-1])
        return (vals * self.scales[:, None]).reshape(self.shape)

    @property
    def nbytes(self):
        return self.codes.size + 4 * self.scales.size


def compute_scales(x2d):
    amax = np.max(np.abs(x2d), axis=-1)
    scale = amax.astype(DTYPE) / DTYPE(FP8_MAX)
    return np.maximum(scale, DTYPE(EPS))


def quantize_scaled(x, axis=Axis.PER_TOKEN) -> QuantizedTensor:
    """Dynamic FP8 quantization with one scale per slice of the last axis.

    Both axes reduce over the last dimension: for a weight ``d_out×d_in`` that
    is one scale per output row, for activations one per token (leading dims
    are flattened into the token axis).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    shape = data.shape
    x2d = data.reshape(-1, shape[-1]) if data.ndim != 1 else data.reshape(1, -1)
    scales = compute_scales(x2d)
    scaled = np.clip(x2d / scales[:, None], FP8_MIN, FP8_MAX)
    codes = fp8_encode(scaled).reshape(shape)
    return QuantizedTensor(codes, scales, Axis(axis), tuple(shape))


def fake_quant(x, axis=Axis.PER_TOKEN):
    """Quantize-dequantize round trip as a float32 array (no tape)."""
    return quantize_scaled(x, axis).dequantize()


def fake_quant_ste(x, axis=Axis.PER_TOKEN):
    """Fake quantization on the tape with a straight-through gradient."""
    x = as_tensor(x)
    return straight_through(x, fake_quant(x, axis))
