"""Dense numeric kernels used throughout the encoder and transducer.

Everything here is a pure function of its inputs. Matrices are plain 2-D
``numpy.ndarray`` objects in row-major (C) order; the dtype of the result is
governed by a :class:`PrecisionPolicy`.

Multiply-add counts can be collected with :func:`count_ops`, which installs a
counter in the current ``contextvars`` context so concurrent callers never
share state.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, ValidationError

_WIDTHS = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)

ACTIVATIONS = ("gelu", "silu", "sigmoid", "tanh", "relu", "glu", "identity")


@dataclass(frozen=True)
class PrecisionPolicy:
    """Storage/compute width and accumulation width for a computation.

    ``f32`` stands in for the reduced-precision path, ``f64`` is the reference.
    """

    compute_width: str = "f32"
    accumulate_width: str = "f32"

    def __post_init__(self):
        for w in (self.compute_width, self.accumulate_width):
            if w not in _WIDTHS:
                raise ValidationError(f"unknown width {w!r}; expected one of {sorted(_WIDTHS)}")
        if _WIDTHS[self.accumulate_width].itemsize < _WIDTHS[self.compute_width].itemsize:
            raise ValidationError("accumulate_width must be at least as wide as compute_width")

    @classmethod
    def of(cls, width: str) -> "PrecisionPolicy":
        return cls(width, width)

    @property
    def compute_dtype(self) -> np.dtype:
        return _WIDTHS[self.compute_width]

    @property
    def accumulate_dtype(self) -> np.dtype:
        return _WIDTHS[self.accumulate_width]


F32 = PrecisionPolicy.of("f32")
F64 = PrecisionPolicy.of("f64")


def policy_for(x: np.ndarray, policy: PrecisionPolicy | None) -> PrecisionPolicy:
    if policy is not None:
        return policy
    return F64 if np.asarray(x).dtype == np.float64 else F32


# -- op accounting ---------------------------------------------------------------

class OpCounter:
    """Tally of scalar multiply-adds performed inside a :func:`count_ops` block."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("summix_ops", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def record_ops(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(n)


# -- kernels -----------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Matrix product with accumulation in ``policy.accumulate_width``.

    Leading batch dimensions broadcast as in ``numpy.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul needs at least 1-D operands")
    inner_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul: a has {a.shape[-1]} columns but b has {inner_b} rows")
    policy = policy_for(a, policy)
    acc = policy.accumulate_dtype
    out = np.matmul(a.astype(acc, copy=False), b.astype(acc, copy=False))
    record_ops(out.size * a.shape[-1])
    return out.astype(policy.compute_dtype, copy=False)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5,
              policy: PrecisionPolicy | None = None) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValidationError("layernorm over a zero-length row")
    if np.shape(gain) != (x.shape[-1],) or np.shape(bias) != (x.shape[-1],):
        raise DimensionError("gain/bias length must equal the number of columns")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    policy = policy_for(x, policy)
    xa = x.astype(policy.accumulate_dtype, copy=False)
    mean = xa.mean(axis=-1, keepdims=True)
    centered = xa - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    centered /= np.sqrt(var + eps)
    out = centered.astype(policy.compute_dtype, copy=False)
    out *= gain
    out += bias
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def activations(x: np.ndarray, kind: str) -> np.ndarray:
    """Apply an elementwise nonlinearity. ``glu`` halves the last axis."""
    x = np.asarray(x)
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "silu":
        return x * _sigmoid(x)
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    if kind == "glu":
        if x.shape[-1] % 2:
            raise DimensionError("glu needs an even number of columns")
        half = x.shape[-1] // 2
        return x[..., :half] * _sigmoid(x[..., half:])
    raise ValidationError(f"unknown activation {kind!r}")


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; ``mask`` entries that are False get exactly 0."""
    x = np.asarray(x)
    if mask is None:
        out = np.array(x, dtype=x.dtype, copy=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValidationError("softmax row is fully masked")
        out = np.where(mask, x, -np.inf).astype(x.dtype, copy=False)
    return softmax_inplace(out)


def softmax_inplace(out: np.ndarray) -> np.ndarray:
    """Row softmax overwriting ``out``; ``-inf`` entries become exactly 0."""
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# -- parameter containers ------------------------------------------------------------

@dataclass
class Linear:
    """Dense layer ``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: np.ndarray, policy: PrecisionPolicy | None = None) -> np.ndarray:
        y = matmul(x, self.weight, policy)
        y += self.bias
        return y

    @classmethod
    def identity(cls, dim: int, dtype=np.float64) -> "Linear":
        return cls(np.eye(dim, dtype=dtype), np.zeros(dim, dtype=dtype))

    @classmethod
    def random(cls, rng: np.random.Generator, in_dim: int, out_dim: int, dtype=np.float32,
               scale: float | None = None) -> "Linear":
        scale = (1.0 / np.sqrt(in_dim)) if scale is None else scale
        w = rng.standard_normal((in_dim, out_dim)) * scale
        b = rng.standard_normal(out_dim) * 0.1 * scale
        return cls(w.astype(dtype), b.astype(dtype))


@dataclass
class Norm:
    gain: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray, policy: PrecisionPolicy | None = None) -> np.ndarray:
        return layernorm(x, self.gain, self.bias, policy=policy)

    @classmethod
    def default(cls, dim: int, dtype=np.float32) -> "Norm":
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype))


@dataclass
class LstmWeights:
    """Gate order along the 4H axis is input, forget, cell, output."""

    w_ih: np.ndarray  # (I, 4H)
    w_hh: np.ndarray  # (H, 4H)
    bias: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]


def lstm_cell(x: np.ndarray, h: np.ndarray, c: np.ndarray, weights: LstmWeights,
              policy: PrecisionPolicy | None = None) -> tuple[np.ndarray, np.ndarray]:
    H = weights.hidden
    if weights.w_ih.shape != (np.shape(x)[-1], 4 * H) or weights.w_hh.shape != (H, 4 * H) \
            or np.shape(weights.bias) != (4 * H,):
        raise DimensionError("LSTM weights inconsistent with input/hidden sizes")
    if np.shape(h)[-1] != H or np.shape(c)[-1] != H:
        raise DimensionError("LSTM state width does not match hidden size")
    gates = matmul(x, weights.w_ih, policy) + matmul(h, weights.w_hh, policy) + weights.bias
    i = _sigmoid(gates[..., :H])
    f = _sigmoid(gates[..., H:2 * H])
    g = np.tanh(gates[..., 2 * H:3 * H])
    o = _sigmoid(gates[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new
