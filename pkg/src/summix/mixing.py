"""Sequence mixing cells: SummaryMixing and masked multi-head self-attention.

SummaryMixing transforms every frame with a local branch ``f`` and a summary
branch ``s``, averages ``s`` over the frames visible to the current frame and
feeds ``[f(x_t), mean]`` to a combiner ``c``. With chunked visibility all frames
of a chunk share one summary, so the streaming form only needs a running sum
and a frame count (:class:`SummaryState`).

The combiner is evaluated as ``f(x) @ W_f + mean @ W_s + b`` with ``W`` split by
rows, which equals a dense layer over the concatenation without building it.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .chunking import VisibilityMask
from .errors import DimensionError, ValidationError
from .numkernel import Linear, PrecisionPolicy


@dataclass
class SummaryMixingParams:
    local: Linear      # f: D -> D''
    summary: Linear    # s: D -> D'''
    combine: Linear    # c: D'' + D''' -> D'
    local_act: str = "gelu"
    summary_act: str = "gelu"
    combine_act: str = "gelu"

    def __post_init__(self):
        if self.combine.in_dim != self.local.out_dim + self.summary.out_dim:
            raise DimensionError("combiner input width must equal local + summary widths")
        if self.local.in_dim != self.summary.in_dim:
            raise DimensionError("local and summary branches must read the same input width")

    @property
    def in_dim(self) -> int:
        return self.local.in_dim

    @property
    def out_dim(self) -> int:
        return self.combine.out_dim

    @property
    def summary_dim(self) -> int:
        return self.summary.out_dim

    @classmethod
    def random(cls, rng: np.random.Generator, d_in: int, d_out: int, d_local: int | None = None,
               d_summary: int | None = None, dtype=np.float32) -> "SummaryMixingParams":
        d_local = d_in if d_local is None else d_local
        d_summary = d_in if d_summary is None else d_summary
        return cls(Linear.random(rng, d_in, d_local, dtype),
                   Linear.random(rng, d_in, d_summary, dtype),
                   Linear.random(rng, d_local + d_summary, d_out, dtype))


def _local_branch(X, p: SummaryMixingParams, policy):
    return nk.activations(p.local(X, policy), p.local_act)


def _summary_branch(X, p: SummaryMixingParams, policy):
    return nk.activations(p.summary(X, policy), p.summary_act)


def _combine(F, summary_part, p: SummaryMixingParams, policy):
    """``c([F, mean])`` where ``summary_part`` is already ``mean @ W_s`` (broadcastable)."""
    w_local = p.combine.weight[: p.local.out_dim]
    out = nk.matmul(F, w_local, policy)
    out += summary_part
    out += p.combine.bias
    return nk.activations(out, p.combine_act)


def _project_summary(mean, p: SummaryMixingParams, policy):
    w_summary = p.combine.weight[p.local.out_dim:]
    return nk.matmul(mean.astype(policy.compute_dtype, copy=False), w_summary, policy)


def summary_mixing_offline(X: np.ndarray, p: SummaryMixingParams,
                           policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Whole-utterance SummaryMixing: one mean summary shared by every frame."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("summary mixing needs a non-empty T x D input")
    policy = nk.policy_for(X, policy)
    S = _summary_branch(X, p, policy)
    mean = S.astype(policy.accumulate_dtype, copy=False).mean(axis=0)
    F = _local_branch(X, p, policy)
    return _combine(F, _project_summary(mean, p, policy), p, policy)


def _window_sums(chunk_sums: np.ndarray, left_context: int | None) -> np.ndarray:
    if left_context is None:
        return np.cumsum(chunk_sums, axis=0)
    padded = np.concatenate([np.zeros((left_context,) + chunk_sums.shape[1:], chunk_sums.dtype),
                             chunk_sums])
    windows = np.lib.stride_tricks.sliding_window_view(padded, left_context + 1, axis=0)
    return windows.sum(axis=-1)


def summary_mixing_masked(X: np.ndarray, mask: VisibilityMask | np.ndarray, p: SummaryMixingParams,
                          policy: PrecisionPolicy | None = None) -> np.ndarray:
    """SummaryMixing where frame ``t`` averages ``s`` over its visible frames only.

    A :class:`VisibilityMask` takes the linear-time route (per-chunk sums, then
    running/windowed sums over chunks). A raw boolean ``T x T`` array takes the
    generic dense route.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("summary mixing needs a non-empty T x D input")
    T = X.shape[0]
    policy = nk.policy_for(X, policy)
    acc = policy.accumulate_dtype
    if not isinstance(mask, VisibilityMask):
        bits = np.asarray(mask, dtype=bool)
        if bits.shape != (T, T):
            raise DimensionError(f"mask shape {bits.shape} does not match T={T}")
        counts = bits.sum(axis=1)
        if np.any(counts == 0):
            raise ValidationError("every frame must see at least one frame")
        S = _summary_branch(X, p, policy).astype(acc, copy=False)
        means = (bits.astype(acc) @ S) / counts[:, None]
        F = _local_branch(X, p, policy)
        return _combine(F, _project_summary(means, p, policy), p, policy)

    if mask.T != T:
        raise DimensionError(f"mask built for T={mask.T} but input has {T} frames")
    if mask.is_full:
        return summary_mixing_offline(X, p, policy)
    C = mask.chunk
    starts = np.arange(0, T, C)
    S = _summary_branch(X, p, policy).astype(acc, copy=False)
    chunk_sums = np.add.reduceat(S, starts, axis=0)
    del S
    chunk_counts = np.minimum(starts + C, T) - starts
    sums = _window_sums(chunk_sums, mask.spec.left_context)
    counts = _window_sums(chunk_counts.astype(acc), mask.spec.left_context)
    means = sums / counts[:, None]
    per_chunk = _project_summary(means, p, policy)
    F = _local_branch(X, p, policy)
    return _combine(F, np.repeat(per_chunk, chunk_counts, axis=0), p, policy)


@dataclass
class SummaryState:
    """Running summary for one stream.

    With infinite left context only ``running_sum``/``frame_count`` are kept.
    With a finite left context of ``L`` chunks the per-chunk partial sums of the
    ``L + 1`` live chunks are kept and re-added on every update, so eviction
    never subtracts.
    """

    dim: int
    left_context: int | None = None
    dtype: np.dtype = np.dtype(np.float64)
    running_sum: np.ndarray = field(init=False)
    frame_count: int = field(init=False, default=0)
    window: deque = field(init=False, repr=False)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        self.running_sum = np.zeros(self.dim, self.dtype)
        maxlen = None if self.left_context is None else self.left_context + 1
        self.window = deque(maxlen=maxlen)

    def push(self, chunk_sum: np.ndarray, count: int) -> None:
        if self.left_context is None:
            self.running_sum += chunk_sum
            self.frame_count += count
            return
        self.window.append((np.array(chunk_sum, dtype=self.dtype), count))
        self.running_sum = np.sum(np.stack([s for s, _ in self.window]), axis=0)
        self.frame_count = sum(n for _, n in self.window)

    def mean(self) -> np.ndarray:
        if self.frame_count == 0:
            raise ValidationError("summary of an empty stream")
        return self.running_sum / self.frame_count

    @property
    def nbytes(self) -> int:
        return self.running_sum.nbytes + sum(s.nbytes for s, _ in self.window)

    def copy(self) -> "SummaryState":
        new = SummaryState(self.dim, self.left_context, self.dtype)
        new.running_sum = self.running_sum.copy()
        new.frame_count = self.frame_count
        new.window.extend((s.copy(), n) for s, n in self.window)
        return new


def summary_mixing_step(chunk: np.ndarray, state: SummaryState, p: SummaryMixingParams,
                        policy: PrecisionPolicy | None = None) -> tuple[np.ndarray, SummaryState]:
    """Process one chunk; every frame in it uses the summary up to the chunk end.

    ``state`` is updated in place and returned.
    """
    chunk = np.asarray(chunk)
    if chunk.ndim != 2 or chunk.shape[0] == 0:
        raise ValidationError("empty chunk")
    policy = nk.policy_for(chunk, policy)
    S = _summary_branch(chunk, p, policy)
    state.push(S.astype(state.dtype, copy=False).sum(axis=0), chunk.shape[0])
    F = _local_branch(chunk, p, policy)
    return _combine(F, _project_summary(state.mean()[None, :], p, policy), p, policy), state


# -- multi-head self-attention baseline ---------------------------------------------

def sinusoidal_positions(start: int, count: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(start, start + count, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((count, dim))
    out[:, 0:2 * (dim // 2):2] = np.sin(angle)
    out[:, 1:2 * (dim // 2):2] = np.cos(angle)
    return out.astype(dtype)


@dataclass
class MhsaParams:
    num_heads: int
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    positional: str = "none"   # "none" | "absolute"

    def __post_init__(self):
        d = self.query.out_dim
        if d % self.num_heads:
            raise DimensionError(f"width {d} not divisible by {self.num_heads} heads")
        if self.positional not in ("none", "absolute"):
            raise ValidationError(f"unknown positional encoding {self.positional!r}")

    @property
    def head_dim(self) -> int:
        return self.query.out_dim // self.num_heads

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, num_heads: int, dtype=np.float32,
               positional: str = "none") -> "MhsaParams":
        return cls(num_heads, *(Linear.random(rng, d_model, d_model, dtype) for _ in range(4)),
                   positional=positional)


def _heads(Y: np.ndarray, num_heads: int) -> np.ndarray:
    T, d = Y.shape
    return np.ascontiguousarray(Y.reshape(T, num_heads, d // num_heads).transpose(1, 0, 2))


def _qkv(X, p: MhsaParams, policy, offset: int):
    if p.positional == "absolute":
        X = X + sinusoidal_positions(offset, X.shape[0], X.shape[1], X.dtype)
    q = p.query(X, policy)
    q *= 1.0 / math.sqrt(p.head_dim)
    return (_heads(q, p.num_heads), _heads(p.key(X, policy), p.num_heads),
            _heads(p.value(X, policy), p.num_heads))


def _attend(q, k, v, p: MhsaParams, policy, apply_mask=None):
    scores = nk.matmul(q, k.transpose(0, 2, 1), policy)
    if apply_mask is not None:
        apply_mask(scores)
    probs = nk.softmax_inplace(scores)
    ctx = nk.matmul(probs, v, policy)
    del scores, probs
    H, T, dk = ctx.shape
    return p.output(ctx.transpose(1, 0, 2).reshape(T, H * dk), policy)


def mhsa_masked(X: np.ndarray, mask: VisibilityMask | np.ndarray | None, p: MhsaParams,
                policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Scaled dot-product attention with invisible keys excluded from the softmax."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("attention needs a non-empty T x D input")
    T = X.shape[0]
    policy = nk.policy_for(X, policy)
    q, k, v = _qkv(X, p, policy, 0)

    if mask is None or (isinstance(mask, VisibilityMask) and mask.is_full):
        apply = None
    elif isinstance(mask, VisibilityMask):
        if mask.T != T:
            raise DimensionError(f"mask built for T={mask.T} but input has {T} frames")

        def apply(scores):
            # visible keys of a chunk's rows form one interval
            for r0 in range(0, T, mask.chunk):
                r1 = min(r0 + mask.chunk, T)
                start, end = mask.visible_range(r0)
                scores[:, r0:r1, :start] = -np.inf
                scores[:, r0:r1, end:] = -np.inf
    else:
        bits = np.asarray(mask, dtype=bool)
        if bits.shape != (T, T):
            raise DimensionError(f"mask shape {bits.shape} does not match T={T}")
        if not np.all(bits.any(axis=1)):
            raise ValidationError("attention row is fully masked")

        def apply(scores):
            scores[:, ~bits] = -np.inf

    return _attend(q, k, v, p, policy, apply)


class KvCache:
    """Keys/values of previously seen frames, per head.

    ``capacity=None`` keeps every frame (infinite left context) in an
    amortised-doubling buffer; otherwise only the most recent ``capacity``
    frames are retained.
    """

    def __init__(self, num_heads: int, head_dim: int, capacity: int | None, dtype=np.float32):
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.capacity = capacity
        self.dtype = np.dtype(dtype)
        self._k = np.zeros((num_heads, 0, head_dim), self.dtype)
        self._v = np.zeros((num_heads, 0, head_dim), self.dtype)
        self.length = 0

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, : self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, : self.length]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[1]
        if self.capacity is not None:
            keep = self.capacity
            self._k = np.concatenate([self.keys, k], axis=1)[:, max(0, self.length + n - keep):]
            self._v = np.concatenate([self.values, v], axis=1)[:, max(0, self.length + n - keep):]
            self._k = np.ascontiguousarray(self._k)
            self._v = np.ascontiguousarray(self._v)
            self.length = self._k.shape[1]
            return
        need = self.length + n
        if need > self._k.shape[1]:
            size = max(need, 2 * self._k.shape[1], 16)
            grown_k = np.empty((self.num_heads, size, self.head_dim), self.dtype)
            grown_v = np.empty_like(grown_k)
            grown_k[:, : self.length] = self.keys
            grown_v[:, : self.length] = self.values
            self._k, self._v = grown_k, grown_v
        self._k[:, self.length:need] = k
        self._v[:, self.length:need] = v
        self.length = need

    @property
    def nbytes(self) -> int:
        return self._k.nbytes + self._v.nbytes

    def copy(self) -> "KvCache":
        new = KvCache(self.num_heads, self.head_dim, self.capacity, self.dtype)
        new._k, new._v, new.length = self._k.copy(), self._v.copy(), self.length
        return new


def mhsa_step(chunk: np.ndarray, cache: KvCache, p: MhsaParams, offset: int = 0,
              policy: PrecisionPolicy | None = None) -> tuple[np.ndarray, KvCache]:
    """Attend one chunk to the cached left context plus the chunk itself.

    ``offset`` is the absolute index of the chunk's first frame (used only for
    absolute positional encodings). ``cache`` is updated in place.
    """
    chunk = np.asarray(chunk)
    if chunk.ndim != 2 or chunk.shape[0] == 0:
        raise ValidationError("empty chunk")
    policy = nk.policy_for(chunk, policy)
    q, k, v = _qkv(chunk, p, policy, offset)
    if cache.capacity is None:
        cache.append(k, v)
        return _attend(q, cache.keys, cache.values, p, policy), cache
    if cache.length:
        keys = np.concatenate([cache.keys, k], axis=1)
        values = np.concatenate([cache.values, v], axis=1)
    else:
        keys, values = k, v
    out = _attend(q, keys, values, p, policy)
    cache.append(k, v)
    return out, cache
