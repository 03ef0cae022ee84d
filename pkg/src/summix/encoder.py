"""Conformer encoder with SummaryMixing or MHSA, offline and streaming.

Block layout (pre-norm macaron)::

    x = x + 0.5 * FFN(LN(x))
    x = x + Mixing(LN(x), mask)
    x = x + ConvModule(x, mask)        # LN -> pointwise -> GLU -> depthwise -> LN -> SiLU -> pointwise
    x = x + 0.5 * FFN(LN(x))
    return LN(x)

The offline path evaluates a whole utterance under a :class:`VisibilityMask`.
The streaming path consumes input incrementally, carrying per-block state in a
:class:`StreamingContext`, and reproduces the offline masked output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import numkernel as nk
from .chunking import ChunkSpec, VisibilityMask, build_mask
from .errors import DimensionError, ValidationError
from .mixing import (KvCache, MhsaParams, SummaryMixingParams, SummaryState, mhsa_masked,
                     mhsa_step, summary_mixing_masked, summary_mixing_step)
from .numkernel import Linear, Norm, PrecisionPolicy

MIXING_KINDS = ("summary", "mhsa")
CONV_MODES = ("dynamic_chunk", "causal", "standard")


@dataclass
class FeatureSequence:
    """``T x D`` acoustic frames plus the frame shift they were computed with."""

    frames: np.ndarray
    frame_shift_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_shift_ms / 1000.0


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 80
    num_blocks: int = 12
    d_model: int = 144
    mixing: str = "summary"
    num_heads: int = 4
    conv_kernel: int = 31
    ffn_expansion: float = 4.0
    conv_mode: str = "dynamic_chunk"
    subsampling_factor: int = 1
    local_dim: int | None = None
    summary_dim: int | None = None
    positional: str = "none"
    precision: PrecisionPolicy = nk.F32
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValidationError("num_blocks must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValidationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.mixing not in MIXING_KINDS:
            raise ValidationError(f"mixing must be one of {MIXING_KINDS}")
        if self.conv_mode not in CONV_MODES:
            raise ValidationError(f"conv_mode must be one of {CONV_MODES}")
        if self.mixing == "mhsa" and self.d_model % self.num_heads:
            raise ValidationError("d_model must be divisible by num_heads")
        f = self.subsampling_factor
        if f < 1 or f & (f - 1):
            raise ValidationError("subsampling_factor must be a power of two")
        if self.input_dim < 1 or self.d_model < 1:
            raise ValidationError("dimensions must be positive")

    @property
    def ffn_dim(self) -> int:
        return int(round(self.d_model * self.ffn_expansion))

    @property
    def local_width(self) -> int:
        return self.d_model if self.local_dim is None else self.local_dim

    @property
    def summary_width(self) -> int:
        return self.d_model if self.summary_dim is None else self.summary_dim

    @property
    def output_frame_shift_ms(self) -> float:
        return self.frame_shift_ms * self.subsampling_factor

    @property
    def left_taps(self) -> int:
        """Frames of history the depthwise convolution reads."""
        if self.conv_mode == "causal":
            return self.conv_kernel - 1
        return (self.conv_kernel - 1) // 2


# -- parameters --------------------------------------------------------------------

@dataclass
class FeedForward:
    norm: Norm
    up: Linear
    down: Linear


@dataclass
class ConvModule:
    norm: Norm
    pointwise_in: Linear        # d -> 2d, followed by GLU
    depthwise: np.ndarray       # (K, d)
    depthwise_bias: np.ndarray  # (d,)
    post_norm: Norm
    pointwise_out: Linear


@dataclass
class ConformerBlock:
    ffn1: FeedForward
    mix_norm: Norm
    mixing: SummaryMixingParams | MhsaParams
    conv: ConvModule
    ffn2: FeedForward
    final_norm: Norm


@dataclass
class StridedStage:
    """Halves the frame rate: ``y[t] = SiLU(w[0]*x[2t] + w[1]*x[2t+1] + b)``."""

    weight: np.ndarray  # (2, d)
    bias: np.ndarray


@dataclass
class Frontend:
    proj: Linear
    stages: list[StridedStage] = field(default_factory=list)


@dataclass
class EncoderParams:
    config: EncoderConfig
    frontend: Frontend
    blocks: list[ConformerBlock]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        _flatten(self.frontend, "frontend", out)
        _flatten(self.blocks, "blocks", out)
        return out

    def load_named_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        expected = self.named_tensors()
        missing = expected.keys() - tensors.keys()
        extra = tensors.keys() - expected.keys()
        if missing or extra:
            raise ValidationError(f"tensor names mismatch: missing={sorted(missing)[:5]} "
                                  f"unexpected={sorted(extra)[:5]}")
        dtype = self.config.precision.compute_dtype
        for name, ref in expected.items():
            arr = np.asarray(tensors[name])
            if arr.shape != ref.shape:
                raise DimensionError(f"{name}: shape {arr.shape}, expected {ref.shape}")
            _assign(self, name, arr.astype(dtype))

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.named_tensors().values())


def _flatten(obj, prefix: str, out: dict) -> None:
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            _flatten(item, f"{prefix}.{i}", out)
    elif is_dataclass(obj):
        for f in fields(obj):
            _flatten(getattr(obj, f.name), f"{prefix}.{f.name}", out)


def _assign(root, name: str, value: np.ndarray) -> None:
    *path, last = name.split(".")
    obj = root
    for part in path:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    setattr(obj, last, value)


def init_encoder(cfg: EncoderConfig, seed: int = 0, scale: float = 1.0) -> EncoderParams:
    """Random encoder weights; ``scale`` multiplies every weight matrix."""
    rng = np.random.default_rng(seed)
    dtype = cfg.precision.compute_dtype
    d = cfg.d_model

    def lin(i, o):
        layer = Linear.random(rng, i, o, dtype)
        layer.weight *= dtype.type(scale)
        return layer

    def norm():
        return Norm(1.0 + 0.1 * rng.standard_normal(d).astype(dtype),
                    0.1 * rng.standard_normal(d).astype(dtype))

    def ffn():
        return FeedForward(norm(), lin(d, cfg.ffn_dim), lin(cfg.ffn_dim, d))

    blocks = []
    for _ in range(cfg.num_blocks):
        if cfg.mixing == "summary":
            mixing = SummaryMixingParams(lin(d, cfg.local_width), lin(d, cfg.summary_width),
                                         lin(cfg.local_width + cfg.summary_width, d))
        else:
            mixing = MhsaParams(cfg.num_heads, lin(d, d), lin(d, d), lin(d, d), lin(d, d),
                                positional=cfg.positional)
        dw = (rng.standard_normal((cfg.conv_kernel, d)) / np.sqrt(cfg.conv_kernel)).astype(dtype)
        conv = ConvModule(norm(), lin(d, 2 * d), dw * dtype.type(scale),
                          (0.01 * rng.standard_normal(d)).astype(dtype), norm(), lin(d, d))
        blocks.append(ConformerBlock(ffn(), norm(), mixing, conv, ffn(), norm()))

    stages = []
    f = cfg.subsampling_factor
    while f > 1:
        stages.append(StridedStage((rng.standard_normal((2, d)) / np.sqrt(2)).astype(dtype),
                                   (0.01 * rng.standard_normal(d)).astype(dtype)))
        f //= 2
    return EncoderParams(cfg, Frontend(lin(cfg.input_dim, d), stages), blocks)


def zero_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Encoder with every weight and bias zero and identity layer norms."""
    params = init_encoder(cfg, seed=0)
    for name, t in params.named_tensors().items():
        if name.endswith("gain"):
            t[...] = 1
        else:
            t[...] = 0
    return params


# -- convolutions -------------------------------------------------------------------

def _as_kernel(weight: np.ndarray, width: int) -> np.ndarray:
    w = np.asarray(weight)
    if w.ndim == 1:
        w = np.repeat(w[:, None], width, axis=1)
    if w.ndim != 2 or w.shape[1] != width:
        raise DimensionError(f"depthwise kernel shape {w.shape} does not match width {width}")
    return w


def _centered_depthwise(Xw: np.ndarray, w: np.ndarray, first: int, count: int,
                        lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Centered depthwise conv on window rows ``first .. first+count-1``.

    Tap ``t + k`` contributes only when ``lo[i] <= t + k < hi[i]`` (window
    coordinates); everything else is zero-filled.
    """
    N, D = Xw.shape
    K = w.shape[0]
    r = (K - 1) // 2
    out = np.zeros((count, D), dtype=Xw.dtype)
    rows = np.arange(first, first + count)
    for j in range(K):
        k = j - r
        a = max(0, -(first + k))
        b = min(count, N - (first + k))
        if a >= b:
            continue
        src = rows[a:b] + k
        valid = (src >= lo[a:b]) & (src < hi[a:b])
        if not valid.any():
            continue
        term = Xw[first + k + a: first + k + b] * w[j]
        np.add(out[a:b], term, out=out[a:b], where=valid[:, None])
    nk.record_ops(count * D * K)
    return out


def _causal_depthwise(Xw: np.ndarray, w: np.ndarray, first: int, count: int) -> np.ndarray:
    """Rows ``first..first+count-1`` of a causal conv; needs ``first >= K-1``."""
    K = w.shape[0]
    out = np.zeros((count, Xw.shape[1]), dtype=Xw.dtype)
    for j in range(K):
        start = first - (K - 1) + j
        out += Xw[start:start + count] * w[j]
    nk.record_ops(count * Xw.shape[1] * K)
    return out


def dcconv_forward(X: np.ndarray, mask: VisibilityMask | None, weight: np.ndarray,
                   bias: np.ndarray | None = None) -> np.ndarray:
    """Dynamic chunk convolution: centered depthwise kernel, taps gated by ``mask``.

    ``mask=None`` gives a standard zero-padded centered convolution.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        return dcconv_forward(X[:, None], mask, weight, bias)[:, 0]
    T, D = X.shape
    w = _as_kernel(weight, D)
    if w.shape[0] % 2 == 0:
        raise ValidationError("dynamic chunk convolution needs an odd kernel")
    if mask is None:
        lo, hi = np.zeros(T, int), np.full(T, T)
    else:
        if mask.T != T:
            raise DimensionError(f"mask built for T={mask.T} but input has {T} frames")
        lo, hi = mask.starts, mask.ends
    out = _centered_depthwise(X, w.astype(X.dtype, copy=False), 0, T, lo, hi)
    if bias is not None:
        out += bias
    return out


def causal_conv_forward(X: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Causal depthwise conv: the current frame is the rightmost tap, left zero-padding."""
    X = np.asarray(X)
    if X.ndim == 1:
        return causal_conv_forward(X[:, None], weight, bias)[:, 0]
    T, D = X.shape
    w = _as_kernel(weight, D)
    if w.shape[0] % 2 == 0:
        raise ValidationError("convolution kernel must be odd")
    K = w.shape[0]
    padded = np.concatenate([np.zeros((K - 1, D), X.dtype), X])
    out = _causal_depthwise(padded, w.astype(X.dtype, copy=False), K - 1, T)
    if bias is not None:
        out += bias
    return out


# -- block pieces -------------------------------------------------------------------

def _ffn(x, p: FeedForward, policy):
    h = nk.activations(p.up(p.norm(x, policy), policy), "silu")
    return p.down(h, policy)


def _conv_pre(x, cm: ConvModule, policy):
    return nk.activations(cm.pointwise_in(cm.norm(x, policy), policy), "glu")


def _conv_post(h, cm: ConvModule, policy):
    h += cm.depthwise_bias
    h = nk.activations(cm.post_norm(h, policy), "silu")
    return cm.pointwise_out(h, policy)


def _half_residual(x, delta):
    delta *= 0.5
    delta += x
    return delta


def conformer_block_forward(X: np.ndarray, mask: VisibilityMask | None, block: ConformerBlock,
                            cfg: EncoderConfig) -> np.ndarray:
    """One block over a whole utterance; ``mask=None`` means full context."""
    policy = cfg.precision
    T = X.shape[0]
    if mask is None:
        mask = build_mask(T, ChunkSpec.full())
    x = _half_residual(X, _ffn(X, block.ffn1, policy))

    y = block.mix_norm(x, policy)
    if cfg.mixing == "summary":
        x += summary_mixing_masked(y, mask, block.mixing, policy)
    else:
        x += mhsa_masked(y, mask, block.mixing, policy)
    del y

    h = _conv_pre(x, block.conv, policy)
    w = block.conv.depthwise
    if cfg.conv_mode == "causal":
        h = causal_conv_forward(h, w)
    else:
        h = dcconv_forward(h, None if cfg.conv_mode == "standard" else mask, w)
    x += _conv_post(h, block.conv, policy)
    del h

    x = _half_residual(x, _ffn(x, block.ffn2, policy))
    return block.final_norm(x, policy)


def frontend_forward(X: np.ndarray, fe: Frontend, policy) -> np.ndarray:
    x = fe.proj(X, policy)
    for stage in fe.stages:
        n = (x.shape[0] // 2) * 2
        y = x[0:n:2] * stage.weight[0]
        y += x[1:n:2] * stage.weight[1]
        y += stage.bias
        x = nk.activations(y, "silu")
    return x


def _frames_of(feat) -> np.ndarray:
    return feat.frames if isinstance(feat, FeatureSequence) else np.asarray(feat)


def encoder_forward_offline(feat: FeatureSequence | np.ndarray, spec: ChunkSpec | None,
                            params: EncoderParams) -> np.ndarray:
    """Whole-utterance encoder output under the chunk mask built from ``spec``."""
    cfg = params.config
    X = _frames_of(feat)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("encoder input must be a non-empty T x D matrix")
    if X.shape[1] != cfg.input_dim:
        raise DimensionError(f"expected {cfg.input_dim}-dim features, got {X.shape[1]}")
    policy = cfg.precision
    x = frontend_forward(X.astype(policy.compute_dtype, copy=False), params.frontend, policy)
    if x.shape[0] == 0:
        raise ValidationError("input shorter than the subsampling factor")
    mask = build_mask(x.shape[0], spec if spec is not None else ChunkSpec.full())
    for block in params.blocks:
        x = conformer_block_forward(x, mask, block, cfg)
    return x


def _worker_cap() -> int:
    try:
        return max(1, int(os.environ.get("SUMMIX_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def encoder_forward_batch(feats: list, spec: ChunkSpec | None, params: EncoderParams,
                          workers: int | None = None) -> list[np.ndarray]:
    """Offline forward over several utterances sharing one chunk spec."""
    workers = min(workers or _worker_cap(), _worker_cap(), max(1, len(feats)))
    if workers == 1:
        return [encoder_forward_offline(f, spec, params) for f in feats]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda f: encoder_forward_offline(f, spec, params), feats))


# -- streaming ------------------------------------------------------------------------

@dataclass
class BlockState:
    mixing: SummaryState | KvCache
    conv_buffer: np.ndarray    # most recent GLU outputs, at most cfg.left_taps rows

    @property
    def nbytes(self) -> int:
        return self.mixing.nbytes + self.conv_buffer.nbytes


@dataclass
class StreamingContext:
    """Mutable per-stream inference state. One stream, one owner."""

    config: EncoderConfig
    spec: ChunkSpec
    blocks: list[BlockState]
    frames_consumed: int = 0
    pending_input: np.ndarray | None = None
    pending_frames: np.ndarray | None = None

    @property
    def chunk_size(self) -> int:
        return self.spec.chunk_size

    @property
    def nbytes(self) -> int:
        """Bytes held by the carried state (mixing state plus conv buffers)."""
        return sum(b.nbytes for b in self.blocks)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StreamingContext):
            return NotImplemented
        if (self.config, self.spec, self.frames_consumed) != (other.config, other.spec,
                                                                 other.frames_consumed):
            return False
        for a, b in zip(self.blocks, other.blocks):
            if not np.array_equal(a.conv_buffer, b.conv_buffer):
                return False
            if isinstance(a.mixing, SummaryState):
                if a.mixing.frame_count != b.mixing.frame_count or \
                        not np.array_equal(a.mixing.running_sum, b.mixing.running_sum):
                    return False
            elif not (np.array_equal(a.mixing.keys, b.mixing.keys)
                      and np.array_equal(a.mixing.values, b.mixing.values)):
                return False
        return True


def init_streaming_context(cfg: EncoderConfig, spec: ChunkSpec) -> StreamingContext:
    if spec.is_full:
        raise ValidationError("streaming needs a finite chunk size")
    if cfg.conv_mode == "standard":
        raise ValidationError("a standard centered convolution reads future chunks and cannot stream")
    dtype = cfg.precision.compute_dtype
    blocks = []
    for _ in range(cfg.num_blocks):
        if cfg.mixing == "summary":
            state = SummaryState(cfg.summary_width, spec.left_context, cfg.precision.accumulate_dtype)
        else:
            capacity = None if spec.infinite_left else spec.left_context * spec.chunk_size
            state = KvCache(cfg.num_heads, cfg.d_model // cfg.num_heads, capacity, dtype)
        blocks.append(BlockState(state, np.zeros((0, cfg.d_model), dtype)))
    return StreamingContext(cfg, spec, blocks,
                            pending_input=np.zeros((0, cfg.input_dim), dtype),
                            pending_frames=np.zeros((0, cfg.d_model), dtype))


def _block_step(x: np.ndarray, state: BlockState, block: ConformerBlock, cfg: EncoderConfig,
                spec: ChunkSpec, abs_start: int) -> np.ndarray:
    policy = cfg.precision
    n = x.shape[0]
    x = _half_residual(x, _ffn(x, block.ffn1, policy))

    y = block.mix_norm(x, policy)
    if cfg.mixing == "summary":
        delta, _ = summary_mixing_step(y, state.mixing, block.mixing, policy)
    else:
        delta, _ = mhsa_step(y, state.mixing, block.mixing, abs_start, policy)
    x += delta

    h = _conv_pre(x, block.conv, policy)
    buf = state.conv_buffer
    window = np.concatenate([buf, h]) if len(buf) else h
    keep = cfg.left_taps
    new_buffer = window[max(0, window.shape[0] - keep):].copy() if keep else buf
    w = block.conv.depthwise
    if cfg.conv_mode == "causal":
        pad = keep - len(buf)
        if pad > 0:
            window = np.concatenate([np.zeros((pad, h.shape[1]), h.dtype), window])
        conv = _causal_depthwise(window, w, keep, n)
    else:
        chunk = abs_start // spec.chunk_size
        first_visible = 0 if spec.infinite_left else max(chunk - spec.left_context, 0) * spec.chunk_size
        base = abs_start - len(buf)   # absolute index of window row 0
        lo = np.full(n, max(first_visible - base, 0))
        hi = np.full(n, window.shape[0])
        conv = _centered_depthwise(window, w, len(buf), n, lo, hi)
    state.conv_buffer = new_buffer
    x += _conv_post(conv, block.conv, policy)

    x = _half_residual(x, _ffn(x, block.ffn2, policy))
    return block.final_norm(x, policy)


def encoder_forward_streaming(chunk: np.ndarray, ctx: StreamingContext, params: EncoderParams,
                              final: bool = False) -> tuple[np.ndarray, StreamingContext]:
    """Feed input frames; return encoder outputs for every chunk completed so far.

    Input is buffered until a whole chunk of post-subsampling frames is
    available. ``final=True`` flushes a trailing partial chunk. ``ctx`` is
    updated in place and returned.
    """
    cfg = params.config
    if ctx.config != cfg:
        raise ValidationError("streaming context was created for a different encoder config")
    chunk = np.asarray(chunk)
    if chunk.ndim != 2 or chunk.shape[1] != cfg.input_dim:
        raise DimensionError(f"chunk must be n x {cfg.input_dim}")
    if chunk.shape[0] == 0 and not final:
        raise ValidationError("empty chunk")
    policy = cfg.precision
    raw = np.concatenate([ctx.pending_input, chunk.astype(policy.compute_dtype, copy=False)])
    usable = (raw.shape[0] // cfg.subsampling_factor) * cfg.subsampling_factor
    ctx.pending_input = raw[usable:].copy()
    if usable:
        new = frontend_forward(raw[:usable], params.frontend, policy)
        pending = np.concatenate([ctx.pending_frames, new]) if len(ctx.pending_frames) else new
    else:
        pending = ctx.pending_frames

    C = ctx.spec.chunk_size
    outputs = []
    pos = 0
    while pending.shape[0] - pos >= C or (final and pending.shape[0] > pos):
        x = pending[pos:pos + C]
        for block, state in zip(params.blocks, ctx.blocks):
            x = _block_step(x, state, block, cfg, ctx.spec, ctx.frames_consumed)
        outputs.append(x)
        ctx.frames_consumed += x.shape[0]
        pos += x.shape[0]
    ctx.pending_frames = pending[pos:].copy()
    if final:
        ctx.pending_input = ctx.pending_input[:0]
    if outputs:
        return np.concatenate(outputs), ctx
    return np.zeros((0, cfg.d_model), policy.compute_dtype), ctx


def stream_utterance(feat: FeatureSequence | np.ndarray, spec: ChunkSpec, params: EncoderParams,
                     feed_frames: int | None = None) -> np.ndarray:
    """Run a whole utterance through the streaming path in ``feed_frames`` pieces."""
    X = _frames_of(feat)
    cfg = params.config
    ctx = init_streaming_context(cfg, spec)
    step = feed_frames or spec.chunk_size * cfg.subsampling_factor
    outs = []
    for i in range(0, X.shape[0], step):
        out, ctx = encoder_forward_streaming(X[i:i + step], ctx, params)
        outs.append(out)
    out, ctx = encoder_forward_streaming(X[:0], ctx, params, final=True)
    outs.append(out)
    return np.concatenate(outs)
