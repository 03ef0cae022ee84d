"""Transducer head: LSTM predictor, additive joiner, RNN-T loss, greedy decoding.

The loss runs the usual forward/backward recursion over the ``T x (U+1)``
lattice in log space. Lattice storage uses the policy's compute width and all
log-sum-exp accumulation uses its accumulate width, so an ``f32`` policy halves
the lattice footprint relative to ``f64``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numkernel as nk
from .errors import DimensionError, ValidationError
from .numkernel import Linear, LstmWeights, PrecisionPolicy

BLANK = 0
MAX_SYMBOLS_PER_FRAME = 10


@dataclass
class PredictorParams:
    embedding: np.ndarray   # (V, E); row BLANK doubles as the start symbol
    lstm: LstmWeights

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden(self) -> int:
        return self.lstm.hidden


@dataclass
class JoinerParams:
    enc_proj: Linear
    pred_proj: Linear
    output: Linear
    activation: str = "tanh"


@dataclass
class TransducerParams:
    predictor: PredictorParams
    joiner: JoinerParams

    @property
    def vocab_size(self) -> int:
        return self.joiner.output.out_dim


def init_transducer(vocab_size: int, enc_dim: int, pred_dim: int = 32, embed_dim: int = 16,
                    joint_dim: int = 32, seed: int = 0, dtype=np.float64) -> TransducerParams:
    rng = np.random.default_rng(seed)

    def rand(*shape, scale=1.0):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    lstm = LstmWeights(rand(embed_dim, 4 * pred_dim, scale=embed_dim ** -0.5),
                       rand(pred_dim, 4 * pred_dim, scale=pred_dim ** -0.5),
                       rand(4 * pred_dim, scale=0.1))
    predictor = PredictorParams(rand(vocab_size, embed_dim), lstm)
    joiner = JoinerParams(Linear.random(rng, enc_dim, joint_dim, dtype),
                          Linear.random(rng, pred_dim, joint_dim, dtype),
                          Linear.random(rng, joint_dim, vocab_size, dtype, scale=2.0 / math.sqrt(joint_dim)))
    return TransducerParams(predictor, joiner)


# -- predictor / joiner ------------------------------------------------------------------

@dataclass
class PredictorState:
    h: np.ndarray
    c: np.ndarray


def predictor_forward(tokens, params: PredictorParams, state: PredictorState | None = None
                      ) -> tuple[np.ndarray, PredictorState]:
    """Run the label-history LSTM.

    Without ``state`` the start symbol is fed first, so the output has
    ``len(tokens) + 1`` rows and row 0 is the start-context output. With a
    ``state`` (continuing an earlier call) only ``tokens`` are fed.
    """
    tokens = [int(t) for t in tokens]
    V = params.vocab_size
    for t in tokens:
        if not 0 <= t < V:
            raise ValidationError(f"token id {t} outside vocabulary of size {V}")
    H = params.hidden
    dtype = params.embedding.dtype
    if state is None:
        state = PredictorState(np.zeros(H, dtype), np.zeros(H, dtype))
        tokens = [BLANK] + tokens
    h, c = state.h, state.c
    rows = []
    for tok in tokens:
        h, c = nk.lstm_cell(params.embedding[tok], h, c, params.lstm)
        rows.append(h)
    out = np.stack(rows) if rows else np.zeros((0, H), dtype)
    return out, PredictorState(h, c)


def joiner(enc_t: np.ndarray, pred_u: np.ndarray, params: JoinerParams) -> np.ndarray:
    """``output(act(enc_proj(enc) + pred_proj(pred)))``; broadcasts over leading axes."""
    if np.shape(enc_t)[-1] != params.enc_proj.in_dim:
        raise DimensionError("encoder vector width does not match the joiner")
    if np.shape(pred_u)[-1] != params.pred_proj.in_dim:
        raise DimensionError("predictor vector width does not match the joiner")
    a = params.enc_proj(enc_t)
    b = params.pred_proj(pred_u)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError("joiner projections disagree in width")
    return params.output(nk.activations(a + b, params.activation))


def joint_logits(enc: np.ndarray, pred: np.ndarray, params: JoinerParams) -> np.ndarray:
    """Full ``T x (U+1) x V`` logit lattice for one utterance."""
    a = params.enc_proj(enc)[:, None, :]
    b = params.pred_proj(pred)[None, :, :]
    return params.output(nk.activations(a + b, params.activation))


# -- loss ------------------------------------------------------------------------------

@dataclass
class RnntLattice:
    """Logits and log-probabilities over ``T x (U+1) x V``; blank is id 0."""

    logits: np.ndarray
    log_probs: np.ndarray = field(init=False)
    policy: PrecisionPolicy = nk.F64

    def __post_init__(self):
        if np.ndim(self.logits) != 3:
            raise DimensionError("lattice logits must be T x (U+1) x V")
        dtype = self.policy.compute_dtype
        self.logits = np.asarray(self.logits).astype(dtype)
        acc = self.logits.astype(self.policy.accumulate_dtype, copy=False)
        self.log_probs = nk.log_softmax(acc, axis=-1).astype(dtype)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.logits.shape

    @property
    def nbytes(self) -> int:
        return self.logits.nbytes + self.log_probs.nbytes


@dataclass
class TransducerLossResult:
    neg_log_likelihood: float
    grad_logits: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def _check_targets(targets, U: int, V: int) -> list[int]:
    targets = [int(t) for t in targets]
    if len(targets) != U:
        raise DimensionError(f"lattice has U={U} but {len(targets)} targets were given")
    for t in targets:
        if t == BLANK:
            raise ValidationError("targets must not contain the blank id")
        if not 0 < t < V:
            raise ValidationError(f"target id {t} outside vocabulary of size {V}")
    return targets


def rnnt_loss(lattice: RnntLattice | np.ndarray, targets, policy: PrecisionPolicy | None = None
              ) -> TransducerLossResult:
    """Negative log-likelihood of ``targets`` and its gradient w.r.t. the logits."""
    if not isinstance(lattice, RnntLattice):
        lattice = RnntLattice(lattice, policy=policy or nk.F64)
    elif policy is not None and policy != lattice.policy:
        lattice = RnntLattice(lattice.logits, policy=policy)
    policy = lattice.policy
    acc = policy.accumulate_dtype
    T, U1, V = lattice.shape
    U = U1 - 1
    if T < 1:
        raise DimensionError("lattice needs at least one frame")
    y = _check_targets(targets, U, V)

    lp = lattice.log_probs
    blank = lp[:, :, BLANK].astype(acc)
    emit = np.empty((T, U), acc)
    for u in range(U):
        emit[:, u] = lp[:, u, y[u]]

    ninf = acc.type(-np.inf)
    lse = np.logaddexp
    alpha = np.full((T, U1), ninf, acc)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else ninf
            b = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else ninf
            alpha[t, u] = lse(a, b)

    beta = np.full((T, U1), ninf, acc)
    beta[T - 1, U] = blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            a = beta[t + 1, u] + blank[t, u] if t < T - 1 else ninf
            b = beta[t, u + 1] + emit[t, u] if u < U else ninf
            beta[t, u] = lse(a, b)

    log_like = alpha[T - 1, U] + blank[T - 1, U]

    # d nll / d log_probs, then through log-softmax
    grad_lp = np.zeros((T, U1, V), acc)
    flow_blank = alpha + blank
    flow_blank[:-1] += beta[1:]
    flow_blank[-1, :U] = -np.inf      # blank at the last frame must end at (T-1, U)
    grad_lp[:, :, BLANK] = -np.exp(flow_blank - log_like)
    if U:
        flow_emit = alpha[:, :U] + emit + beta[:, 1:]
        occ_emit = -np.exp(flow_emit - log_like)
        for u in range(U):
            grad_lp[:, u, y[u]] += occ_emit[:, u]
    occupancy = np.exp(alpha + beta - log_like)
    probs = np.exp(lp.astype(acc))
    grad = grad_lp + probs * occupancy[:, :, None]
    return TransducerLossResult(float(-log_like), grad.astype(policy.compute_dtype), alpha, beta)


def rnnt_paths(T: int, U: int):
    """Every alignment as a string of ``'b'``/``'e'`` moves ending in a final blank."""
    for emit_pos in itertools.combinations(range(T - 1 + U), U):
        moves = ["b"] * (T - 1 + U)
        for p in emit_pos:
            moves[p] = "e"
        yield "".join(moves) + "b"


def rnnt_loss_bruteforce(lattice: RnntLattice | np.ndarray, targets, max_frames: int = 6,
                         max_targets: int = 4) -> float:
    """Exact NLL by enumerating all alignments (tiny lattices only)."""
    if isinstance(lattice, RnntLattice):
        logits = lattice.logits.astype(np.float64)
    else:
        logits = np.asarray(lattice, dtype=np.float64)
    T, U1, V = logits.shape
    U = U1 - 1
    if T > max_frames or U > max_targets:
        raise ValidationError(f"brute force limited to T<={max_frames}, U<={max_targets}")
    y = _check_targets(targets, U, V)
    logp = logits - logsumexp(logits, axis=-1, keepdims=True)
    scores = []
    for path in rnnt_paths(T, U):
        t = u = 0
        s = 0.0
        for move in path:
            if move == "b":
                s += logp[t, u, BLANK]
                t += 1
            else:
                s += logp[t, u, y[u]]
                u += 1
        scores.append(s)
    scores = np.array(scores)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# -- greedy decoding ---------------------------------------------------------------------

@dataclass
class DecodeState:
    predictor: PredictorState
    pred_out: np.ndarray
    last_token: int = BLANK
    hypothesis: list[int] = field(default_factory=list)


def init_decode_state(params: TransducerParams) -> DecodeState:
    out, state = predictor_forward([], params.predictor)
    return DecodeState(state, out[0])


def greedy_decode_streaming(enc_chunk: np.ndarray, state: DecodeState, params: TransducerParams,
                            max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> tuple[list[int], DecodeState]:
    """Greedy decode one chunk of encoder frames, continuing from ``state``.

    Returns the ids emitted for this chunk. ``state`` is updated in place.
    """
    enc_chunk = np.atleast_2d(np.asarray(enc_chunk))
    emitted: list[int] = []
    for frame in enc_chunk:
        enc_proj = params.joiner.enc_proj(frame)
        for _ in range(max_symbols):
            hidden = nk.activations(enc_proj + params.joiner.pred_proj(state.pred_out),
                                    params.joiner.activation)
            k = int(np.argmax(params.joiner.output(hidden)))
            if k == BLANK:
                break
            out, state.predictor = predictor_forward([k], params.predictor, state.predictor)
            state.pred_out = out[0]
            state.last_token = k
            state.hypothesis.append(k)
            emitted.append(k)
    return emitted, state


def greedy_decode(enc: np.ndarray, params: TransducerParams,
                  max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    ids, _ = greedy_decode_streaming(enc, init_decode_state(params), params, max_symbols)
    return ids
