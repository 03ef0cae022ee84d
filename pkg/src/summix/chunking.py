"""Dynamic-chunk visibility masks and the chunk sampling schedule.

Frame ``t`` may use frame ``u`` iff ``u``'s chunk lies at or before ``t``'s
chunk and at most ``left_context`` chunks behind it::

    chunk(t) - L <= chunk(u) <= chunk(t),   chunk(i) = i // C

Because of that structure the visible set of every frame is one contiguous
interval ``[start, end)``, which the rest of the package relies on to avoid
materialising the dense ``T x T`` grid unless it is actually needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ChunkSpec:
    """Chunk size ``C`` in frames and left context ``L`` in chunks.

    ``chunk_size=None`` is full context (``C == T`` for whatever ``T`` the mask is
    built for). ``left_context=None`` is infinite left context.
    """

    chunk_size: int | None = None
    left_context: int | None = None

    def __post_init__(self):
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValidationError(f"chunk size must be >= 1, got {self.chunk_size}")
        if self.left_context is not None and self.left_context < 0:
            raise ValidationError(f"left context must be >= 0, got {self.left_context}")

    @classmethod
    def full(cls) -> "ChunkSpec":
        return cls(None, None)

    @classmethod
    def streaming(cls, chunk_size: int, left_context: int | None = None) -> "ChunkSpec":
        return cls(chunk_size, left_context)

    @property
    def is_full(self) -> bool:
        return self.chunk_size is None

    @property
    def infinite_left(self) -> bool:
        return self.left_context is None

    def resolve_chunk(self, T: int) -> int:
        return T if self.chunk_size is None else self.chunk_size

    def describe(self) -> str:
        c = "full" if self.is_full else str(self.chunk_size)
        l = "inf" if self.infinite_left else str(self.left_context)
        return f"C={c},L={l}"


class VisibilityMask:
    """The ``T x T`` boolean visibility structure for one :class:`ChunkSpec`.

    The dense grid is only built on first access to :attr:`bits`.
    """

    def __init__(self, T: int, spec: ChunkSpec):
        self.T = T
        self.spec = spec
        self.chunk = spec.resolve_chunk(T)
        idx = np.arange(T)
        chunk_idx = idx // self.chunk
        if spec.infinite_left:
            first_chunk = np.zeros_like(chunk_idx)
        else:
            first_chunk = np.maximum(chunk_idx - spec.left_context, 0)
        self.starts = first_chunk * self.chunk
        self.ends = np.minimum((chunk_idx + 1) * self.chunk, T)

    @property
    def is_full(self) -> bool:
        return self.chunk >= self.T

    @property
    def num_chunks(self) -> int:
        return -(-self.T // self.chunk)

    def chunk_of(self, t):
        return np.asarray(t) // self.chunk

    def visible_range(self, t: int) -> tuple[int, int]:
        """Half-open interval of frames visible from frame ``t``."""
        return int(self.starts[t]), int(self.ends[t])

    def visible(self, t, u):
        """Vectorised ``m[t, u]`` evaluated from chunk indices (no dense grid)."""
        t = np.asarray(t)
        u = np.asarray(u)
        ct = t // self.chunk
        cu = u // self.chunk
        ok = (cu <= ct) & (u >= 0) & (u < self.T)
        if not self.spec.infinite_left:
            ok &= cu >= ct - self.spec.left_context
        return ok

    @cached_property
    def bits(self) -> np.ndarray:
        idx = np.arange(self.T)
        return (idx[None, :] >= self.starts[:, None]) & (idx[None, :] < self.ends[:, None])

    def to_text(self) -> str:
        return "\n".join("".join("1" if b else "0" for b in row) for row in self.bits)

    def __repr__(self) -> str:
        return f"VisibilityMask(T={self.T}, {self.spec.describe()})"


def build_mask(T: int, spec: ChunkSpec) -> VisibilityMask:
    if T < 1:
        raise ValidationError(f"mask needs T >= 1, got {T}")
    return VisibilityMask(T, spec)


def visible_frame_count(mask: VisibilityMask, t: int) -> int:
    if not 0 <= t < mask.T:
        raise ValidationError(f"frame index {t} out of range for T={mask.T}")
    start, end = mask.visible_range(t)
    return end - start


def ms_to_frames(ms: float, frame_shift_ms: float) -> int:
    if ms <= 0 or frame_shift_ms <= 0:
        raise ValidationError("durations must be positive")
    return max(1, int(math.floor(ms / frame_shift_ms + 1e-9)))


@dataclass(frozen=True)
class DctSchedule:
    """Sampling distribution over chunk specs used for dynamic chunk training."""

    streaming_probability: float = 0.6
    chunk_range_ms: tuple[float, float] = (320.0, 1280.0)
    left_context_range_ms: tuple[float, float] = (320.0, 1280.0)
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.streaming_probability <= 1.0:
            raise ValidationError("streaming_probability must be within [0, 1]")
        for lo, hi in (self.chunk_range_ms, self.left_context_range_ms):
            if not 0 < lo <= hi:
                raise ValidationError("ranges must be positive with min <= max")
        if self.frame_shift_ms <= 0:
            raise ValidationError("frame_shift_ms must be positive")


def sample_chunk_spec(T: int, sched: DctSchedule, rng: np.random.Generator) -> ChunkSpec:
    """Draw the chunk configuration shared by one training batch."""
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if rng.random() >= sched.streaming_probability:
        return ChunkSpec.full()
    lo = ms_to_frames(sched.chunk_range_ms[0], sched.frame_shift_ms)
    hi = ms_to_frames(sched.chunk_range_ms[1], sched.frame_shift_ms)
    chunk = min(max(int(rng.integers(lo, hi + 1)), 1), T)
    lo = ms_to_frames(sched.left_context_range_ms[0], sched.frame_shift_ms)
    hi = ms_to_frames(sched.left_context_range_ms[1], sched.frame_shift_ms)
    left_frames = int(rng.integers(lo, hi + 1))
    return ChunkSpec(chunk, -(-left_frames // chunk))
