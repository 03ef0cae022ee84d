"""Little-endian binary formats for feature files and encoder checkpoints.

Feature file (``.smxf``)::

    offset  type      field
    0       4 bytes   magic b"SMXF"
    4       u32       version (1)
    8       u32       T, number of frames
    12      u32       D, feature dimension
    16      f32       frame_shift_ms
    20      f32[T*D]  frames, row-major

Checkpoint (``.smxc``)::

    4 bytes  magic b"SMXC"
    u32      version (1)
    config   see CONFIG_STRUCT below, in field order:
             input_dim u32, num_blocks u32, d_model u32, mixing u8 (0 summary, 1 mhsa),
             num_heads u32, conv_kernel u32, ffn_expansion f32,
             conv_mode u8 (0 dynamic_chunk, 1 causal, 2 standard), subsampling_factor u32,
             local_dim u32 (0 = d_model), summary_dim u32 (0 = d_model),
             positional u8 (0 none, 1 absolute), compute_width u8 (0 f32, 1 f64),
             accumulate_width u8, frame_shift_ms f32
    u32      tensor count
    then per tensor:
             name length u16, name (utf-8), rank u8, dims u32[rank], data f32[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .encoder import CONV_MODES, MIXING_KINDS, EncoderConfig, EncoderParams, FeatureSequence, init_encoder
from .errors import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError
from .numkernel import PrecisionPolicy

FEATURE_MAGIC = b"SMXF"
CHECKPOINT_MAGIC = b"SMXC"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1

FEATURE_HEADER = struct.Struct("<4sIIIf")
CONFIG_STRUCT = struct.Struct("<IIIBIIfBIIIBBBf")
_WIDTH_CODES = ("f32", "f64")
_POSITIONAL = ("none", "absolute")


def save_feature_file(path, feat: FeatureSequence | np.ndarray, frame_shift_ms: float = 10.0) -> None:
    if isinstance(feat, FeatureSequence):
        frames, frame_shift_ms = feat.frames, feat.frame_shift_ms
    else:
        frames = np.asarray(feat)
    if frames.ndim != 2:
        raise FormatError("features must be a T x D matrix")
    T, D = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D, frame_shift_ms))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_feature_file(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (bad magic)")
    if len(data) < FEATURE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, T, D, shift = FEATURE_HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported feature file version {version}")
    body = data[FEATURE_HEADER.size:]
    expected = T * D * 4
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: body has {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes after body")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float32)
    return FeatureSequence(frames, float(shift))


def _pack_config(cfg: EncoderConfig) -> bytes:
    return CONFIG_STRUCT.pack(
        cfg.input_dim, cfg.num_blocks, cfg.d_model, MIXING_KINDS.index(cfg.mixing), cfg.num_heads,
        cfg.conv_kernel, cfg.ffn_expansion, CONV_MODES.index(cfg.conv_mode), cfg.subsampling_factor,
        cfg.local_dim or 0, cfg.summary_dim or 0, _POSITIONAL.index(cfg.positional),
        _WIDTH_CODES.index(cfg.precision.compute_width),
        _WIDTH_CODES.index(cfg.precision.accumulate_width), cfg.frame_shift_ms)


def _unpack_config(fields) -> EncoderConfig:
    (input_dim, num_blocks, d_model, mixing, heads, kernel, expansion, conv_mode, sub,
     local_dim, summary_dim, positional, compute, accumulate, shift) = fields
    try:
        return EncoderConfig(
            input_dim=input_dim, num_blocks=num_blocks, d_model=d_model, mixing=MIXING_KINDS[mixing],
            num_heads=heads, conv_kernel=kernel, ffn_expansion=float(expansion),
            conv_mode=CONV_MODES[conv_mode], subsampling_factor=sub, local_dim=local_dim or None,
            summary_dim=summary_dim or None, positional=_POSITIONAL[positional],
            precision=PrecisionPolicy(_WIDTH_CODES[compute], _WIDTH_CODES[accumulate]),
            frame_shift_ms=float(shift))
    except (IndexError, ValueError) as exc:
        raise FormatError(f"invalid config in checkpoint header: {exc}") from exc


def save_checkpoint(path, params: EncoderParams) -> None:
    tensors = params.named_tensors()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_config(params.config),
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct | str):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> EncoderParams:
    r = _Reader(Path(path).read_bytes(), path)
    if r.data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    cfg = _unpack_config(r.unpack(CONFIG_STRUCT))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    params = init_encoder(cfg, seed=0)
    params.load_named_tensors(tensors)
    return params
