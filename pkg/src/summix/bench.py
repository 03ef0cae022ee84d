"""Real-time-factor and peak-memory benchmarks for the streaming encoder.

Timing runs the chunked streaming path with infinite left context. Memory is
reported for a full-utterance masked forward, both as a closed-form model
(:func:`model_peak_memory`) and as measured by ``tracemalloc`` around the
forward call (:func:`measure_peak_memory`).
"""

from __future__ import annotations

import csv
import json
import logging
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .chunking import ChunkSpec, ms_to_frames
from .encoder import (EncoderConfig, EncoderParams, FeatureSequence, _worker_cap, encoder_forward_offline,
                      init_encoder, stream_utterance)
from .errors import MeasurementError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_DURATIONS = (5.0, 10.0, 20.0, 30.0, 60.0, 120.0)
CSV_COLUMNS = ("duration_s", "mixing", "chunk_ms", "left_context", "wall_ms_mean", "wall_ms_p95",
               "rtf", "modeled_peak_bytes", "measured_peak_bytes")


@dataclass
class BenchRow:
    duration_s: float
    mixing: str
    chunk_ms: float
    left_context: str
    wall_ms_mean: float
    wall_ms_p95: float
    rtf: float
    modeled_peak_bytes: int
    measured_peak_bytes: int | None = None


@dataclass
class BenchRun:
    config_id: str
    mixing: str
    durations_s: list[float] = field(default_factory=lambda: list(DEFAULT_DURATIONS))
    repeats: int = 100
    frame_shift_ms: float = 10.0
    chunk_ms: float = 640.0
    left_context: int | None = None
    streams: int = 1
    min_time_s: float = 0.0     # keep repeating a duration until this much time is measured
    results: list[BenchRow] = field(default_factory=list)

    def rtf_by_duration(self) -> dict[float, float]:
        return {row.duration_s: row.rtf for row in self.results}


def generate_synthetic_features(duration_s: float, dim: int = 80, frame_shift_ms: float = 10.0,
                                seed: int = 0) -> FeatureSequence:
    """Unit-variance Gaussian frames; the content does not affect the timing."""
    if duration_s <= 0 or dim <= 0 or frame_shift_ms <= 0:
        raise ValidationError("duration, dimension and frame shift must be positive")
    T = int(np.floor(duration_s * 1000.0 / frame_shift_ms + 1e-9))
    rng = np.random.default_rng(seed)
    return FeatureSequence(rng.standard_normal((T, dim), dtype=np.float32), frame_shift_ms)


# -- memory ----------------------------------------------------------------------------

@dataclass
class MemoryEstimate:
    """Peak bytes of a full-utterance masked forward.

    ``mixing_term`` is the part that distinguishes the two cells: the attention
    score tensor (``heads * T^2``) for MHSA and the running summary
    (``summary_dim`` plus a count) for SummaryMixing. ``activations`` are the
    buffers that scale linearly with ``T`` at the peak phase of a block.
    """

    weights: int
    mixing_term: int
    activations: int

    @property
    def workspace(self) -> int:
        return self.mixing_term + self.activations

    @property
    def total(self) -> int:
        return self.weights + self.workspace


def _weight_bytes(cfg: EncoderConfig) -> int:
    w = cfg.precision.compute_dtype.itemsize
    d, F, K = cfg.d_model, cfg.ffn_dim, cfg.conv_kernel
    ffn = 2 * d + d * F + F + F * d + d
    if cfg.mixing == "summary":
        dl, ds = cfg.local_width, cfg.summary_width
        mixing = d * dl + dl + d * ds + ds + (dl + ds) * d + d
    else:
        mixing = 4 * (d * d + d)
    conv = 2 * d + d * 2 * d + 2 * d + K * d + d + 2 * d + d * d + d
    block = 2 * ffn + 2 * d + mixing + conv + 2 * d
    stages = 0
    f = cfg.subsampling_factor
    while f > 1:
        stages += 3 * d
        f //= 2
    return w * (cfg.num_blocks * block + cfg.input_dim * d + d + stages)


def model_peak_memory(cfg: EncoderConfig, spec: ChunkSpec, T: int) -> MemoryEstimate:
    """Closed-form peak-memory model for ``T`` post-subsampling frames.

    The block's live buffers at each phase, in units of ``T * width``:

    * feed-forward: block input, residual stream, expansion output and one
      SiLU temporary (numpy reuses the second in place) -> ``2d + 2F``
    * SummaryMixing: input, residual, normed input, both branch outputs and two
      GELU temporaries -> ``3d + 3*local + summary``; the summary itself is a
      ``summary_dim`` running sum that does not grow with ``T``
    * MHSA: input, residual, normed input, q/k/v (projection + head-major copy
      of each) and the context -> ``10d``, plus ``heads * T^2`` scores

    The peak is the largest phase. ``spec`` only matters for MHSA with a
    finite chunk, where masking is applied in place and does not change the
    score tensor size; it is accepted for symmetry with the benchmarks.
    """
    if T < 0:
        raise ValidationError("T must be non-negative")
    weights = _weight_bytes(cfg)
    if T == 0:
        return MemoryEstimate(weights, 0, 0)
    w = cfg.precision.compute_dtype.itemsize
    a = cfg.precision.accumulate_dtype.itemsize
    d, F = cfg.d_model, cfg.ffn_dim
    ffn_phase = T * w * (2 * d + 2 * F)
    if cfg.mixing == "summary":
        mixing_term = (cfg.summary_width + 1) * a
        mixing_linear = T * w * (3 * d + 3 * cfg.local_width + cfg.summary_width)
    else:
        mixing_term = cfg.num_heads * T * T * w
        mixing_linear = T * w * 10 * d
    if mixing_linear + mixing_term >= ffn_phase:
        return MemoryEstimate(weights, mixing_term, mixing_linear)
    return MemoryEstimate(weights, mixing_term, ffn_phase - mixing_term)


def measure_peak_memory(feat: FeatureSequence | np.ndarray, spec: ChunkSpec, params: EncoderParams
                        ) -> int:
    """Traced workspace peak (bytes) of one full-utterance masked forward.

    Weights and the input already exist when tracing starts, so only
    allocations made by the forward pass are counted.
    """
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        out = encoder_forward_offline(feat, spec, params)
        _, peak = tracemalloc.get_traced_memory()
        del out
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return peak - base


# -- timing ------------------------------------------------------------------------------

def _chunk_spec(cfg: EncoderConfig, chunk_ms: float, left_context: int | None) -> ChunkSpec:
    return ChunkSpec(ms_to_frames(chunk_ms, cfg.output_frame_shift_ms), left_context)


def _time_streams(feat: FeatureSequence, spec: ChunkSpec, params: EncoderParams, streams: int):
    if streams == 1:
        t0 = time.perf_counter()
        out = stream_utterance(feat, spec, params)
        return time.perf_counter() - t0, out
    workers = min(streams, _worker_cap())
    with ThreadPoolExecutor(workers) as pool:
        t0 = time.perf_counter()
        outs = list(pool.map(lambda _: stream_utterance(feat, spec, params), range(streams)))
        elapsed = time.perf_counter() - t0
    return elapsed, outs[0]


def run_rtf_benchmark(cfg: EncoderConfig, spec: ChunkSpec | None, run: BenchRun,
                      params: EncoderParams | None = None, seed: int = 0,
                      measure_memory: bool = True, memory_budget_bytes: int = 1 << 30) -> BenchRun:
    """Time the streaming encoder at every duration in ``run`` and fill ``run.results``.

    ``spec`` defaults to ``run.chunk_ms`` with ``run.left_context``. Memory is
    measured only when the modeled peak fits ``memory_budget_bytes``; otherwise
    ``measured_peak_bytes`` stays ``None``.
    """
    if run.repeats < 1:
        raise ValidationError("repeats must be >= 1")
    if params is None:
        params = init_encoder(cfg, seed=seed)
    if spec is None:
        spec = _chunk_spec(cfg, run.chunk_ms, run.left_context)
    if spec.is_full:
        raise ValidationError("the RTF benchmark streams; give a finite chunk size")
    resolution = time.get_clock_info("perf_counter").resolution
    durations = sorted(run.durations_s)
    feats = [generate_synthetic_features(d, cfg.input_dim, cfg.frame_shift_ms, seed) for d in durations]

    stream_utterance(feats[0], spec, params)   # warmup, discarded

    # Repeats are interleaved across durations so that slow drift in machine
    # load affects every duration alike. A duration is done once it has at
    # least ``repeats`` runs and ``min_time_s`` of measured time.
    walls: list[list[float]] = [[] for _ in durations]
    references: list[np.ndarray | None] = [None] * len(durations)

    def pending(i: int) -> bool:
        return len(walls[i]) < run.repeats or sum(walls[i]) < run.min_time_s

    while any(pending(i) for i in range(len(durations))):
        for i, feat in enumerate(feats):
            if not pending(i):
                continue
            elapsed, out = _time_streams(feat, spec, params, run.streams)
            if references[i] is None:
                references[i] = out
            elif not np.array_equal(references[i], out):
                raise MeasurementError("encoder output changed between repeats")
            walls[i].append(elapsed)

    run.results = []
    for duration, feat, wall in zip(durations, feats, walls):
        walls_s = np.array(wall)
        if walls_s.mean() < 100 * resolution:
            raise MeasurementError(f"mean wall time {walls_s.mean():.3g}s is near the timer resolution "
                                   f"({resolution:.3g}s); raise --repeats or the durations")
        audio_s = feat.duration_s * run.streams
        T_out = feat.num_frames // cfg.subsampling_factor
        modeled = model_peak_memory(cfg, spec, T_out).total
        measured = None
        if measure_memory and modeled <= memory_budget_bytes:
            measured = params.nbytes + measure_peak_memory(feat, spec, params)
        run.results.append(BenchRow(
            duration_s=float(duration), mixing=cfg.mixing, chunk_ms=run.chunk_ms,
            left_context="infinite" if spec.infinite_left else str(spec.left_context),
            wall_ms_mean=float(walls_s.mean() * 1000), wall_ms_p95=float(np.percentile(walls_s, 95) * 1000),
            rtf=float(walls_s.mean() / audio_s),
            modeled_peak_bytes=int(modeled), measured_peak_bytes=measured))
        log.info("%s %.0fs rtf=%.4f over %d runs", cfg.mixing, duration, run.results[-1].rtf, len(wall))
    return run


# -- reports ------------------------------------------------------------------------------

def emit_report(run: BenchRun, fmt: str, path) -> Path:
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in run.results:
                values = asdict(row)
                writer.writerow(["" if values[c] is None else values[c] for c in CSV_COLUMNS])
    elif fmt == "json":
        payload = {k: v for k, v in asdict(run).items() if k != "results"}
        payload["results"] = [asdict(r) for r in run.results]
        path.write_text(json.dumps(payload, indent=2))
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    return path


def read_report_csv(path) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(BenchRow(
                duration_s=float(rec["duration_s"]), mixing=rec["mixing"], chunk_ms=float(rec["chunk_ms"]),
                left_context=rec["left_context"], wall_ms_mean=float(rec["wall_ms_mean"]),
                wall_ms_p95=float(rec["wall_ms_p95"]), rtf=float(rec["rtf"]),
                modeled_peak_bytes=int(rec["modeled_peak_bytes"]),
                measured_peak_bytes=int(rec["measured_peak_bytes"]) if rec["measured_peak_bytes"] else None))
    return rows


def plot_rtf(rows_by_label: dict[str, list[BenchRow]], path) -> Path:
    """Write an SVG line chart of RTF against utterance duration."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rows in rows_by_label.items():
        rows = sorted(rows, key=lambda r: r.duration_s)
        ax.plot([r.duration_s for r in rows], [r.rtf for r in rows], marker="o", label=label)
    ax.set_xlabel("utterance duration (s)")
    ax.set_ylabel("real-time factor")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
