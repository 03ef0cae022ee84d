"""SummaryMixing conformer-transducer encoder with streaming inference and a scaling benchmark."""

from .bench import (BenchRow, BenchRun, MemoryEstimate, emit_report, generate_synthetic_features,
                    measure_peak_memory, model_peak_memory, plot_rtf, read_report_csv, run_rtf_benchmark)
from .chunking import (ChunkSpec, DctSchedule, VisibilityMask, build_mask, ms_to_frames,
                       sample_chunk_spec, visible_frame_count)
from .encoder import (EncoderConfig, EncoderParams, FeatureSequence, StreamingContext,
                      causal_conv_forward, conformer_block_forward, dcconv_forward,
                      encoder_forward_batch, encoder_forward_offline, encoder_forward_streaming,
                      init_encoder, init_streaming_context, stream_utterance, zero_encoder)
from .errors import (BadMagicError, DimensionError, FormatError, MeasurementError, SummixError,
                     TruncatedFileError, UnsupportedVersionError, ValidationError)
from .formats import load_checkpoint, load_feature_file, save_checkpoint, save_feature_file
from .mixing import (KvCache, MhsaParams, SummaryMixingParams, SummaryState, mhsa_masked, mhsa_step,
                     summary_mixing_masked, summary_mixing_offline, summary_mixing_step)
from .numkernel import F32, F64, PrecisionPolicy
from .transducer import (BLANK, RnntLattice, TransducerLossResult, TransducerParams, greedy_decode,
                         greedy_decode_streaming, init_decode_state, init_transducer, joiner,
                         predictor_forward, rnnt_loss, rnnt_loss_bruteforce)

__version__ = "0.1.0"
