import threading
from pathlib import Path

import numpy as np
import pytest

from summix import numkernel as nk
from summix.chunking import ChunkSpec, build_mask
from summix.encoder import (EncoderConfig, FeatureSequence, causal_conv_forward, conformer_block_forward,
                            dcconv_forward, encoder_forward_batch, encoder_forward_offline,
                            encoder_forward_streaming, init_encoder, init_streaming_context,
                            stream_utterance, zero_encoder)
from summix.errors import DimensionError, ValidationError
from summix.mixing import KvCache, SummaryState
from summix.numkernel import F64

from conftest import tiny_config

DATA = Path(__file__).parent / "data"


class TestDcconv:
    def test_identity_kernel(self, rng):
        X = rng.standard_normal((7, 3))
        np.testing.assert_array_equal(dcconv_forward(X, build_mask(7, ChunkSpec(2, 0)), np.array([0.0, 1.0, 0.0])), X)

    def test_chunk_masked_counts(self):
        out = dcconv_forward(np.ones(4), build_mask(4, ChunkSpec(2, 0)), np.ones(3))
        assert out.tolist() == [2, 2, 2, 2]

    def test_left_chunk_visible(self):
        out = dcconv_forward(np.ones(4), build_mask(4, ChunkSpec(2, 1)), np.ones(3))
        assert out.tolist() == [2, 2, 3, 2]

    def test_unmasked_is_zero_padded(self):
        assert dcconv_forward(np.ones(4), None, np.ones(3)).tolist() == [2, 3, 3, 2]

    def test_even_kernel(self):
        with pytest.raises(ValidationError):
            dcconv_forward(np.ones(4), None, np.ones(4))

    def test_kernel_width_mismatch(self):
        with pytest.raises(DimensionError):
            dcconv_forward(np.ones((4, 3)), None, np.ones((3, 2)))

    def test_matches_tap_definition(self, rng):
        T, D, K = 13, 3, 5
        X = rng.standard_normal((T, D))
        w = rng.standard_normal((K, D))
        mask = build_mask(T, ChunkSpec(3, 1))
        r = (K - 1) // 2
        want = np.zeros((T, D))
        for t in range(T):
            for j in range(K):
                u = t + j - r
                if 0 <= u < T and mask.bits[t, u]:
                    want[t] += w[j] * X[u]
        np.testing.assert_allclose(dcconv_forward(X, mask, w), want, atol=1e-12)


class TestCausalConv:
    def test_rightmost_tap_identity(self, rng):
        X = rng.standard_normal((6, 2))
        np.testing.assert_array_equal(causal_conv_forward(X, np.array([0.0, 0.0, 1.0])), X)

    def test_left_edge(self):
        assert causal_conv_forward(np.ones(6), np.ones(3)).tolist() == [1, 2, 3, 3, 3, 3]

    def test_no_future_leak(self, rng):
        X = rng.standard_normal((10, 2))
        w = rng.standard_normal((5, 2))
        base = causal_conv_forward(X, w)
        for t in range(9):
            Y = X.copy()
            Y[t + 1:] += rng.standard_normal(Y[t + 1:].shape)
            assert np.array_equal(causal_conv_forward(Y, w)[: t + 1], base[: t + 1])


class TestConformerBlock:
    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    def test_zero_weights_gives_layernorm(self, rng, mixing):
        cfg = tiny_config(mixing=mixing, precision=F64)
        block = zero_encoder(cfg).blocks[0]
        X = rng.standard_normal((5, cfg.d_model))
        want = nk.layernorm(X, np.ones(cfg.d_model), np.zeros(cfg.d_model))
        np.testing.assert_allclose(conformer_block_forward(X, build_mask(5, ChunkSpec(2, 0)), block, cfg),
                                   want, atol=1e-12)

    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    def test_full_mask_equals_whole_chunk(self, rng, mixing):
        cfg = tiny_config(mixing=mixing, precision=F64)
        block = init_encoder(cfg, seed=1).blocks[0]
        X = rng.standard_normal((9, cfg.d_model))
        np.testing.assert_array_equal(
            conformer_block_forward(X, build_mask(9, ChunkSpec.full()), block, cfg),
            conformer_block_forward(X, build_mask(9, ChunkSpec(9, 3)), block, cfg))

    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    def test_golden_fixture(self, mixing):
        data = np.load(DATA / f"golden_block_{mixing}.npz")
        cfg = EncoderConfig(input_dim=4, num_blocks=1, d_model=4, mixing=mixing, num_heads=2,
                            conv_kernel=3, precision=F64)
        params = init_encoder(cfg, seed=0)
        params.load_named_tensors({k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")})
        out = conformer_block_forward(data["input"], build_mask(2, ChunkSpec.full()), params.blocks[0], cfg)
        np.testing.assert_allclose(out, data["output"], atol=1e-12)


class TestOfflineEncoder:
    @pytest.mark.parametrize("factor", [1, 2, 4])
    def test_output_shape(self, rng, factor):
        cfg = tiny_config(subsampling_factor=factor)
        X = rng.standard_normal((23, cfg.input_dim)).astype(np.float32)
        out = encoder_forward_offline(FeatureSequence(X), ChunkSpec(2, 1), init_encoder(cfg))
        assert out.shape == (23 // factor, cfg.d_model)

    def test_full_equals_whole_length_chunk(self, rng):
        cfg = tiny_config()
        params = init_encoder(cfg)
        X = rng.standard_normal((12, cfg.input_dim)).astype(np.float32)
        np.testing.assert_array_equal(encoder_forward_offline(X, None, params),
                                      encoder_forward_offline(X, ChunkSpec(12, 0), params))

    def test_empty_input(self):
        cfg = tiny_config()
        with pytest.raises(ValidationError):
            encoder_forward_offline(np.zeros((0, cfg.input_dim)), None, init_encoder(cfg))

    def test_wrong_feature_width(self):
        cfg = tiny_config()
        with pytest.raises(DimensionError):
            encoder_forward_offline(np.zeros((4, cfg.input_dim + 1)), None, init_encoder(cfg))

    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    @pytest.mark.parametrize("conv_mode", ["dynamic_chunk", "causal"])
    def test_future_chunks_never_leak(self, rng, mixing, conv_mode):
        cfg = tiny_config(mixing=mixing, conv_mode=conv_mode, precision=F64)
        params = init_encoder(cfg, seed=3)
        X = rng.standard_normal((15, cfg.input_dim))
        spec = ChunkSpec(4, 1)
        base = encoder_forward_offline(X, spec, params)
        Y = X.copy()
        Y[8:] += 5.0
        np.testing.assert_array_equal(encoder_forward_offline(Y, spec, params)[:8], base[:8])

    def test_deterministic(self, rng):
        cfg = tiny_config()
        params = init_encoder(cfg)
        X = rng.standard_normal((10, cfg.input_dim)).astype(np.float32)
        assert encoder_forward_offline(X, ChunkSpec(3, None), params).tobytes() == \
            encoder_forward_offline(X, ChunkSpec(3, None), params).tobytes()

    @pytest.mark.parametrize("workers", [1, 3])
    def test_batch_independent_of_workers(self, rng, workers, monkeypatch):
        monkeypatch.setenv("SUMMIX_THREADS", "4")
        cfg = tiny_config()
        params = init_encoder(cfg)
        feats = [rng.standard_normal((n, cfg.input_dim)).astype(np.float32) for n in (5, 9, 13)]
        got = encoder_forward_batch(feats, ChunkSpec(2, 1), params, workers=workers)
        for f, out in zip(feats, got):
            np.testing.assert_array_equal(out, encoder_forward_offline(f, ChunkSpec(2, 1), params))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(conv_kernel=4), dict(num_blocks=0), dict(mixing="fastformer"), dict(conv_mode="lookahead"),
        dict(mixing="mhsa", d_model=8, num_heads=3), dict(subsampling_factor=3),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            tiny_config(**kwargs)


class TestStreaming:
    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    @pytest.mark.parametrize("conv_mode", ["dynamic_chunk", "causal"])
    @pytest.mark.parametrize("C,L", [(1, 0), (2, 1), (5, 2), (8, None), (3, None)])
    def test_matches_offline(self, rng, mixing, conv_mode, C, L):
        cfg = tiny_config(mixing=mixing, conv_mode=conv_mode)
        params = init_encoder(cfg, seed=4)
        X = rng.standard_normal((int(rng.integers(10, 40)), cfg.input_dim)).astype(np.float32)
        spec = ChunkSpec(C, L)
        diff = np.abs(stream_utterance(X, spec, params) - encoder_forward_offline(X, spec, params))
        assert diff.max() < 1e-5

    @pytest.mark.parametrize("mixing", ["summary", "mhsa"])
    def test_subsampled_stream_with_ragged_feeds(self, rng, mixing):
        cfg = tiny_config(mixing=mixing, subsampling_factor=4, precision=F64)
        params = init_encoder(cfg, seed=5)
        X = rng.standard_normal((61, cfg.input_dim))
        spec = ChunkSpec(3, 1)
        want = encoder_forward_offline(X, spec, params)
        for feed in (1, 5, 7, 100):
            got = stream_utterance(X, spec, params, feed_frames=feed)
            assert got.shape == want.shape
            assert np.max(np.abs(got - want)) < 1e-10

    def test_single_chunk_equals_full_context(self, rng):
        cfg = tiny_config(precision=F64)
        params = init_encoder(cfg)
        X = rng.standard_normal((9, cfg.input_dim))
        np.testing.assert_allclose(stream_utterance(X, ChunkSpec(9, 0), params),
                                   encoder_forward_offline(X, None, params), atol=1e-10)

    def test_fresh_context(self):
        cfg = tiny_config()
        ctx = init_streaming_context(cfg, ChunkSpec(4, None))
        assert ctx.frames_consumed == 0
        assert all(b.mixing.frame_count == 0 and len(b.conv_buffer) == 0 for b in ctx.blocks)
        assert ctx == init_streaming_context(cfg, ChunkSpec(4, None))

    def test_mhsa_cache_capacity(self):
        cfg = tiny_config(mixing="mhsa")
        ctx = init_streaming_context(cfg, ChunkSpec(4, 3))
        for b in ctx.blocks:
            assert isinstance(b.mixing, KvCache)
            assert b.mixing.capacity == 12 and b.mixing.length == 0

    def test_full_spec_rejected(self):
        with pytest.raises(ValidationError):
            init_streaming_context(tiny_config(), ChunkSpec.full())

    def test_standard_conv_cannot_stream(self):
        with pytest.raises(ValidationError):
            init_streaming_context(tiny_config(conv_mode="standard"), ChunkSpec(2, 0))

    def test_config_mismatch(self, rng):
        ctx = init_streaming_context(tiny_config(), ChunkSpec(2, 0))
        params = init_encoder(tiny_config(num_blocks=1))
        with pytest.raises(ValidationError):
            encoder_forward_streaming(np.zeros((2, 6), np.float32), ctx, params)

    def test_empty_chunk(self):
        cfg = tiny_config()
        ctx = init_streaming_context(cfg, ChunkSpec(2, 0))
        with pytest.raises(ValidationError):
            encoder_forward_streaming(np.zeros((0, cfg.input_dim), np.float32), ctx, init_encoder(cfg))

    @pytest.mark.parametrize("conv_mode,taps", [("dynamic_chunk", 2), ("causal", 4)])
    def test_conv_buffer_bound(self, rng, conv_mode, taps):
        cfg = tiny_config(conv_mode=conv_mode)
        params = init_encoder(cfg)
        ctx = init_streaming_context(cfg, ChunkSpec(1, None))
        for n in range(1, 8):
            _, ctx = encoder_forward_streaming(rng.standard_normal((1, cfg.input_dim)).astype(np.float32),
                                               ctx, params)
            assert all(len(b.conv_buffer) == min(n, taps) for b in ctx.blocks)

    @pytest.mark.parametrize("L", [None, 2])
    def test_summary_state_size_constant(self, rng, L):
        cfg = tiny_config()
        params = init_encoder(cfg)
        spec = ChunkSpec(4, L)

        def run(chunks):
            ctx = init_streaming_context(cfg, spec)
            for _ in range(chunks):
                _, ctx = encoder_forward_streaming(
                    rng.standard_normal((4, cfg.input_dim)).astype(np.float32), ctx, params)
            return ctx

        short, long = run(10), run(100)
        assert long.frames_consumed == 10 * short.frames_consumed
        assert long.nbytes == short.nbytes
        assert all(isinstance(b.mixing, SummaryState) for b in long.blocks)

    def test_thread_handoff(self, rng):
        cfg = tiny_config()
        params = init_encoder(cfg)
        X = rng.standard_normal((24, cfg.input_dim)).astype(np.float32)
        spec = ChunkSpec(4, 1)
        reference = stream_utterance(X, spec, params)

        ctx = init_streaming_context(cfg, spec)
        outs = []

        def feed(lo, hi):
            nonlocal ctx
            for i in range(lo, hi, 4):
                out, ctx = encoder_forward_streaming(X[i:i + 4], ctx, params)
                outs.append(out)

        for lo, hi in ((0, 12), (12, 24)):
            worker = threading.Thread(target=feed, args=(lo, hi))
            worker.start()
            worker.join()
        np.testing.assert_array_equal(np.concatenate(outs), reference)
