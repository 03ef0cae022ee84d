import math

import numpy as np
import pytest

from summix import numkernel as nk
from summix.chunking import ChunkSpec, build_mask
from summix.errors import DimensionError, ValidationError
from summix.mixing import (KvCache, MhsaParams, SummaryMixingParams, SummaryState, mhsa_masked,
                           mhsa_step, summary_mixing_masked, summary_mixing_offline, summary_mixing_step)
from summix.numkernel import F32, Linear

from conftest import identity_summary_params


def eq3_bruteforce(X, bits, p):
    """Per-frame double loop over the visibility grid, all in float64."""
    X = X.astype(np.float64)
    T = X.shape[0]
    out = []
    for t in range(T):
        acc = np.zeros(p.summary.out_dim)
        n = 0
        for u in range(T):
            if bits[t, u]:
                acc += nk.activations(X[u] @ p.summary.weight.astype(np.float64) + p.summary.bias, p.summary_act)
                n += 1
        f = nk.activations(X[t] @ p.local.weight.astype(np.float64) + p.local.bias, p.local_act)
        z = np.concatenate([f, acc / n]) @ p.combine.weight.astype(np.float64) + p.combine.bias
        out.append(nk.activations(z, p.combine_act))
    return np.array(out)


def stream(X, spec, p, policy=None):
    state = SummaryState(p.summary_dim, spec.left_context,
                         (policy or nk.policy_for(X, None)).accumulate_dtype)
    outs = []
    for i in range(0, X.shape[0], spec.chunk_size):
        out, state = summary_mixing_step(X[i:i + spec.chunk_size], state, p, policy)
        outs.append(out)
    return np.concatenate(outs)


class TestSummaryMixingOffline:
    def test_concat_example(self):
        out = summary_mixing_offline(np.array([[1.0], [3.0]]), identity_summary_params())
        np.testing.assert_array_equal(out, [[1.0, 2.0], [3.0, 2.0]])

    def test_single_frame(self, rng):
        p = SummaryMixingParams.random(rng, 5, 4, dtype=np.float64)
        x = rng.standard_normal((1, 5))
        f = nk.activations(p.local(x), "gelu")
        s = nk.activations(p.summary(x), "gelu")
        want = nk.activations(np.concatenate([f, s], axis=1) @ p.combine.weight + p.combine.bias, "gelu")
        np.testing.assert_allclose(summary_mixing_offline(x, p), want, atol=1e-12)

    def test_permutation(self, rng):
        X = rng.standard_normal((9, 1))
        perm = rng.permutation(9)
        a = summary_mixing_offline(X, identity_summary_params())
        b = summary_mixing_offline(X[perm], identity_summary_params())
        np.testing.assert_allclose(b[:, 0], a[perm, 0])
        np.testing.assert_allclose(b[:, 1], a[0, 1], atol=1e-15)

    def test_empty(self):
        with pytest.raises(ValidationError):
            summary_mixing_offline(np.zeros((0, 3)), identity_summary_params(3))

    def test_param_widths_checked(self, rng):
        with pytest.raises(DimensionError):
            SummaryMixingParams(Linear.identity(2), Linear.identity(2), Linear.identity(3))


class TestSummaryMixingMasked:
    X = np.array([[1.0], [2.0], [3.0], [4.0]])

    def test_chunk_means_no_left(self):
        out = summary_mixing_masked(self.X, build_mask(4, ChunkSpec(2, 0)), identity_summary_params())
        assert out[:, 1].tolist() == [1.5, 1.5, 3.5, 3.5]

    def test_chunk_means_infinite_left(self):
        out = summary_mixing_masked(self.X, build_mask(4, ChunkSpec(2, None)), identity_summary_params())
        assert out[:, 1].tolist() == [1.5, 1.5, 2.5, 2.5]

    def test_full_mask_equals_offline(self, rng):
        p = SummaryMixingParams.random(rng, 6, 5)
        X = rng.standard_normal((17, 6)).astype(np.float32)
        np.testing.assert_allclose(summary_mixing_masked(X, build_mask(17, ChunkSpec(17, 0)), p),
                                   summary_mixing_offline(X, p), atol=1e-6)

    def test_dense_bool_mask_route(self, rng):
        p = SummaryMixingParams.random(rng, 4, 4, dtype=np.float64)
        X = rng.standard_normal((11, 4))
        mask = build_mask(11, ChunkSpec(3, 1))
        np.testing.assert_allclose(summary_mixing_masked(X, mask.bits, p),
                                   summary_mixing_masked(X, mask, p), atol=1e-12)

    def test_mask_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            summary_mixing_masked(np.ones((5, 1)), build_mask(4, ChunkSpec(2, 0)), identity_summary_params())

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_equivalence_chain(self, dtype, tol):
        rng = np.random.default_rng(99)
        for _ in range(25):
            T = int(rng.integers(1, 49))
            C = int(rng.integers(1, T + 1))
            L = [None, int(rng.integers(0, 4))][int(rng.integers(0, 2))]
            p = SummaryMixingParams.random(rng, 5, 4, d_local=3, d_summary=6, dtype=dtype)
            X = rng.standard_normal((T, 5)).astype(dtype)
            mask = build_mask(T, ChunkSpec(C, L))
            masked = summary_mixing_masked(X, mask, p)
            assert np.max(np.abs(stream(X, ChunkSpec(C, L), p) - masked)) < tol
            assert np.max(np.abs(eq3_bruteforce(X, mask.bits, p) - masked)) < tol


class TestSummaryMixingStep:
    def test_running_state(self):
        p = identity_summary_params()
        state = SummaryState(1)
        out1, state = summary_mixing_step(np.array([[1.0], [2.0]]), state, p)
        assert state.running_sum[0] == 3.0 and state.frame_count == 2
        out2, state = summary_mixing_step(np.array([[3.0], [4.0]]), state, p)
        assert state.running_sum[0] == 10.0 and state.frame_count == 4
        assert out2[:, 1].tolist() == [2.5, 2.5]
        assert out1[:, 1].tolist() == [1.5, 1.5]

    def test_single_chunk_equals_offline(self, rng):
        p = SummaryMixingParams.random(rng, 4, 3, dtype=np.float64)
        X = rng.standard_normal((12, 4))
        out, _ = summary_mixing_step(X, SummaryState(p.summary_dim), p)
        np.testing.assert_allclose(out, summary_mixing_offline(X, p), atol=1e-12)

    def test_finite_left_evicts(self):
        p = identity_summary_params()
        state = SummaryState(1, left_context=1)
        for chunk in ([[1.0], [2.0]], [[3.0], [4.0]], [[5.0], [6.0]]):
            out, state = summary_mixing_step(np.array(chunk), state, p)
        assert state.frame_count == 4 and state.running_sum[0] == 18.0
        assert out[:, 1].tolist() == [4.5, 4.5]

    def test_empty_chunk(self):
        with pytest.raises(ValidationError):
            summary_mixing_step(np.zeros((0, 1)), SummaryState(1), identity_summary_params())

    def test_long_stream_accuracy(self):
        """Running f32 sum over 1e5 frames stays close to a compensated sum."""
        rng = np.random.default_rng(5)
        X = rng.uniform(0.0, 2.0, size=(100_000, 3)).astype(np.float32)
        p = SummaryMixingParams(Linear.identity(3, np.float32), Linear.identity(3, np.float32),
                                Linear.identity(6, np.float32), "identity", "identity", "identity")
        state = SummaryState(3, None, np.float32)
        for i in range(0, X.shape[0], 100):
            _, state = summary_mixing_step(X[i:i + 100], state, p, F32)
        assert state.running_sum.dtype == np.float32
        for j in range(3):
            exact = math.fsum(X[:, j].astype(np.float64))
            assert abs(state.running_sum[j] - exact) / exact < 1e-3

    def test_state_size_independent_of_length(self):
        state = SummaryState(16)
        sizes = []
        for n in range(50):
            state.push(np.ones(16), 4)
            sizes.append(state.nbytes)
        assert len(set(sizes)) == 1


def _causality_trials(cell, rng, trials, dtype=np.float64):
    for _ in range(trials):
        T = int(rng.integers(2, 25))
        C = int(rng.integers(1, T))
        L = [None, int(rng.integers(0, 3))][int(rng.integers(0, 2))]
        mask = build_mask(T, ChunkSpec(C, L))
        X = rng.standard_normal((T, 4)).astype(dtype)
        base = cell(X, mask)
        u = int(rng.integers(0, T))
        Y = X.copy()
        Y[u] += rng.standard_normal(4) * 10
        out = cell(Y, mask)
        blind = ~mask.bits[:, u]
        assert np.array_equal(out[blind], base[blind])


class TestCausality:
    def test_summary_mixing(self, rng):
        p = SummaryMixingParams.random(rng, 4, 4, dtype=np.float64)
        _causality_trials(lambda X, m: summary_mixing_masked(X, m, p), rng, 100)

    def test_mhsa(self, rng):
        p = MhsaParams.random(rng, 4, 2, dtype=np.float64)
        _causality_trials(lambda X, m: mhsa_masked(X, m, p), rng, 100)


class TestMhsa:
    def test_uniform_attention(self, rng):
        zero = Linear(np.zeros((3, 3)), np.zeros(3))
        p = MhsaParams(1, zero, zero, Linear.identity(3), Linear.identity(3))
        X = rng.standard_normal((6, 3))
        out = mhsa_masked(X, build_mask(6, ChunkSpec.full()), p)
        np.testing.assert_allclose(out, np.broadcast_to(X.mean(axis=0), (6, 3)), atol=1e-12)

    def test_single_frame(self, rng):
        p = MhsaParams(1, Linear.random(rng, 3, 3, np.float64), Linear.random(rng, 3, 3, np.float64),
                       Linear.random(rng, 3, 3, np.float64), Linear.identity(3))
        x = rng.standard_normal((1, 3))
        np.testing.assert_allclose(mhsa_masked(x, build_mask(1, ChunkSpec.full()), p), p.value(x), atol=1e-12)

    def test_outside_chunk_perturbation(self, rng):
        p = MhsaParams.random(rng, 4, 2, dtype=np.float64)
        X = rng.standard_normal((6, 4))
        mask = build_mask(6, ChunkSpec(2, 0))
        Y = X.copy()
        Y[[0, 1, 4, 5]] += 3.0
        np.testing.assert_array_equal(mhsa_masked(X, mask, p)[2:4], mhsa_masked(Y, mask, p)[2:4])

    def test_fully_masked_row(self, rng):
        p = MhsaParams.random(rng, 4, 2, dtype=np.float64)
        bits = np.eye(3, dtype=bool)
        bits[1, 1] = False
        with pytest.raises(ValidationError):
            mhsa_masked(rng.standard_normal((3, 4)), bits, p)

    def test_heads_must_divide(self, rng):
        with pytest.raises(DimensionError):
            MhsaParams.random(rng, 6, 4)

    @pytest.mark.parametrize("C,L", [(1, 0), (3, 1), (4, 2), (5, None)])
    @pytest.mark.parametrize("positional", ["none", "absolute"])
    def test_step_matches_masked(self, rng, C, L, positional):
        p = MhsaParams.random(rng, 8, 2, dtype=np.float64, positional=positional)
        T = 17
        X = rng.standard_normal((T, 8))
        capacity = None if L is None else L * C
        cache = KvCache(2, 4, capacity, np.float64)
        outs = []
        for i in range(0, T, C):
            out, cache = mhsa_step(X[i:i + C], cache, p, offset=i)
            outs.append(out)
            if capacity is not None:
                assert cache.length <= capacity
        np.testing.assert_allclose(np.concatenate(outs), mhsa_masked(X, build_mask(T, ChunkSpec(C, L)), p),
                                   atol=1e-10)


class TestOpScaling:
    """Multiply-add counts at T and 2T under an infinite-left chunk mask."""

    @staticmethod
    def macs(fn, T, rng, d=8):
        X = rng.standard_normal((T, d)).astype(np.float32)
        mask = build_mask(T, ChunkSpec(4, None))
        with nk.count_ops() as ops:
            fn(X, mask)
        return ops.macs

    def test_summary_mixing_is_linear(self, rng):
        p = SummaryMixingParams.random(rng, 8, 8)
        fn = lambda X, m: summary_mixing_masked(X, m, p)
        ratio = self.macs(fn, 512, rng) / self.macs(fn, 256, rng)
        assert ratio <= 2.2

    def test_mhsa_is_quadratic(self, rng):
        p = MhsaParams.random(rng, 8, 2)
        fn = lambda X, m: mhsa_masked(X, m, p)
        ratio = self.macs(fn, 512, rng) / self.macs(fn, 256, rng)
        assert ratio >= 3.4
