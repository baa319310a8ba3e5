import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ppe.attention import (AttentionConfig, AttentionMap, ToyAttentionBlock, attention_entropy,
                           attention_scores, attention_variance, project_heatmap)
from ppe.clustering import cluster_count, dpc_knn
from ppe.errors import ConfigError, ContractError, DataError
from ppe.merge import SourceRecord, TokenSet, compress_stage
from ppe.rope import DEFAULT_3D, RopeConfig
from ppe.synth import gen_synthetic

CFG = AttentionConfig(2, 64, DEFAULT_3D)


def rand_qk(seed, nq=5, nk=7, cfg=CFG):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(nq, cfg.real_width)), rng.normal(size=(nk, cfg.real_width)),
            rng.integers(0, 50, size=(nq, 64)), rng.integers(0, 50, size=(nk, 64)))


def test_config_lane_mismatch():
    with pytest.raises(ConfigError):
        AttentionConfig(2, 32, DEFAULT_3D)


def test_default_scale():
    assert CFG.softmax_scale == 1 / math.sqrt(128)


def test_single_key():
    q, k, qi, ki = rand_qk(0, nk=1)
    assert (attention_scores(q, k, qi, ki, CFG).scores == 1.0).all()


def test_zero_ids_match_unrotated():
    q, k, _, _ = rand_qk(1)
    got = attention_scores(q, k, np.zeros((5, 64), int), np.zeros((7, 64), int), CFG).scores
    for h in range(2):
        qh = q[:, h * 128:(h + 1) * 128]
        kh = k[:, h * 128:(h + 1) * 128]
        for i in range(5):
            logits = [sum(a * b for a, b in zip(qh[i], kh[j])) / math.sqrt(128) for j in range(7)]
            mx = max(logits)
            e = [math.exp(v - mx) for v in logits]
            ref = [v / sum(e) for v in e]
            assert np.allclose(got[h, i], ref, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(-1000, 1000))
def test_shift_invariance(seed, s):
    q, k, qi, ki = rand_qk(seed)
    a = attention_scores(q, k, qi, ki, CFG).scores
    b = attention_scores(q, k, qi + s, ki + s, CFG).scores
    assert np.abs(a - b).max() <= 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_rows_and_entropy_bounds(seed):
    q, k, qi, ki = rand_qk(seed)
    amap = attention_scores(q * 3, k * 3, qi, ki, CFG)
    assert np.abs(amap.scores.sum(-1) - 1).max() <= 1e-9 and (amap.scores >= 0).all()
    h = attention_entropy(amap)
    assert (h >= -1e-15).all() and (h <= math.log(7) + 1e-12).all()


def test_shape_mismatch():
    q, k, qi, ki = rand_qk(0)
    with pytest.raises(ContractError):
        attention_scores(q, k, qi[:3], ki, CFG)
    with pytest.raises(ContractError):
        attention_scores(q[:, :10], k, qi, ki, CFG)


def row_map(*rows):
    return AttentionMap(np.asarray([rows], dtype=float))


class TestStatistics:
    def test_entropy_one_hot(self):
        assert attention_entropy(row_map([0, 1, 0]))[0, 0] == 0.0

    def test_entropy_uniform(self):
        assert attention_entropy(row_map([0.25] * 4))[0, 0] == pytest.approx(1.3862943611198906, abs=1e-12)

    def test_entropy_mixed(self):
        h = attention_entropy(row_map([0.5, 0.25, 0.25]))[0, 0]
        assert h == pytest.approx(1.0397207708399179, abs=1e-12)
        assert h == pytest.approx(oracles.entropy([0.5, 0.25, 0.25]), abs=1e-15)

    def test_variance_uniform(self):
        assert attention_variance(row_map([0.2] * 5))[0, 0] == pytest.approx(0, abs=1e-18)

    @pytest.mark.parametrize("V", [1, 2, 5, 16])
    def test_variance_one_hot(self, V):
        row = [0.0] * V
        row[0] = 1.0
        assert attention_variance(row_map(row))[0, 0] == pytest.approx((V - 1) / V**2, abs=1e-15)

    def test_variance_half_half(self):
        assert attention_variance(row_map([0.5, 0.5, 0, 0]))[0, 0] == 0.0625


class TestHeatmap:
    def test_uncompressed_is_reshape(self):
        t = gen_synthetic(1, 3, 4, 4, "uniform-noise", 0)
        scores = np.random.default_rng(0).random(12)
        heat = project_heatmap(AttentionMap(np.zeros((1, 1, 12))), t, normalize=False,
                               key_scores=scores)
        assert np.array_equal(heat, scores.reshape(3, 4))

    def test_equal_split(self):
        t = TokenSet(np.zeros((1, 2)), [(SourceRecord(0, 0, 0, 0), SourceRecord(1, 0, 0, 1))],
                     (1, 1, 2))
        heat = project_heatmap(AttentionMap(np.ones((1, 1, 1))), t, normalize=False)
        assert heat.tolist() == [[0.5, 0.5]]
        assert project_heatmap(AttentionMap(np.ones((1, 1, 1))), t).tolist() == [[1.0, 1.0]]

    def test_out_of_grid(self):
        t = TokenSet(np.zeros((1, 2)), [(SourceRecord(0, 0, 0, 0),)], (1, 1, 1))
        t.grid = (1, 1, 0)
        with pytest.raises(DataError):
            project_heatmap(AttentionMap(np.ones((1, 1, 1))), t)

    def test_k1_only_centers(self):
        t = gen_synthetic(1, 8, 8, 8, "blobs", 3)
        a = dpc_knn(t.embeddings, cluster_count(0.45, 64))
        out = compress_stage(t, a, DEFAULT_3D.with_capacity(1))
        block = ToyAttentionBlock(8, CFG, seed=0)
        _, amap = block(out)
        heat = project_heatmap(amap, out)
        nz = {(h, w) for h, w in zip(*np.nonzero(heat))}
        centers = {tuple(t.positions[c])[1:] for c in a.centers}
        assert nz <= centers

    @pytest.mark.parametrize("seed", range(5))
    def test_k8_covers_at_least_k1(self, seed):
        t = gen_synthetic(1, 10, 10, 8, "blobs", seed)
        a = dpc_knn(t.embeddings, cluster_count(0.45, 100))
        counts = []
        for K in (1, 8):
            out = compress_stage(t, a, DEFAULT_3D.with_capacity(K))
            heat = project_heatmap(AttentionMap(np.ones((1, 1, len(out))) / len(out)), out)
            counts.append(np.count_nonzero(heat))
        assert counts[1] >= counts[0]


class TestToyBlock:
    def test_deterministic(self):
        t = gen_synthetic(1, 4, 4, 8, "uniform-noise", 0)
        a, ma = ToyAttentionBlock(8, CFG, seed=5)(t)
        b, mb = ToyAttentionBlock(8, CFG, seed=5)(t)
        assert np.array_equal(a.embeddings, b.embeddings) and np.array_equal(ma.scores, mb.scores)
        assert ma.scores.shape == (2, 16, 16)

    def test_projection_free(self):
        cfg = AttentionConfig(1, 4, RopeConfig(4, (2, 2), capacity=2))
        t = gen_synthetic(1, 3, 3, 8, "uniform-noise", 1)
        out, amap = ToyAttentionBlock(8, cfg, seed=0, project=False)(t)
        mixed = np.einsum("qv,vc->qc", amap.scores[0], t.embeddings)
        assert np.allclose(out.embeddings, t.embeddings + mixed)
        with pytest.raises(ConfigError):
            ToyAttentionBlock(6, cfg, seed=0, project=False)
