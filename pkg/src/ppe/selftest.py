"""Quick invariant checks runnable without pytest (``ppe selftest``)."""

from __future__ import annotations

import numpy as np

from .attention import AttentionConfig, attention_entropy, attention_scores
from .cascade import PipelineConfig, StageSpec, run_pipeline
from .clustering import cluster_count, dpc_knn
from .merge import TokenSet, compress_stage, ids_retained
from .rope import DEFAULT_3D, build_frequencies, fill_mrope_ids, merge_ppe_ids, rotate
from .synth import gen_synthetic


def _unitarity(rng):
    freqs = build_frequencies(DEFAULT_3D)
    worst = 0.0
    for _ in range(200):
        z = rng.normal(size=64) + 1j * rng.normal(size=64)
        ids = rng.integers(0, 512, size=64)
        out = rotate(z, ids, freqs)
        worst = max(worst, np.abs(np.abs(out) - np.abs(z)).max())
    return worst <= 1e-10, f"max modulus drift {worst:.2e}"


def _shift_invariance(rng):
    cfg = AttentionConfig(2, 64, DEFAULT_3D)
    worst = 0.0
    for _ in range(50):
        q = rng.normal(size=(5, cfg.real_width))
        k = rng.normal(size=(7, cfg.real_width))
        qi = rng.integers(0, 64, size=(5, 64))
        ki = rng.integers(0, 64, size=(7, 64))
        s = int(rng.integers(-100, 100))
        a = attention_scores(q, k, qi, ki, cfg).scores
        b = attention_scores(q, k, qi + s, ki + s, cfg).scores
        worst = max(worst, np.abs(a - b).max())
    return worst <= 1e-9, f"max score change {worst:.2e}"


def _k1_identity(rng):
    cfg = DEFAULT_3D.with_capacity(1)
    for _ in range(100):
        v = fill_mrope_ids(rng.integers(0, 50, size=3), cfg)
        if not np.array_equal(merge_ppe_ids([v], cfg), v):
            return False, "K=1 merge altered the ID vector"
    return True, "K=1 merge is the identity"


def _partition(rng):
    for _ in range(20):
        n = int(rng.integers(4, 40))
        x = rng.normal(size=(n, 6))
        m = int(rng.integers(1, n + 1))
        a = dpc_knn(x, m)
        sizes = np.bincount(a.member_of, minlength=m)
        if sizes.sum() != n or (sizes == 0).any():
            return False, f"bad partition for n={n}, m={m}"
    return True, "clusters partition every instance"


def _entropy_bounds(rng):
    cfg = AttentionConfig(1, 64, DEFAULT_3D)
    q = rng.normal(size=(6, cfg.real_width))
    k = rng.normal(size=(9, cfg.real_width))
    amap = attention_scores(q, k, np.zeros((6, 64), int), np.zeros((9, 64), int), cfg)
    h = attention_entropy(amap)
    rows = np.abs(amap.scores.sum(axis=-1) - 1).max()
    ok = rows <= 1e-9 and (h >= -1e-12).all() and (h <= np.log(9) + 1e-12).all()
    return ok, f"row-sum error {rows:.1e}"


def _reduction(rng):
    for n_side in (8, 20, 32):
        tokens = gen_synthetic(1, n_side, n_side, 16, "blobs", seed=int(rng.integers(1 << 30)))
        cfg = PipelineConfig((StageSpec(0.45),), DEFAULT_3D, blocks=1)
        rep = run_pipeline(tokens, cfg)
        if rep.n_final != cluster_count(0.45, len(tokens)):
            return False, f"N={len(tokens)} gave {rep.n_final} tokens"
    return True, "single-stage counts follow round(0.45 N)"


def _retention(rng):
    tokens = gen_synthetic(1, 12, 12, 16, "uniform-noise", seed=int(rng.integers(1 << 30)))
    a = dpc_knn(tokens.embeddings, cluster_count(0.45, len(tokens)))
    r1 = ids_retained(compress_stage(tokens, a, DEFAULT_3D.with_capacity(1)), len(tokens))
    r8 = ids_retained(compress_stage(tokens, a, DEFAULT_3D), len(tokens))
    return r1 <= r8, f"K=1 {r1:.3f}, K=8 {r8:.3f}"


CHECKS = {
    "rotation unitarity": _unitarity,
    "attention shift invariance": _shift_invariance,
    "K=1 merge identity": _k1_identity,
    "cluster partition": _partition,
    "attention rows and entropy bounds": _entropy_bounds,
    "reduction arithmetic": _reduction,
    "retention monotone in K": _retention,
}


def run_selftest(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    all_ok = True
    for name, check in CHECKS.items():
        ok, detail = check(rng)
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
