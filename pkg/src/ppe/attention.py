"""Toy multi-head attention with rotary queries/keys, plus map statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .merge import TokenSet
from .rope import RopeConfig, build_frequencies, rotate, to_complex, to_real


@dataclass(frozen=True)
class AttentionConfig:
    head_count: int
    head_lane_count: int
    rope: RopeConfig
    scale: float | None = None

    def __post_init__(self):
        if self.head_count <= 0 or self.head_lane_count <= 0:
            raise ConfigError("head_count and head_lane_count must be positive")
        if self.rope.lane_count != self.head_lane_count:
            raise ConfigError(
                f"rope lane_count {self.rope.lane_count} != head_lane_count {self.head_lane_count}"
            )
        if self.scale is not None and not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @property
    def softmax_scale(self) -> float:
        if self.scale is not None:
            return self.scale
        return 1.0 / math.sqrt(2 * self.head_lane_count)

    @property
    def real_width(self) -> int:
        return self.head_count * 2 * self.head_lane_count


@dataclass
class AttentionMap:
    scores: np.ndarray  # (heads, Q, V), rows sum to 1
    query_labels: list | None = None
    key_provenance: list | None = None

    @property
    def key_scores(self) -> np.ndarray:
        """Attention each key receives, averaged over heads and queries."""
        return self.scores.mean(axis=(0, 1))


def _split_heads(x, cfg: AttentionConfig) -> np.ndarray:
    x = np.asarray(x)
    if np.iscomplexobj(x):
        if x.ndim != 3 or x.shape[1:] != (cfg.head_count, cfg.head_lane_count):
            raise ContractError(f"complex input must be (n, {cfg.head_count}, {cfg.head_lane_count})")
        return x.astype(np.complex128)
    if x.ndim != 2 or x.shape[1] != cfg.real_width:
        raise ContractError(f"real input must be (n, {cfg.real_width}), got {x.shape}")
    return to_complex(x.reshape(len(x), cfg.head_count, 2 * cfg.head_lane_count))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_scores(queries, keys, query_ids, key_ids, cfg: AttentionConfig) -> AttentionMap:
    """softmax(scale * Re<rotate(q), rotate(k)>) for every head.

    ``queries``/``keys`` are real (n, heads*2D) or complex (n, heads, D);
    ``*_ids`` are (n, D) integer position vectors shared by all heads.
    """
    q = _split_heads(queries, cfg)
    k = _split_heads(keys, cfg)
    qi = np.asarray(query_ids)
    ki = np.asarray(key_ids)
    if qi.shape != (len(q), cfg.head_lane_count) or ki.shape != (len(k), cfg.head_lane_count):
        raise ContractError(f"id shapes {qi.shape}, {ki.shape} do not match queries/keys")
    if len(k) == 0:
        raise ContractError("need at least one key")
    freqs = build_frequencies(cfg.rope)
    rq = rotate(q, qi[:, None, :], freqs)
    rk = rotate(k, ki[:, None, :], freqs)
    # Re<a, conj(b)> is the real dot product of the interleaved real forms
    rq = to_real(rq).transpose(1, 0, 2)
    rk = to_real(rk).transpose(1, 2, 0)
    logits = np.matmul(rq, rk) * cfg.softmax_scale
    return AttentionMap(softmax(logits))


def attention_entropy(amap: AttentionMap) -> np.ndarray:
    """Per-row natural-log entropy, shape (heads, Q); 0 log 0 counts as 0."""
    p = amap.scores
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def attention_variance(amap: AttentionMap) -> np.ndarray:
    return amap.scores.var(axis=-1)


def project_heatmap(amap: AttentionMap, tokens: TokenSet, normalize: bool = True,
                    key_scores: np.ndarray | None = None) -> np.ndarray:
    """Spread each key's score equally over the distinct grid cells it carries.

    Returns (H, W) for single-frame grids and (T, H, W) otherwise.
    """
    scores = amap.key_scores if key_scores is None else np.asarray(key_scores, dtype=np.float64)
    if len(scores) != len(tokens):
        raise ContractError(f"{len(scores)} key scores for {len(tokens)} tokens")
    T, H, W = tokens.grid
    grid = np.zeros((T, H, W))
    for score, records in zip(scores, tokens.carried):
        cells = list(dict.fromkeys(r.position for r in records))
        if not cells:
            raise DataError("token carries no positions")
        for t, h, w in cells:
            if not (0 <= t < T and 0 <= h < H and 0 <= w < W):
                raise DataError(f"position {(t, h, w)} outside grid {tokens.grid}")
            grid[t, h, w] += score / len(cells)
    if normalize and grid.max() > 0:
        grid = grid / grid.max()
    return grid[0] if T == 1 else grid


class ToyAttentionBlock:
    """One residual self-attention layer with seeded random projections.

    With ``project=False`` the raw embeddings serve as queries, keys and values
    (their width must equal heads * 2D).
    """

    def __init__(self, width: int, cfg: AttentionConfig, seed: int, project: bool = True):
        self.cfg = cfg
        self.project = project
        if project:
            rng = np.random.default_rng(seed)
            r = cfg.real_width
            self.wq = rng.standard_normal((width, r)) / math.sqrt(width)
            self.wk = rng.standard_normal((width, r)) / math.sqrt(width)
            self.wv = rng.standard_normal((width, r)) / math.sqrt(width)
            self.wo = rng.standard_normal((r, width)) / math.sqrt(r)
        elif width != cfg.real_width:
            raise ConfigError(f"projection-free mode needs width {cfg.real_width}, got {width}")

    def __call__(self, tokens: TokenSet) -> tuple[TokenSet, AttentionMap]:
        x = tokens.embeddings
        ids = tokens.position_ids(self.cfg.rope)
        if self.project:
            q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        else:
            q = k = v = x
        amap = attention_scores(q, k, ids, ids, self.cfg)
        amap.key_provenance = [tokens.provenance(i) for i in range(len(tokens))]
        heads = v.reshape(len(x), self.cfg.head_count, -1)
        mixed = np.matmul(amap.scores, heads.transpose(1, 0, 2))
        mixed = mixed.transpose(1, 0, 2).reshape(len(x), -1)
        update = mixed @ self.wo if self.project else mixed
        out = TokenSet(x + update, tokens.carried, tokens.grid, tokens.ids,
                       list(tokens.stage_history))
        return out, amap
