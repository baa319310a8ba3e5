"""Multi-stage compression pipelines interleaved with toy attention blocks.

A pipeline runs ``blocks`` attention layers. Stages placed ``pre`` run before
the first block; a stage placed at ``i`` runs after block ``i`` (1-based).
Once a temporal stage has grouped frames into events, every later spatial
stage clusters inside each event separately.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionConfig, ToyAttentionBlock, attention_entropy, attention_variance
from .clustering import ClusterAssignment, cluster_count, dpc_knn, temporal_cluster
from .errors import ConfigError, ContractError, PipelineError
from .merge import TokenSet, compress_stage, ids_retained
from .rope import DEFAULT_2D, DEFAULT_3D, RopeConfig

PRE = 0
SPATIAL_RATIO = 0.45
TEMPORAL_RATIO = 0.0625


@dataclass(frozen=True)
class StageSpec:
    ratio: float
    kind: str = "spatial"
    placement: int = PRE  # 0 = before block 1, i = after block i

    def __post_init__(self):
        if self.kind not in ("spatial", "temporal"):
            raise ConfigError(f"stage kind must be spatial or temporal, got {self.kind!r}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"stage ratio must lie in (0, 1], got {self.ratio}")
        if self.placement < 0:
            raise ConfigError(f"placement must be >= 0, got {self.placement}")


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageSpec, ...] = ()
    rope: RopeConfig = DEFAULT_3D
    attention: AttentionConfig | None = None
    seed: int = 0
    blocks: int = 4
    knn_k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        places = [s.placement for s in self.stages]
        if any(b <= a for a, b in zip(places, places[1:])):
            raise ConfigError(f"stage placements must be strictly increasing, got {places}")
        if places and places[-1] > self.blocks:
            raise ConfigError(f"placement {places[-1]} exceeds block count {self.blocks}")
        if self.attention is None:
            object.__setattr__(self, "attention",
                               AttentionConfig(2, self.rope.lane_count, self.rope))
        elif self.attention.rope != self.rope:
            raise ConfigError("attention.rope must equal the pipeline rope config")

    def to_dict(self) -> dict:
        att = self.attention
        return {
            "stages": [asdict(s) for s in self.stages],
            "rope": {
                "lane_count": self.rope.lane_count,
                "sections": list(self.rope.sections),
                "freq_base": self.rope.freq_base,
                "capacity": self.rope.capacity,
            },
            "attention": {"head_count": att.head_count, "scale": att.scale},
            "seed": self.seed,
            "blocks": self.blocks,
            "knn_k": self.knn_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            r = d.get("rope", {})
            if r:
                rope = RopeConfig(int(r.get("lane_count", sum(r["sections"]))),
                                  tuple(r["sections"]),
                                  float(r.get("freq_base", DEFAULT_3D.freq_base)),
                                  int(r["capacity"]))
            else:
                rope = DEFAULT_3D
            a = d.get("attention") or {}
            attention = AttentionConfig(int(a.get("head_count", 2)), rope.lane_count, rope,
                                        a.get("scale"))
            stages = tuple(StageSpec(float(s["ratio"]), s.get("kind", "spatial"),
                                     int(s.get("placement", PRE))) for s in d.get("stages", []))
            knn_k = d.get("knn_k")
            return cls(stages, rope, attention, int(d.get("seed", 0)),
                       int(d.get("blocks", 4)), None if knn_k is None else int(knn_k))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"malformed pipeline config: {e!r}") from e


def default_rope(grid: tuple[int, int, int]) -> RopeConfig:
    return DEFAULT_3D if grid[0] > 1 else DEFAULT_2D


@dataclass
class StageReport:
    index: int
    kind: str
    placement: int
    ratio: float
    n_in: int
    n_out: int
    ratio_measured: float
    skipped: bool = False
    seconds: float = 0.0


@dataclass
class BlockStats:
    block: int
    n_tokens: int
    entropy_mean: float
    variance_mean: float
    entropy: list[float]
    variance: list[float]


@dataclass
class PipelineReport:
    n_initial: int
    n_final: int
    reduction_ratio: float
    ids_retained: float
    stages: list[StageReport] = field(default_factory=list)
    attention: list[BlockStats] = field(default_factory=list)
    stage_history: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self, timings: bool = False) -> dict:
        d = asdict(self)
        d["stage_history"] = [list(p) for p in self.stage_history]
        if not timings:
            for s in d["stages"]:
                s.pop("seconds")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineReport":
        return cls(
            n_initial=d["n_initial"],
            n_final=d["n_final"],
            reduction_ratio=d["reduction_ratio"],
            ids_retained=d["ids_retained"],
            stages=[StageReport(**s) for s in d["stages"]],
            attention=[BlockStats(**b) for b in d["attention"]],
            stage_history=[tuple(p) for p in d["stage_history"]],
        )


def temporal_merge(tokens: TokenSet, ratio: float, rope: RopeConfig,
                   k: int | None = None) -> tuple[TokenSet, np.ndarray]:
    """Group frames into events, then merge tokens sharing a grid cell within an event.

    Needs an unmerged full grid in (t, h, w) row-major order. Returns the merged
    set and the event label of every output token.
    """
    T, H, W = tokens.grid
    if len(tokens) != T * H * W or any(len(c) != 1 for c in tokens.carried):
        raise ContractError("temporal merge needs an unmerged, complete token grid")
    if [tuple(p) for p in tokens.positions] != [(t, h, w) for t in range(T)
                                                 for h in range(H) for w in range(W)]:
        raise ContractError("tokens must be in (t, h, w) row-major order")
    cells = H * W
    frames = tokens.embeddings.reshape(T, cells, -1)
    events = temporal_cluster(frames.mean(axis=1), ratio, k)
    member_of = np.empty(len(tokens), dtype=np.int64)
    dist = np.empty(len(tokens))
    for t in range(T):
        e = events.member_of[t]
        member_of[t * cells:(t + 1) * cells] = e * cells + np.arange(cells)
        dist[t * cells:(t + 1) * cells] = events.center_distance[t]
    centers = (events.centers[:, None] * cells + np.arange(cells)[None, :]).ravel()
    assignment = ClusterAssignment(member_of, centers, dist, -dist)
    return compress_stage(tokens, assignment, rope), np.repeat(np.arange(events.n_clusters), cells)


def grouped_assignment(embeddings: np.ndarray, groups: np.ndarray, ratio: float,
                       k: int | None = None) -> tuple[ClusterAssignment, np.ndarray]:
    """Cluster each group independently; groups must be contiguous runs."""
    member_of = np.empty(len(embeddings), dtype=np.int64)
    dist = np.empty(len(embeddings))
    centers, out_groups = [], []
    offset = 0
    for g in dict.fromkeys(groups.tolist()):
        idx = np.flatnonzero(groups == g)
        sub = dpc_knn(embeddings[idx], cluster_count(ratio, len(idx)), k)
        member_of[idx] = sub.member_of + offset
        dist[idx] = sub.center_distance
        centers.extend(idx[sub.centers].tolist())
        out_groups.extend([g] * sub.n_clusters)
        offset += sub.n_clusters
    return (ClusterAssignment(member_of, np.asarray(centers, dtype=np.int64), dist, -dist),
            np.asarray(out_groups, dtype=np.int64))


def _execute(tokens: TokenSet, stages: Sequence[StageSpec],
             cfg: PipelineConfig) -> tuple[PipelineReport, TokenSet]:
    if len(tokens) == 0:
        raise PipelineError(0, "empty token set")
    n0 = len(tokens)
    current = tokens
    groups: np.ndarray | None = None
    stage_reports: list[StageReport] = []
    block_stats: list[BlockStats] = []

    def apply(i: int, spec: StageSpec):
        nonlocal current, groups
        n_in = len(current)
        if n_in == 0:
            raise PipelineError(i, "no tokens left to compress")
        start = time.perf_counter()
        skipped = False
        if spec.kind == "temporal":
            if current.grid[0] <= 1:
                warnings.warn(f"stage {i}: temporal stage on a single-frame input, skipped",
                              RuntimeWarning, stacklevel=3)
                skipped = True
            else:
                current, groups = temporal_merge(current, spec.ratio, cfg.rope, cfg.knn_k)
        elif groups is None:
            a = dpc_knn(current.embeddings, cluster_count(spec.ratio, n_in), cfg.knn_k)
            current = compress_stage(current, a, cfg.rope)
        else:
            a, groups = grouped_assignment(current.embeddings, groups, spec.ratio, cfg.knn_k)
            current = compress_stage(current, a, cfg.rope)
        if len(current) == 0:
            raise PipelineError(i, f"ratio {spec.ratio} left no tokens from {n_in}")
        stage_reports.append(StageReport(i, spec.kind, spec.placement, spec.ratio, n_in,
                                         len(current), len(current) / n_in, skipped,
                                         time.perf_counter() - start))

    indexed = list(enumerate(stages))
    for i, spec in indexed:
        if spec.placement == PRE:
            apply(i, spec)
    for b in range(1, cfg.blocks + 1):
        block = ToyAttentionBlock(current.width, cfg.attention, seed=cfg.seed * 1000 + b)
        current, amap = block(current)
        ent = attention_entropy(amap).mean(axis=0)
        var = attention_variance(amap).mean(axis=0)
        block_stats.append(BlockStats(b, len(current), float(ent.mean()), float(var.mean()),
                                      ent.tolist(), var.tolist()))
        for i, spec in indexed:
            if spec.placement == b:
                apply(i, spec)

    return PipelineReport(
        n_initial=n0,
        n_final=len(current),
        reduction_ratio=1.0 - len(current) / n0,
        ids_retained=ids_retained(current, n0),
        stages=stage_reports,
        attention=block_stats,
        stage_history=list(current.stage_history[len(tokens.stage_history):]),
    ), current


def run_pipeline(tokens: TokenSet, cfg: PipelineConfig) -> PipelineReport:
    return _execute(tokens, cfg.stages, cfg)[0]


def run_pipeline_tokens(tokens: TokenSet, cfg: PipelineConfig) -> tuple[PipelineReport, TokenSet]:
    """Like run_pipeline but also hands back the final token set."""
    return _execute(tokens, cfg.stages, cfg)


def run_spatiotemporal(tokens: TokenSet, temporal_ratio: float = TEMPORAL_RATIO,
                       spatial_ratio: float = SPATIAL_RATIO,
                       cfg: PipelineConfig | None = None) -> PipelineReport:
    """Temporal event merge, then spatial clustering inside each event.

    In-block stages from ``cfg`` still run afterwards; its pre-block stages are
    replaced by the two stages above.
    """
    cfg = cfg or PipelineConfig(rope=default_rope(tokens.grid))
    stages = [StageSpec(temporal_ratio, "temporal"), StageSpec(spatial_ratio, "spatial")]
    stages += [s for s in cfg.stages if s.placement != PRE]
    return _execute(tokens, stages, cfg)[0]
