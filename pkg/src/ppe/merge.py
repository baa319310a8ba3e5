"""Cluster merging: mean embeddings, top-K source positions, chunked PPE IDs.

Every token remembers which original grid tokens it still carries positions
for (``carried``). A fresh token carries only itself. A merged token carries
exactly ``capacity`` slots, filled from its cluster members by importance and
repeated cyclically when the cluster has fewer distinct sources than slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .clustering import ClusterAssignment
from .errors import ContractError, DataError
from .rope import Position3D, RopeConfig, fill_mrope_ids, merge_ppe_ids


class SourceRecord(NamedTuple):
    index: int
    t: int
    h: int
    w: int

    @property
    def position(self) -> Position3D:
        return Position3D(self.t, self.h, self.w)


@dataclass
class TokenSet:
    embeddings: np.ndarray
    carried: list[tuple[SourceRecord, ...]]
    grid: tuple[int, int, int]
    ids: np.ndarray | None = None
    stage_history: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.carried):
            raise ContractError(
                f"{len(self.carried)} carried lists for embeddings of shape {self.embeddings.shape}"
            )
        T, H, W = self.grid
        for records in self.carried:
            for r in records:
                if not (0 <= r.t < T and 0 <= r.h < H and 0 <= r.w < W):
                    raise DataError(f"position {tuple(r.position)} outside grid {self.grid}")

    @classmethod
    def from_positions(cls, embeddings, positions: Sequence[Sequence[int]],
                       grid: tuple[int, int, int]) -> "TokenSet":
        carried = [(SourceRecord(i, *map(int, p)),) for i, p in enumerate(positions)]
        return cls(np.asarray(embeddings, dtype=np.float64), carried, tuple(grid))

    @classmethod
    def from_grid(cls, embeddings, grid: tuple[int, int, int]) -> "TokenSet":
        """Tokens laid out in (t, h, w) row-major order over the full grid."""
        T, H, W = grid
        positions = [(t, h, w) for t in range(T) for h in range(H) for w in range(W)]
        return cls.from_positions(embeddings, positions, grid)

    def __len__(self) -> int:
        return len(self.carried)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    @property
    def positions(self) -> list[Position3D]:
        return [c[0].position for c in self.carried]

    def provenance(self, i: int) -> frozenset[int]:
        return frozenset(r.index for r in self.carried[i])

    def position_ids(self, config: RopeConfig) -> np.ndarray:
        """(N, D) ID matrix: stored PPE IDs if merged, else a plain fill."""
        if self.ids is not None and self.ids.shape[1] == config.lane_count:
            return self.ids
        return np.array([fill_mrope_ids(p, config) for p in self.positions],
                        dtype=np.int64).reshape(len(self), config.lane_count)


def merge_embeddings(assignment: ClusterAssignment, embeddings) -> np.ndarray:
    """Arithmetic mean per cluster.

    Computed as ``ref + mean(z - ref)`` with the first member as reference, so
    a cluster of identical vectors reproduces that vector bit for bit.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    out = np.empty((assignment.n_clusters, x.shape[1]))
    for j in range(assignment.n_clusters):
        idx = assignment.members(j)
        if len(idx) == 0:
            raise ContractError(f"cluster {j} is empty")
        ref = x[idx[0]]
        out[j] = ref + (x[idx] - ref).sum(axis=0) / len(idx)
    return out


def select_topk_ids(cluster_members, K: int) -> list[SourceRecord]:
    """Pick K source records for a cluster.

    ``cluster_members`` is a sequence of ``(token_index, importance, carried)``.
    Members are ranked by importance (then index); slots are filled round-robin
    across ranked members, each contributing its carried records in stored
    order, so two merged parents with K records each give K/2 apiece.
    """
    if not cluster_members:
        raise ContractError("cluster has no members")
    ranked = sorted(cluster_members, key=lambda m: (-m[1], m[0]))
    queues = [list(dict.fromkeys(m[2])) for m in ranked]
    pool: list[SourceRecord] = []
    seen: set[SourceRecord] = set()
    depth = 0
    while len(pool) < K and any(depth < len(q) for q in queues):
        for q in queues:
            if depth < len(q) and q[depth] not in seen:
                seen.add(q[depth])
                pool.append(q[depth])
                if len(pool) == K:
                    break
        depth += 1
    return [pool[i % len(pool)] for i in range(K)]


def compress_stage(tokens: TokenSet, assignment: ClusterAssignment, config: RopeConfig) -> TokenSet:
    if len(assignment.member_of) != len(tokens):
        raise ContractError(
            f"assignment covers {len(assignment.member_of)} tokens, token set has {len(tokens)}"
        )
    K = config.capacity
    carried, ids = [], []
    for j in range(assignment.n_clusters):
        members = [(int(i), float(assignment.importance[i]), tokens.carried[i])
                   for i in assignment.members(j)]
        slots = select_topk_ids(members, K)
        carried.append(tuple(slots))
        ids.append(merge_ppe_ids([fill_mrope_ids(r.position, config) for r in slots], config))
    return TokenSet(
        embeddings=merge_embeddings(assignment, tokens.embeddings),
        carried=carried,
        grid=tokens.grid,
        ids=np.array(ids, dtype=np.int64).reshape(len(carried), config.lane_count),
        stage_history=tokens.stage_history + [(len(tokens), len(carried))],
    )


def ids_retained(tokens: TokenSet, original_count: int) -> float:
    """Fraction of the original tokens whose position survives in some slot."""
    if original_count < 1:
        raise ContractError("original_count must be at least 1")
    survivors = set()
    for records in tokens.carried:
        survivors.update(r.index for r in records)
    return len(survivors) / original_count
