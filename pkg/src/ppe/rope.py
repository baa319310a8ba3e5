"""Rotary position encoding with multi-axis sections and chunked multi-position IDs.

Embeddings are handled in complex-lane form: a real vector of width ``2D`` is
read as ``D`` complex lanes built from adjacent pairs ``(x[2d], x[2d+1])``.
ID vectors hold one integer position per lane. A plain multi-axis fill puts
``t``, ``h`` and ``w`` into consecutive sections; the chunked merge splits each
section into ``capacity`` equal chunks so one vector carries several source
positions at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_BASE = 10000.0


class Position3D(NamedTuple):
    t: int
    h: int
    w: int


@dataclass(frozen=True)
class RopeConfig:
    """Lane layout for rotary encoding.

    ``sections`` has one entry (1D), two entries (h, w) or three (t, h, w) and
    must sum to ``lane_count``. ``capacity`` is the number of source positions a
    merged ID vector can hold; it has to divide every section.
    """

    lane_count: int
    sections: tuple[int, ...]
    freq_base: float = DEFAULT_BASE
    capacity: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(int(s) for s in self.sections))
        if self.lane_count <= 0:
            raise ConfigError(f"lane_count must be positive, got {self.lane_count}")
        if not 1 <= len(self.sections) <= 3 or any(s <= 0 for s in self.sections):
            raise ConfigError(f"sections must be 1-3 positive sizes, got {list(self.sections)}")
        if sum(self.sections) != self.lane_count:
            raise ConfigError(
                f"sections {list(self.sections)} sum to {sum(self.sections)}, "
                f"expected lane_count {self.lane_count}"
            )
        if not self.freq_base > 1:
            raise ConfigError(f"freq_base must exceed 1, got {self.freq_base}")
        if self.capacity <= 0:
            raise ConfigError(f"capacity must be positive, got {self.capacity}")
        bad = [s for s in self.sections if s % self.capacity]
        if bad:
            raise ConfigError(
                f"capacity {self.capacity} does not divide sections {bad} "
                f"(gcd of sections is {section_gcd(self.sections)})"
            )

    @classmethod
    def from_sections(cls, sections: Sequence[int], capacity: int | None = None,
                      freq_base: float = DEFAULT_BASE) -> "RopeConfig":
        """Build a config whose capacity defaults to the gcd of the sections."""
        sections = tuple(int(s) for s in sections)
        if capacity is None:
            capacity = section_gcd(sections)
        return cls(sum(sections), sections, freq_base, capacity)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.sections:
            out.append(acc)
            acc += s
        return tuple(out)

    def with_capacity(self, capacity: int) -> "RopeConfig":
        return RopeConfig(self.lane_count, self.sections, self.freq_base, capacity)


def section_gcd(sections: Sequence[int]) -> int:
    return reduce(math.gcd, (int(s) for s in sections))


DEFAULT_3D = RopeConfig(64, (16, 24, 24), DEFAULT_BASE, 8)
DEFAULT_2D = RopeConfig(64, (32, 32), DEFAULT_BASE, 32)


def build_frequencies(config: RopeConfig) -> np.ndarray:
    """theta_d = base ** (-2(d-1) / 2D) for d = 1..D, indexed globally across sections."""
    d = np.arange(config.lane_count, dtype=np.float64)
    return config.freq_base ** (-2.0 * d / (2.0 * config.lane_count))


def fill_rope_ids(m: int, config: RopeConfig) -> np.ndarray:
    """1D fill: every lane carries the same sequence position."""
    return np.full(config.lane_count, int(m), dtype=np.int64)


def fill_mrope_ids(pos: Position3D | Sequence[int], config: RopeConfig) -> np.ndarray:
    t, h, w = (int(v) for v in pos)
    if min(t, h, w) < 0:
        raise ContractError(f"positions must be non-negative, got {(t, h, w)}")
    if len(config.sections) == 3:
        values = (t, h, w)
    elif len(config.sections) == 2:
        values = (h, w)
    else:
        raise ConfigError("multi-axis fill needs 2 or 3 sections; use fill_rope_ids for 1D")
    return np.repeat(np.asarray(values, dtype=np.int64), config.sections)


def merge_ppe_ids(ranked_ids: Sequence[np.ndarray], config: RopeConfig) -> np.ndarray:
    """Assemble one ID vector from ``capacity`` ranked source vectors.

    Inside every section, chunk ``k`` (of ``capacity`` equal chunks) copies the
    lanes of the k-th ranked source. Rank order is the same in every section,
    so chunk 0 always holds the highest-ranked source.
    """
    K = config.capacity
    if len(ranked_ids) != K:
        raise ContractError(f"expected exactly {K} ranked ID vectors, got {len(ranked_ids)}")
    stacked = np.asarray(ranked_ids, dtype=np.int64)
    if stacked.shape != (K, config.lane_count):
        raise ContractError(f"ID vectors must have length {config.lane_count}, got shape {stacked.shape}")
    out = np.empty(config.lane_count, dtype=np.int64)
    for offset, size in zip(config.offsets, config.sections):
        chunk = size // K
        for k in range(K):
            lo = offset + k * chunk
            out[lo:lo + chunk] = stacked[k, lo:lo + chunk]
    return out


def to_complex(x: np.ndarray) -> np.ndarray:
    """Real (..., 2D) -> complex (..., D) using adjacent pairs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ContractError(f"real width must be even, got {x.shape[-1]}")
    return x[..., 0::2] + 1j * x[..., 1::2]


def to_real(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def rotate(emb: np.ndarray, ids: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Lane-wise rotation ``exp(i * m_d * theta_d) * z_d``.

    Broadcasts over leading axes, so ``emb`` may be (..., D) with ``ids`` of
    shape (..., D) or (D,).
    """
    emb = np.asarray(emb, dtype=np.complex128)
    ids = np.asarray(ids)
    freqs = np.asarray(freqs, dtype=np.float64)
    D = freqs.shape[-1]
    if emb.shape[-1] != D or ids.shape[-1] != D:
        raise ContractError(
            f"lane mismatch: embedding {emb.shape[-1]}, ids {ids.shape[-1]}, freqs {D}"
        )
    angle = ids.astype(np.float64) * freqs
    return emb * (np.cos(angle) + 1j * np.sin(angle))
