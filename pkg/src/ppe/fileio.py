"""Token files, report files and heatmap export.

Token file layout (all little-endian), 32-byte header then payload::

    0   4s  magic  b"PTOK"
    4   u16 version (1)
    6   u16 flags   (bit 0: sidecar carries merged-token records)
    8   u32 T
    12  u32 H
    16  u32 W
    20  u32 N
    24  u32 embed_width
    28  u32 CRC32 of payload
    32  N * embed_width float32, row-major

Positions live in a JSON sidecar next to the binary (``<path>.json``)::

    {"tokens": [{"index": i, "t": t, "h": h, "w": w}, ...],
     "stage_history": [[n_in, n_out], ...]}

Merged tokens add ``"carried": [[index, t, h, w], ...]`` and ``"ids": [...]``.
All writes go to a temporary file in the target directory and are renamed
into place, so a failed write never leaves a partial file behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError
from .merge import SourceRecord, TokenSet

MAGIC = b"PTOK"
VERSION = 1
FLAG_MERGED = 0x1
HEADER = struct.Struct("<4sHHIIIIII")


class TokenFileError(DataError):
    code = "token-file"


class BadMagicError(TokenFileError):
    code = "bad-magic"


class VersionMismatchError(TokenFileError):
    code = "version-mismatch"


class ChecksumError(TokenFileError):
    code = "checksum"


class TruncatedPayloadError(TokenFileError):
    code = "truncated"


class SidecarError(TokenFileError):
    code = "sidecar"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tokens(tokens: TokenSet) -> tuple[bytes, str]:
    merged = any(len(c) != 1 or c[0].index != i for i, c in enumerate(tokens.carried))
    merged = merged or tokens.ids is not None
    payload = np.ascontiguousarray(tokens.embeddings, dtype="<f4").tobytes()
    T, H, W = tokens.grid
    header = HEADER.pack(MAGIC, VERSION, FLAG_MERGED if merged else 0, T, H, W,
                         len(tokens), tokens.width, zlib.crc32(payload))
    entries = []
    for i, records in enumerate(tokens.carried):
        head = records[0]
        entry = {"index": i, "t": head.t, "h": head.h, "w": head.w}
        if merged:
            entry["carried"] = [list(r) for r in records]
            if tokens.ids is not None:
                entry["ids"] = tokens.ids[i].tolist()
        entries.append(entry)
    sidecar = json.dumps({"tokens": entries,
                          "stage_history": [list(p) for p in tokens.stage_history]},
                         indent=1)
    return header + payload, sidecar


def save_tokens(tokens: TokenSet, path) -> None:
    blob, sidecar = encode_tokens(tokens)
    atomic_write(sidecar_path(path), sidecar)
    atomic_write(path, blob)


def decode_tokens(blob: bytes, sidecar: str) -> TokenSet:
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(f"file holds {len(blob)} bytes, header needs {HEADER.size}")
    magic, version, flags, T, H, W, N, width, crc = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    payload = blob[HEADER.size:]
    expected = N * width * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    payload = payload[:expected]
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    emb = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(N, width)
    try:
        doc = json.loads(sidecar)
        entries = doc["tokens"]
        if len(entries) != N:
            raise SidecarError(f"sidecar lists {len(entries)} tokens, header says {N}")
        carried, ids = [], []
        for i, e in enumerate(entries):
            if "carried" in e:
                carried.append(tuple(SourceRecord(*map(int, r)) for r in e["carried"]))
            else:
                carried.append((SourceRecord(i, int(e["t"]), int(e["h"]), int(e["w"])),))
            if "ids" in e:
                ids.append(e["ids"])
        history = [tuple(p) for p in doc.get("stage_history", [])]
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, TokenFileError):
            raise
        raise SidecarError(f"malformed sidecar: {err!r}") from err
    id_arr = np.asarray(ids, dtype=np.int64) if ids and len(ids) == N else None
    return TokenSet(emb, carried, (T, H, W), id_arr, history)


def load_tokens(path) -> TokenSet:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise SidecarError(f"missing sidecar {side}")
    return decode_tokens(path.read_bytes(), side.read_text())


def save_report(report, path, fmt: str = "structured", timings: bool = False) -> None:
    atomic_write(path, format_report(report, fmt, timings))


def format_report(report, fmt: str = "structured", timings: bool = False) -> str:
    d = report.to_dict(timings=timings)
    if fmt == "structured":
        return json.dumps(d, indent=1, sort_keys=True) + "\n"
    lines = [
        f"tokens: {d['n_initial']} -> {d['n_final']}",
        f"reduction_ratio: {d['reduction_ratio']:.4f}",
        f"ids_retained: {d['ids_retained']:.4f}",
    ]
    for s in d["stages"]:
        line = (f"stage {s['index']} {s['kind']} @{s['placement']} ratio={s['ratio']}: "
                f"{s['n_in']} -> {s['n_out']} ({s['ratio_measured']:.4f})")
        if s["skipped"]:
            line += " skipped"
        if timings:
            line += f" {s['seconds'] * 1e3:.1f} ms"
        lines.append(line)
    for b in d["attention"]:
        lines.append(f"block {b['block']}: tokens={b['n_tokens']} "
                     f"entropy={b['entropy_mean']:.6f} variance={b['variance_mean']:.3e}")
    return "\n".join(lines) + "\n"


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def format_grid(grid: np.ndarray) -> str:
    """One row per line, space-separated; frames of a 3D grid split by blank lines."""
    grid = np.asarray(grid, dtype=np.float64)
    frames = grid[None] if grid.ndim == 2 else grid
    blocks = ["\n".join(" ".join(f"{v:.6f}" for v in row) for row in frame) for frame in frames]
    return "\n\n".join(blocks) + "\n"


def encode_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary graymap; values are clipped to [0, 1]. 3D grids are tiled vertically."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 3:
        grid = grid.reshape(-1, grid.shape[-1])
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def save_heatmap(grid: np.ndarray, path, fmt: str = "text") -> None:
    atomic_write(path, encode_pgm(grid) if fmt == "pgm" else format_grid(grid))
