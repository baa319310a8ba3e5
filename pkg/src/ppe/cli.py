"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (including a failing
``selftest``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .attention import ToyAttentionBlock, attention_entropy, attention_variance, project_heatmap
from .cascade import PRE, SPATIAL_RATIO, PipelineConfig, StageSpec, default_rope, run_pipeline_tokens
from .errors import ConfigError, ParameterError, PPEError
from .rope import RopeConfig, section_gcd
from .selftest import run_selftest
from .synth import PATTERNS, gen_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_stages(text: str) -> tuple[StageSpec, ...]:
    """``[kind:]ratio[@placement]`` items, comma separated.

    kind is ``s``/``spatial`` or ``t``/``temporal``; placement is ``pre`` or a
    block number. Without explicit placements a lone stage runs before the
    first block and a list of stages runs after blocks 1, 2, 3, ...
    """
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError("empty --stages")
    stages = []
    for i, item in enumerate(items):
        kind = "spatial"
        if ":" in item:
            k, item = item.split(":", 1)
            kinds = {"s": "spatial", "spatial": "spatial", "t": "temporal", "temporal": "temporal"}
            if k not in kinds:
                raise ConfigError(f"unknown stage kind {k!r}")
            kind = kinds[k]
        if "@" in item:
            item, where = item.split("@", 1)
            placement = PRE if where == "pre" else int(where)
        else:
            placement = PRE if len(items) == 1 else i + 1
        stages.append(StageSpec(float(item), kind, placement))
    return tuple(stages)


def parse_sections(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --sections {text!r}") from None


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PPE_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PPE_SEED must be an integer, got {env!r}") from None
    return 0


def build_config(args, grid) -> PipelineConfig:
    if args.config:
        try:
            base = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        d = base.to_dict()
    else:
        d = PipelineConfig(rope=default_rope(grid)).to_dict()
        d["stages"] = [{"ratio": SPATIAL_RATIO, "kind": "spatial", "placement": PRE}]
    if args.sections or args.capacity:
        sections = parse_sections(args.sections) if args.sections else tuple(d["rope"]["sections"])
        capacity = args.capacity or (d["rope"]["capacity"] if not args.sections
                                     else section_gcd(sections))
        rope = RopeConfig(sum(sections), sections, d["rope"]["freq_base"], capacity)
        d["rope"] = {"lane_count": rope.lane_count, "sections": list(rope.sections),
                     "freq_base": rope.freq_base, "capacity": rope.capacity}
    if args.stages:
        d["stages"] = [vars(s) for s in parse_stages(args.stages)]
    elif args.ratio is not None:
        d["stages"] = [{"ratio": args.ratio, "kind": "spatial", "placement": PRE}]
    if args.seed is not None or not args.config:
        d["seed"] = resolve_seed(args)
    return PipelineConfig.from_dict(d)


def load_or_generate(args, seed: int):
    if args.input:
        return fileio.load_tokens(args.input)
    return gen_synthetic(args.T, args.H, args.W, args.width, args.pattern, seed, args.groups)


def emit(text: str, out) -> None:
    if out:
        fileio.atomic_write(out, text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    tokens = gen_synthetic(args.T, args.H, args.W, args.width, args.pattern,
                           resolve_seed(args), args.groups)
    fileio.save_tokens(tokens, args.out)
    print(f"wrote {len(tokens)} tokens ({args.T}x{args.H}x{args.W}, width {args.width}) "
          f"to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_compress(args) -> int:
    seed = resolve_seed(args)
    tokens = load_or_generate(args, seed)
    cfg = build_config(args, tokens.grid)
    report, final = run_pipeline_tokens(tokens, cfg)
    emit(fileio.format_report(report, args.format, args.timings), args.out)
    if args.save_tokens:
        fileio.save_tokens(final, args.save_tokens)
    return EXIT_OK


def cmd_inspect(args) -> int:
    tokens = fileio.load_tokens(args.input)
    emb = tokens.embeddings
    info = {
        "tokens": len(tokens),
        "grid": list(tokens.grid),
        "embed_width": tokens.width,
        "merged": tokens.ids is not None,
        "stage_history": [list(p) for p in tokens.stage_history],
        "mean_norm": float(np.linalg.norm(emb, axis=1).mean()) if len(tokens) else 0.0,
        "distinct_sources": len({r.index for c in tokens.carried for r in c}),
    }
    if args.format == "structured":
        text = json.dumps(info, indent=1, sort_keys=True) + "\n"
    else:
        text = "".join(f"{k}: {v}\n" for k, v in info.items())
    emit(text, args.out)
    return EXIT_OK


def cmd_attn(args) -> int:
    seed = resolve_seed(args)
    tokens = load_or_generate(args, seed)
    cfg = build_config(args, tokens.grid)
    # compression only: run just enough blocks to reach the last stage
    last = max((st.placement for st in cfg.stages), default=0)
    _, final = run_pipeline_tokens(tokens, dataclasses.replace(cfg, blocks=last))
    block = ToyAttentionBlock(final.width, cfg.attention, seed=cfg.seed)
    _, amap = block(final)
    heat = project_heatmap(amap, final)
    ent = attention_entropy(amap)
    var = attention_variance(amap)
    summary = {
        "tokens": len(final),
        "entropy_mean": float(ent.mean()),
        "variance_mean": float(var.mean()),
        "nonzero_cells": int(np.count_nonzero(heat)),
        "cells": int(heat.size),
    }
    if args.out:
        fileio.save_heatmap(heat, args.out, "pgm" if str(args.out).endswith(".pgm") else "text")
    if args.format == "structured":
        sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    else:
        sys.stdout.write("".join(f"{k}: {v}\n" for k, v in summary.items()))
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest(resolve_seed(args)) else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $PPE_SEED)")
    common.add_argument("--out", default=None, help="output path (stdout when omitted)")
    common.add_argument("--format", choices=("text", "structured"), default="structured")

    pipeline = _Parser(add_help=False)
    pipeline.add_argument("input", nargs="?", help="token file; a synthetic grid when omitted")
    pipeline.add_argument("--config", help="JSON pipeline config")
    pipeline.add_argument("--ratio", type=float, help="single pre-block spatial stage ratio")
    pipeline.add_argument("--capacity", type=int, help="PPE capacity K")
    pipeline.add_argument("--sections", help="rotary sections, e.g. 16,24,24")
    pipeline.add_argument("--stages", help="stage list, e.g. 0.45,0.45,0.45 or t:0.0625@pre,0.45@1")

    grid = _Parser(add_help=False)
    grid.add_argument("--T", type=int, default=1)
    grid.add_argument("--H", type=int, default=20)
    grid.add_argument("--W", type=int, default=20)
    grid.add_argument("--width", type=int, default=32)
    grid.add_argument("--pattern", choices=PATTERNS, default="blobs")
    grid.add_argument("--groups", type=int, default=2)

    parser = _Parser(prog="ppe", description="Position-preserving visual token compression")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common, grid], help="write a synthetic token file")
    p.set_defaults(func=cmd_gen)
    p = sub.add_parser("compress", parents=[common, pipeline, grid], help="run a pipeline, write a report")
    p.add_argument("--timings", action="store_true", help="include wall time (breaks byte determinism)")
    p.add_argument("--save-tokens", help="also write the compressed token set")
    p.set_defaults(func=cmd_compress)
    p = sub.add_parser("inspect", parents=[common], help="summarize a token file")
    p.add_argument("input")
    p.set_defaults(func=cmd_inspect)
    p = sub.add_parser("attn", parents=[common, pipeline, grid], help="attention harness and heatmap")
    p.set_defaults(func=cmd_attn)
    p = sub.add_parser("selftest", parents=[common], help="run the invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen" and not args.out:
            raise UsageError("ppe gen: --out is required")
        return args.func(args)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    except (ConfigError, ParameterError) as e:
        print(f"ppe: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PPEError, OSError) as e:
        print(f"ppe: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(cli_main())
