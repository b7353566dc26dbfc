"""Command line entry point: ``capegraph <command> [options]``.

Every command takes an optional JSON config (``--config``) and repeatable
``--set key=value`` overrides whose values are parsed as JSON when possible.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .synthetic import dump_split, make_split
from .training import (ablate, episode_rng, eval_records, evaluate, export_attention_files,
                       make_source, replicate_support, train)

log = logging.getLogger("capegraph")


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, **_parse_overrides(args.set))


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def _load_ckpt(args):
    ckpt = checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    overrides = _parse_overrides(args.set)
    if args.data:
        overrides["annotations"] = args.data
    return ckpt, cfg.replace(**overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    split = make_split(np.random.default_rng(cfg.seed), cfg.n_train, cfg.n_val, cfg.n_test,
                       (cfg.k_min, cfg.k_max), cfg.edge_density)
    ds = dump_split(args.out, split, args.instances, np.random.default_rng([cfg.seed, 3]),
                    noise_std=cfg.noise_std, size=cfg.image_size)
    print(f"wrote {len(ds.categories)} categories, {len(ds.instances)} instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    resume = checkpoint.load(args.resume) if args.resume else None
    res = train(cfg, log_path=out / "metrics.jsonl", resume=resume)
    checkpoint.save(out / "model.ckpt", res.checkpoint)
    print(f"trained {res.checkpoint.epoch} epochs in {res.seconds:.0f}s; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg = _load_ckpt(args)
    source = make_source(cfg)
    hook = None
    if args.replicate:
        # five copies of the first support; must match 1-shot metrics
        hook = lambda ep, rng: replicate_support(ep, 5)  # noqa: E731
    res = evaluate(ckpt.params, cfg, source, args.split, n_shots=args.shots, episodes=args.episodes,
                   episode_hook=hook)
    rows = eval_records(res, args.split, ckpt.epoch)
    for name in res.skipped:
        rows.append({"split": args.split, "category": name, "skipped": True})
    _write_jsonl(Path(args.out), rows)
    print(f"mean PCK@0.2 = {res.mean_pck:.4f} over {len(res.per_category)} categories"
          + (f" ({len(res.skipped)} skipped)" if res.skipped else ""))
    return 0


def cmd_ablate(args) -> int:
    ckpt, cfg = _load_ckpt(args)
    fractions = [float(x) for x in args.fractions.split(",")]
    rows = ablate(ckpt.params, cfg, make_source(cfg), args.mode, fractions, args.split, args.episodes)
    _write_jsonl(Path(args.out), rows)
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_export_attention(args) -> int:
    ckpt, cfg = _load_ckpt(args)
    source = make_source(cfg)
    ep = source.episode(args.split, args.category, episode_rng(cfg.seed, 19, args.category, args.index), 1)
    files = export_attention_files(ckpt.params, cfg, ep, args.out)
    print(f"wrote {len(files)} attention grids to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capegraph", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field (repeatable)")

    p = sub.add_parser("gen-data", help="dump a synthetic split as images + annotation file")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--instances", type=int, default=10, help="instances per category")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training; writes model.ckpt and metrics.jsonl")
    common(p)
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "PCK@0.2 per category and mean"),
                                 ("ablate", cmd_ablate, "random-graph, masking and permutation ablations"),
                                 ("export-attention", cmd_export_attention, "dump decoder cross-attention")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="annotation file (default: checkpoint's data source)")
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--shots", type=int, choices=(1, 5), default=None)
            p.add_argument("--episodes", type=int, default=None)
            p.add_argument("--replicate", action="store_true", help="use five copies of one support")
        elif name == "ablate":
            p.add_argument("--mode", required=True,
                           choices=("random_graph", "mask_support", "mask_query", "permute_check"))
            p.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5,0.6")
            p.add_argument("--episodes", type=int, default=None)
        else:
            p.add_argument("--category", type=int, default=0, help="category index within the split")
            p.add_argument("--index", type=int, default=0, help="episode index (selects the sample)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
