"""Command line: ``python -m fedlex {run,campaign,summarize} ...``.

Any config key can be overridden with ``--KEY VALUE`` / ``--KEY=VALUE`` or
``--set KEY=VALUE``; values are read as YAML scalars.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from fedlex.config import ConfigError
from fedlex.harness import (
    parse_campaign,
    parse_config,
    parse_overrides,
    run_campaign,
    summarize,
    write_ranks,
    write_summary,
)
from fedlex.orchestrator import run_experiment


def _split_flags(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "unexpected argument")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            i += 1
            raw = extra[i]
        out[key] = yaml.safe_load(raw)
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlex", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a config or manifest")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="run directory (default: runs/<variant>-seed<seed>)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--save-guidance", action="store_true", help="also dump the initial guidance matrix")

    c = sub.add_parser("campaign", help="run variants x sweep grid x seeds")
    c.add_argument("config")
    c.add_argument("--out", default=None, help="override output_dir")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("summarize", help="tabulate finished runs")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--out", default=None, help="directory for summary.csv and ranks.csv")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "summarize":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            rows, ranks, incomplete = summarize(args.dirs)
            for path in incomplete:
                print(f"incomplete: {path}", file=sys.stderr)
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                write_summary(rows, out / "summary.csv")
                write_ranks(ranks, out / "ranks.csv")
            print(f"{'variant':<14} {'point':<28} {'n':>3} {'accuracy':>16} {'rank':>6}")
            for row in rows:
                acc = f"{row.mean_acc:6.2f} +- {row.std_acc:5.2f}"
                print(f"{row.variant:<14} {row.point:<28} {row.n_runs:>3} {acc:>16} {row.mean_rank:>6.2f}")
            return 0

        overrides = {**parse_overrides(args.set), **_split_flags(extra)}
        if args.command == "run":
            cfg = parse_config(args.config, overrides)
            out = Path(args.out) if args.out else Path("runs") / f"{cfg.variant}-seed{cfg.seed}"
            history = run_experiment(cfg, out, save_guidance_matrix=args.save_guidance)
            last = history[-1]
            print(f"{cfg.variant} seed={cfg.seed}: round {last.round} mean_acc={last.mean_acc:.2f} "
                  f"pooled_acc={last.pooled_acc:.2f} -> {out}")
            return 0

        campaign = parse_campaign(args.config, overrides, output_dir=args.out)
        result = run_campaign(campaign)
        print(f"{len(result.run_dirs)} runs, {len(result.failures)} failed; summary: {result.summary_path}")
        return 0 if result.ok else 1
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
