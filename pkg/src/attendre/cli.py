"""Command line entry point: ``attendre sweep`` and ``attendre trace``."""

from __future__ import annotations

import argparse
import sys

from .bench import METRIC_NOTE, dump_config, load_config, run_sweep, run_trace, write_report
from .errors import ConfigError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--policy", dest="policies", action="append",
                   help="policy list, e.g. fifo,lra_sum,lfa:0.001 (repeatable)")
    p.add_argument("--m", action="append", help="K/V memory sizes")
    p.add_argument("--n", action="append", help="Q memory sizes, paired with --m, or 'half'")
    p.add_argument("--k", type=int, help="retrieval width")
    p.add_argument("--chunk", type=int, help="chunk length S")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--task", choices=["needle", "question_first"])
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attendre", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sweep = sub.add_parser("sweep", help="run a policy x memory-size sweep and write CSV")
    _add_common(sweep)
    sweep.add_argument("--out", help="CSV output path (a .json summary is written alongside)")
    trace = sub.add_parser("trace", help="print the memory event log for one trial")
    _add_common(trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key, None)
        for key in ("policies", "m", "n", "k", "chunk", "seed", "trials", "task", "seq_len", "out")
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        if args.command == "trace":
            run_trace(cfg, sink=print)
            return 0
        rows = run_sweep(cfg)
        csv_path, json_path = write_report(rows, cfg, cfg.out)
    except ConfigError as exc:
        print(f"attendre: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"attendre: {exc}", file=sys.stderr)
        return 1

    print(f"# {METRIC_NOTE}")
    print(f"{'policy':<12}{'M':>6}{'N':>6}  {'retention':>9}  {'mass':>8}")
    for r in rows:
        print(f"{r['policy']:<12}{r['M']:>6}{r['N']:>6}  {r['retention_rate']:>9.3f}"
              f"  {r['final_attention_mass']:>8.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
