"""Command line entry point: ``v2v-oe run`` and ``v2v-oe sweep``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import results
from .engine import InvariantError, run, sweep
from .scenario import POLICIES, ConfigError, load_config_file, parse_override

log = logging.getLogger("v2v_oe")


def _parse_values(text: str):
    """Comma separated list; each item parsed like a config override value."""
    return [parse_override(f"x={item.strip()}")[1] for item in text.split(",") if item.strip()]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v2v-oe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path, help="TOML scenario file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--policy", choices=POLICIES)
        sp.add_argument("--out", type=Path, default=Path("out"))

    r = sub.add_parser("run", help="simulate one seed")
    common(r)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--slots", type=int)
    r.add_argument("--trace", action="append", choices=("mobility", "auction"), default=[],
                   help="also write the per-slot mobility or auction log")

    s = sub.add_parser("sweep", help="vary one parameter over several seeds")
    common(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, type=_parse_values)
    s.add_argument("--seeds", required=True, type=lambda v: [int(x) for x in v.split(",") if x])
    s.add_argument("--jobs", type=int, default=1)
    return p


def _cmd_run(args, cfg) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    with contextlib.ExitStack() as stack:
        traces = {name: stack.enter_context(open(args.out / f"{name}_trace.csv", "w"))
                  for name in args.trace}
        summary = run(cfg, args.seed, args.policy, args.slots,
                      mobility_trace=traces.get("mobility"), auction_trace=traces.get("auction"))
    results.export(summary, args.out)
    conv = summary.convergence_slot
    print(" ".join(f"{k}={v:.6g}" for k, v in summary.averages.items())
          + f" convergence_slot={'not reached' if conv is None and summary.policy == 'oe' else conv}")


def _cmd_sweep(args, cfg) -> None:
    rows = sweep(cfg, args.param, args.values, args.seeds, args.policy, args.jobs)
    path = results.write_sweep(rows, args.out / "sweep.csv")
    print(f"wrote {len(rows)} rows to {path}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = dict(parse_override(item) for item in args.set)
        cfg = load_config_file(args.config, overrides)
        if args.command == "run":
            _cmd_run(args, cfg)
        else:
            _cmd_sweep(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated at {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
