"""Command line: run one scenario or the countermeasure matrix.

    dicelab run --scenario baseline-attack [--seed N] [--transport inproc|udp]
                [--trace FILE] [--json]
    dicelab matrix [--seed N] [--scenarios a,b,...]
    dicelab list

Exit status is 0 when every declared expectation holds, 1 when one is
violated and 2 for usage errors (including unreadable scenario files).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .errors import DiceLabError, ScenarioError
from .scenario import BUILTIN, MATRIX, format_matrix, load_scenario, run_matrix, run_scenario


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dicelab",
                                description="DICE credential-replay lab on a simulated MCU")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and print its report")
    run.add_argument("--scenario", required=True, help="built-in name or scenario file")
    run.add_argument("--seed", type=_seed, help="override the scenario seed")
    run.add_argument("--transport", choices=("inproc", "udp"), help="override the transport")
    run.add_argument("--trace", metavar="PATH", help="write an instruction trace here")
    run.add_argument("--json", action="store_true", help="emit a JSON summary instead")

    mat = sub.add_parser("matrix", help="run the countermeasure matrix")
    mat.add_argument("--seed", type=_seed, help="seed applied to every row")
    mat.add_argument("--scenarios", default=",".join(MATRIX),
                     help="comma-separated names or files (empty for none)")

    sub.add_parser("list", help="list built-in scenarios")
    return p


def _override(scenario, args):
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "transport", None):
        kw["transport"] = args.transport
    return replace(scenario, **kw) if kw else scenario


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            for name, sc in BUILTIN.items():
                cm = sc.kind.value if sc.kind else "none"
                print(f"{name:34} countermeasure={cm} attack={'yes' if sc.attack else 'no'}")
            return 0
        if args.command == "run":
            scenario = _override(load_scenario(args.scenario), args)
            if args.trace:
                with open(args.trace, "w") as fh:
                    result = run_scenario(scenario, trace=lambda line: fh.write(line + "\n"))
            else:
                result = run_scenario(scenario)
            if args.json:
                print(json.dumps(result.as_dict(), indent=2))
            else:
                sys.stdout.write(result.report())
            return 0 if result.ok else 1
        names = [n.strip() for n in args.scenarios.split(",") if n.strip()]
        scenarios = [_override(load_scenario(n), args) for n in names]
        rows = run_matrix(scenarios)
        sys.stdout.write(format_matrix(rows))
        return 0 if all(r.ok for r in rows) else 1
    except ScenarioError as exc:
        parser.print_usage(sys.stderr)
        print(f"dicelab: error: {exc}", file=sys.stderr)
        return 2
    except (DiceLabError, OSError) as exc:
        print(f"dicelab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
