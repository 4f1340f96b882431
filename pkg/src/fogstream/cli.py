"""Command line entry point.

    fogstream list-scenarios
    fogstream validate <scenario>
    fogstream run <scenario> [--out DIR] [--seed N] [--duration-ms N]

<scenario> is a builtin name or a path to a scenario file. `run` exits
non-zero when the scenario's built-in shape assertions fail, so it can be
used directly from CI.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .errors import ScenarioError


def _load(name: str) -> harness.Scenario:
    if name in harness.BUILTIN_SCENARIOS:
        return harness.builtin_scenario(name)
    if os.path.exists(name):
        return harness.load_scenario(name)
    raise ScenarioError(f"no builtin or file named {name!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fogstream",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    sub.add_parser("list-scenarios", help="show builtin scenarios")

    p_val = sub.add_parser("validate", help="parse and check a scenario")
    p_val.add_argument("scenario")

    p_run = sub.add_parser("run", help="run a scenario and write CSVs")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", default="out",
                       help="output directory (default: ./out)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_run.add_argument("--duration-ms", type=int, default=None,
                       help="override the scenario duration")

    args = parser.parse_args(argv)

    if args.cmd == "list-scenarios":
        for name in sorted(harness.BUILTIN_SCENARIOS):
            print(name)
        return 0

    try:
        sc = _load(args.scenario)
        if args.cmd == "validate":
            harness.validate_scenario(sc)
            print(f"{sc.name}: ok")
            return 0
        if args.seed is not None:
            sc.config["seed"] = str(args.seed)
        if args.duration_ms is not None:
            sc.config["duration"] = str(args.duration_ms)
        res = harness.run(sc, args.out)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = "ok" if res["ok"] else "FAILED"
    print(f"{sc.name}: {status} (outputs in {args.out})")
    return 0 if res["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
