"""Command-line front end.

``subgeom validate-rate --scenario S`` checks the rate function alone;
``subgeom run --scenario S`` runs the full pipeline. Exit status is 0 when every
check passes, 1 when a check fails and 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import scenario as scen
from .errors import ConfigError

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("subgeom")


def _parser():
    p = argparse.ArgumentParser(prog="subgeom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("validate-rate", "check the rate function's assumptions and lemmas"),
                        ("run", "run the full verification pipeline")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scenario", required=True, help="scenario JSON path or bundled scenario name")
        s.add_argument("--seed", type=int, help="master seed (overrides the scenario)")
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("--paths", type=int, help="Monte Carlo paths per estimate")
        s.add_argument("--jobs", type=int, help="worker threads for path simulation")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args):
    return scen.load_scenario(args.scenario, {
        "estimator.seed": args.seed, "estimator.n_paths": args.paths, "estimator.jobs": args.jobs,
    })


def cmd_validate_rate(args) -> int:
    return scen.validate_rate(_load(args), args.out)


def cmd_full_pipeline(args) -> int:
    return scen.Pipeline(_load(args), args.out).run()


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = cmd_validate_rate if args.command == "validate-rate" else cmd_full_pipeline
    try:
        code = handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("wrote results to %s", args.out)
    print("PASS" if code == EXIT_PASS else "FAIL", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
