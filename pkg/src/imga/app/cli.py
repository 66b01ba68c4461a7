"""``imga`` command line: ``run`` and the ``bench-*`` studies."""
import argparse
import json
import logging
import sys

from .config import ConfigError, load
from . import drivers

COMMANDS = {
    "run": drivers.run_simulation,
    "bench-inout": drivers.bench_inout,
    "bench-assembly": drivers.bench_assembly,
    "bench-partition": drivers.bench_partition,
    "bench-quadrature": drivers.bench_quadrature,
}


def build_parser():
    p = argparse.ArgumentParser(prog="imga", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="configuration file")
        s.add_argument("-o", "--output", help="output directory (overrides [output] directory)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config)
        result = COMMANDS[args.command](cfg, args.output)
    except (ConfigError, OSError) as exc:
        print(json.dumps({"status": "error", "kind": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # any module failure ends the run with a structured message
        print(json.dumps({"status": "error", "kind": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "result": result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
