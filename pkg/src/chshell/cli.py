"""Command-line interface: ``run``, ``validate`` and ``inspect-mesh``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .integrator import SimulationAbort
from .io import ConfigError, parse_config, run
from .spline import MeshFormatError, check_partition_of_unity, edge_continuity, \
    load_extraction_mesh

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chshell", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a simulation")
    r.add_argument("config")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", default="output", help="output directory")
    r.add_argument("--seed", type=int, help="shorthand for --set phase.seed=N")
    r.add_argument("--resume", help="checkpoint to continue from")
    r.add_argument("-v", "--verbose", action="count", default=0)
    v = sub.add_parser("validate", help="check a configuration without running")
    v.add_argument("config")
    v.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    m = sub.add_parser("inspect-mesh", help="validate and summarize an extraction file")
    m.add_argument("file")
    return ap


def _load(args):
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"phase.seed={args.seed}")
    with open(args.config, encoding="utf-8") as fh:
        return parse_config(fh, overrides, out_dir=getattr(args, "out", "output"),
                            base_dir=os.path.dirname(os.path.abspath(args.config)),
                            verbosity=getattr(args, "verbose", 0))


def _inspect(path: str, out) -> None:
    with open(path, encoding="utf-8") as fh:
        space, nodes = load_extraction_mesh(fh, validate=False)
    check_partition_of_unity(space)
    rep = edge_continuity(space)
    out.write(f"degree {space.degree}, {space.n_basis} basis functions, "
              f"{space.n_elements} elements, rational: {space.is_rational}\n")
    out.write(f"control points: {'present' if nodes is not None else 'absent'}\n")
    out.write(f"edges checked: {rep.edges_checked}, max C0 jump {rep.c0_jump:.3e}, "
              f"max C1 jump {rep.c1_jump:.3e}, min basis value {rep.negative_min:.3e}\n")
    if nodes is not None:
        lo, hi = np.min(nodes, axis=0), np.max(nodes, axis=0)
        out.write(f"bounding box: {lo.tolist()} .. {hi.tolist()}\n")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect-mesh":
            _inspect(args.file, sys.stdout)
            return EXIT_OK
        rc, scenario = _load(args)
        if args.command == "validate":
            sys.stdout.write(f"ok: {scenario.name}, {scenario.space.n_basis} basis functions, "
                             f"{scenario.space.n_elements} elements\n")
            return EXIT_OK
        run(rc, scenario, resume=args.resume, stdout=sys.stdout)
        return EXIT_OK
    except (ConfigError, MeshFormatError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except SimulationAbort as exc:
        sys.stderr.write(f"aborted: {exc}\n")
        return EXIT_ABORT


if __name__ == "__main__":
    raise SystemExit(main())
