"""Command line entry point ``cutfem-amr``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .amr import AmrConfig, ConfigError, adapt
from .io import CONFIG_KEYS, config_from_dict, ensure_dir, load_config, write_csv, write_step_vtk

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("cutfem_amr")


def execute(problem, cfg: AmrConfig, out_dir, vtk_every=0):
    """Run the adaptive loop and write ``convergence.csv`` (and VTK files)."""
    ensure_dir(out_dir)

    def on_step(rec, state):
        log.info("step %d  ndof %d  eta %.4e  err %.4e", rec.step, rec.ndof, rec.eta, rec.true_error)
        if vtk_every and rec.step % vtk_every == 0:
            write_step_vtk(os.path.join(out_dir, f"mesh_step_{rec.step}.vtk"), state)

    hist = adapt(problem, cfg, on_step=on_step)
    write_csv(hist, os.path.join(out_dir, "convergence.csv"))
    if hist.status != "ok":
        print(f"error: {hist.error}", file=sys.stderr)
        return EXIT_SOLVER, hist
    return EXIT_OK, hist


def _parser():
    p = argparse.ArgumentParser(prog="cutfem-amr", description="Adaptive CutFEM for the Poisson problem.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every step to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a JSON configuration")
    r.add_argument("config")
    r.add_argument("--out", default=".", help="output directory (default: current directory)")

    e = sub.add_parser("example", help="run one of the built-in benchmarks")
    e.add_argument("number", type=int, choices=[1, 2, 3, 4])
    e.add_argument("--uniform", action="store_true", help="refine every element")
    e.add_argument("--no-bc", action="store_true", help="leave the boundary correction out of eta")
    e.add_argument("--max-dof", type=int, default=None)
    e.add_argument("--theta", type=float, default=None)
    e.add_argument("--omega", type=float, default=None, help="corner angle for examples 3 and 4")
    e.add_argument("--vtk-every", type=int, default=0)
    e.add_argument("--out", default=".")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            problem, cfg, opts = load_config(args.config)
        else:
            doc = {"example": args.number, "uniform": args.uniform, "with_bc": not args.no_bc,
                   "vtk_every": args.vtk_every}
            if args.max_dof is not None:
                doc["max_dofs"] = args.max_dof
            if args.theta is not None:
                doc["theta"] = args.theta
            if args.omega is not None:
                doc["omega"] = args.omega
            assert set(doc) <= CONFIG_KEYS
            problem, cfg, opts = config_from_dict(doc)
        code, _ = execute(problem, cfg, args.out, opts["vtk_every"])
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
