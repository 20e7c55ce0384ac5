"""Command-line entry point: run, cfl, verify, mesh subcommands."""

import argparse
import sys

from .dynamics import cfl_constant
from .errors import InstabilityError, SolverError
from .harness import (RunConfig, emit_results, run_convergence_study,
                      run_property_suite)
from .linalg import RngState
from .mesh import build_cube_mesh, serialize_mesh


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _build_parser():
    parser = _Parser(prog="lumax",
                     description="Mass-lumped edge elements for the "
                                 "time-domain Maxwell system on the unit cube.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run",
                           help="convergence study against the elliptic projection")
    run_p.add_argument("--element", choices=("n1", "ej1", "mej1"),
                       default="mej1")
    run_p.add_argument("--case", choices=("divfree", "nondivfree"),
                       default="nondivfree")
    run_p.add_argument("--levels", type=int, nargs="+", default=[2, 4, 8, 16],
                       metavar="N", help="cube subdivisions, ascending")
    run_p.add_argument("--tau-factor", type=float, default=0.02)
    run_p.add_argument("--t-end", type=float, default=2.0)
    run_p.add_argument("--sample-every", type=int, default=10)
    run_p.add_argument("--seed", type=int, default=42)
    run_p.add_argument("--out", default=None, help="CSV output path")

    cfl_p = sub.add_parser("cfl", help="CFL constants per level")
    cfl_p.add_argument("--element", choices=("n1", "ej1", "mej1"),
                       default="mej1")
    cfl_p.add_argument("--levels", type=int, nargs="+", default=[2, 4, 8],
                       metavar="N")
    cfl_p.add_argument("--seed", type=int, default=42)
    cfl_p.add_argument("--out", default=None, help="CSV output path")

    sub.add_parser("verify", help="run the property suite")

    mesh_p = sub.add_parser("mesh", help="export a cube mesh as text")
    mesh_p.add_argument("--n", type=int, required=True,
                        help="subdivisions per axis")
    mesh_p.add_argument("--out", default=None,
                        help="output path (default stdout)")

    return parser


def _cmd_run(args):
    config = RunConfig(element=args.element, case=args.case,
                       levels=tuple(args.levels), tau_factor=args.tau_factor,
                       t_end=args.t_end, sample_every=args.sample_every,
                       seed=args.seed, out=args.out)
    rows = run_convergence_study(config)
    emit_results(rows, path=args.out)
    return 0


def _cmd_cfl(args):
    from .assembly import (assemble_lumped_mass, assemble_consistent_mass,
                           assemble_stiffness, build_dof_map)
    from .dynamics import CgMassSolver

    levels = sorted(set(args.levels))
    lines = ["level,h,ndof,lambda_max,tau_max,c"]
    table = [["level", "h", "ndof", "lambda_max", "tau_max", "c"]]
    for n in levels:
        mesh = build_cube_mesh(n)
        dofmap = build_dof_map(mesh, args.element)
        stiffness = assemble_stiffness(mesh, dofmap)
        if args.element == "n1":
            # sweep tolerances: the constant is meaningful to ~1%, tighter
            # nested solves only slow the large levels down
            mass = CgMassSolver(assemble_consistent_mass(mesh, dofmap),
                                tol=1e-6)
            tol = 1e-4
        else:
            mass = assemble_lumped_mass(mesh, dofmap)
            tol = 1e-5
        est = cfl_constant(mesh, mass, stiffness, tol=tol,
                           rng=RngState(args.seed))
        row = [str(n), f"{est.h:.6g}", str(dofmap.n_free),
               f"{est.lambda_max:.6g}", f"{est.tau_max:.6g}", f"{est.c:.6g}"]
        lines.append(",".join(row))
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(6)]
    for r in table:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def _cmd_verify(_args):
    report = run_property_suite()
    print(report.render())
    return 0 if report.all_passed else 3


def _cmd_mesh(args):
    if args.n < 1:
        print("lumax mesh: --n must be >= 1", file=sys.stderr)
        return 1
    text = serialize_mesh(build_cube_mesh(args.n))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "cfl": _cmd_cfl, "verify": _cmd_verify,
               "mesh": _cmd_mesh}[args.command]
    try:
        return handler(args)
    except (SolverError, InstabilityError) as exc:
        print(f"lumax {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"lumax {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
