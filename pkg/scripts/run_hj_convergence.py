#!/usr/bin/env python3
"""Refinement study for the viscous Hamilton-Jacobi solve; prints a rate table.

Example:
    python3 scripts/run_hj_convergence.py --levels 8,16,32,64 --hamiltonian eikonal
"""

import argparse

from nonsmooth_fem import fem, hj_solver, manufactured
from nonsmooth_fem.hamiltonian import model_from_spec
from nonsmooth_fem.mesh import unit_square_mesh


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", default="8,16,32,64")
    ap.add_argument("--hamiltonian", default="eikonal")
    ap.add_argument("--lambda", dest="lam", type=float, default=1.0)
    ap.add_argument("--solver", choices=("newton", "picard"), default="newton")
    ap.add_argument("--tol", type=float, default=1e-10)
    args = ap.parse_args()

    model = model_from_spec(args.hamiltonian)
    source = manufactured.hj_source(model, args.lam)

    def factory(n):
        space = fem.make_space(unit_square_mesh(n))
        return hj_solver.HjProblem(space=space, model=model, lam=args.lam, f=source)

    levels = [int(tok) for tok in args.levels.split(",")]
    study = hj_solver.convergence_study_hj(
        factory, levels, manufactured.u_star, manufactured.grad_u_star,
        solver=args.solver, tol=args.tol,
    )

    print(f"{'n':>5} {'h':>10} {'dofs':>7} {'L2':>12} {'H1':>12} {'iters':>6}")
    for i, n in enumerate(study.levels):
        print(
            f"{n:>5} {study.hs[i]:>10.4e} {study.dofs[i]:>7} "
            f"{study.errors['L2'][i]:>12.4e} {study.errors['H1'][i]:>12.4e} "
            f"{study.meta['iterations'][i]:>6}"
        )
    for kind, fit in study.rates.items():
        print(f"rate {kind}: slope={fit.slope:.3f} r2={fit.r_squared:.5f}")


if __name__ == "__main__":
    main()
