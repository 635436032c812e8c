"""Semismooth Newton and damped Picard for the discrete viscous HJ problem

    find u_h:  (Du_h, Dphi) + (H(x, Du_h), phi) + lam (u_h, phi) = (f, phi)

on a P1 space with homogeneous Dirichlet conditions. The Newton matrix at
an iterate u is K + lam M + C(xi), where xi is one Clarke selection per
element (P1 gradients are constant, so the selection field is measurable
and exact) and C(xi)[i][j] = integral of (xi_T . Dphi_j) phi_i. Steps are
damped by halving until the residual decreases in the discrete dual norm
||r||_{(K+M)^{-1}}; the weight is lambda-independent so stopping behaves
uniformly across mesh sizes.

Picard iterates the linear solution operator on the lagged nonlinearity,
u <- (1-theta) u + theta (K + lam M)^{-1}(b - H-load(u)); it is slower but
derivative-free, and serves as an independent cross-check of Newton limits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from . import hamiltonian as hm
from .diagnostics import ConvergenceReport, fit_rate
from .fem import FemError, NonconvergenceError

_MAX_HALVINGS = 10  # damping grid 1, 1/2, ..., 2^-10


@dataclass(frozen=True)
class HjProblem:
    """Discrete problem data. f may be a scalar field (assembled with
    order-3 quadrature) or an already-assembled dual load vector."""

    space: fem.FeSpace
    model: hm.HamiltonianModel
    lam: float
    f: object
    extra_source: object = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list
    final_u: np.ndarray
    message: str = ""


def load_vector(problem: HjProblem) -> np.ndarray:
    if isinstance(problem.f, np.ndarray):
        b = np.asarray(problem.f, dtype=float)
        if b.shape != (problem.space.n_free,):
            raise ValueError("precomputed load has the wrong length")
    else:
        b = fem.assemble_load(problem.space, problem.f)
    if problem.extra_source is not None:
        b = b + fem.assemble_load(problem.space, problem.extra_source)
    return b


def hamiltonian_load(problem: HjProblem, u: np.ndarray) -> np.ndarray:
    """Dual vector of the nonlinearity: integral of H(x, Du_h) phi_i with
    order-3 points in x and the elementwise-constant gradient in z."""
    space = problem.space
    bary, weights, X = fem.quad_points(space, 3)
    Du = fem.element_gradients(space, u)
    vals = np.empty((X.shape[0], X.shape[1]))
    for q in range(X.shape[0]):
        vals[q] = hm.eval_many(problem.model, X[q], Du)
    if not np.isfinite(vals).all():
        raise FemError("non-finite Hamiltonian value in the nonlinear load")
    return fem.load_from_values(space, vals)


def hj_residual(problem: HjProblem, u: np.ndarray) -> np.ndarray:
    """r[i] = (Du_h, Dphi_i) + (H(., Du_h), phi_i) + lam (u_h, phi_i) - (f, phi_i)."""
    return _residual(problem, np.asarray(u, dtype=float), load_vector(problem))


def _residual(problem: HjProblem, u: np.ndarray, b: np.ndarray) -> np.ndarray:
    space = problem.space
    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    return K @ u + problem.lam * (M @ u) + hamiltonian_load(problem, u) - b


def newton_matrix(problem: HjProblem, u: np.ndarray):
    """K + lam M + C(xi) with xi = Clarke selection at (centroid, Du_h|_T)."""
    space = problem.space
    xi = hm.selection_field(problem.model, space, u)
    drift = np.einsum("td,tjd->tj", xi, space.elem_grads)  # xi_T . Dphi_j
    # integral of phi_i over T is |T|/3, independent of i
    local = (space.elem_areas[:, None] / 3.0 * drift)[:, None, :] * np.ones((1, 3, 1))
    C = fem.assemble_from_local(space, local)
    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    return (K + problem.lam * M + C).tocsr()


def solve_newton(problem: HjProblem, u0=None, tol=1e-10, max_iter=50) -> SolveReport:
    """Damped semismooth Newton; stops when the dual-norm residual <= tol.

    Damping tries s = 1, 1/2, ..., 2^-10 and accepts the first step that
    strictly decreases the residual norm; if none does, the report comes
    back converged=False rather than raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    space = problem.space
    u = np.zeros(space.n_free) if u0 is None else np.array(u0, dtype=float)
    rn = fem.residual_norm(space)
    b = load_vector(problem)
    r = _residual(problem, u, b)
    history = [rn(r)]
    iterations = 0
    while history[-1] > tol:
        if iterations >= max_iter:
            return SolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_u=u,
                message=f"iteration limit {max_iter} reached",
            )
        J = newton_matrix(problem, u)
        try:
            du = spla.splu(J.tocsc()).solve(r)
        except RuntimeError as exc:
            raise FemError(f"newton linear system is singular: {exc}") from exc
        accepted = False
        for k in range(_MAX_HALVINGS + 1):
            s = 0.5**k
            u_try = u - s * du
            r_try = _residual(problem, u_try, b)
            norm_try = rn(r_try)
            if norm_try < history[-1]:
                u, r = u_try, r_try
                history.append(norm_try)
                iterations += 1
                accepted = True
                break
        if not accepted:
            return SolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_u=u,
                message="damping exhausted without residual decrease",
            )
    return SolveReport(
        converged=True, iterations=iterations, residual_history=history, final_u=u
    )


def solve_picard(
    problem: HjProblem, u0=None, tol=1e-10, max_iter=200, theta_p=0.5
) -> SolveReport:
    """Relaxed fixed-point iteration on the lagged nonlinearity."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 < theta_p <= 1.0:
        raise ValueError("theta_p must lie in (0, 1]")
    space = problem.space
    u = np.zeros(space.n_free) if u0 is None else np.array(u0, dtype=float)
    rn = fem.residual_norm(space)
    b = load_vector(problem)
    history = [rn(_residual(problem, u, b))]
    iterations = 0
    while history[-1] > tol:
        if iterations >= max_iter:
            return SolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_u=u,
                message=f"iteration limit {max_iter} reached",
            )
        target = b - hamiltonian_load(problem, u)
        if not target.any():
            u_lin = np.zeros(space.n_free)
        else:
            u_lin = fem.solve_operator_Th(space, problem.lam, target)
        u = (1.0 - theta_p) * u + theta_p * u_lin
        iterations += 1
        history.append(rn(_residual(problem, u, b)))
    return SolveReport(
        converged=True, iterations=iterations, residual_history=history, final_u=u
    )


def convergence_study_hj(
    problem_factory,
    levels,
    u_exact,
    grad_exact,
    solver="newton",
    tol=1e-10,
    max_iter=100,
    theta_p=0.5,
    threads=1,
) -> ConvergenceReport:
    """Solve on a refinement family and fit H1/L2 error rates.

    problem_factory(n) must return the HjProblem for mesh parameter n.
    Levels run independently (optionally across a thread pool); a level
    that fails to converge aborts the study.
    """
    levels = [int(n) for n in levels]
    if levels != sorted(levels) or len(set(levels)) != len(levels):
        raise ValueError("levels must be strictly increasing")
    if solver not in ("newton", "picard"):
        raise ValueError(f"unknown solver {solver!r}")

    def run_level(n):
        problem = problem_factory(n)
        if solver == "newton":
            rep = solve_newton(problem, tol=tol, max_iter=max_iter)
        else:
            rep = solve_picard(problem, tol=tol, max_iter=max_iter, theta_p=theta_p)
        if not rep.converged:
            raise NonconvergenceError(
                f"level n={n} did not converge: {rep.message} "
                f"(residual {rep.residual_history[-1]:.3e})"
            )
        space = problem.space
        errs = {
            kind: fem.error_vs_exact(space, rep.final_u, u_exact, grad_exact, kind)
            for kind in ("L2", "H1")
        }
        return {
            "n": n,
            "h": space.mesh.mesh_size_h,
            "dofs": space.n_free,
            "errors": errs,
            "iterations": rep.iterations,
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_level, levels))
    else:
        rows = [run_level(n) for n in levels]
    rows.sort(key=lambda row: -row["h"])
    hs = [row["h"] for row in rows]
    errors = {kind: [row["errors"][kind] for row in rows] for kind in ("L2", "H1")}
    rates = {}
    if len(rows) >= 3:
        rates = {kind: fit_rate(hs, errors[kind]) for kind in errors}
    return ConvergenceReport(
        levels=[row["n"] for row in rows],
        hs=hs,
        dofs=[row["dofs"] for row in rows],
        errors=errors,
        rates=rates,
        meta={
            "solver": solver,
            "tol": tol,
            "iterations": [row["iterations"] for row in rows],
        },
    )
