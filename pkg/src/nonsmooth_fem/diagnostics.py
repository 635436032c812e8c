"""Stability diagnostics: weighted smallest singular values, perturbation
slack, selection-sampling scans of the coupled linearization, and rate fits.

The quantity of interest is the Banach constant of a linear map between
Gram-weighted spaces: the largest kappa such that the image of the unit
ball contains the kappa-ball, equal to the smallest singular value in the
weighted geometry and to 1/||A^{-1}|| for isomorphisms. A uniform-in-h
lower bound on this constant for the linearized coupled system is the
checkable shadow of the stability assumptions behind the error estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(err) against log(h)."""

    slope: float
    r_squared: float
    intercept: float


def fit_rate(hs, errs) -> RateFit:
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if hs.shape != errs.shape or hs.ndim != 1 or len(hs) < 3:
        raise ValueError("rate fit needs at least 3 (h, err) pairs")
    if (hs <= 0).any() or (errs <= 0).any():
        raise ValueError("rate fit requires positive mesh sizes and errors")
    x = np.log(hs)
    y = np.log(errs)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 and ss_res <= 1e-28 else 1.0 - ss_res / ss_tot
    return RateFit(slope=float(slope), r_squared=float(r2), intercept=float(intercept))


@dataclass
class ConvergenceReport:
    """Refinement-study record: one row per mesh level, coarse to fine."""

    levels: list
    hs: list
    dofs: list
    errors: dict  # norm label -> list of errors, aligned with levels
    rates: dict  # norm label -> RateFit (only when >= 3 levels)
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GramPair:
    """SPD weights fixing the norms on domain (X) and range (Y) spaces."""

    gram_X: object
    gram_Y: object

    def __post_init__(self):
        for name, G in (("gram_X", self.gram_X), ("gram_Y", self.gram_Y)):
            A = _dense(G)
            if not np.allclose(A, A.T, atol=1e-12 * (1 + np.abs(A).max())):
                raise ValueError(f"{name} must be symmetric")
            try:
                scipy.linalg.cholesky(A)
            except scipy.linalg.LinAlgError as exc:
                raise ValueError(f"{name} must be positive definite") from exc


@dataclass
class StabilityScanReport:
    """Smallest weighted singular values of the coupled linearization,
    per mesh level and per sampled kink-selection."""

    hs: list
    smin: list  # list (per level) of lists (per selection sample)
    min_per_level: list
    ratio_max_min: float
    meta: dict = field(default_factory=dict)


def _dense(A) -> np.ndarray:
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A, dtype=float)


def identity_grams(n: int) -> GramPair:
    return GramPair(gram_X=np.eye(n), gram_Y=np.eye(n))


_DENSE_CUTOFF = 800


def banach_constant(A, grams: GramPair | None = None) -> float:
    """Smallest singular value of A measured between the Gram-weighted
    spaces: min ||A x||_{gram_Y} over ||x||_{gram_X} = 1.

    Dense path (n below ~800): whiten both sides by Cholesky factors and
    take the smallest SVD value, accurate to roundoff. Large sparse path:
    shift-invert Lanczos on the generalized eigenproblem
    A^T gram_Y A x = s^2 gram_X x with a deterministic start vector.
    """
    n = A.shape[1]
    if grams is None:
        grams = GramPair(gram_X=np.eye(n), gram_Y=np.eye(A.shape[0]))
    if A.shape[0] != _shape_of(grams.gram_Y) or n != _shape_of(grams.gram_X):
        raise ValueError("gram shapes do not match the operator")
    if n <= _DENSE_CUTOFF:
        Ad = _dense(A)
        Lx = scipy.linalg.cholesky(_dense(grams.gram_X), lower=True)
        Ly = scipy.linalg.cholesky(_dense(grams.gram_Y), lower=True)
        # weighted map: Ly^T A Lx^{-T}; its ordinary singular values are the
        # generalized ones
        W = Ly.T @ scipy.linalg.solve_triangular(Lx, Ad.T, lower=True).T
        return float(np.linalg.svd(W, compute_uv=False)[-1])
    A = sp.csr_matrix(A)
    Gy = sp.csr_matrix(grams.gram_Y)
    Gx = sp.csr_matrix(grams.gram_X)
    ata = (A.T @ (Gy @ A)).tocsc()
    v0 = np.full(n, 1.0 / np.sqrt(n))
    vals = spla.eigsh(
        ata, k=1, M=Gx.tocsc(), sigma=0.0, which="LM", v0=v0,
        return_eigenvectors=False,
    )
    return float(np.sqrt(max(vals[0], 0.0)))


def _shape_of(G) -> int:
    return G.shape[0]


def operator_norm(S, grams: GramPair | None = None) -> float:
    """Largest weighted singular value (dense computation)."""
    n = S.shape[1]
    if grams is None:
        grams = GramPair(gram_X=np.eye(n), gram_Y=np.eye(S.shape[0]))
    Sd = _dense(S)
    Lx = scipy.linalg.cholesky(_dense(grams.gram_X), lower=True)
    Ly = scipy.linalg.cholesky(_dense(grams.gram_Y), lower=True)
    W = Ly.T @ scipy.linalg.solve_triangular(Lx, Sd.T, lower=True).T
    return float(np.linalg.svd(W, compute_uv=False)[0])


def perturbation_check(T, S, grams: GramPair | None = None):
    """Verify the stability of the Banach constant under perturbation:
    constant(T + S) >= constant(T) - ||S||, within 1e-12 slack.

    Returns (holds, slack) with slack = constant(T+S) - constant(T) + ||S||.
    """
    c1 = banach_constant(T, grams)
    c2 = banach_constant(_dense(T) + _dense(S), grams)
    norm_s = operator_norm(S, grams)
    slack = c2 - (c1 - norm_s)
    return bool(slack >= -1e-12), float(slack)


# -------------------------------------------------------------- stability scan


def _selection_samples(problem, state, n_samples: int):
    """Per-element Jacobian selections probing the kink set.

    Elements whose gradient magnitude sits within 10% of the model's kink
    radius get their selection replaced by convex combinations of the two
    branch endpoints (evaluated through the model's own selection map just
    inside and just outside the kink sphere); all other elements keep the
    deterministic selection. Models without a kink radius yield identical
    samples.
    """
    from . import fem, hamiltonian as hm, mfg_solver

    space = problem.space
    xi_base = mfg_solver.hp_selection_elements(problem, state.u)
    thetas = np.linspace(0.0, 1.0, n_samples)
    delta = problem.model.params.get("delta")
    if delta is None:
        return [xi_base] * n_samples, 0
    Du = fem.element_gradients(space, state.u)
    radius = np.hypot(Du[:, 0], Du[:, 1])
    kink = np.where(np.abs(radius - delta) <= 0.1 * delta)[0]
    if len(kink) == 0:
        return [xi_base] * n_samples, 0
    mesh_tris = np.asarray(space.mesh.triangles)
    centroids = space.mesh.vertices[mesh_tris].mean(axis=1)[kink]
    zhat = Du[kink] / radius[kink][:, None]
    xi_in = hm.hp_selection_many(
        problem.model, centroids, zhat * (delta * (1.0 - 1e-9))
    )
    xi_out = hm.hp_selection_many(
        problem.model, centroids, zhat * (delta * (1.0 + 1e-9))
    )
    samples = []
    for theta in thetas:
        xi = xi_base.copy()
        xi[kink] = (1.0 - theta) * xi_in + theta * xi_out
        samples.append(xi)
    return samples, int(len(kink))


def state_space_grams(space) -> GramPair:
    """H1 x L2 geometry for the stacked (u, m) linearization."""
    from . import fem

    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    G = sp.block_diag([(K + M).tocsr(), M.tocsr()]).tocsc()
    return GramPair(gram_X=G, gram_Y=G)


def preconditioned_constant(J, G) -> float:
    """Banach constant of G^{-1} J in the G-weighted geometry.

    The assembled Jacobian maps state perturbations to dual residuals;
    composing with the Riesz inverse G^{-1} turns it into an operator on the
    state space itself, whose smallest weighted singular value is the
    mesh-comparable stability constant (it equals 1 for J = G). Computed as
    the smallest eigenvalue of J^T G^{-1} J x = s^2 G x: densely below the
    cutoff, otherwise by shift-invert Lanczos with (J^T G^{-1} J)^{-1}
    applied through factorizations of J and G. Returns 0.0 for singular J.
    """
    n = J.shape[1]
    if J.shape[0] != n or G.shape != (n, n):
        raise ValueError("preconditioned constant needs square J and matching G")
    if n <= _DENSE_CUTOFF:
        Gd = _dense(G)
        P = scipy.linalg.solve(Gd, _dense(J), assume_a="pos")
        return banach_constant(P, GramPair(gram_X=Gd, gram_Y=Gd))
    Jc = sp.csc_matrix(J)
    Gc = sp.csc_matrix(G)
    try:
        lu_j = spla.splu(Jc)
    except RuntimeError:
        return 0.0
    lu_g = spla.splu(Gc)

    def ata(x):
        return Jc.T @ lu_g.solve(Jc @ x)

    def ata_inv(x):
        return lu_j.solve(Gc @ lu_j.solve(x, trans="T"))

    op = spla.LinearOperator((n, n), matvec=ata)
    opinv = spla.LinearOperator((n, n), matvec=ata_inv)
    v0 = np.full(n, 1.0 / np.sqrt(n))
    vals = spla.eigsh(
        op, k=1, M=Gc, sigma=0.0, which="LM", OPinv=opinv, v0=v0,
        return_eigenvectors=False,
    )
    return float(np.sqrt(max(vals[0], 0.0)))


def stability_scan(cases, n_selection_samples: int = 10, lambdas=None) -> StabilityScanReport:
    """Smallest weighted singular value of the coupled block linearization,
    sampled over generalized-Jacobian selections at kink elements.

    cases: a (problem, converged-state) pair or a list of them (one per mesh
    level). With a lambda grid, each case is re-assembled at every grid value
    using its deterministic selection; the per-level minima land in
    meta["lambda_scan"].
    """
    import dataclasses

    from . import mfg_solver

    if isinstance(cases, tuple):
        cases = [cases]
    if n_selection_samples < 1:
        raise ValueError("need at least one selection sample")
    hs = []
    smin = []
    kinks = []
    lambda_scan = []
    for problem, state in cases:
        G = state_space_grams(problem.space).gram_X
        samples, n_kink = _selection_samples(problem, state, n_selection_samples)
        vals = []
        seen = {}
        for xi in samples:
            key = xi.tobytes()
            if key not in seen:
                J = mfg_solver.mfg_jacobian(problem, state, xi=xi)
                seen[key] = preconditioned_constant(J, G)
            vals.append(seen[key])
        hs.append(problem.space.mesh.mesh_size_h)
        smin.append(vals)
        kinks.append(n_kink)
        if lambdas is not None:
            row = []
            for lam in lambdas:
                shifted = dataclasses.replace(problem, lam=float(lam))
                J = mfg_solver.mfg_jacobian(shifted, state, xi=samples[0])
                row.append(preconditioned_constant(J, G))
            lambda_scan.append(row)
    min_per_level = [min(vals) for vals in smin]
    ratio = max(min_per_level) / min(min_per_level)
    meta = {"n_selection_samples": n_selection_samples, "kink_elements": kinks}
    if lambdas is not None:
        meta["lambdas"] = [float(lam) for lam in lambdas]
        meta["lambda_scan"] = lambda_scan
    return StabilityScanReport(
        hs=hs,
        smin=smin,
        min_per_level=min_per_level,
        ratio_max_min=float(ratio),
        meta=meta,
    )
