"""Coupled value/density system: block semismooth Newton and damped Picard.

The discrete stationary system couples a viscous HJ equation for the value
u with a linear transport-diffusion equation for the density m:

    (Du, Dphi) + (H(x, Du), phi) + lam (u, phi) = (F[m] + g_hjb, phi)
    (Dm, Dpsi) + (m H_p(x, Du), Dpsi) + lam (m, psi) = lam (m0, psi) + (g_fp, psi)

Block Newton linearizes both equations at once. With B the drift form
B[i][j] = (H_p(x,Du).Dphi_j, phi_i), Q the coupling-weighted mass, and G
the advection-sensitivity G[i][j] = (m (xi Dphi_j), Dpsi_i) built from one
generalized-Jacobian selection xi of H_p per element, the system matrix is

    [ K + lam M + B        -Q  ]
    [ G            K + lam M + B^T ]

Picard alternates a full HJ Newton solve for u at frozen m with one linear
transport solve for m at frozen u, relaxing only m. Newton is fast near a
solution; Picard is the derivative-free cross-check.

The density right side uses lam * m0 so the source scales consistently as
lam varies. m0 must be nonnegative and nonzero for data-driven runs; runs
with explicit compensating sources (manufactured studies) may carry signed
data, which changes nothing in the linear algebra.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from . import hamiltonian as hm
from . import hj_solver
from .diagnostics import ConvergenceReport, fit_rate
from .fem import FemError, NonconvergenceError


@dataclass(frozen=True)
class CouplingModel:
    """Density coupling F[m](x) = f(x, m(x)) (local) or f(x, (S m)(x)) with
    S a discrete mollifier (nonlocal). f_of_m and df_dm are vectorized:
    (X (N,2), m (N,)) -> (N,). bound_C_F bounds |df_dm|."""

    kind: str  # "local" | "nonlocal"
    name: str
    f_of_m: object
    df_dm: object
    bound_C_F: float
    monotone: bool
    smoothing_steps: int = 2

    def __post_init__(self):
        if self.kind not in ("local", "nonlocal"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")


def local_linear(c: float = 1.0) -> CouplingModel:
    c = float(c)
    return CouplingModel(
        kind="local",
        name=f"linear:{c:g}",
        f_of_m=lambda X, m: c * np.asarray(m, dtype=float),
        df_dm=lambda X, m: np.full(np.shape(m), c),
        bound_C_F=abs(c),
        monotone=c > 0,
    )


def local_arctan() -> CouplingModel:
    return CouplingModel(
        kind="local",
        name="arctan",
        f_of_m=lambda X, m: np.arctan(np.asarray(m, dtype=float)),
        df_dm=lambda X, m: 1.0 / (1.0 + np.asarray(m, dtype=float) ** 2),
        bound_C_F=1.0,
        monotone=True,
    )


def zero_coupling() -> CouplingModel:
    return CouplingModel(
        kind="local",
        name="zero",
        f_of_m=lambda X, m: np.zeros(np.shape(m)),
        df_dm=lambda X, m: np.zeros(np.shape(m)),
        bound_C_F=0.0,
        monotone=False,
    )


def nonlocal_linear(c: float = 1.0, steps: int = 2) -> CouplingModel:
    c = float(c)
    return CouplingModel(
        kind="nonlocal",
        name=f"nonlocal-linear:{c:g}",
        f_of_m=lambda X, m: c * np.asarray(m, dtype=float),
        df_dm=lambda X, m: np.full(np.shape(m), c),
        bound_C_F=abs(c),
        monotone=c > 0,
        smoothing_steps=int(steps),
    )


def coupling_from_spec(text: str) -> CouplingModel:
    """Parse a coupling string: 'zero', 'local:linear[:C]', 'local:arctan',
    'nonlocal:linear[:C]'."""
    parts = text.split(":")
    if parts[0] == "zero" and len(parts) == 1:
        return zero_coupling()
    if parts[0] in ("local", "nonlocal") and len(parts) >= 2:
        name = parts[1]
        if name == "linear":
            c = float(parts[2]) if len(parts) > 2 else 1.0
            if parts[0] == "local":
                return local_linear(c)
            return nonlocal_linear(c)
        if name == "arctan" and parts[0] == "local" and len(parts) == 2:
            return local_arctan()
    raise ValueError(f"unknown coupling {text!r}")


@dataclass(frozen=True)
class MfgProblem:
    space: fem.FeSpace
    model: hm.HamiltonianModel
    coupling: CouplingModel
    lam: float
    m0: np.ndarray  # coefficient vector
    g_hjb: object = None  # optional extra source fields (manufactured runs)
    g_fp: object = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.model.hp_eval is None or self.model.hp_clarke_selection is None:
            raise ValueError(
                f"model {self.model.name!r} lacks the gradient data the density "
                "equation needs"
            )
        m0 = np.asarray(self.m0, dtype=float)
        if m0.shape != (self.space.n_free,):
            raise ValueError("m0 length must equal the number of free dofs")
        if self.g_hjb is None and self.g_fp is None:
            if (m0 < 0).any():
                raise ValueError("m0 must be nonnegative at the nodes")
            if not m0.any():
                raise ValueError("m0 must not vanish identically")


def make_mfg_problem(space, model, coupling, lam, m0, g_hjb=None, g_fp=None) -> MfgProblem:
    """m0 may be a scalar field or a coefficient vector."""
    if callable(m0):
        m0 = fem.interpolate_nodal(space, m0)
    return MfgProblem(
        space=space,
        model=model,
        coupling=coupling,
        lam=lam,
        m0=np.asarray(m0, dtype=float),
        g_hjb=g_hjb,
        g_fp=g_fp,
    )


@dataclass(frozen=True)
class MfgState:
    u: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class MfgSolveReport:
    converged: bool
    iterations: int
    residual_history: list
    final_state: MfgState
    message: str = ""


def state_distance(space, s1: MfgState, s2: MfgState) -> float:
    """H1 distance in u combined with L2 distance in m."""
    du = fem.norm(space, s1.u - s2.u, "H1")
    dm = fem.norm(space, s1.m - s2.m, "L2")
    return float(np.hypot(du, dm))


# ---------------------------------------------------------- nonlocal smoothing


class _Smoother:
    """Discrete mollifier: s applications of (M_lump + sigma K)^{-1} M_lump
    on all-vertex nodal values, sigma = h^2. Symmetric in the lumped inner
    product and bounded on L2."""

    def __init__(self, mesh, steps: int):
        K = fem.full_stiffness(mesh)
        Ml = np.asarray(fem.full_mass(mesh).sum(axis=1)).ravel()
        sigma = mesh.mesh_size_h**2
        self._lu = spla.splu((sp.diags(Ml) + sigma * K).tocsc())
        self._Ml = Ml
        self.steps = steps
        self._dense = None

    def apply(self, nodal: np.ndarray) -> np.ndarray:
        out = np.asarray(nodal, dtype=float)
        scale = self._Ml if out.ndim == 1 else self._Ml[:, None]
        for _ in range(self.steps):
            out = self._lu.solve(scale * out)
        return out

    def dense(self) -> np.ndarray:
        if self._dense is None:
            n = len(self._Ml)
            self._dense = self.apply(np.eye(n))
        return self._dense


def _smoother(problem: MfgProblem) -> _Smoother:
    key = ("smoother", problem.coupling.smoothing_steps)
    cache = problem.space._cache
    if key not in cache:
        cache[key] = _Smoother(problem.space.mesh, problem.coupling.smoothing_steps)
    return cache[key]


def _coupling_nodal(problem: MfgProblem, m: np.ndarray) -> np.ndarray:
    """All-vertex nodal values the coupling sees: m itself (local) or the
    mollified density (nonlocal)."""
    nodal = fem.extend_to_vertices(problem.space, m)
    if problem.coupling.kind == "nonlocal":
        nodal = _smoother(problem).apply(nodal)
    return nodal


# ------------------------------------------------------------------ residual


def _quad_ctx(space):
    if "quad3" not in space._cache:
        space._cache["quad3"] = fem.quad_points(space, 3)
    return space._cache["quad3"]


def _nodal_at_quad(space, nodal_full, bary):
    tri_vals = nodal_full[np.asarray(space.mesh.triangles)]
    return np.einsum("qk,tk->qt", bary, tri_vals)


def _source_load(space, g) -> np.ndarray:
    if g is None:
        return np.zeros(space.n_free)
    return fem.assemble_load(space, g)


def mfg_residual(problem: MfgProblem, state: MfgState) -> np.ndarray:
    """Stacked dual residual (r_u, r_m), each of length n_free."""
    b_hjb = _source_load(problem.space, problem.g_hjb)
    b_fp = _source_load(problem.space, problem.g_fp)
    return _residual(problem, state, b_hjb, b_fp)


def _residual(problem, state, b_hjb, b_fp) -> np.ndarray:
    space = problem.space
    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    bary, weights, X = _quad_ctx(space)
    u, m = np.asarray(state.u, dtype=float), np.asarray(state.m, dtype=float)
    lam = problem.lam
    Du = fem.element_gradients(space, u)
    nq, nt, _ = X.shape

    # value equation: nonlinearity and coupling loads at quadrature points
    h_vals = np.empty((nq, nt))
    for q in range(nq):
        h_vals[q] = hm.eval_many(problem.model, X[q], Du)
    m_seen = _nodal_at_quad(space, _coupling_nodal(problem, m), bary)
    f_vals = np.empty((nq, nt))
    for q in range(nq):
        f_vals[q] = problem.coupling.f_of_m(X[q], m_seen[q])
    if not (np.isfinite(h_vals).all() and np.isfinite(f_vals).all()):
        raise FemError("non-finite value in the coupled residual")
    r_u = (
        K @ u
        + lam * (M @ u)
        + fem.load_from_values(space, h_vals)
        - fem.load_from_values(space, f_vals)
        - b_hjb
    )

    # density equation: transport term against elementwise-constant gradients
    m_quad = fem.element_values(space, m, bary)
    hp = np.empty((nq, nt, 2))
    for q in range(nq):
        hp[q] = hm.hp_many(problem.model, X[q], Du)
    momentum = np.einsum("q,qt,qtd->td", weights, m_quad, hp)
    adv_local = np.einsum("td,tkd->tk", momentum, space.elem_grads) * space.elem_areas[:, None]
    r_adv = np.zeros(space.n_free)
    dofs = space.elem_dofs.ravel()
    keep = dofs >= 0
    np.add.at(r_adv, dofs[keep], adv_local.ravel()[keep])
    r_m = K @ m + lam * (M @ m) + r_adv - lam * (M @ problem.m0) - b_fp
    return np.concatenate([r_u, r_m])


# ------------------------------------------------------------------ jacobian


def drift_matrix(problem: MfgProblem, u: np.ndarray) -> sp.csr_matrix:
    """B[i][j] = (H_p(x, Du).Dphi_j, phi_i), H_p constant per element."""
    space = problem.space
    mesh = space.mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    hp = hm.hp_many(problem.model, centroids, fem.element_gradients(space, u))
    drift = np.einsum("td,tjd->tj", hp, space.elem_grads)
    local = (space.elem_areas[:, None] / 3.0 * drift)[:, None, :] * np.ones((1, 3, 1))
    return fem.assemble_from_local(space, local)


def hp_selection_elements(problem: MfgProblem, u: np.ndarray) -> np.ndarray:
    """One generalized-Jacobian selection of H_p per element: (nt, 2, 2)."""
    space = problem.space
    mesh = space.mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    return hm.hp_selection_many(problem.model, centroids, fem.element_gradients(space, u))


def advection_sensitivity(problem: MfgProblem, state: MfgState, xi=None) -> sp.csr_matrix:
    """G[i][j] = (m (xi Dphi_j), Dpsi_i) with elementwise xi; the element
    integral of the P1 density is exact via its nodal mean."""
    space = problem.space
    if xi is None:
        xi = hp_selection_elements(problem, state.u)
    nodal = fem.extend_to_vertices(space, state.m)[np.asarray(space.mesh.triangles)]
    mbar = nodal.mean(axis=1)
    xig = np.einsum("tde,tje->tjd", xi, space.elem_grads)  # xi Dphi_j
    local = np.einsum("tjd,tid->tij", xig, space.elem_grads)
    local *= (space.elem_areas * mbar)[:, None, None]
    return fem.assemble_from_local(space, local)


def coupling_weighted_mass(problem: MfgProblem, m: np.ndarray):
    """Q with Q[i][j] = (df_dm(x, m~) phi_j~, phi_i): sparse weighted mass
    for local couplings, dense composition with the mollifier otherwise."""
    space = problem.space
    bary, weights, X = _quad_ctx(space)
    nq, nt, _ = X.shape
    m_seen = _nodal_at_quad(space, _coupling_nodal(problem, m), bary)
    df = np.empty((nq, nt))
    for q in range(nq):
        df[q] = problem.coupling.df_dm(X[q], m_seen[q])
    if problem.coupling.kind == "local":
        local = np.einsum("q,qt,qi,qj->tij", weights, df, bary, bary)
        local *= space.elem_areas[:, None, None]
        return fem.assemble_from_local(space, local)
    # nonlocal: Q_fv couples free test dofs to all trial vertices, then the
    # mollifier and the boundary extension compose on the trial side
    local = np.einsum("q,qt,qi,qj->tij", weights, df, bary, bary)
    local *= space.elem_areas[:, None, None]
    tris = np.asarray(space.mesh.triangles)
    rows = np.repeat(space.elem_dofs[:, :, None], 3, axis=2).ravel()
    cols = np.repeat(tris[:, None, :], 3, axis=1).ravel()
    vals = local.ravel()
    keep = rows >= 0
    n_v = space.mesh.n_vertices
    Q_fv = sp.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(space.n_free, n_v)
    ).toarray()
    S = _smoother(problem).dense()
    E = np.zeros((n_v, space.n_free))
    E[space.free_dofs, np.arange(space.n_free)] = 1.0
    return Q_fv @ S @ E


def mfg_jacobian(problem: MfgProblem, state: MfgState, xi=None) -> sp.csr_matrix:
    """Block matrix [[K+lam M+B, -Q], [G, K+lam M+B^T]] at the given state;
    xi optionally overrides the per-element Jacobian selection in G."""
    space = problem.space
    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    A = (K + problem.lam * M).tocsr()
    B = drift_matrix(problem, state.u)
    Q = coupling_weighted_mass(problem, state.m)
    G = advection_sensitivity(problem, state, xi=xi)
    if sp.issparse(Q):
        return sp.bmat([[A + B, -Q], [G, A + B.T]], format="csr")
    top = sp.hstack([(A + B).tocsr(), sp.csr_matrix(-Q)])
    bottom = sp.hstack([G.tocsr(), (A + B.T).tocsr()])
    return sp.vstack([top, bottom]).tocsr()


# -------------------------------------------------------------------- solvers


class _StackNorm:
    def __init__(self, space):
        self._rn = fem.residual_norm(space)
        self._n = space.n_free

    def __call__(self, r: np.ndarray) -> float:
        return float(np.hypot(self._rn(r[: self._n]), self._rn(r[self._n :])))


def _initial_state(problem, state0) -> MfgState:
    if state0 is None:
        return MfgState(
            u=np.zeros(problem.space.n_free), m=np.array(problem.m0, dtype=float)
        )
    return MfgState(
        u=np.array(state0.u, dtype=float), m=np.array(state0.m, dtype=float)
    )


def mfg_newton(problem: MfgProblem, state0=None, tol=1e-9, max_iter=50) -> MfgSolveReport:
    """Damped block Newton on the stacked residual."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    space = problem.space
    n = space.n_free
    state = _initial_state(problem, state0)
    b_hjb = _source_load(space, problem.g_hjb)
    b_fp = _source_load(space, problem.g_fp)
    norm = _StackNorm(space)
    r = _residual(problem, state, b_hjb, b_fp)
    history = [norm(r)]
    iterations = 0
    while history[-1] > tol:
        if iterations >= max_iter:
            return MfgSolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_state=state,
                message=f"iteration limit {max_iter} reached",
            )
        J = mfg_jacobian(problem, state)
        try:
            step = spla.splu(J.tocsc()).solve(r)
        except RuntimeError as exc:
            raise FemError(f"block newton system is singular: {exc}") from exc
        accepted = False
        for k in range(hj_solver._MAX_HALVINGS + 1):
            s = 0.5**k
            trial = MfgState(u=state.u - s * step[:n], m=state.m - s * step[n:])
            r_try = _residual(problem, trial, b_hjb, b_fp)
            norm_try = norm(r_try)
            if norm_try < history[-1]:
                state, r = trial, r_try
                history.append(norm_try)
                iterations += 1
                accepted = True
                break
        if not accepted:
            return MfgSolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_state=state,
                message="damping exhausted without residual decrease",
            )
    return MfgSolveReport(
        converged=True,
        iterations=iterations,
        residual_history=history,
        final_state=state,
    )


def mfg_picard(
    problem: MfgProblem, state0=None, tol=1e-9, max_iter=200, theta_p=0.5
) -> MfgSolveReport:
    """Alternate a full HJ solve for u at frozen m with one linear transport
    solve for m at frozen u; relax m only."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 < theta_p <= 1.0:
        raise ValueError("theta_p must lie in (0, 1]")
    space = problem.space
    state = _initial_state(problem, state0)
    b_hjb = _source_load(space, problem.g_hjb)
    b_fp = _source_load(space, problem.g_fp)
    norm = _StackNorm(space)
    K = fem.assemble_stiffness(space)
    M = fem.assemble_mass(space)
    bary, weights, X = _quad_ctx(space)
    history = [norm(_residual(problem, state, b_hjb, b_fp))]
    iterations = 0
    inner_tol = max(tol / 10.0, 1e-13)
    while history[-1] > tol:
        if iterations >= max_iter:
            return MfgSolveReport(
                converged=False,
                iterations=iterations,
                residual_history=history,
                final_state=state,
                message=f"iteration limit {max_iter} reached",
            )
        # coupling load at the current density
        m_seen = _nodal_at_quad(space, _coupling_nodal(problem, state.m), bary)
        f_vals = np.empty_like(m_seen)
        for q in range(len(f_vals)):
            f_vals[q] = problem.coupling.f_of_m(X[q], m_seen[q])
        b_u = fem.load_from_values(space, f_vals) + b_hjb
        hj_prob = hj_solver.HjProblem(
            space=space, model=problem.model, lam=problem.lam, f=b_u
        )
        inner = hj_solver.solve_newton(hj_prob, state.u, tol=inner_tol, max_iter=60)
        if not inner.converged:
            raise NonconvergenceError(
                f"inner value solve failed at outer iteration {iterations}: "
                f"{inner.message}"
            )
        u = inner.final_u
        T = (K + problem.lam * M + drift_matrix(problem, u).T).tocsc()
        rhs = problem.lam * (M @ problem.m0) + b_fp
        m_new = spla.splu(T).solve(rhs)
        state = MfgState(u=u, m=(1.0 - theta_p) * state.m + theta_p * m_new)
        iterations += 1
        history.append(norm(_residual(problem, state, b_hjb, b_fp)))
    return MfgSolveReport(
        converged=True,
        iterations=iterations,
        residual_history=history,
        final_state=state,
    )


# --------------------------------------------------------------- monotonicity


def check_monotonicity(coupling: CouplingModel, space, samples=3, n_rho=100, seed=0):
    """Sampled sign check of the coupling form rho -> (df_dm(., m) rho, rho).

    Returns (verdict, margin): margin is the minimum of the quadratic form
    over unit-norm random rho and `samples` sampled densities (zero plus
    random fields of growing amplitude); verdict is margin > 0.
    """
    if coupling.kind != "local":
        raise ValueError("monotonicity check applies to local couplings")
    g = np.random.default_rng(seed)
    m_samples = [np.zeros(space.n_free)] + [
        float(3**k) * g.normal(size=space.n_free) for k in range(int(samples) - 1)
    ]
    bary, weights, X = _quad_ctx(space)
    g = np.random.default_rng(seed + 1)
    margin = np.inf
    for m in m_samples:
        m_seen = fem.element_values(space, np.asarray(m, dtype=float), bary)
        df = np.empty_like(m_seen)
        for q in range(len(df)):
            df[q] = coupling.df_dm(X[q], m_seen[q])
        local = np.einsum("q,qt,qi,qj->tij", weights, df, bary, bary)
        local *= space.elem_areas[:, None, None]
        Q = fem.assemble_from_local(space, local)
        for _ in range(n_rho):
            rho = g.normal(size=space.n_free)
            rho /= np.linalg.norm(rho)
            margin = min(margin, float(rho @ (Q @ rho)))
    return bool(margin > 0), float(margin)


# --------------------------------------------------------------- rate studies


def convergence_study_mfg(
    problem_factory,
    levels,
    u_exact,
    grad_u_exact,
    m_exact,
    grad_m_exact,
    solver="newton",
    tol=1e-9,
    max_iter=100,
    theta_p=0.5,
    r=4.0,
    threads=1,
) -> ConvergenceReport:
    """Refinement study for the coupled system; fits rates for the H1xL2
    pair and for the W^{1,r} x L^r pair (default r = 4)."""
    levels = [int(n) for n in levels]
    if levels != sorted(levels) or len(set(levels)) != len(levels):
        raise ValueError("levels must be strictly increasing")
    if solver not in ("newton", "picard"):
        raise ValueError(f"unknown solver {solver!r}")
    r_label = f"{r:g}"

    def run_level(n):
        problem = problem_factory(n)
        if solver == "newton":
            rep = mfg_newton(problem, tol=tol, max_iter=max_iter)
        else:
            rep = mfg_picard(problem, tol=tol, max_iter=max_iter, theta_p=theta_p)
        if not rep.converged:
            raise NonconvergenceError(
                f"level n={n} did not converge: {rep.message} "
                f"(residual {rep.residual_history[-1]:.3e})"
            )
        space = problem.space
        u, m = rep.final_state.u, rep.final_state.m
        errs = {
            "u_H1": fem.error_vs_exact(space, u, u_exact, grad_u_exact, "H1"),
            "m_L2": fem.error_vs_exact(space, m, m_exact, grad_m_exact, "L2"),
            f"u_W1{r_label}": fem.error_vs_exact(
                space, u, u_exact, grad_u_exact, "W1r", r=r
            ),
            f"m_L{r_label}": fem.error_vs_exact(
                space, m, m_exact, grad_m_exact, "Lr", r=r
            ),
        }
        errs["combined_H1_L2"] = errs["u_H1"] + errs["m_L2"]
        errs[f"combined_W1{r_label}_L{r_label}"] = (
            errs[f"u_W1{r_label}"] + errs[f"m_L{r_label}"]
        )
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
    keys = list(rows[0]["errors"])
    errors = {k: [row["errors"][k] for row in rows] for k in keys}
    rates = {}
    if len(rows) >= 3:
        rates = {k: fit_rate(hs, errors[k]) for k in keys}
    return ConvergenceReport(
        levels=[row["n"] for row in rows],
        hs=hs,
        dofs=[row["dofs"] for row in rows],
        errors=errors,
        rates=rates,
        meta={
            "solver": solver,
            "tol": tol,
            "r": r,
            "iterations": [row["iterations"] for row in rows],
        },
    )
