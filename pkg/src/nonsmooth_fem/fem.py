"""P1 Lagrange finite element core on triangulations.

Provides dof management with homogeneous Dirichlet elimination, exact
assembly of stiffness/mass forms (P1 gradients are elementwise constant),
quadrature-based load vectors, the linear solution operator
(K + lambda*M)^{-1}, nodal interpolation, and discrete norms.

Conventions:
    - A coefficient vector is a plain numpy array with one scalar per free
      (interior) dof.
    - Matrices are scipy CSR: compressed row layout (row offsets, column
      indices, values) with duplicate entries summed at finalization.
    - Scalar fields are callables taking an (N, 2) array of points and
      returning an (N,) array; plain per-point callables also work (they
      are detected and wrapped). Vector fields return (N, 2).

Norm evaluation uses the mass/stiffness quadratic forms for L2/H1 (exact)
and a fixed symmetric quadrature of stated order for Lr/W1r; the gradient
part of W1r is summed exactly elementwise. Negative/fractional-order norms
are never computed here; solvers report residuals in the discrete dual
norm induced by (K + M)^{-1} instead.

The inverse inequality between discrete norms on quasi-uniform P1 spaces
is relied upon implicitly and its constant is not verified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh, signed_areas


class FemError(RuntimeError):
    """Assembly or evaluation failure (degenerate element, bad data)."""


class NonconvergenceError(FemError):
    """An iterative solve stopped before reaching its residual target."""


_CG_CAP_FACTOR = 10  # iteration cap = factor * n_free
_CG_TOL = 1e-12  # relative residual target for the solution operator

# Symmetric triangle quadrature rules in barycentric coordinates.
# Weights sum to one (scale by element area). The order-3 rule is the
# classic positive 6-point rule, exact through total degree 4.
_TRI_RULES = {
    1: (
        np.array([[1 / 3, 1 / 3, 1 / 3]]),
        np.array([1.0]),
    ),
    2: (
        np.array(
            [[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]
        ),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
    3: (
        np.array(
            [
                [0.108103018168070, 0.445948490915965, 0.445948490915965],
                [0.445948490915965, 0.108103018168070, 0.445948490915965],
                [0.445948490915965, 0.445948490915965, 0.108103018168070],
                [0.816847572980459, 0.091576213509771, 0.091576213509771],
                [0.091576213509771, 0.816847572980459, 0.091576213509771],
                [0.091576213509771, 0.091576213509771, 0.816847572980459],
            ]
        ),
        np.array(
            [
                0.223381589678011,
                0.223381589678011,
                0.223381589678011,
                0.109951743655322,
                0.109951743655322,
                0.109951743655322,
            ]
        ),
    ),
}


def triangle_rule(order: int):
    """Barycentric points and weights (summing to 1) for order in {1, 2, 3}."""
    if order not in _TRI_RULES:
        raise ValueError(f"quadrature order must be one of 1, 2, 3; got {order!r}")
    bary, weights = _TRI_RULES[order]
    return bary.copy(), weights.copy()


def _local_mass(area: float) -> np.ndarray:
    """Exact P1 element mass matrix: area * [[2,1,1],[1,2,1],[1,1,2]] / 12."""
    return area * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0


@dataclass(frozen=True)
class FeSpace:
    """P1 space with homogeneous Dirichlet elimination.

    free_dofs maps dof index -> vertex index; dof_of_vertex maps vertex ->
    dof index or -1 on the boundary. Cached element geometry: elem_dofs
    (triangle-local dof or -1), elem_grads (constant basis gradients),
    elem_areas.
    """

    mesh: TriMesh
    free_dofs: np.ndarray = field(repr=False)
    n_free: int
    dof_of_vertex: np.ndarray = field(repr=False)
    elem_dofs: np.ndarray = field(repr=False)
    elem_grads: np.ndarray = field(repr=False)
    elem_areas: np.ndarray = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)


def _geometry(mesh: TriMesh):
    """Signed areas and constant P1 basis gradients; rejects degenerate elements."""
    areas = signed_areas(mesh)
    bad = np.where(areas <= 0.0)[0]
    if bad.size:
        raise FemError(
            f"degenerate or inverted triangle {int(bad[0])} "
            f"(signed area {areas[bad[0]]:.3e})"
        )
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    grads = np.empty_like(p)
    for i in range(3):
        a = p[:, (i + 1) % 3]
        b = p[:, (i + 2) % 3]
        grads[:, i, 0] = a[:, 1] - b[:, 1]
        grads[:, i, 1] = b[:, 0] - a[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


def make_space(mesh: TriMesh) -> FeSpace:
    areas, grads = _geometry(mesh)
    boundary = np.asarray(mesh.boundary_vertex)
    free = np.where(~boundary)[0].astype(np.int64)
    dof_of_vertex = -np.ones(mesh.n_vertices, dtype=np.int64)
    dof_of_vertex[free] = np.arange(free.size)
    elem_dofs = dof_of_vertex[np.asarray(mesh.triangles)]
    return FeSpace(
        mesh=mesh,
        free_dofs=free,
        n_free=int(free.size),
        dof_of_vertex=dof_of_vertex,
        elem_dofs=elem_dofs,
        elem_grads=grads,
        elem_areas=areas,
    )


# ------------------------------------------------------------------ assembly


def _scatter(space_or_n, rows, cols, vals, n):
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _assemble_p1(local: np.ndarray, dofs: np.ndarray, n: int) -> sp.csr_matrix:
    """Sum (nt, 3, 3) element matrices into an n x n CSR, skipping dof -1."""
    i = np.repeat(dofs[:, :, None], 3, axis=2).ravel()
    j = np.repeat(dofs[:, None, :], 3, axis=1).ravel()
    v = local.ravel()
    keep = (i >= 0) & (j >= 0)
    return _scatter(None, i[keep], j[keep], v[keep], n)


def assemble_from_local(space: "FeSpace", local: np.ndarray) -> sp.csr_matrix:
    """Sum per-element (nt, 3, 3) contributions into a free-dof CSR matrix.

    Entry local[t, i, j] couples local test vertex i with trial vertex j of
    triangle t; boundary vertices (dof -1) are dropped.
    """
    return _assemble_p1(np.asarray(local, dtype=float), space.elem_dofs, space.n_free)


def full_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    """Stiffness on ALL vertices (no Dirichlet elimination)."""
    areas, grads = _geometry(mesh)
    local = np.einsum("tid,tjd->tij", grads, grads) * areas[:, None, None]
    dofs = np.asarray(mesh.triangles)
    return _assemble_p1(local, dofs, mesh.n_vertices)


def full_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Mass on ALL vertices (no Dirichlet elimination)."""
    areas, _ = _geometry(mesh)
    pattern = np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
    local = areas[:, None, None] * pattern
    dofs = np.asarray(mesh.triangles)
    return _assemble_p1(local, dofs, mesh.n_vertices)


def assemble_stiffness(space: FeSpace) -> sp.csr_matrix:
    """K[i][j] = integral of Dphi_j . Dphi_i, exact, on free dofs."""
    if "K" not in space._cache:
        local = (
            np.einsum("tid,tjd->tij", space.elem_grads, space.elem_grads)
            * space.elem_areas[:, None, None]
        )
        space._cache["K"] = _assemble_p1(local, space.elem_dofs, space.n_free)
    return space._cache["K"]


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    """M[i][j] = integral of phi_j phi_i via the exact element formula."""
    if "M" not in space._cache:
        pattern = np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
        local = space.elem_areas[:, None, None] * pattern
        space._cache["M"] = _assemble_p1(local, space.elem_dofs, space.n_free)
    return space._cache["M"]


# ------------------------------------------------------------- field evaluation


def _eval_scalar_field(f, pts: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field on (N, 2) points; accepts vectorized or
    per-point callables."""
    pts = np.ascontiguousarray(pts, dtype=float)
    try:
        vals = np.asarray(f(pts), dtype=float)
        if vals.shape == (pts.shape[0],):
            return vals
        if vals.size == pts.shape[0]:
            return vals.reshape(pts.shape[0])
    except Exception:
        pass
    return np.array([float(f(p)) for p in pts])


def _eval_vector_field(g, pts: np.ndarray) -> np.ndarray:
    pts = np.ascontiguousarray(pts, dtype=float)
    try:
        vals = np.asarray(g(pts), dtype=float)
        if vals.shape == (pts.shape[0], 2):
            return vals
    except Exception:
        pass
    return np.array([np.asarray(g(p), dtype=float).reshape(2) for p in pts])


def quad_points(space: FeSpace, order: int):
    """Quadrature nodes per element: returns (bary, weights, X) where X has
    shape (nq, nt, 2)."""
    bary, weights = triangle_rule(order)
    p = space.mesh.vertices[space.mesh.triangles]  # (nt, 3, 2)
    X = np.einsum("qk,tkd->qtd", bary, p)
    return bary, weights, X


def assemble_load(space: FeSpace, f, quad_order: int = 3) -> np.ndarray:
    """b[i] = sum_T |T| * sum_q w_q f(x_q) phi_i(x_q)."""
    bary, weights, X = quad_points(space, quad_order)
    nq, nt, _ = X.shape
    vals = np.empty((nq, nt))
    for q in range(nq):
        vals[q] = _eval_scalar_field(f, X[q])
    if not np.isfinite(vals).all():
        q, t = np.argwhere(~np.isfinite(vals))[0]
        x, y = X[q, t]
        raise FemError(
            f"non-finite load value {vals[q, t]!r} at quadrature point "
            f"({x:.6g}, {y:.6g})"
        )
    # b_local[t, k] = area_t * sum_q w_q bary[q, k] vals[q, t]
    b_local = np.einsum("q,qk,qt->tk", weights, bary, vals) * space.elem_areas[:, None]
    b = np.zeros(space.n_free)
    dofs = space.elem_dofs.ravel()
    keep = dofs >= 0
    np.add.at(b, dofs[keep], b_local.ravel()[keep])
    return b


def load_from_values(space: FeSpace, vals: np.ndarray, quad_order: int = 3) -> np.ndarray:
    """Like assemble_load but from precomputed quadrature values (nq, nt)."""
    bary, weights = triangle_rule(quad_order)
    b_local = np.einsum("q,qk,qt->tk", weights, bary, vals) * space.elem_areas[:, None]
    b = np.zeros(space.n_free)
    dofs = space.elem_dofs.ravel()
    keep = dofs >= 0
    np.add.at(b, dofs[keep], b_local.ravel()[keep])
    return b


def interpolate_nodal(space: FeSpace, g) -> np.ndarray:
    """Nodal P1 interpolant: coefficient i = g(free vertex i); boundary values
    are dropped (homogeneous Dirichlet)."""
    pts = space.mesh.vertices[space.free_dofs]
    vals = _eval_scalar_field(g, pts)
    if not np.isfinite(vals).all():
        k = int(np.argwhere(~np.isfinite(vals))[0, 0])
        x, y = pts[k]
        raise FemError(f"non-finite nodal value at vertex ({x:.6g}, {y:.6g})")
    return vals


def extend_to_vertices(space: FeSpace, u: np.ndarray) -> np.ndarray:
    """Free-dof coefficients -> all-vertex nodal values (0 on the boundary)."""
    full = np.zeros(space.mesh.n_vertices)
    full[space.free_dofs] = u
    return full


def element_values(space: FeSpace, u: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """u_h at quadrature points: (nq, nt) from barycentric weights."""
    full = extend_to_vertices(space, u)
    nodal = full[np.asarray(space.mesh.triangles)]  # (nt, 3)
    return np.einsum("qk,tk->qt", bary, nodal)


def element_gradients(space: FeSpace, u: np.ndarray) -> np.ndarray:
    """Elementwise-constant gradient of u_h: (nt, 2)."""
    full = extend_to_vertices(space, u)
    nodal = full[np.asarray(space.mesh.triangles)]  # (nt, 3)
    return np.einsum("tk,tkd->td", nodal, space.elem_grads)


def evaluate(space: FeSpace, u: np.ndarray, pts) -> np.ndarray:
    """Point evaluation of u_h (test/debug helper; brute-force location)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p = space.mesh.vertices[space.mesh.triangles]
    full = extend_to_vertices(space, u)
    nodal = full[np.asarray(space.mesh.triangles)]
    out = np.empty(pts.shape[0])
    for row, x in enumerate(pts):
        lam = _barycentric_all(space, p, x)
        t = int(np.argmax((lam >= -1e-12).all(axis=1)))
        if not (lam[t] >= -1e-12).all():
            raise FemError(f"point ({x[0]:.6g}, {x[1]:.6g}) outside the mesh")
        out[row] = nodal[t] @ lam[t]
    return out


def evaluate_gradient(space: FeSpace, u: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p = space.mesh.vertices[space.mesh.triangles]
    grads = element_gradients(space, u)
    out = np.empty((pts.shape[0], 2))
    for row, x in enumerate(pts):
        lam = _barycentric_all(space, p, x)
        t = int(np.argmax((lam >= -1e-12).all(axis=1)))
        if not (lam[t] >= -1e-12).all():
            raise FemError(f"point ({x[0]:.6g}, {x[1]:.6g}) outside the mesh")
        out[row] = grads[t]
    return out


def _barycentric_all(space: FeSpace, p: np.ndarray, x: np.ndarray) -> np.ndarray:
    d = x[None, None, :] - p  # (nt, 3, 2)
    # lambda_i(x) = 1/ (2A) * cross(edge opposite i) ... use grads: lam_i =
    # grad_i . (x - p_j) + delta_ij at vertices; simplest: affine solve per element
    lam12 = np.einsum("tkd,td->tk", space.elem_grads[:, 1:, :], d[:, 0, :])
    lam0 = 1.0 - lam12.sum(axis=1)
    return np.column_stack([lam0, lam12])


# ------------------------------------------------------------------- operator


def solve_operator_Th(
    space: FeSpace,
    lam: float,
    rhs: np.ndarray,
    K: sp.csr_matrix | None = None,
    M: sp.csr_matrix | None = None,
) -> np.ndarray:
    """Solve (K + lam*M) v = rhs by Jacobi-preconditioned conjugate gradients
    to relative residual <= 1e-12, iteration cap 10 * n_free."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (space.n_free,):
        raise ValueError("rhs length must equal the number of free dofs")
    if not rhs.any():
        return np.zeros(space.n_free)
    K = assemble_stiffness(space) if K is None else K
    M = assemble_mass(space) if M is None else M
    W = (K + lam * M).tocsr()
    diag = W.diagonal()
    precond = spla.LinearOperator(W.shape, matvec=lambda x: x / diag)
    maxiter = max(1, _CG_CAP_FACTOR * space.n_free)
    try:
        v, info = spla.cg(
            W, rhs, rtol=_CG_TOL / 10, atol=0.0, maxiter=maxiter, M=precond
        )
    except TypeError:  # older scipy spells the relative tolerance 'tol'
        v, info = spla.cg(
            W, rhs, tol=_CG_TOL / 10, atol=0.0, maxiter=maxiter, M=precond
        )
    rel = float(np.linalg.norm(rhs - W @ v) / np.linalg.norm(rhs))
    if info != 0 or rel > _CG_TOL:
        raise NonconvergenceError(
            f"conjugate gradients stopped after cap {maxiter} iterations "
            f"with relative residual {rel:.3e} (target {_CG_TOL:.0e})"
        )
    return v


class ResidualNorm:
    """Discrete dual norm ||r|| = sqrt(r^T (K+M)^{-1} r).

    The weight is lambda-independent and SPD; used as the mesh-robust
    surrogate for the continuous dual norm when reporting residuals.
    """

    def __init__(self, space: FeSpace):
        W = (assemble_stiffness(space) + assemble_mass(space)).tocsc()
        self._lu = spla.splu(W)

    def __call__(self, r: np.ndarray) -> float:
        return float(np.sqrt(max(0.0, float(r @ self._lu.solve(r)))))

    def solve(self, r: np.ndarray) -> np.ndarray:
        return self._lu.solve(r)


def residual_norm(space: FeSpace) -> ResidualNorm:
    if "residual_norm" not in space._cache:
        space._cache["residual_norm"] = ResidualNorm(space)
    return space._cache["residual_norm"]


# ---------------------------------------------------------------------- norms


_NORM_KINDS = ("L2", "H1semi", "H1", "Lr", "W1r")


def _check_norm_args(kind: str, r):
    if kind not in _NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}; expected one of {_NORM_KINDS}")
    if kind in ("Lr", "W1r"):
        if r is None:
            raise ValueError(f"norm kind {kind} requires the exponent r")
        if not 2.0 <= float(r) <= 6.0:
            raise ValueError(f"exponent r must lie in [2, 6], got {r}")


def norm(space: FeSpace, u: np.ndarray, kind: str, r: float | None = None) -> float:
    """Discrete norm of a coefficient vector.

    L2/H1 use the exact mass/stiffness quadratic forms; Lr (and the Lr part
    of W1r) uses the order-3 quadrature of |u_h|^r; the gradient part of W1r
    is exact (piecewise-constant gradients).
    """
    _check_norm_args(kind, r)
    u = np.asarray(u, dtype=float)
    if kind == "L2":
        M = assemble_mass(space)
        return float(np.sqrt(max(0.0, u @ (M @ u))))
    if kind == "H1semi":
        K = assemble_stiffness(space)
        return float(np.sqrt(max(0.0, u @ (K @ u))))
    if kind == "H1":
        return float(
            np.sqrt(norm(space, u, "L2") ** 2 + norm(space, u, "H1semi") ** 2)
        )
    r = float(r)
    bary, weights = triangle_rule(3)
    vals = element_values(space, u, bary)  # (nq, nt)
    lr_r = float((weights[:, None] * np.abs(vals) ** r * space.elem_areas).sum())
    if kind == "Lr":
        return lr_r ** (1.0 / r)
    grads = element_gradients(space, u)
    grad_r = float((np.linalg.norm(grads, axis=1) ** r * space.elem_areas).sum())
    return (lr_r + grad_r) ** (1.0 / r)


def error_vs_exact(
    space: FeSpace,
    u_h: np.ndarray,
    u_exact,
    grad_exact,
    kind: str,
    r: float | None = None,
) -> float:
    """Norm of (u_exact - u_h) by order-3 quadrature; gradient error uses the
    elementwise-constant discrete gradient."""
    _check_norm_args(kind, r)
    bary, weights, X = quad_points(space, 3)
    nq, nt, _ = X.shape
    uh_vals = element_values(space, u_h, bary)
    e = np.empty((nq, nt))
    for q in range(nq):
        e[q] = _eval_scalar_field(u_exact, X[q]) - uh_vals[q]
    if kind in ("L2", "Lr"):
        p = 2.0 if kind == "L2" else float(r)
        val = float((weights[:, None] * np.abs(e) ** p * space.elem_areas).sum())
        return val ** (1.0 / p)
    grads_h = element_gradients(space, u_h)
    ge2 = np.empty((nq, nt))
    for q in range(nq):
        diff = _eval_vector_field(grad_exact, X[q]) - grads_h
        ge2[q] = (diff * diff).sum(axis=1)
    if kind == "H1semi":
        return float(
            np.sqrt((weights[:, None] * ge2 * space.elem_areas).sum())
        )
    if kind == "H1":
        l2sq = float((weights[:, None] * e * e * space.elem_areas).sum())
        semisq = float((weights[:, None] * ge2 * space.elem_areas).sum())
        return float(np.sqrt(l2sq + semisq))
    # W1r
    p = float(r)
    lr = float((weights[:, None] * np.abs(e) ** p * space.elem_areas).sum())
    gr = float(
        (weights[:, None] * ge2 ** (p / 2.0) * space.elem_areas).sum()
    )
    return (lr + gr) ** (1.0 / p)


# -------------------------------------------------------------------- export


def write_matrix_market(A: sp.spmatrix, path) -> None:
    """MatrixMarket coordinate text."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))


def write_matrix_csv(A: sp.spmatrix, path) -> None:
    """Triplet CSV: header row,col,value; one stored entry per line."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("row,col,value\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{int(i)},{int(j)},{float(v)!r}\n")


def write_vector_csv(v: np.ndarray, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("index,value\n")
        for i, x in enumerate(np.asarray(v, dtype=float)):
            fh.write(f"{i},{float(x)!r}\n")
