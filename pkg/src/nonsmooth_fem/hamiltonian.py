"""Hamiltonian models with pointwise Clarke-subgradient selections.

A model carries H(x, z), one deterministic selection from the Clarke
subdifferential of z -> H(x, z), a global Lipschitz constant C_H, and (for
models whose gradient H_p exists everywhere and is itself Lipschitz) the
gradient map plus a selection from its generalized Jacobian. Solvers only
ever need a single selection at the current iterate; the full set-valued
subdifferential is never materialized.

Tie-breaks on kink sets are fixed per model so that every run is
reproducible:

    eikonal     selection 0 at z = 0
    max_affine  the active piece of lowest index
    huber       the inner branch I/delta on the sphere |z| = delta

mean_value_matrix returns a vector A with A . (z1 - z2) = H(z1) - H(z2)
exactly: the average of the selection along the segment (closed-form
piecewise integrals for the built-ins, adaptive Simpson otherwise) plus a
rank-one correction along z1 - z2 that cancels the residual roundoff. It is
a test oracle, not a solver ingredient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class QuadratureError(RuntimeError):
    """Adaptive segment quadrature failed to reach its tolerance."""


@dataclass(frozen=True)
class HamiltonianModel:
    """Immutable Hamiltonian description.

    eval(x, z) -> float and clarke_selection(x, z) -> (2,) are mandatory;
    hp_eval / hp_clarke_selection are present only when H(x, .) is C^1 with
    Lipschitz gradient (they return (2,) and (2, 2)). The private *_many
    fields hold vectorized implementations used by the batch helpers below.
    """

    name: str
    lipschitz_C_H: float
    is_convex_in_z: bool
    eval: Callable[[np.ndarray, np.ndarray], float]
    clarke_selection: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hp_eval: Optional[Callable] = None
    hp_clarke_selection: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    _eval_many: Optional[Callable] = field(default=None, repr=False)
    _selection_many: Optional[Callable] = field(default=None, repr=False)
    _hp_many: Optional[Callable] = field(default=None, repr=False)
    _hp_selection_many: Optional[Callable] = field(default=None, repr=False)


# ------------------------------------------------------------ batch helpers


def eval_many(model: HamiltonianModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if model._eval_many is not None:
        return model._eval_many(X, Z)
    return np.array([model.eval(x, z) for x, z in zip(np.atleast_2d(X), Z)])


def selection_many(model: HamiltonianModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if model._selection_many is not None:
        return model._selection_many(X, Z)
    return np.array([model.clarke_selection(x, z) for x, z in zip(np.atleast_2d(X), Z)])


def hp_many(model: HamiltonianModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if model.hp_eval is None:
        raise ValueError(f"model {model.name!r} has no gradient map")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if model._hp_many is not None:
        return model._hp_many(X, Z)
    return np.array([model.hp_eval(x, z) for x, z in zip(np.atleast_2d(X), Z)])


def hp_selection_many(model: HamiltonianModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if model.hp_clarke_selection is None:
        raise ValueError(f"model {model.name!r} has no gradient Jacobian selection")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if model._hp_selection_many is not None:
        return model._hp_selection_many(X, Z)
    return np.array(
        [model.hp_clarke_selection(x, z) for x, z in zip(np.atleast_2d(X), Z)]
    )


# ----------------------------------------------------------------- built-ins


def _zero_model() -> HamiltonianModel:
    return HamiltonianModel(
        name="zero",
        lipschitz_C_H=0.0,
        is_convex_in_z=True,
        eval=lambda x, z: 0.0,
        clarke_selection=lambda x, z: np.zeros(2),
        hp_eval=lambda x, z: np.zeros(2),
        hp_clarke_selection=lambda x, z: np.zeros((2, 2)),
        _eval_many=lambda X, Z: np.zeros(len(Z)),
        _selection_many=lambda X, Z: np.zeros_like(Z),
        _hp_many=lambda X, Z: np.zeros_like(Z),
        _hp_selection_many=lambda X, Z: np.zeros((len(Z), 2, 2)),
    )


def _eikonal_model() -> HamiltonianModel:
    # z/|z| is scale-invariant; divide by the max component first so the
    # result stays unit-length even when |z| sits below the normal range
    def sel(x, z):
        z = np.asarray(z, dtype=float)
        s = float(np.abs(z).max())
        if s == 0.0:
            return np.zeros(2)
        w = z / s
        return w / float(np.hypot(w[0], w[1]))

    def sel_many(X, Z):
        s = np.abs(Z).max(axis=1)
        safe = np.where(s > 0.0, s, 1.0)
        W = Z / safe[:, None]
        r = np.linalg.norm(W, axis=1)
        r = np.where(r > 0.0, r, 1.0)
        return np.where((s > 0.0)[:, None], W / r[:, None], 0.0)

    return HamiltonianModel(
        name="eikonal",
        lipschitz_C_H=1.0,
        is_convex_in_z=True,
        eval=lambda x, z: float(np.hypot(z[0], z[1])),
        clarke_selection=sel,
        _eval_many=lambda X, Z: np.linalg.norm(Z, axis=1),
        _selection_many=sel_many,
    )


def _huber_model(delta: float) -> HamiltonianModel:
    if not (np.isfinite(delta) and delta > 0.0):
        raise ValueError(f"huber parameter delta must be positive, got {delta!r}")
    delta = float(delta)

    def h(x, z):
        r = float(np.hypot(z[0], z[1]))
        return r * r / (2 * delta) if r <= delta else r - delta / 2

    def hp(x, z):
        z = np.asarray(z, dtype=float)
        r = float(np.hypot(z[0], z[1]))
        return z / delta if r <= delta else z / r

    def hp_jac(x, z):
        z = np.asarray(z, dtype=float)
        r = float(np.hypot(z[0], z[1]))
        if r <= delta:  # tie at r == delta resolved to the inner branch
            return np.eye(2) / delta
        return (np.eye(2) - np.outer(z, z) / (r * r)) / r

    def h_many(X, Z):
        r = np.linalg.norm(Z, axis=1)
        return np.where(r <= delta, r * r / (2 * delta), r - delta / 2)

    def hp_many_(X, Z):
        r = np.linalg.norm(Z, axis=1)
        safe = np.where(r > 0.0, r, 1.0)
        return np.where((r <= delta)[:, None], Z / delta, Z / safe[:, None])

    def hp_jac_many(X, Z):
        r = np.linalg.norm(Z, axis=1)
        out = np.empty((len(Z), 2, 2))
        inner = r <= delta
        out[inner] = np.eye(2) / delta
        zo = Z[~inner]
        ro = r[~inner]
        out[~inner] = (
            np.eye(2)[None] - zo[:, :, None] * zo[:, None, :] / (ro * ro)[:, None, None]
        ) / ro[:, None, None]
        return out

    return HamiltonianModel(
        name="huber",
        lipschitz_C_H=max(1.0, 1.0 / delta),
        is_convex_in_z=True,
        eval=h,
        clarke_selection=hp,
        hp_eval=hp,
        hp_clarke_selection=hp_jac,
        params={"delta": delta},
        _eval_many=h_many,
        _selection_many=hp_many_,
        _hp_many=hp_many_,
        _hp_selection_many=hp_jac_many,
    )


def _max_affine_model(pieces) -> HamiltonianModel:
    if not pieces:
        raise ValueError("max_affine requires at least one (a, b) piece")
    A = np.array([np.asarray(p[0], dtype=float).reshape(2) for p in pieces])
    b = np.array([float(p[1]) for p in pieces])
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise ValueError("max_affine pieces must be finite")
    norm_pieces = [((float(a[0]), float(a[1])), float(c)) for a, c in zip(A, b)]

    def h(x, z):
        return float((A @ np.asarray(z, dtype=float) + b).max())

    def sel(x, z):
        vals = A @ np.asarray(z, dtype=float) + b
        return A[int(np.argmax(vals))].copy()  # argmax takes the lowest index on ties

    return HamiltonianModel(
        name="max_affine",
        lipschitz_C_H=float(np.linalg.norm(A, axis=1).max()),
        is_convex_in_z=True,
        eval=h,
        clarke_selection=sel,
        params={"pieces": norm_pieces},
        _eval_many=lambda X, Z: (Z @ A.T + b).max(axis=1),
        _selection_many=lambda X, Z: A[np.argmax(Z @ A.T + b, axis=1)],
    )


def builtin_model(name: str, *, pieces=None, delta: float | None = None) -> HamiltonianModel:
    """Construct one of the built-in models: zero, eikonal,
    max_affine(pieces=[(a_i, b_i), ...]), huber(delta)."""
    if name == "zero":
        return _zero_model()
    if name == "eikonal":
        return _eikonal_model()
    if name == "huber":
        if delta is None:
            raise ValueError("huber requires delta")
        return _huber_model(delta)
    if name == "max_affine":
        if pieces is None:
            raise ValueError("max_affine requires pieces")
        return _max_affine_model(pieces)
    raise ValueError(
        f"unknown hamiltonian {name!r}; expected zero, eikonal, max_affine, or huber"
    )


def model_from_spec(text: str) -> HamiltonianModel:
    """Parse a command-line model string: 'zero', 'eikonal', 'huber:DELTA',
    or 'maxaffine:PATH.csv' (rows a1,a2,b)."""
    name, _, arg = text.partition(":")
    if name in ("zero", "eikonal"):
        if arg:
            raise ValueError(f"hamiltonian {name!r} takes no parameter, got {text!r}")
        return builtin_model(name)
    if name == "huber":
        try:
            delta = float(arg)
        except ValueError:
            raise ValueError(f"invalid huber parameter {arg!r} in {text!r}") from None
        return builtin_model("huber", delta=delta)
    if name in ("maxaffine", "max_affine"):
        rows = np.loadtxt(arg, delimiter=",", ndmin=2)
        if rows.shape[1] != 3:
            raise ValueError(f"max_affine file {arg!r} needs rows a1,a2,b")
        return builtin_model(
            "max_affine", pieces=[((r[0], r[1]), r[2]) for r in rows]
        )
    raise ValueError(f"unknown hamiltonian {name!r} in {text!r}")


# ------------------------------------------------------------ element fields


def selection_field(model: HamiltonianModel, space, u: np.ndarray) -> np.ndarray:
    """Clarke selection per element at (centroid, Du_h|_T): (nt, 2).

    P1 gradients are constant per element, so a single selection per
    triangle is a measurable selection of the pointwise subdifferential,
    not an approximation.
    """
    from . import fem

    mesh = space.mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    Du = fem.element_gradients(space, u)
    return selection_many(model, centroids, Du)


# ------------------------------------------------------- segment mean values


def _sign_integral(t0: float, lo: float, hi: float) -> float:
    """Integral of sign(t - t0) over [lo, hi]."""
    return abs(hi - t0) - abs(lo - t0)


def _unit_direction_mean(p, d, lo, hi):
    """Integral of w/|w| over [lo, hi] for w(t) = p + t d (closed form).

    The integrand is scale-invariant, so p and d are rescaled first; this
    keeps the intermediate products away from under/overflow.
    """
    s = max(float(np.abs(p).max()), float(np.abs(d).max()))
    if s == 0.0:
        return np.zeros(2)
    p = p / s
    d = d / s
    a = float(d @ d)
    b = float(p @ d)
    c = float(p @ p)
    D = max(a * c - b * b, 0.0)
    if a == 0.0:
        r = np.sqrt(c)
        return (hi - lo) * (p / r) if r > 0 else np.zeros(2)
    if c == 0.0 or D <= 1e-28 * (a * c):
        # segment collinear with the origin: direction flips at t0
        t0 = -b / a
        return d / np.sqrt(a) * _sign_integral(t0, lo, hi)
    sq = np.sqrt(D)
    sa = np.sqrt(a)

    def F0(t):
        return float(np.arcsinh((a * t + b) / sq)) / sa

    def absw(t):
        return float(np.sqrt(a * t * t + 2 * b * t + c))

    I0 = F0(hi) - F0(lo)
    I1 = (absw(hi) - absw(lo)) / a - (b / a) * I0
    return p * I0 + d * I1


def _linear_mean(p, d, lo, hi, scale):
    """Integral of (p + t d)/scale over [lo, hi] (exact)."""
    return (p * (hi - lo) + d * (hi * hi - lo * lo) / 2.0) / scale


def _huber_segment_mean(p, d, delta):
    a = float(d @ d)
    b = float(p @ d)
    c0 = float(p @ p) - delta * delta
    cuts = [0.0, 1.0]
    disc = b * b - a * c0
    if disc > 0.0 and a > 0.0:
        sq = np.sqrt(disc)
        for t in ((-b - sq) / a, (-b + sq) / a):
            if 0.0 < t < 1.0:
                cuts.append(float(t))
    cuts = sorted(set(cuts))
    total = np.zeros(2)
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        tm = 0.5 * (lo + hi)
        if a * tm * tm + 2 * b * tm + c0 <= 0.0:  # |w| <= delta: inner branch
            total += _linear_mean(p, d, lo, hi, delta)
        else:
            total += _unit_direction_mean(p, d, lo, hi)
    return total


def _max_affine_segment_mean(pieces, p, d):
    A = np.array([np.asarray(q[0], dtype=float) for q in pieces])
    b = np.array([float(q[1]) for q in pieces])
    cuts = {0.0, 1.0}
    k = len(pieces)
    for i in range(k):
        for j in range(i + 1, k):
            da = A[i] - A[j]
            den = float(da @ d)
            if den != 0.0:
                t = -(float(da @ p) + (b[i] - b[j])) / den
                if 0.0 < t < 1.0:
                    cuts.add(float(t))
    cuts = sorted(cuts)
    total = np.zeros(2)
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        tm = 0.5 * (lo + hi)
        vals = A @ (p + tm * d) + b
        total += (hi - lo) * A[int(np.argmax(vals))]
    return total


def _adaptive_simpson(f, lo, hi, tol, depth=60):
    def simpson(a_, b_, fa, fm, fb):
        return (b_ - a_) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a_, b_, fa, fm, fb, whole, tol_, depth_):
        m = 0.5 * (a_ + b_)
        lm, rm = 0.5 * (a_ + m), 0.5 * (m + b_)
        flm, frm = f(lm), f(rm)
        left = simpson(a_, m, fa, flm, fm)
        right = simpson(m, b_, fm, frm, fb)
        err = np.abs(left + right - whole).max()
        if err <= 15.0 * tol_:
            return left + right + (left + right - whole) / 15.0
        if depth_ == 0:
            raise QuadratureError(
                f"segment quadrature stalled on [{a_:.3g}, {b_:.3g}] (error {err:.2e})"
            )
        return rec(a_, m, fa, flm, fm, left, tol_ / 2, depth_ - 1) + rec(
            m, b_, fm, frm, fb, right, tol_ / 2, depth_ - 1
        )

    fa, fb = f(lo), f(hi)
    fm = f(0.5 * (lo + hi))
    whole = simpson(lo, hi, fa, fm, fb)
    return rec(lo, hi, fa, fm, fb, whole, tol, depth)


def mean_value_matrix(model: HamiltonianModel, x, z1, z2) -> np.ndarray:
    """Vector A with A . (z1 - z2) = H(x, z1) - H(x, z2) to roundoff.

    A is the average of the Clarke selection along the segment [z2, z1]
    (hence inside the convex hull of the subdifferentials there, up to
    quadrature roundoff) plus a correction parallel to z1 - z2 that makes
    the secant identity exact.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if np.array_equal(z1, z2):
        return model.clarke_selection(x, z1)
    d = z1 - z2
    p = z2
    if model.name == "zero":
        mean = np.zeros(2)
    elif model.name == "eikonal":
        mean = _unit_direction_mean(p, d, 0.0, 1.0)
    elif model.name == "huber":
        mean = _huber_segment_mean(p, d, model.params["delta"])
    elif model.name == "max_affine":
        mean = _max_affine_segment_mean(model.params["pieces"], p, d)
    else:
        mean = _adaptive_simpson(
            lambda t: np.asarray(model.clarke_selection(x, p + t * d), dtype=float),
            0.0,
            1.0,
            1e-13,
        )
    dh = model.eval(x, z1) - model.eval(x, z2)
    # correction along d/|d|: its exact-arithmetic value is zero (the
    # segment mean telescopes), so it only sweeps up quadrature and
    # rounding residue; the rescaled frame keeps subnormal segments usable
    s = float(np.abs(d).max())
    dhat = d / s
    nhat = float(np.hypot(dhat[0], dhat[1]))
    A = mean + ((dh / s - float(mean @ dhat)) / nhat) * (dhat / nhat)
    # the exact mean-value vector lies in the Lipschitz ball; rounding can
    # push the computed one out (by eps normally, by order one only where
    # the increment itself dissolves into rounding), so project it back
    nA = float(np.hypot(A[0], A[1]))
    if nA > model.lipschitz_C_H:
        A = A * (model.lipschitz_C_H / nA)
    return A
