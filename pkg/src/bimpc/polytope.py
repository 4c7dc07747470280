"""Half-space polytopes {z : F z <= g} and robust invariant sets.

All LPs go through scipy's HiGHS backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, EmptyPolytope, Unbounded, NotConverged

EMULATED_BOUND = 1e6
LP_TOL = 1e-9


@dataclass(frozen=True)
class PolytopeH:
    """The set {z : F z <= g}.  ``F`` has shape (m, d)."""

    F: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        g = np.atleast_1d(np.asarray(self.g, dtype=float)).ravel()
        if F.ndim == 1:
            F = F.reshape(g.size, -1) if g.size else F.reshape(0, F.size)
        if F.shape[0] != g.size:
            raise DimensionMismatch(f"F has {F.shape[0]} rows but g has {g.size}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "g", g)

    @property
    def dim(self) -> int:
        return self.F.shape[1]

    @property
    def n_rows(self) -> int:
        return self.F.shape[0]

    def to_dict(self):
        return {"F": self.F.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_dict(cls, d, dim=None):
        F = np.asarray(d["F"], dtype=float)
        if F.size == 0:
            F = np.zeros((0, dim if dim is not None else 0))
        return cls(F, d["g"])

    def __repr__(self):
        return f"PolytopeH(dim={self.dim}, rows={self.n_rows})"


def box(lo, hi) -> PolytopeH:
    """Axis-aligned box lo <= z <= hi."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    d = lo.size
    if d == 0:
        return PolytopeH(np.zeros((0, 0)), np.zeros(0))
    return PolytopeH(np.vstack([np.eye(d), -np.eye(d)]), np.concatenate([hi, -lo]))


def emulated_unbounded(dim: int, bound: float = EMULATED_BOUND) -> PolytopeH:
    """Large box standing in for R^dim."""
    return box(-bound * np.ones(dim), bound * np.ones(dim))


def whole_space(dim: int) -> PolytopeH:
    return PolytopeH(np.zeros((0, dim)), np.zeros(0))


def intersect(*polys: PolytopeH) -> PolytopeH:
    dims = {P.dim for P in polys}
    if len(dims) != 1:
        raise DimensionMismatch(f"cannot intersect polytopes of dims {dims}")
    return PolytopeH(np.vstack([P.F for P in polys]), np.concatenate([P.g for P in polys]))


def product(*polys: PolytopeH) -> PolytopeH:
    """Cartesian product P1 x P2 x ..."""
    d = sum(P.dim for P in polys)
    rows, rhs, col = [], [], 0
    for P in polys:
        block = np.zeros((P.n_rows, d))
        block[:, col:col + P.dim] = P.F
        rows.append(block)
        rhs.append(P.g)
        col += P.dim
    if not rows:
        return PolytopeH(np.zeros((0, 0)), np.zeros(0))
    return PolytopeH(np.vstack(rows), np.concatenate(rhs))


def embed(P: PolytopeH, total_dim: int, start: int) -> PolytopeH:
    """Lift P to R^total_dim acting on coordinates start:start+P.dim."""
    F = np.zeros((P.n_rows, total_dim))
    F[:, start:start + P.dim] = P.F
    return PolytopeH(F, P.g.copy())


def contains(P: PolytopeH, point, tol: float = 1e-9) -> bool:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if point.size != P.dim:
        raise DimensionMismatch(f"point of length {point.size} for polytope of dim {P.dim}")
    if P.n_rows == 0:
        return True
    return bool(np.all(P.F @ point <= P.g + tol))


def _lp_max(P: PolytopeH, direction):
    res = linprog(-direction, A_ub=P.F, b_ub=P.g, bounds=(None, None), method="highs")
    if res.status == 2:
        raise EmptyPolytope("polytope is empty")
    if res.status == 3:
        raise Unbounded("support is unbounded in the requested direction")
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return -res.fun, res.x


def support(P: PolytopeH, direction) -> float:
    """sup { direction' z : z in P }."""
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    if direction.size != P.dim:
        raise DimensionMismatch(f"direction of length {direction.size} for polytope of dim {P.dim}")
    if P.dim == 0:
        if np.any(P.g < -LP_TOL):
            raise EmptyPolytope("polytope is empty")
        return 0.0
    if not np.any(direction):
        if is_empty(P):
            raise EmptyPolytope("polytope is empty")
        return 0.0
    if P.n_rows == 0:
        raise Unbounded("whole space has unbounded support")
    return float(_lp_max(P, direction)[0])


def is_empty(P: PolytopeH) -> bool:
    if P.dim == 0:
        return bool(np.any(P.g < -LP_TOL))
    if P.n_rows == 0:
        return False
    res = linprog(np.zeros(P.dim), A_ub=P.F, b_ub=P.g, bounds=(None, None), method="highs")
    return res.status == 2


def is_bounded(P: PolytopeH) -> bool:
    try:
        for i in range(P.dim):
            e = np.zeros(P.dim)
            e[i] = 1.0
            support(P, e)
            support(P, -e)
    except Unbounded:
        return False
    return True


def axis_extent(P: PolytopeH) -> np.ndarray:
    """(d, 2) array of [min, max] along every coordinate axis."""
    out = np.zeros((P.dim, 2))
    for i in range(P.dim):
        e = np.zeros(P.dim)
        e[i] = 1.0
        out[i] = -support(P, -e), support(P, e)
    return out


def is_emulated_unbounded(P: PolytopeH, bound: float = EMULATED_BOUND) -> bool:
    """Flag sets whose extent reaches the emulated-infinity scale."""
    if P.dim == 0:
        return False
    try:
        ext = axis_extent(P)
    except Unbounded:
        return True
    return bool(np.abs(ext).max() >= 0.5 * bound)


def normalize(P: PolytopeH) -> PolytopeH:
    """Scale rows to unit norm, drop zero rows, merge duplicate rows."""
    norms = np.linalg.norm(P.F, axis=1)
    zero = norms <= 1e-14
    if np.any(P.g[zero] < -LP_TOL):
        raise EmptyPolytope("zero row with negative right-hand side")
    F = P.F[~zero] / norms[~zero, None]
    g = P.g[~zero] / norms[~zero]
    keep_F, keep_g = [], []
    for f, b in zip(F, g):
        for k, kf in enumerate(keep_F):
            if np.abs(kf - f).max() <= 1e-12:
                keep_g[k] = min(keep_g[k], b)
                break
        else:
            keep_F.append(f)
            keep_g.append(b)
    if not keep_F:
        return PolytopeH(np.zeros((0, P.dim)), np.zeros(0))
    return PolytopeH(np.array(keep_F), np.array(keep_g))


def remove_redundant(P: PolytopeH, tol: float = LP_TOL) -> PolytopeH:
    """Minimal H-representation; each dropped row is certified implied by an LP."""
    if is_empty(P):
        raise EmptyPolytope("polytope is empty")
    Q = normalize(P)
    keep = np.ones(Q.n_rows, dtype=bool)
    for i in range(Q.n_rows):
        keep[i] = False
        others = PolytopeH(Q.F[keep], Q.g[keep])
        try:
            val = support(others, Q.F[i]) if others.n_rows else np.inf
        except Unbounded:
            val = np.inf
        if val > Q.g[i] + tol:
            keep[i] = True
    return PolytopeH(Q.F[keep], Q.g[keep])


def robust_preimage(P: PolytopeH, M, E, D: PolytopeH, offset=None) -> PolytopeH:
    """{z : M z + E e (+ offset) in P for every e in D}.

    Row-wise: a' M z <= b - support(D, E' a) - a' offset.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    E = np.asarray(E, dtype=float)
    if E.ndim < 2:
        E = E.reshape(P.dim, -1)
    if M.shape[0] != P.dim or E.shape[0] != P.dim or E.shape[1] != D.dim:
        raise DimensionMismatch("robust_preimage: inconsistent dimensions")
    g = P.g.astype(float).copy()
    for i, a in enumerate(P.F):
        if D.dim:
            g[i] -= support(D, E.T @ a)
    if offset is not None:
        g -= P.F @ np.asarray(offset, dtype=float)
    out = PolytopeH(P.F @ M, g)
    if is_empty(out):
        raise EmptyPolytope("robust preimage is empty")
    return out


# --------------------------------------------------------------------------- #
# invariant sets


def _split_dynamics(sys, K_L):
    nx = sys.n_x
    K_L = np.atleast_2d(np.asarray(K_L, dtype=float))
    M = sys.A + sys.B2 @ K_L
    M_yy = M[nx:, nx:]
    M_yx = M[nx:, :nx]
    E = np.hstack([M_yx, sys.B1[nx:, :]])
    K_x, K_y = K_L[:, :nx], K_L[:, nx:]
    c = sys.c_const[nx:] if getattr(sys, "c_const", None) is not None else None
    if c is None and getattr(sys, "c", None) is not None and np.any(sys.c):
        raise ValueError("invariant sets need a constant dynamics offset; this one varies with time")
    return M_yy, E, K_x, K_y, c


def compute_invariant_set(sys, K_L, X: PolytopeH, Y: PolytopeH, W: PolytopeH, U: PolytopeH,
                          max_iter: int = 200) -> PolytopeH:
    """Robust positively invariant set for the follower state y.

    The leader state x in X and leader input u in U act as bounded
    disturbances on y+ = [(A + B2 K_L) xi + B1 u]_y.  Starting from the part of
    Y where K_L xi stays in W, the set is shrunk by robust one-step backups
    until the backup adds no irredundant facet.
    """
    M_yy, E, K_x, K_y, c = _split_dynamics(sys, K_L)
    D = product(X, U)
    pre_w = robust_preimage(W, K_y, K_x, X)
    omega = remove_redundant(intersect(Y, pre_w))
    for _ in range(max_iter):
        backup = robust_preimage(omega, M_yy, E, D, offset=c)
        new_rows = []
        for a, b in zip(backup.F, backup.g):
            try:
                val = support(omega, a)
            except Unbounded:
                val = np.inf
            if val > b + LP_TOL:
                new_rows.append((a, b))
        if not new_rows:
            return omega
        omega = intersect(omega, PolytopeH(np.array([r[0] for r in new_rows]), np.array([r[1] for r in new_rows])))
        omega = remove_redundant(omega)
    raise NotConverged(f"invariant set iteration did not converge in {max_iter} iterations")


@dataclass
class Violation:
    condition: str
    facet: int
    magnitude: float


@dataclass
class InvarianceReport:
    violations: list = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max((v.magnitude for v in self.violations), default=0.0)

    def ok(self, tol: float = 1e-8) -> bool:
        return self.max_violation <= tol


def verify_invariant(sys, K_L, X, Y, W, U, candidate: PolytopeH) -> InvarianceReport:
    """Facet-wise LP certification of both invariance conditions.

    Every facet is checked and the positive excesses are recorded; nothing is
    raised for a failed check.
    """
    M_yy, E, K_x, K_y, c = _split_dynamics(sys, K_L)
    D = product(X, U)
    report = InvarianceReport()

    def sup(P, d):
        try:
            return support(P, d) if P.dim else 0.0
        except Unbounded:
            return np.inf

    for i, (a, b) in enumerate(zip(Y.F, Y.g)):
        excess = sup(candidate, a) - b
        if excess > 0:
            report.violations.append(Violation("subset_Y", i, excess))
    for i, (a, b) in enumerate(zip(W.F, W.g)):
        excess = sup(candidate, K_y.T @ a) + sup(X, K_x.T @ a) - b
        if excess > 0:
            report.violations.append(Violation("K_L_in_W", i, excess))
    for i, (a, b) in enumerate(zip(candidate.F, candidate.g)):
        val = sup(candidate, M_yy.T @ a) + sup(D, E.T @ a)
        if c is not None:
            val += a @ c
        excess = val - b
        if excess > 0:
            report.violations.append(Violation("invariance", i, excess))
    return report
