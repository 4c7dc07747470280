"""Problem data for the follower (LoMPC) and leader (BiMPC) controllers.

State xi = (x, y) with x the first ``n_x`` entries (leader state) and y the
rest (follower state); input nu = (u, w) with u the leader input.  Dynamics are

    xi+ = A xi + B1 u + B2 w + c_t

where the offset c_t is zero, a constant vector or a per-step schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import polytope as pt
from .errors import DimensionMismatch, NotPositiveDefinite, EmptyOrUnboundedSet, OriginExcluded
from .polytope import PolytopeH
from .qp import check_psd, check_symmetric


def _mat(a, shape=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1 and shape is not None:
        a = a.reshape(shape)
    return a


@dataclass(frozen=True)
class SystemModel:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    n_x: int
    c: np.ndarray = None

    def __post_init__(self):
        A = _mat(self.A)
        p = A.shape[0]
        B1 = _mat(self.B1, (p, -1))
        B2 = _mat(self.B2, (p, -1))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B1", B1)
        object.__setattr__(self, "B2", B2)
        if self.c is not None:
            object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "n_x", int(self.n_x))

    @property
    def p(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B1.shape[1]

    @property
    def n_w(self):
        return self.B2.shape[1]

    @property
    def q(self):
        return self.n_u + self.n_w

    @property
    def n_y(self):
        return self.p - self.n_x

    @property
    def B(self):
        return np.hstack([self.B1, self.B2])

    @property
    def c_const(self):
        """The offset when it is a single constant vector, else None."""
        if self.c is None:
            return None
        return self.c if self.c.ndim == 1 else None

    @property
    def homogeneous(self) -> bool:
        return self.c is None or not np.any(self.c)

    def offset(self, t: int) -> np.ndarray:
        """Affine offset applied at absolute time t."""
        if self.c is None:
            return np.zeros(self.p)
        if self.c.ndim == 1:
            return self.c
        if t >= self.c.shape[0]:
            raise IndexError(f"offset schedule has {self.c.shape[0]} steps, step {t} requested")
        return self.c[t]

    def step(self, xi, u, w, t: int = 0):
        return self.A @ xi + self.B1 @ np.atleast_1d(u) + self.B2 @ np.atleast_1d(w) + self.offset(t)

    def check(self):
        p = self.p
        if self.A.shape != (p, p):
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B1.shape[0] != p or self.B2.shape[0] != p:
            raise DimensionMismatch("B1 and B2 must have p rows")
        if not 0 <= self.n_x <= p:
            raise DimensionMismatch(f"n_x={self.n_x} outside [0, {p}]")
        if self.c is not None and self.c.shape[-1] != p:
            raise DimensionMismatch("offset c must have p columns")


@dataclass(frozen=True)
class LompcSpec:
    """Follower cost xi_N'U xi_N + sum xi_n'V xi_n + nu_n'W nu_n and its sets.

    ``v`` adds a linear stage cost v'xi_n and ``xi_ref`` shifts the quadratic
    state terms to (xi - xi_ref); both default to zero.
    """

    U: np.ndarray
    V: np.ndarray
    W1: np.ndarray
    Phi: np.ndarray
    W2: np.ndarray
    N: int
    Y_set: PolytopeH
    W_set: PolytopeH
    Y_omega: PolytopeH
    K_L: np.ndarray = None
    v: np.ndarray = None
    xi_ref: np.ndarray = None

    def __post_init__(self):
        for name in ("U", "V", "W1", "W2"):
            object.__setattr__(self, name, _mat(getattr(self, name)))
        object.__setattr__(self, "Phi", _mat(self.Phi, (self.W1.shape[0], self.W2.shape[0])))
        object.__setattr__(self, "N", int(self.N))
        if self.K_L is not None:
            object.__setattr__(self, "K_L", _mat(self.K_L, (self.W2.shape[0], -1)))

    @property
    def W(self):
        return np.block([[self.W1, self.Phi], [self.Phi.T, self.W2]])


@dataclass(frozen=True)
class BimpcSpec:
    """Leader cost xi_N'P xi_N + sum xi_n'Q xi_n + nu_n'R nu_n plus linear terms.

    Linear terms: ``lin_u``'u_n every step, ``lin_w``'w_n every step and
    ``peak_w``'w_n on steps whose absolute time index is in ``peak``.
    ``H`` enables the Lyapunov constraint xi_1'H xi_1 <= xi_0'(H - I) xi_0.
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    X_set: PolytopeH
    U_set: PolytopeH
    H: np.ndarray = None
    lin_u: np.ndarray = None
    lin_w: np.ndarray = None
    peak_w: np.ndarray = None
    peak: frozenset = frozenset()

    def __post_init__(self):
        for name in ("P", "Q", "R"):
            object.__setattr__(self, name, _mat(getattr(self, name)))
        if self.H is not None:
            object.__setattr__(self, "H", _mat(self.H))
        object.__setattr__(self, "peak", frozenset(int(i) for i in self.peak))


@dataclass(frozen=True)
class Problem:
    """Validated, immutable bundle.  ``t0`` is the absolute time of stage 0."""

    system: SystemModel
    lo: LompcSpec
    bi: BimpcSpec
    t0: int = 0
    flags: dict = field(default_factory=dict, compare=False)

    @property
    def N(self):
        return self.lo.N

    @property
    def p(self):
        return self.system.p

    def at(self, t: int) -> "Problem":
        return dataclasses.replace(self, t0=int(t))

    def with_horizon(self, N: int) -> "Problem":
        return dataclasses.replace(self, lo=dataclasses.replace(self.lo, N=int(N)))

    def with_stability(self, H) -> "Problem":
        H = None if H is None else check_symmetric(H, "H")
        return dataclasses.replace(self, bi=dataclasses.replace(self.bi, H=H))

    def offsets(self):
        return [self.system.offset(self.t0 + n) for n in range(self.N)]

    def is_peak(self, n: int) -> bool:
        return (self.t0 + n) in self.bi.peak

    @property
    def index(self) -> "IndexMap":
        return stack_dimensions(self)


def _check_pd(M, name):
    M = check_symmetric(M, name)
    if M.size and np.linalg.eigvalsh(M)[0] <= 0:
        raise NotPositiveDefinite(f"{name} is not positive definite")
    return M


def _check_set(P: PolytopeH, name: str, dim: int, require_origin: bool, flags: dict):
    if P.dim != dim:
        raise DimensionMismatch(f"set {name} has dim {P.dim}, expected {dim}")
    if dim == 0:
        return
    if np.any(np.linalg.norm(P.F, axis=1) <= 1e-14):
        raise EmptyOrUnboundedSet(name, "zero row in F")
    if pt.is_empty(P):
        raise EmptyOrUnboundedSet(name, "empty")
    if not pt.is_bounded(P):
        raise EmptyOrUnboundedSet(name, "unbounded")
    ext = pt.axis_extent(P)
    if np.all(ext[:, 1] - ext[:, 0] <= 1e-12):
        raise EmptyOrUnboundedSet(name, "singleton")
    if require_origin and np.any(P.g < 0):
        raise OriginExcluded(name)
    if np.abs(ext).max() >= 0.5 * pt.EMULATED_BOUND:
        flags.setdefault("emulated_unbounded", []).append(name)


def validate(system, lo=None, bi=None, require_origin=None) -> Problem:
    """Check dimensions, definiteness and sets; return an immutable Problem.

    Origin membership of the constraint sets is required for homogeneous
    dynamics (the stability theory is about the origin); affine problems such
    as the demand-response case may pass ``require_origin=False`` or rely on
    the default, which follows ``system.homogeneous``.
    """
    if isinstance(system, Problem):
        return system
    system.check()
    p, n_x, n_u, n_w = system.p, system.n_x, system.n_u, system.n_w
    n_y = p - n_x
    if require_origin is None:
        require_origin = system.homogeneous and lo.xi_ref is None
    for name, M, shape in [
        ("U", lo.U, (p, p)), ("V", lo.V, (p, p)), ("W1", lo.W1, (n_u, n_u)),
        ("Phi", lo.Phi, (n_u, n_w)), ("W2", lo.W2, (n_w, n_w)),
        ("P", bi.P, (p, p)), ("Q", bi.Q, (p, p)), ("R", bi.R, (n_u + n_w, n_u + n_w)),
    ]:
        if M.shape != shape:
            raise DimensionMismatch(f"{name} has shape {M.shape}, expected {shape}")
    if lo.N < 1:
        raise DimensionMismatch("horizon N must be >= 1")
    _check_pd(lo.W2, "W2")
    for name in ("U", "V"):
        check_psd(getattr(lo, name), name)
    for name in ("P", "Q", "R"):
        check_psd(getattr(bi, name), name)
    if bi.H is not None:
        if bi.H.shape != (p, p):
            raise DimensionMismatch("H must be p x p")
        _check_pd(bi.H, "H")
    if lo.K_L is not None and lo.K_L.shape != (n_w, p):
        raise DimensionMismatch(f"K_L has shape {lo.K_L.shape}, expected {(n_w, p)}")
    for name, vec, size in [("v", lo.v, p), ("xi_ref", lo.xi_ref, p), ("lin_u", bi.lin_u, n_u),
                            ("lin_w", bi.lin_w, n_w), ("peak_w", bi.peak_w, n_w)]:
        if vec is not None and np.size(vec) != size:
            raise DimensionMismatch(f"{name} must have length {size}")

    flags = {}
    _check_set(bi.X_set, "X", n_x, require_origin, flags)
    _check_set(lo.Y_set, "Y", n_y, require_origin, flags)
    _check_set(lo.Y_omega, "Y_omega", n_y, require_origin, flags)
    _check_set(bi.U_set, "U", n_u, require_origin, flags)
    _check_set(lo.W_set, "W", n_w, require_origin, flags)
    return Problem(system, lo, bi, 0, flags)


def verify_terminal_set(problem: Problem):
    """Invariance report of Y_omega under K_L (K_L = 0 when absent)."""
    lo = problem.lo
    K_L = lo.K_L if lo.K_L is not None else np.zeros((problem.system.n_w, problem.p))
    return pt.verify_invariant(problem.system, K_L, problem.bi.X_set, lo.Y_set, lo.W_set,
                               problem.bi.U_set, lo.Y_omega)


# --------------------------------------------------------------------------- #
# index layout


@dataclass(frozen=True)
class IndexMap:
    """Layout of the stacked vector [primal | duals | binaries].

    primal:   xi_1..xi_N, u_0..u_{N-1}, w_0..w_{N-1}
    duals:    mu_0..mu_{N-1}, lam_0..lam_N, gam_0..gam_{N-1}
    binaries: sigma_0..sigma_N, tau_0..tau_{N-1}
    """

    N: int
    p: int
    n_u: int
    n_w: int
    m_y: int
    m_o: int
    m_w: int

    @property
    def n_primal(self):
        return self.N * (self.p + self.n_u + self.n_w)

    @property
    def n_dual(self):
        return self.N * self.p + self.N * self.m_y + self.m_o + self.N * self.m_w

    @property
    def n_binary(self):
        return self.N * self.m_y + self.m_o + self.N * self.m_w

    @property
    def n_continuous(self):
        return self.n_primal + self.n_dual

    @property
    def n_total(self):
        return self.n_continuous + self.n_binary

    def xi(self, n):
        if not 1 <= n <= self.N:
            raise IndexError(n)
        s = (n - 1) * self.p
        return slice(s, s + self.p)

    def u(self, n):
        s = self.N * self.p + n * self.n_u
        return slice(s, s + self.n_u)

    def w(self, n):
        s = self.N * (self.p + self.n_u) + n * self.n_w
        return slice(s, s + self.n_w)

    def mu(self, n):
        s = self.n_primal + n * self.p
        return slice(s, s + self.p)

    def lam(self, n):
        s = self.n_primal + self.N * self.p + n * self.m_y
        return slice(s, s + (self.m_o if n == self.N else self.m_y))

    def gam(self, n):
        s = self.n_primal + self.N * self.p + self.N * self.m_y + self.m_o + n * self.m_w
        return slice(s, s + self.m_w)

    def sigma(self, n):
        s = self.n_continuous + n * self.m_y
        return slice(s, s + (self.m_o if n == self.N else self.m_y))

    def tau(self, n):
        s = self.n_continuous + self.N * self.m_y + self.m_o + n * self.m_w
        return slice(s, s + self.m_w)

    @property
    def xi_all(self):
        return slice(0, self.N * self.p)

    @property
    def u_all(self):
        return slice(self.N * self.p, self.N * (self.p + self.n_u))

    @property
    def w_all(self):
        return slice(self.N * (self.p + self.n_u), self.n_primal)

    @property
    def lam_all(self):
        return slice(self.lam(0).start, self.lam(self.N).stop)

    @property
    def gam_all(self):
        return slice(self.gam(0).start, self.n_continuous)

    def blocks(self):
        """Every named block in layout order as (name, slice)."""
        out = [(f"xi{n}", self.xi(n)) for n in range(1, self.N + 1)]
        out += [(f"u{n}", self.u(n)) for n in range(self.N)]
        out += [(f"w{n}", self.w(n)) for n in range(self.N)]
        out += [(f"mu{n}", self.mu(n)) for n in range(self.N)]
        out += [(f"lam{n}", self.lam(n)) for n in range(self.N + 1)]
        out += [(f"gam{n}", self.gam(n)) for n in range(self.N)]
        out += [(f"sigma{n}", self.sigma(n)) for n in range(self.N + 1)]
        out += [(f"tau{n}", self.tau(n)) for n in range(self.N)]
        return out


def stack_dimensions(problem: Problem) -> IndexMap:
    s, lo = problem.system, problem.lo
    return IndexMap(lo.N, s.p, s.n_u, s.n_w, lo.Y_set.n_rows, lo.Y_omega.n_rows, lo.W_set.n_rows)
