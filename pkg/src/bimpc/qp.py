"""Dense convex QP / QCQP solver with dual extraction.

The solver is a primal-dual interior point method (Mehrotra predictor-corrector)
that treats convex quadratic inequality constraints natively, followed by an
active-set polish that solves the reduced KKT system exactly.  Problems here are
small and dense (a few hundred variables at most), so everything is numpy.

Conventions
-----------
minimize    0.5 z'Hz + c'z + k
subject to  A_eq z  = b_eq              (multipliers ``eq``)
            A_in z <= b_in              (multipliers ``ineq`` >= 0)
            z'M_j z + m_j'z <= r_j      (multipliers ``quad`` >= 0)

Stationarity: Hz + c + A_eq'eq + A_in'ineq + sum_j quad_j (2 M_j z + m_j) = 0.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import NotSymmetric, DimensionMismatch, NotPositiveDefinite

PSD_RTOL = 1e-9

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass(frozen=True)
class QuadConstraint:
    """Convex quadratic constraint z'Mz + m'z <= bound."""

    M: np.ndarray
    m: np.ndarray
    bound: float


def _as2d(a, ncols):
    if a is None:
        return np.zeros((0, ncols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, ncols))
    return a


def _as1d(a):
    if a is None:
        return np.zeros(0)
    return np.atleast_1d(np.asarray(a, dtype=float)).ravel()


@dataclass(frozen=True)
class QpProblem:
    hessian: np.ndarray
    linear: np.ndarray
    constant: float = 0.0
    a_eq: np.ndarray = None
    b_eq: np.ndarray = None
    a_in: np.ndarray = None
    b_in: np.ndarray = None
    quad: tuple = field(default_factory=tuple)

    def __post_init__(self):
        c = _as1d(self.linear)
        n = c.size
        H = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        if H.size == 0 and n == 0:
            H = np.zeros((0, 0))
        if H.shape != (n, n):
            raise DimensionMismatch(f"hessian {H.shape} vs linear term of length {n}")
        a_eq, b_eq = _as2d(self.a_eq, n), _as1d(self.b_eq)
        a_in, b_in = _as2d(self.a_in, n), _as1d(self.b_in)
        if a_eq.shape != (b_eq.size, n):
            raise DimensionMismatch(f"equality block {a_eq.shape} vs rhs {b_eq.size}")
        if a_in.shape != (b_in.size, n):
            raise DimensionMismatch(f"inequality block {a_in.shape} vs rhs {b_in.size}")
        quad = tuple(
            QuadConstraint(np.asarray(q.M, dtype=float), _as1d(q.m), float(q.bound)) for q in self.quad
        )
        for q in quad:
            if q.M.shape != (n, n) or q.m.size != n:
                raise DimensionMismatch("quadratic constraint has wrong size")
        object.__setattr__(self, "hessian", H)
        object.__setattr__(self, "linear", c)
        object.__setattr__(self, "constant", float(self.constant))
        object.__setattr__(self, "a_eq", a_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "a_in", a_in)
        object.__setattr__(self, "b_in", b_in)
        object.__setattr__(self, "quad", quad)

    @property
    def n(self) -> int:
        return self.linear.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.hessian @ z + self.linear @ z + self.constant)

    def check_convex(self):
        for name, M in [("hessian", self.hessian)] + [(f"quad[{i}]", q.M) for i, q in enumerate(self.quad)]:
            check_psd(M, name)


@dataclass
class SolveResult:
    status: Status
    primal: np.ndarray
    eq: np.ndarray
    ineq: np.ndarray
    quad: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def check_symmetric(M, name="matrix", tol=1e-9):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} is not square: {M.shape}")
    scale = max(1.0, np.abs(M).max(initial=0.0))
    if np.abs(M - M.T).max(initial=0.0) > tol * scale:
        raise NotSymmetric(f"{name} is not symmetric")
    return 0.5 * (M + M.T)


def check_psd(M, name="matrix", rtol=PSD_RTOL):
    """Symmetric PSD test; eigenvalues >= -rtol * largest |eigenvalue| pass."""
    M = check_symmetric(M, name)
    if M.size == 0:
        return M
    ev = np.linalg.eigvalsh(M)
    if ev[0] < -rtol * max(np.abs(ev).max(), 1e-300):
        raise NotPositiveDefinite(f"{name} is not positive semidefinite (min eigenvalue {ev[0]:.3e})")
    return M


def pinv_psd(M, tol: float = 1e-10) -> np.ndarray:
    """Pseudoinverse of a symmetric PSD matrix through its eigendecomposition.

    Eigenvalues below ``tol * lambda_max`` are treated as zero.
    """
    M = check_symmetric(M, "M")
    if M.size == 0:
        return M.copy()
    ev, Q = np.linalg.eigh(M)
    cutoff = tol * max(np.abs(ev).max(), 0.0)
    inv = np.array([1.0 / e if abs(e) > cutoff and e != 0 else 0.0 for e in ev])
    out = (Q * inv) @ Q.T
    return 0.5 * (out + out.T)


def null_basis_psd(M, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of the null space of a symmetric PSD matrix."""
    M = check_symmetric(M, "M")
    ev, Q = np.linalg.eigh(M)
    cutoff = tol * max(np.abs(ev).max(initial=0.0), 0.0)
    return Q[:, np.abs(ev) <= cutoff]


# --------------------------------------------------------------------------- #
# residuals


def _ineq_values(prob: QpProblem, z):
    g = prob.a_in @ z - prob.b_in
    if prob.quad:
        gq = np.array([z @ q.M @ z + q.m @ z - q.bound for q in prob.quad])
        Jq = np.array([2.0 * q.M @ z + q.m for q in prob.quad])
        return np.concatenate([g, gq]), np.vstack([prob.a_in, Jq])
    return g, prob.a_in


def kkt_residual(prob: QpProblem, z, eq, ineq, quad) -> float:
    """Max-norm of stationarity, primal violation, dual sign and complementarity."""
    g, J = _ineq_values(prob, z)
    lam = np.concatenate([ineq, quad])
    parts = [0.0]
    stat = prob.hessian @ z + prob.linear + prob.a_eq.T @ eq + J.T @ lam
    scale = 1.0 + max(np.abs(prob.linear).max(initial=0), np.abs(prob.hessian @ z).max(initial=0))
    parts.append(np.abs(stat).max(initial=0) / scale)
    if prob.a_eq.shape[0]:
        parts.append(np.abs(prob.a_eq @ z - prob.b_eq).max() / (1.0 + np.abs(prob.b_eq).max()))
    if g.size:
        parts.append(max(g.max(), 0.0) / (1.0 + np.abs(prob.b_in).max(initial=0)))
        parts.append(max(-lam.min(), 0.0))
        parts.append(np.abs(lam * np.minimum(-g, 1e300)).max() / (1.0 + abs(prob.objective(z))))
    return float(max(parts))


# --------------------------------------------------------------------------- #
# LP helpers (HiGHS) used for infeasibility / unboundedness classification


def linear_feasible(A_eq, b_eq, A_in, b_in) -> bool:
    """True iff {z : A_eq z = b_eq, A_in z <= b_in} is nonempty (HiGHS LP)."""
    n = A_eq.shape[1] if A_eq.size else A_in.shape[1]
    if n == 0:
        return bool(np.all(b_in >= -1e-9)) and bool(np.all(np.abs(b_eq) <= 1e-9))
    res = linprog(
        np.zeros(n),
        A_ub=A_in if A_in.shape[0] else None,
        b_ub=b_in if A_in.shape[0] else None,
        A_eq=A_eq if A_eq.shape[0] else None,
        b_eq=b_eq if A_eq.shape[0] else None,
        bounds=(None, None),
        method="highs",
    )
    return res.status != 2


def _has_descent_ray(prob: QpProblem) -> bool:
    n = prob.n
    A_eq = np.vstack([prob.a_eq, prob.hessian])
    b_eq = np.zeros(A_eq.shape[0])
    res = linprog(
        prob.linear,
        A_ub=prob.a_in if prob.a_in.shape[0] else None,
        b_ub=np.zeros(prob.a_in.shape[0]) if prob.a_in.shape[0] else None,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=[(-1, 1)] * n,
        method="highs",
    )
    return res.status == 0 and res.fun < -1e-9


# --------------------------------------------------------------------------- #
# interior point core


def _interior_point(prob: QpProblem, tol, max_iter, reg=1e-10, x0=None):
    n = prob.n
    P, c, A, b = prob.hessian, prob.linear, prob.a_eq, prob.b_eq
    me = A.shape[0]
    ml, mq = prob.a_in.shape[0], len(prob.quad)
    m = ml + mq

    y = np.zeros(me)
    if x0 is None:
        z = np.zeros(n)
        g, J = _ineq_values(prob, z)
        s = np.maximum(-g, 1.0)
    else:
        # warm start: keep the given point and its slacks, pushed off the boundary
        z = np.asarray(x0, dtype=float).copy()
        g, J = _ineq_values(prob, z)
        s = np.maximum(-g, 1e-2)
    lam = np.ones(m)
    if x0 is not None and m:
        # multiplier estimate: least-squares stationarity, clipped below
        Kt = np.hstack([A.T, J.T])
        with np.errstate(all="ignore"):
            est = np.linalg.lstsq(Kt, -(P @ z + c), rcond=None)[0]
        if np.all(np.isfinite(est)):
            y = est[:me]
            lam = np.maximum(est[me:], 1.0)
    hscale = 1.0 + np.abs(prob.b_in).max(initial=0.0)
    bscale = 1.0 + np.abs(b).max(initial=0.0)
    status = Status.ITER_LIMIT

    it = 0
    for it in range(1, max_iter + 1):
        g, J = _ineq_values(prob, z)
        rd = P @ z + c + A.T @ y + J.T @ lam
        rp = A @ z - b
        ri = g + s
        mu = float(s @ lam / m) if m else 0.0
        dscale = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(P @ z).max(initial=0.0))
        # multiplier-size scaling of the stationarity test (as in IPOPT); keeps
        # problems without a finite multiplier (failed Slater) terminating
        dscale *= max(1.0, (np.abs(y).sum() + lam.sum()) / (100.0 * max(me + m, 1)))
        obj = 0.5 * z @ P @ z + c @ z
        if (
            np.abs(rd).max(initial=0.0) <= tol * dscale
            and np.abs(rp).max(initial=0.0) <= tol * bscale
            and np.abs(ri).max(initial=0.0) <= tol * hscale
            and mu <= tol * (1.0 + abs(obj))
        ):
            status = Status.OPTIMAL
            break
        if np.abs(z).max(initial=0.0) > 1e12:
            status = Status.UNBOUNDED
            break
        if it % 25 == 0 and ml and not mq:
            infeas = max(np.abs(rp).max(initial=0.0) / bscale, np.abs(ri).max(initial=0.0) / hscale)
            if infeas > 1e-6 and not linear_feasible(A, b, prob.a_in, prob.b_in):
                status = Status.INFEASIBLE
                break

        W = P.copy()
        for j, q in enumerate(prob.quad):
            W += 2.0 * lam[ml + j] * q.M
        d = lam / s
        K11 = W + J.T @ (d[:, None] * J)
        K = np.block([[K11 + reg * np.eye(n), A.T], [A, -reg * np.eye(me)]])
        K0 = np.block([[K11, A.T], [A, np.zeros((me, me))]])
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            break

        def newton(rc):
            rhs = np.concatenate([-rd - J.T @ ((-rc + lam * ri) / s), -rp])
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            with np.errstate(all="ignore"):
                for _ in range(3):
                    ref = sol + sla.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
                    if not np.all(np.isfinite(ref)):
                        break
                    sol = ref
            dz, dy = sol[:n], sol[n:]
            ds = -ri - J @ dz
            dl = (-rc - lam * ds) / s
            return dz, dy, ds, dl

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        with np.errstate(all="ignore"):
            dz, dy, ds, dl = newton(s * lam)
            if m:
                a_aff = min(max_step(s, ds), max_step(lam, dl))
                mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dl) / m)
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                dz, dy, ds, dl = newton(s * lam + ds * dl - sigma * mu)
                alpha = min(1.0, 0.99 * min(max_step(s, ds), max_step(lam, dl)))
            else:
                alpha = 1.0
        if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(ds)) and np.all(np.isfinite(dl))):
            break
        log.debug("ip %d alpha=%.2e mu=%.2e |z|=%.2e rd=%.2e ri=%.2e", it, alpha, mu,
                  np.abs(z).max(initial=0.0), np.abs(rd).max(initial=0.0), np.abs(ri).max(initial=0.0))
        z = z + alpha * dz
        y = y + alpha * dy
        s = s + alpha * ds
        lam = lam + alpha * dl
        if m:
            s = np.maximum(s, 1e-300)
            lam = np.maximum(lam, 1e-300)
    return status, z, y, lam, s, it


def _polish(prob: QpProblem, z, y, lam, s):
    """Solve the KKT system restricted to the identified active set."""
    n = prob.n
    ml = prob.a_in.shape[0]
    act = lam > s
    act_l = np.flatnonzero(act[:ml])
    act_q = np.flatnonzero(act[ml:])
    G_S = prob.a_in[act_l]
    h_S = prob.b_in[act_l]
    A, b = prob.a_eq, prob.b_eq
    me = A.shape[0]
    lam_l = lam[:ml][act_l].copy()
    lam_q = lam[ml:][act_q].copy()
    quads = [prob.quad[j] for j in act_q]
    for _ in range(8 if quads else 1):
        W = prob.hessian.copy()
        rows_q = []
        for lq, q in zip(lam_q, quads):
            W += 2.0 * lq * q.M
            rows_q.append(2.0 * q.M @ z + q.m)
        Jq = np.array(rows_q).reshape(len(quads), n)
        stat = prob.hessian @ z + prob.linear + A.T @ y + G_S.T @ lam_l + Jq.T @ lam_q
        F = np.concatenate([
            stat,
            A @ z - b,
            G_S @ z - h_S,
            np.array([z @ q.M @ z + q.m @ z - q.bound for q in quads]),
        ])
        kl, kq = len(act_l), len(quads)
        K = np.zeros((n + me + kl + kq, n + me + kl + kq))
        K[:n, :n] = W
        K[:n, n:n + me] = A.T
        K[:n, n + me:n + me + kl] = G_S.T
        K[:n, n + me + kl:] = Jq.T
        K[n:n + me, :n] = A
        K[n + me:n + me + kl, :n] = G_S
        K[n + me + kl:, :n] = Jq
        step = np.linalg.lstsq(K, -F, rcond=1e-13)[0]
        z = z + step[:n]
        y = y + step[n:n + me]
        lam_l = lam_l + step[n + me:n + me + kl]
        lam_q = lam_q + step[n + me + kl:]
        if np.abs(step).max(initial=0.0) < 1e-15 * (1 + np.abs(z).max(initial=0.0)):
            break
    ineq = np.zeros(ml)
    ineq[act_l] = lam_l
    quad = np.zeros(len(prob.quad))
    quad[act_q] = lam_q
    return z, y, ineq, quad


def solve_qcqp(prob: QpProblem, tol: float = 1e-9, max_iter: int = 200, check: bool = False,
               x0=None) -> SolveResult:
    """Solve a convex QCQP; see module docstring for conventions.

    ``x0`` optionally warm-starts the primal iterate.  Raises nothing: the
    outcome is carried in ``SolveResult.status``.
    """
    if check:
        prob.check_convex()
    n = prob.n
    ml, mq = prob.a_in.shape[0], len(prob.quad)
    status, z, y, lam, s, it = _interior_point(prob, tol, max_iter, x0=x0)
    if status != Status.OPTIMAL and x0 is not None:
        status, z, y, lam, s, it = _interior_point(prob, tol, max_iter)
    if status == Status.OPTIMAL:
        ineq, quad = lam[:ml].copy(), lam[ml:].copy()
        res = kkt_residual(prob, z, y, ineq, quad)
        zp, yp, ip, qp_ = _polish(prob, z, y, lam, s)
        if np.all(np.isfinite(zp)):
            res_p = kkt_residual(prob, zp, yp, ip, qp_)
            if res_p <= max(res, 1e-12):
                z, y, ineq, quad, res = zp, yp, ip, qp_, res_p
        return SolveResult(Status.OPTIMAL, z, y, ineq, quad, prob.objective(z), res, it)

    # classify the failure
    lin_ok = linear_feasible(prob.a_eq, prob.b_eq, prob.a_in, prob.b_in)
    if not lin_ok:
        status = Status.INFEASIBLE
    elif mq and _quad_infeasible(prob, tol):
        status = Status.INFEASIBLE
    elif status != Status.INFEASIBLE and _has_descent_ray(prob) and not mq:
        status = Status.UNBOUNDED
    elif status == Status.INFEASIBLE:
        status = Status.ITER_LIMIT
    ineq, quad = lam[:ml], lam[ml:]
    nan = np.full(n, np.nan) if status == Status.INFEASIBLE else z
    return SolveResult(status, nan, y, ineq, quad, float("nan"), float("inf"), it)


def _quad_infeasible(prob: QpProblem, tol) -> bool:
    # phase 1: min t  s.t. linear rows <= t, quadratic rows <= t, t >= -1
    n = prob.n
    ml = prob.a_in.shape[0]
    G = np.hstack([prob.a_in, -np.ones((ml, 1))])
    G = np.vstack([G, np.eye(1, n + 1, n) * -1.0])
    h = np.concatenate([prob.b_in, [1.0]])
    quads = []
    for q in prob.quad:
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = q.M
        quads.append(QuadConstraint(M, np.concatenate([q.m, [-1.0]]), q.bound))
    A = np.hstack([prob.a_eq, np.zeros((prob.a_eq.shape[0], 1))])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    ph1 = QpProblem(np.zeros((n + 1, n + 1)), c, 0.0, A, prob.b_eq, G, h, tuple(quads))
    status, z, *_ = _interior_point(ph1, tol, 200)
    return status == Status.OPTIMAL and z[-1] > 1e-7


def solve_qp(prob: QpProblem, tol: float = 1e-9, max_iter: int = 200, check: bool = False) -> SolveResult:
    """Solve a convex QP (no quadratic constraints allowed)."""
    if prob.quad:
        raise ValueError("solve_qp does not accept quadratic constraints; use solve_qcqp")
    return solve_qcqp(prob, tol=tol, max_iter=max_iter, check=check)
