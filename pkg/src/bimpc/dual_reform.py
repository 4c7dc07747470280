"""Duality-gap reformulation of the bilevel problem.

The follower's optimality is replaced by primal feasibility, dual feasibility
and the gap constraint  f(xi, u, w) - zeta(xi0, u, mu, lam, gam) <= eps,
where zeta is the Lagrange dual function of the follower QP.  Because zeta
contains products of leader inputs with multipliers, the gap constraint is a
nonconvex quadratic.  It is handled by a penalty convex-concave procedure:
the quadratic form is split into PSD parts M+ - M-, the concave part is
linearized at the current iterate and each subproblem is a convex QCQP.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Infeasible, NoFeasiblePoint, IterLimit
from .lompc import DualCertificate, solve_lompc, as_u_seq
from .model import Problem, IndexMap
from .qp import QpProblem, QuadConstraint, pinv_psd, null_basis_psd, solve_qcqp, solve_qp
from .stacked import follower_stack, leader_stack, FollowerStack

log = logging.getLogger(__name__)

DEFAULT_EPS = 0.01


# --------------------------------------------------------------------------- #
# dual function


def _pinv(M):
    return pinv_psd(np.asarray(M, dtype=float))


def zeta(problem: Problem, xi0, u_seq, mu, lam, gam) -> float:
    """Lagrange dual function of the follower, written stage by stage.

    Pseudoinverses of U and V are used for the state terms, so the value is
    the true dual function only where each state coefficient lies in the
    range of its weight (see ``range_residual``); elsewhere the dual function
    is -inf.

    Parameters
    ----------
    mu : (N, p) dynamics multipliers
    lam : sequence of N+1 vectors (lam_0..lam_N), lam_N sized to Y_omega
    gam : (N, m_w) input-constraint multipliers
    """
    s, lo = problem.system, problem.lo
    N, p, n_x = lo.N, s.p, s.n_x
    xi0 = np.asarray(xi0, dtype=float)
    u = as_u_seq(problem, u_seq)
    mu = np.asarray(mu, dtype=float).reshape(N, p)
    gam = np.asarray(gam, dtype=float).reshape(N, lo.W_set.n_rows)
    if len(lam) != N + 1:
        raise DimensionMismatch(f"expected {N + 1} lam blocks")
    r = np.zeros(p) if lo.xi_ref is None else np.asarray(lo.xi_ref, dtype=float)
    v = np.zeros(p) if lo.v is None else np.asarray(lo.v, dtype=float)
    Vp, Up, W2i = _pinv(lo.V), _pinv(lo.U), np.linalg.inv(lo.W2)
    Fy, gy = _lift(lo.Y_set.F, p, n_x), lo.Y_set.g
    Fo, go = _lift(lo.Y_omega.F, p, n_x), lo.Y_omega.g
    Fw, gw = lo.W_set.F, lo.W_set.g
    offs = problem.offsets()

    val = 0.0
    # terminal state
    b = mu[N - 1] + Fo.T @ lam[N] - 2 * lo.U @ r
    val += -0.25 * b @ Up @ b + r @ lo.U @ r - go @ lam[N]
    # interior states
    for n in range(1, N):
        b = mu[n - 1] - s.A.T @ mu[n] + Fy.T @ lam[n] + v - 2 * lo.V @ r
        val += -0.25 * b @ Vp @ b + r @ lo.V @ r - gy @ lam[n]
    # inputs
    for n in range(N):
        a = 2 * lo.Phi.T @ u[n] - s.B2.T @ mu[n] + Fw.T @ gam[n]
        val += -0.25 * a @ W2i @ a - gw @ gam[n] + u[n] @ lo.W1 @ u[n]
        val += -mu[n] @ (s.B1 @ u[n] + offs[n])
    # initial stage
    val += (xi0 - r) @ lo.V @ (xi0 - r) + v @ xi0 - mu[0] @ s.A @ xi0
    if lo.Y_set.n_rows:
        val += (lo.Y_set.F @ xi0[n_x:] - gy) @ lam[0]
    return float(val)


def range_residual(problem: Problem, xi0, u_seq, mu, lam, gam) -> float:
    """Largest component of the state coefficients outside range(U) / range(V)."""
    s, lo = problem.system, problem.lo
    N, p, n_x = lo.N, s.p, s.n_x
    mu = np.asarray(mu, dtype=float).reshape(N, p)
    r = np.zeros(p) if lo.xi_ref is None else np.asarray(lo.xi_ref, dtype=float)
    v = np.zeros(p) if lo.v is None else np.asarray(lo.v, dtype=float)
    Fy, Fo = _lift(lo.Y_set.F, p, n_x), _lift(lo.Y_omega.F, p, n_x)
    NU, NV = null_basis_psd(lo.U), null_basis_psd(lo.V)
    worst = 0.0
    b = mu[N - 1] + Fo.T @ lam[N] - 2 * lo.U @ r
    worst = max(worst, float(np.abs(NU.T @ b).max(initial=0.0)))
    for n in range(1, N):
        b = mu[n - 1] - s.A.T @ mu[n] + Fy.T @ lam[n] + v - 2 * lo.V @ r
        worst = max(worst, float(np.abs(NV.T @ b).max(initial=0.0)))
    return worst


def _lift(F, p, n_x):
    out = np.zeros((F.shape[0], p))
    out[:, n_x:] = F
    return out


# --------------------------------------------------------------------------- #
# stacked gap form


@dataclass
class GapForm:
    """gap(Z) = 0.5 Z'M Z + m'Z + m0 over Z = (primal, duals)."""

    M: np.ndarray
    m: np.ndarray
    m0: float
    range_rows: np.ndarray     # R Z = r keeps zeta finite
    range_rhs: np.ndarray

    def value(self, Z) -> float:
        return float(0.5 * Z @ self.M @ Z + self.m @ Z + self.m0)


def gap_form(problem: Problem, xi0, fs: FollowerStack = None) -> GapForm:
    """Follower objective minus dual function as one quadratic form in Z."""
    xi0 = np.asarray(xi0, dtype=float)
    fs = follower_stack(problem, xi0) if fs is None else fs
    idx = fs.idx
    n, npr = idx.n_continuous, idx.n_primal
    f, cu = fs.cols_free, fs.cols_u
    n_mu = idx.N * idx.p
    mu_cols = npr + np.arange(n_mu)
    dG_cols = npr + fs.dual_cols

    # a(Z) = La Z + c_f, the coefficient of the follower variables in the Lagrangian
    La = np.zeros((f.size, n))
    La[:, cu] = fs.H[np.ix_(f, cu)]
    La[:, mu_cols] = fs.E[:, f].T
    La[:, dG_cols] = fs.G[:, f].T
    Hff = fs.H[np.ix_(f, f)]
    Hp = pinv_psd(Hff)
    Nb = null_basis_psd(Hff)

    M = np.zeros((n, n))
    m = np.zeros(n)
    # follower objective
    M[:npr, :npr] += fs.H
    m[:npr] += fs.c
    m0 = fs.k
    # minus the dual function
    M += La.T @ Hp @ La
    m += La.T @ Hp @ fs.c[f]
    m0 += 0.5 * fs.c[f] @ Hp @ fs.c[f]
    M[np.ix_(cu, cu)] -= fs.H[np.ix_(cu, cu)]
    m[cu] -= fs.c[cu]
    m0 -= fs.k
    Eu = fs.E[:, cu]
    M[np.ix_(mu_cols, cu)] -= Eu
    M[np.ix_(cu, mu_cols)] -= Eu.T
    m[mu_cols] += fs.e
    Gu = fs.G[:, cu]
    if np.any(Gu):
        M[np.ix_(dG_cols, cu)] -= Gu
        M[np.ix_(cu, dG_cols)] -= Gu.T
    m[dG_cols] += fs.h
    lo, s = problem.lo, problem.system
    if lo.Y_set.n_rows:
        lam0 = idx.lam(0)
        m[lam0] -= lo.Y_set.F @ xi0[s.n_x:] - lo.Y_set.g
    M = 0.5 * (M + M.T)
    R = Nb.T @ La
    rr = -Nb.T @ fs.c[f]
    keep = np.abs(R).max(axis=1, initial=0.0) > 0 if R.size else np.zeros(0, dtype=bool)
    return GapForm(M, m, m0, R[keep], rr[keep])


def zeta_stacked(problem: Problem, xi0, Z) -> float:
    """Dual function evaluated through the stacked form (cross-check of ``zeta``)."""
    fs = follower_stack(problem, xi0)
    g = gap_form(problem, xi0, fs)
    return fs.objective(Z[:fs.idx.n_primal]) - g.value(Z)


# --------------------------------------------------------------------------- #
# problem assembly


@dataclass
class DualReformProblem:
    problem: Problem
    xi0: np.ndarray
    eps: float
    idx: IndexMap
    H: np.ndarray               # leader objective over Z
    c: np.ndarray
    k: float
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    quad: tuple                 # convex constraints (Lyapunov)
    gap: GapForm
    n_sign: int                 # trailing rows of A_in that are dual signs

    @property
    def n(self) -> int:
        return self.idx.n_continuous

    def objective(self, Z) -> float:
        return float(0.5 * Z @ self.H @ Z + self.c @ Z + self.k)

    def violation(self, Z) -> float:
        """Max violation of the convex constraints (gap excluded)."""
        v = 0.0
        if self.A_eq.shape[0]:
            v = max(v, float(np.abs(self.A_eq @ Z - self.b_eq).max()))
        if self.A_in.shape[0]:
            v = max(v, float(np.max(self.A_in @ Z - self.b_in)))
        for q in self.quad:
            v = max(v, float(Z @ q.M @ Z + q.m @ Z - q.bound))
        return max(v, 0.0)


def build_pdb(problem: Problem, xi0, eps: float = DEFAULT_EPS) -> DualReformProblem:
    """Assemble the duality-gap reformulation at ``xi0``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    xi0 = np.asarray(xi0, dtype=float)
    idx = problem.index
    fs = follower_stack(problem, xi0)
    ls = leader_stack(problem, xi0)
    n, npr = idx.n_continuous, idx.n_primal
    gap = gap_form(problem, xi0, fs)

    H = np.zeros((n, n))
    H[:npr, :npr] = ls.H
    c = np.zeros(n)
    c[:npr] = ls.c

    dyn = np.zeros((fs.E.shape[0], n))
    dyn[:, :npr] = fs.E
    A_eq = np.vstack([dyn, gap.range_rows])
    b_eq = np.concatenate([fs.e, gap.range_rhs])

    lead = np.zeros((ls.G.shape[0], n))
    lead[:, :npr] = ls.G
    fol = np.zeros((fs.G.shape[0], n))
    fol[:, :npr] = fs.G
    lam0 = idx.lam(0)
    dual_idx = np.r_[np.arange(lam0.start, lam0.stop), npr + fs.dual_cols]
    sign = np.zeros((dual_idx.size, n))
    sign[np.arange(dual_idx.size), dual_idx] = -1.0
    A_in = np.vstack([lead, fol, sign])
    b_in = np.concatenate([ls.h, fs.h, np.zeros(dual_idx.size)])
    quad = tuple(QuadConstraint(_pad(q.M, n), np.r_[q.m, np.zeros(n - npr)], q.bound) for q in ls.quad)
    return DualReformProblem(problem, xi0, float(eps), idx, H, c, ls.k, A_eq, b_eq, A_in, b_in,
                             quad, gap, dual_idx.size)


def _pad(M, n):
    out = np.zeros((n, n))
    out[:M.shape[0], :M.shape[1]] = M
    return out


# --------------------------------------------------------------------------- #
# local solver


@dataclass
class PdbSolution:
    status: str
    Z: np.ndarray
    objective: float
    gap: float
    eps: float
    start: int
    iterations: int
    idx: IndexMap
    starts: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "Optimal"

    @property
    def primal(self):
        return self.Z[:self.idx.n_primal]

    @property
    def u(self):
        return self.Z[self.idx.u_all].reshape(self.idx.N, self.idx.n_u)

    @property
    def w(self):
        return self.Z[self.idx.w_all].reshape(self.idx.N, self.idx.n_w)

    @property
    def xi(self):
        return self.Z[self.idx.xi_all].reshape(self.idx.N, self.idx.p)

    @property
    def duals(self) -> DualCertificate:
        return DualCertificate.from_vector(self.Z[self.idx.n_primal:], self.idx)


def _split(M):
    ev, V = np.linalg.eigh(0.5 * (M + M.T))
    pos = np.clip(ev, 0, None)
    neg = np.clip(-ev, 0, None)
    return (V * pos) @ V.T, (V * neg) @ V.T


def _follower_point(dp: DualReformProblem, u) -> np.ndarray | None:
    try:
        sol = solve_lompc(dp.problem, dp.xi0, u)
    except (Infeasible, IterLimit):
        return None
    Z = np.zeros(dp.n)
    Z[:dp.idx.n_primal] = sol.primal
    Z[dp.idx.n_primal:] = sol.duals.to_vector(dp.idx)
    return Z


def _ccp(dp: DualReformProblem, Z0, eps_work, max_iter=60, tol=1e-9):
    """Penalty convex-concave iterations from Z0; returns (Z, iterations) or (None, it)."""
    n = dp.n
    Z0 = np.asarray(Z0, dtype=float)
    Mp, Mm = _split(dp.gap.M)
    # subproblem variables: (Z, t) with t >= 0 the gap slack
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = dp.H
    A_eq = np.hstack([dp.A_eq, np.zeros((dp.A_eq.shape[0], 1))])
    A_in = np.vstack([np.hstack([dp.A_in, np.zeros((dp.A_in.shape[0], 1))]), -np.eye(1, n + 1, n)])
    b_in = np.r_[dp.b_in, 0.0]
    quad = [QuadConstraint(_pad(q.M, n + 1), np.r_[q.m, 0.0], q.bound) for q in dp.quad]
    rho = 10.0
    Z = Z0
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        lin = dp.gap.m - Mm @ Z
        bound = eps_work - dp.gap.m0 - 0.5 * Z @ Mm @ Z
        qg = QuadConstraint(_pad(0.5 * Mp, n + 1), np.r_[lin, -1.0], bound)
        c = np.r_[dp.c, rho]
        # trust region keeps the subproblem bounded along directions the
        # linearization leaves free
        radius = 10.0 * (1.0 + np.abs(Z).max())
        box = np.hstack([np.vstack([np.eye(n), -np.eye(n)]), np.zeros((2 * n, 1))])
        A_tr = np.vstack([A_in, box])
        b_tr = np.r_[b_in, Z + radius, radius - Z]
        sub = QpProblem(H, c, dp.k, A_eq, dp.b_eq, A_tr, b_tr, tuple(quad) + (qg,))
        t0 = max(dp.gap.value(Z) - eps_work, 0.0) + 1e-2
        res = solve_qcqp(sub, x0=np.r_[Z, t0])
        if not res.ok:
            # keep the last iterate; the caller checks its feasibility
            return Z, it
        Znew, t = res.primal[:n], max(res.primal[n], 0.0)
        obj = dp.objective(Znew) + rho * t
        step = float(np.abs(Znew - Z).max(initial=0.0))
        Z = Znew
        if t > 1e-9 and rho < 1e8:
            rho *= 10.0
        elif abs(prev - obj) <= tol * (1 + abs(obj)) or step <= 1e-8 * (1 + np.abs(Z).max()):
            # the multipliers need not be unique, so a stalled objective is
            # accepted even while Z still drifts along the optimal face
            break
        prev = obj
    return Z, it


EPS_SCHEDULE = (1e-1, 1e-2, 1e-3)
# with eps = 0 the gap constraint has no interior; iterations stop at this
# tolerance and face_polish moves the point onto the exact follower face
EPS_ZERO_WORK = 1e-2
POLISH_ROUNDS = 5


def _ccp_continuation(dp: DualReformProblem, Z0, eps_work):
    """CCP on a decreasing gap tolerance ending at ``eps_work``.

    A tight gap tolerance leaves a thin feasible sliver along which the
    iterations crawl; solving looser problems first moves Z close to the
    optimum in a few steps.
    """
    Z, total = Z0, 0
    for e in [e for e in EPS_SCHEDULE if e > eps_work] + [eps_work]:
        Z_new, it = _ccp(dp, Z, e)
        total += it
        if Z_new is None:
            return None, total
        Z = Z_new
    return Z, total


def face_polish(dp: DualReformProblem, Z) -> np.ndarray | None:
    """Exact bilevel point on the follower face identified at Z.

    The follower's true active set at Z's leader input fixes which multipliers
    may be positive; the leader is then optimized over the resulting convex
    KKT system.  The active set is re-read at the new leader input until it
    repeats.  Used for eps = 0, where the gap constraint has no interior.
    """
    from .kkt_reform import build_pip, solve_pattern, ONE, ZERO
    m = build_pip(dp.problem, dp.xi0, kappa=1e12)
    best, seen = None, set()
    for _ in range(POLISH_ROUNDS):
        Zf = _follower_point(dp, Z[dp.idx.u_all])
        if Zf is None:
            break
        d = Zf[m.pair_dual]
        s = m.slack(Zf)
        pattern = np.where(d > np.maximum(s, 1e-9), ONE, ZERO)
        key = pattern.tobytes()
        if key in seen:
            break
        seen.add(key)
        res = solve_pattern(m, pattern)
        if res is None:
            break
        Z = res.primal
        if best is None or dp.objective(Z) < dp.objective(best) - 1e-12:
            best = Z
    return best


def _starts(dp: DualReformProblem, multistart, rng, u_candidates):
    N, n_u = dp.idx.N, dp.idx.n_u
    U = dp.problem.bi.U_set
    base = [np.zeros(N * n_u)]
    for u in u_candidates or []:
        base.insert(0, np.asarray(u, dtype=float).ravel())
    out = list(base)
    scale = np.ones(n_u)
    if U.n_rows:
        from . import polytope as pt
        ext = pt.axis_extent(U)
        scale = 0.25 * np.minimum(ext[:, 1] - ext[:, 0], 4.0)
    while len(out) < multistart:
        out.append(out[0] + np.tile(scale, N) * rng.standard_normal(N * n_u))
    return [_project_u(dp, u) for u in out[:max(multistart, 1)]]


def _project_u(dp, u):
    U = dp.problem.bi.U_set
    if not U.n_rows:
        return u
    N, n_u = dp.idx.N, dp.idx.n_u
    out = []
    for k in range(N):
        uk = u[k * n_u:(k + 1) * n_u]
        if np.all(U.F @ uk <= U.g + 1e-12):
            out.append(uk)
            continue
        res = solve_qp(QpProblem(2 * np.eye(n_u), -2 * uk, 0.0, None, None, U.F, U.g))
        out.append(res.primal if res.ok else uk)
    return np.concatenate(out)


def solve_pdb(dp: DualReformProblem, multistart: int = 5, seed: int = 0, u_starts=None,
              jobs: int = 1, feas_tol: float = 1e-6) -> PdbSolution:
    """Best local solution over several starts.

    Each start fixes a leader input sequence, takes the follower's exact
    response with its dual certificate (zero gap) and runs the penalty
    convex-concave procedure from there.

    Raises
    ------
    NoFeasiblePoint
        No start produced a point satisfying every constraint.
    """
    rng = np.random.default_rng(seed)
    starts = _starts(dp, multistart, rng, u_starts)
    eps_work = dp.eps if dp.eps > 0 else EPS_ZERO_WORK

    def run(k_u):
        k, u = k_u
        Z0 = _follower_point(dp, u)
        if Z0 is None:
            Z0 = np.zeros(dp.n)
            Z0[dp.idx.u_all] = u
        Z, it = _ccp_continuation(dp, Z0, eps_work)
        if Z is None:
            return k, None, it
        if dp.eps == 0:
            Zp = face_polish(dp, Z)
            if Zp is not None:
                Z = Zp
        return k, Z, it

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(run, enumerate(starts)))
    else:
        outs = [run(ku) for ku in enumerate(starts)]

    best = None
    summary = []
    for k, Z, it in outs:
        if Z is None:
            summary.append({"start": k, "status": "failed", "iterations": it})
            continue
        g = dp.gap.value(Z)
        viol = max(dp.violation(Z), g - dp.eps)
        obj = dp.objective(Z)
        summary.append({"start": k, "objective": obj, "gap": g, "violation": viol, "iterations": it})
        if viol > feas_tol:
            continue
        if best is None or obj < best[0] - 1e-12:
            best = (obj, k, Z, g, it)
    if best is None:
        raise NoFeasiblePoint("no start reached a feasible point")
    obj, k, Z, g, it = best
    return PdbSolution("Optimal", Z, obj, g, dp.eps, k, it, dp.idx, summary)
