"""Follower (LoMPC) problem: QP build, solve with duals, and a DP oracle.

For a fixed leader input sequence u the follower solves a convex QP in
(xi_1..xi_N, w_0..w_{N-1}).  Multiplier conventions follow the Lagrangian

    f + sum mu_n'(xi_{n+1} - A xi_n - B1 u_n - B2 w_n - c_n)
      + sum lam_n'(F_y y_n - g_y) + lam_N'(F_o y_N - g_o) + sum gam_n'(F_w w_n - g_w)

so that stationarity in xi_N reads 2U xi_N + mu_{N-1} + F_o'lam_N = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, Infeasible, IterLimit
from .model import Problem, IndexMap
from .qp import QpProblem, SolveResult, Status, solve_qp
from .stacked import FollowerStack, follower_stack


@dataclass
class DualCertificate:
    mu: np.ndarray          # (N, p)
    lam: list               # lam[n], n = 0..N (lam[N] sized to Y_omega)
    gam: np.ndarray         # (N, m_w)

    def to_vector(self, idx: IndexMap) -> np.ndarray:
        """Dual block laid out as in ``IndexMap`` (relative to its start)."""
        out = np.zeros(idx.n_dual)
        base = idx.n_primal
        for n in range(idx.N):
            sl = idx.mu(n)
            out[sl.start - base:sl.stop - base] = self.mu[n]
            sl = idx.gam(n)
            out[sl.start - base:sl.stop - base] = self.gam[n]
        for n in range(idx.N + 1):
            sl = idx.lam(n)
            out[sl.start - base:sl.stop - base] = self.lam[n]
        return out

    @classmethod
    def from_vector(cls, d, idx: IndexMap) -> "DualCertificate":
        base = idx.n_primal
        d = np.asarray(d, dtype=float)

        def blk(sl):
            return d[sl.start - base:sl.stop - base].copy()
        mu = np.array([blk(idx.mu(n)) for n in range(idx.N)]).reshape(idx.N, idx.p)
        lam = [blk(idx.lam(n)) for n in range(idx.N + 1)]
        gam = np.array([blk(idx.gam(n)) for n in range(idx.N)]).reshape(idx.N, idx.m_w)
        return cls(mu, lam, gam)


@dataclass
class LompcSolution:
    xi: np.ndarray          # (N, p): xi_1..xi_N
    w: np.ndarray           # (N, n_w): w_0..w_{N-1}
    value: float
    duals: DualCertificate = None
    primal: np.ndarray = None   # full primal vector including u
    result: SolveResult = None

    def dynamics_residual(self, problem: Problem, xi0, u_seq) -> float:
        s = problem.system
        prev = np.asarray(xi0, dtype=float)
        worst = 0.0
        for n in range(problem.N):
            nxt = s.step(prev, u_seq[n], self.w[n], problem.t0 + n)
            worst = max(worst, float(np.abs(self.xi[n] - nxt).max()))
            prev = self.xi[n]
        return worst


def as_u_seq(problem: Problem, u_seq) -> np.ndarray:
    u = np.asarray(u_seq, dtype=float)
    N, n_u = problem.N, problem.system.n_u
    if u.size != N * n_u:
        raise DimensionMismatch(f"u sequence has {u.size} entries, expected {N}x{n_u}")
    return u.reshape(N, n_u)


def reduce_to_follower(st: FollowerStack, u_seq: np.ndarray) -> QpProblem:
    """Fix u inside the stacked follower problem; variables are st.cols_free."""
    f, cu = st.cols_free, st.cols_u
    u = u_seq.ravel()
    H_ff = st.H[np.ix_(f, f)]
    c = st.c[f] + st.H[np.ix_(f, cu)] @ u
    k = st.k + st.c[cu] @ u + 0.5 * u @ st.H[np.ix_(cu, cu)] @ u
    a_eq = st.E[:, f]
    b_eq = st.e - st.E[:, cu] @ u
    a_in = st.G[:, f]
    return QpProblem(H_ff, c, k, a_eq, b_eq, a_in, st.h)


def build_lompc_qp(problem: Problem, xi0, u_seq) -> QpProblem:
    """Follower QP in (xi_1..xi_N, w_0..w_{N-1}) for given xi0 and u."""
    xi0 = np.asarray(xi0, dtype=float)
    if xi0.shape != (problem.p,):
        raise DimensionMismatch(f"xi0 must have length {problem.p}")
    u = as_u_seq(problem, u_seq)
    return reduce_to_follower(follower_stack(problem, xi0), u)


def y0_violation(problem: Problem, xi0) -> float:
    Y = problem.lo.Y_set
    if not Y.n_rows:
        return 0.0
    y0 = np.asarray(xi0, dtype=float)[problem.system.n_x:]
    return float(max(np.max(Y.F @ y0 - Y.g), 0.0))


def solve_lompc(problem: Problem, xi0, u_seq, tol: float = 1e-10) -> LompcSolution:
    """Optimal follower response to u with its dual certificate.

    Raises
    ------
    Infeasible
        If y0 lies outside Y or no admissible response exists.
    """
    xi0 = np.asarray(xi0, dtype=float)
    u = as_u_seq(problem, u_seq)
    if y0_violation(problem, xi0) > 1e-9:
        raise Infeasible(f"initial follower state outside Y by {y0_violation(problem, xi0):.3g}")
    st = follower_stack(problem, xi0)
    qp = reduce_to_follower(st, u)
    res = solve_qp(qp, tol=tol)
    if res.status == Status.INFEASIBLE:
        raise Infeasible("follower has no admissible response")
    if not res.ok:
        raise IterLimit(f"follower QP ended with status {res.status.value}")
    return _pack(problem, st, u, res)


def _pack(problem, st: FollowerStack, u, res: SolveResult) -> LompcSolution:
    idx = st.idx
    z = np.zeros(idx.n_primal)
    z[st.cols_free] = res.primal
    z[st.cols_u] = u.ravel()
    d = np.zeros(idx.n_dual)
    d[:idx.N * idx.p] = res.eq          # mu blocks come first in the dual layout
    d[st.dual_cols] = res.ineq
    duals = DualCertificate.from_vector(d, idx)
    xi = z[idx.xi_all].reshape(idx.N, idx.p)
    w = z[idx.w_all].reshape(idx.N, idx.n_w)
    return LompcSolution(xi, w, res.objective, duals, z, res)


def dp_closed_form(problem: Problem, xi0, u_seq) -> LompcSolution:
    """Unconstrained follower response by backward dynamic programming.

    Value functions are xi'Lam_n xi + 2 s_n'xi + const with u entering each
    stage as a known input.  Set membership is not checked.
    """
    s, lo = problem.system, problem.lo
    N, p = lo.N, s.p
    A, B1, B2 = s.A, s.B1, s.B2
    u = as_u_seq(problem, u_seq)
    xi0 = np.asarray(xi0, dtype=float)
    r = np.zeros(p) if lo.xi_ref is None else np.asarray(lo.xi_ref, dtype=float)
    v = np.zeros(p) if lo.v is None else np.asarray(lo.v, dtype=float)
    d = [B1 @ u[n] + off for n, off in enumerate(problem.offsets())]

    Lam = lo.U
    sv = -lo.U @ r
    gains = [None] * N
    for n in range(N - 1, -1, -1):
        q = Lam @ d[n] + sv
        Theta = lo.W2 + B2.T @ Lam @ B2
        K = np.linalg.solve(Theta, B2.T @ Lam @ A)
        kff = -np.linalg.solve(Theta, B2.T @ q + lo.Phi.T @ u[n])
        gains[n] = (-K, kff)
        if n == 0:
            break
        sv = A.T @ q + A.T @ Lam @ B2 @ kff - lo.V @ r + 0.5 * v
        Lam = A.T @ Lam @ A - A.T @ Lam @ B2 @ K + lo.V

    xi = np.zeros((N, p))
    w = np.zeros((N, s.n_w))
    prev = xi0
    for n in range(N):
        Psi, kff = gains[n]
        w[n] = Psi @ prev + kff
        prev = A @ prev + B2 @ w[n] + d[n]
        xi[n] = prev

    st = follower_stack(problem, xi0)
    idx = st.idx
    z = np.zeros(idx.n_primal)
    z[idx.xi_all] = xi.ravel()
    z[idx.u_all] = u.ravel()
    z[idx.w_all] = w.ravel()
    return LompcSolution(xi, w, st.objective(z), None, z, None)
