"""Horizon-stacked matrices shared by the follower QP and both reformulations.

Everything is expressed over the primal vector z = (xi_1..xi_N, u, w) laid out
by ``model.IndexMap``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Problem, IndexMap
from .qp import QuadConstraint


@dataclass
class FollowerStack:
    """Follower problem over the primal vector.

    objective   0.5 z'H z + c'z + k
    dynamics    E z = e            (one p-row block per stage; multiplier mu_n)
    constraints G z <= h           (rows for lam_1..lam_N then gam_0..gam_{N-1})
    """

    H: np.ndarray
    c: np.ndarray
    k: float
    E: np.ndarray
    e: np.ndarray
    G: np.ndarray
    h: np.ndarray
    dual_cols: np.ndarray  # position of each G row inside the dual block
    idx: IndexMap

    @property
    def cols_free(self):
        """Columns of the follower's decision variables (xi and w)."""
        idx = self.idx
        return np.r_[np.arange(idx.xi_all.start, idx.xi_all.stop), np.arange(idx.w_all.start, idx.w_all.stop)]

    @property
    def cols_u(self):
        return np.arange(self.idx.u_all.start, self.idx.u_all.stop)

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.c @ z + self.k)


@dataclass
class LeaderStack:
    H: np.ndarray
    c: np.ndarray
    k: float
    G: np.ndarray
    h: np.ndarray
    quad: tuple
    idx: IndexMap

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.c @ z + self.k)


def _lift_y(F, p, n_x):
    out = np.zeros((F.shape[0], p))
    out[:, n_x:] = F
    return out


def follower_stack(problem: Problem, xi0) -> FollowerStack:
    s, lo = problem.system, problem.lo
    idx = problem.index
    N, p, n_x = lo.N, s.p, s.n_x
    xi0 = np.asarray(xi0, dtype=float)
    n = idx.n_primal
    H = np.zeros((n, n))
    c = np.zeros(n)
    r = np.zeros(p) if lo.xi_ref is None else np.asarray(lo.xi_ref, dtype=float)
    v = np.zeros(p) if lo.v is None else np.asarray(lo.v, dtype=float)
    V, U = lo.V, lo.U

    k = float((xi0 - r) @ V @ (xi0 - r) + v @ xi0)
    for t in range(1, N):
        sl = idx.xi(t)
        H[sl, sl] += 2 * V
        c[sl] += -2 * V @ r + v
        k += float(r @ V @ r)
    sl = idx.xi(N)
    H[sl, sl] += 2 * U
    c[sl] += -2 * U @ r
    k += float(r @ U @ r)
    for t in range(N):
        su, sw = idx.u(t), idx.w(t)
        H[su, su] += 2 * lo.W1
        H[su, sw] += 2 * lo.Phi
        H[sw, su] += 2 * lo.Phi.T
        H[sw, sw] += 2 * lo.W2

    E = np.zeros((N * p, n))
    e = np.zeros(N * p)
    offsets = problem.offsets()
    for t in range(N):
        rows = slice(t * p, (t + 1) * p)
        E[rows, idx.xi(t + 1)] = np.eye(p)
        if t > 0:
            E[rows, idx.xi(t)] = -s.A
        E[rows, idx.u(t)] = -s.B1
        E[rows, idx.w(t)] = -s.B2
        e[rows] = offsets[t] + (s.A @ xi0 if t == 0 else 0.0)

    Fy = _lift_y(lo.Y_set.F, p, n_x)
    Fo = _lift_y(lo.Y_omega.F, p, n_x)
    Fw = lo.W_set.F
    m_g = (N - 1) * Fy.shape[0] + Fo.shape[0] + N * Fw.shape[0]
    G = np.zeros((m_g, n))
    h = np.zeros(m_g)
    dual_cols = np.zeros(m_g, dtype=int)
    row = 0
    base = idx.n_primal
    for t in range(1, N + 1):
        F, g = (Fo, lo.Y_omega.g) if t == N else (Fy, lo.Y_set.g)
        m = F.shape[0]
        G[row:row + m, idx.xi(t)] = F
        h[row:row + m] = g
        dual_cols[row:row + m] = np.arange(idx.lam(t).start, idx.lam(t).stop) - base
        row += m
    for t in range(N):
        m = Fw.shape[0]
        G[row:row + m, idx.w(t)] = Fw
        h[row:row + m] = lo.W_set.g
        dual_cols[row:row + m] = np.arange(idx.gam(t).start, idx.gam(t).stop) - base
        row += m
    return FollowerStack(H, c, k, E, e, G, h, dual_cols, idx)


def leader_stack(problem: Problem, xi0) -> LeaderStack:
    s, bi = problem.system, problem.bi
    idx = problem.index
    N, p, n_x, n_u = problem.N, s.p, s.n_x, s.n_u
    xi0 = np.asarray(xi0, dtype=float)
    n = idx.n_primal
    H = np.zeros((n, n))
    c = np.zeros(n)
    k = float(xi0 @ bi.Q @ xi0)
    for t in range(1, N):
        H[idx.xi(t), idx.xi(t)] += 2 * bi.Q
    H[idx.xi(N), idx.xi(N)] += 2 * bi.P
    R = bi.R
    for t in range(N):
        su, sw = idx.u(t), idx.w(t)
        H[su, su] += 2 * R[:n_u, :n_u]
        H[su, sw] += 2 * R[:n_u, n_u:]
        H[sw, su] += 2 * R[n_u:, :n_u]
        H[sw, sw] += 2 * R[n_u:, n_u:]
        if bi.lin_u is not None:
            c[su] += bi.lin_u
        if bi.lin_w is not None:
            c[sw] += bi.lin_w
        if bi.peak_w is not None and problem.is_peak(t):
            c[sw] += bi.peak_w

    Fx = np.zeros((bi.X_set.n_rows, p))
    Fx[:, :n_x] = bi.X_set.F
    mx, mu_ = Fx.shape[0], bi.U_set.n_rows
    G = np.zeros((N * (mx + mu_), n))
    h = np.zeros(N * (mx + mu_))
    row = 0
    for t in range(1, N + 1):
        G[row:row + mx, idx.xi(t)] = Fx
        h[row:row + mx] = bi.X_set.g
        row += mx
    for t in range(N):
        G[row:row + mu_, idx.u(t)] = bi.U_set.F
        h[row:row + mu_] = bi.U_set.g
        row += mu_

    quad = ()
    if bi.H is not None:
        M = np.zeros((n, n))
        M[idx.xi(1), idx.xi(1)] = bi.H
        bound = float(xi0 @ (bi.H - np.eye(p)) @ xi0)
        quad = (QuadConstraint(M, np.zeros(n), bound),)
    return LeaderStack(H, c, k, G, h, quad, idx)


def initial_violation(problem: Problem, xi0) -> dict:
    """Violation of the stage-0 constraints x_0 in X and y_0 in Y (empty if none)."""
    s = problem.system
    xi0 = np.asarray(xi0, dtype=float)
    out = {}
    X, Y = problem.bi.X_set, problem.lo.Y_set
    if X.n_rows:
        v = float(np.max(X.F @ xi0[:s.n_x] - X.g))
        if v > 1e-9:
            out["x0"] = v
    if Y.n_rows:
        v = float(np.max(Y.F @ xi0[s.n_x:] - Y.g))
        if v > 1e-9:
            out["y0"] = v
    return out
