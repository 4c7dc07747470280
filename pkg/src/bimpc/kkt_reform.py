"""Mixed-integer reformulation: follower replaced by its KKT conditions.

Continuous variables Z = (xi, u, w, mu, lam, gam) follow ``model.IndexMap``.
Each follower inequality row j (including the constant stage-0 rows for y0)
forms a complementarity pair (dual d_j, slack s_j = b_j - a_j Z) encoded by a
binary b_j through

    d_j <= kappa * b_j,        s_j <= M_j * (1 - b_j),

where M_j = S_j, the largest slack the row can have inside its own follower
set, whenever that is finite (and kappa otherwise).  S_j never cuts off a
feasible point, so only the dual side depends on kappa and only that side
needs certification by ``auto_kappa``.  Node relaxations eliminate the
relaxed binaries exactly: with b_j in [0, 1] the pair of rows is equivalent
to d_j / kappa + s_j / M_j <= 1, so every node is a convex QP (or QCQP when
the Lyapunov constraint is on) over Z alone.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import polytope as pt
from .errors import BudgetExhausted, EmptyPolytope, Infeasible, KappaExhausted, Unbounded
from .lompc import solve_lompc, LompcSolution
from .model import Problem, IndexMap
from .qp import QpProblem, QuadConstraint, Status, solve_qcqp
from .stacked import follower_stack, leader_stack

log = logging.getLogger(__name__)

KAPPA0 = 1e3
KAPPA_FACTOR = 10.0
KAPPA_MAX_ESCALATIONS = 5
NODE_BUDGET = 50_000


@dataclass
class MipProblem:
    """Big-M KKT reformulation at one initial state.

    All matrices act on the continuous vector Z (length ``idx.n_continuous``);
    the complementarity pairs carry the binary column they belong to.
    """

    problem: Problem
    xi0: np.ndarray
    kappa: float
    idx: IndexMap
    H: np.ndarray
    c: np.ndarray
    k: float
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    quad: tuple
    pair_dual: np.ndarray      # column of d_j in Z
    pair_a: np.ndarray         # slack s_j = pair_b - pair_a @ Z
    pair_b: np.ndarray
    pair_bin: np.ndarray       # binary column in the full layout
    groups: dict = field(default_factory=dict)   # named stationarity row ranges inside A_eq
    pair_smax: np.ndarray = None   # largest slack inside the row's own set (inf if unknown)

    @property
    def n_pairs(self) -> int:
        return self.pair_dual.size

    @property
    def n_cont(self) -> int:
        return self.idx.n_continuous

    def objective(self, Z) -> float:
        return float(0.5 * Z @ self.H @ Z + self.c @ Z + self.k)

    def slack(self, Z) -> np.ndarray:
        return self.pair_b - self.pair_a @ Z

    @property
    def slack_cap(self) -> np.ndarray:
        """M_j, the slack-side big-M of every pair (S_j when finite, else kappa)."""
        if self.pair_smax is None:
            return np.full(self.n_pairs, self.kappa)
        return np.where(np.isfinite(self.pair_smax), self.pair_smax, self.kappa)

    def with_kappa(self, kappa: float) -> "MipProblem":
        out = MipProblem(**{**self.__dict__, "kappa": float(kappa)})
        return out

    def big_m_rows(self):
        """Explicit big-M rows over the full vector (continuous then binary).

        Returns (A, b) with A @ X <= b encoding d <= kappa*b and s <= M*(1 - b).
        """
        n = self.idx.n_total
        m = self.n_pairs
        cap = self.slack_cap
        A = np.zeros((2 * m, n))
        b = np.zeros(2 * m)
        for j in range(m):
            A[j, self.pair_dual[j]] = 1.0
            A[j, self.pair_bin[j]] = -self.kappa
            A[m + j, :self.n_cont] = -self.pair_a[j]
            A[m + j, self.pair_bin[j]] = cap[j]
            b[m + j] = cap[j] - self.pair_b[j]
        return A, b


def build_pip(problem: Problem, xi0, kappa: float = KAPPA0) -> MipProblem:
    """Assemble the KKT reformulation of the bilevel problem at ``xi0``."""
    xi0 = np.asarray(xi0, dtype=float)
    idx = problem.index
    fs = follower_stack(problem, xi0)
    ls = leader_stack(problem, xi0)
    n, npr = idx.n_continuous, idx.n_primal
    base = npr

    H = np.zeros((n, n))
    H[:npr, :npr] = ls.H
    c = np.zeros(n)
    c[:npr] = ls.c

    # follower stationarity in its own variables (xi and w columns)
    f = fs.cols_free
    n_mu = idx.N * idx.p
    dcols_G = base + fs.dual_cols
    stat = np.zeros((f.size, n))
    stat[:, :npr] = fs.H[f, :]
    stat[:, base:base + n_mu] = fs.E[:, f].T
    stat[:, dcols_G] = fs.G[:, f].T
    stat_rhs = -fs.c[f]
    groups = {}
    n_xi = idx.N * idx.p
    last = slice((idx.N - 1) * idx.p, n_xi)
    groups["terminal"] = np.arange(last.start, last.stop)
    groups["state"] = np.arange(0, last.start)
    groups["input"] = np.arange(n_xi, f.size)

    dyn = np.zeros((fs.E.shape[0], n))
    dyn[:, :npr] = fs.E
    A_eq = np.vstack([dyn, stat])
    b_eq = np.concatenate([fs.e, stat_rhs])
    off = dyn.shape[0]
    groups = {k: v + off for k, v in groups.items()}

    # primal rows (leader and follower) and dual signs
    lead = np.zeros((ls.G.shape[0], n))
    lead[:, :npr] = ls.G
    fol = np.zeros((fs.G.shape[0], n))
    fol[:, :npr] = fs.G
    lam0 = idx.lam(0)
    dual_idx = np.r_[np.arange(lam0.start, lam0.stop), dcols_G]
    sign = np.zeros((dual_idx.size, n))
    sign[np.arange(dual_idx.size), dual_idx] = -1.0
    A_in = np.vstack([lead, fol, sign])
    b_in = np.concatenate([ls.h, fs.h, np.zeros(dual_idx.size)])

    quad = tuple(QuadConstraint(_pad(q.M, n), np.r_[q.m, np.zeros(n - npr)], q.bound) for q in ls.quad)

    # complementarity pairs in binary-layout order: sigma_0..sigma_N, tau_0..tau_{N-1}
    s, lo = problem.system, problem.lo
    y0 = xi0[s.n_x:]
    slack0 = lo.Y_set.g - lo.Y_set.F @ y0 if lo.Y_set.n_rows else np.zeros(0)
    smax_y, smax_o, smax_w = (_slack_bounds(P) for P in (lo.Y_set, lo.Y_omega, lo.W_set))
    pd, pa, pb, pbin, psm = [], [], [], [], []
    for i in range(lam0.stop - lam0.start):
        pd.append(lam0.start + i)
        pa.append(np.zeros(n))
        pb.append(slack0[i])
        pbin.append(idx.sigma(0).start + i)
        psm.append(smax_y[i])
    by_col = {int(col): r for r, col in enumerate(dcols_G)}
    for n_ in range(1, idx.N + 1):
        sl, bl = idx.lam(n_), idx.sigma(n_)
        smax = smax_o if n_ == idx.N else smax_y
        for i in range(sl.stop - sl.start):
            r = by_col[sl.start + i]
            pd.append(sl.start + i)
            pa.append(fol[r])
            pb.append(fs.h[r])
            pbin.append(bl.start + i)
            psm.append(smax[i])
    for n_ in range(idx.N):
        sl, bl = idx.gam(n_), idx.tau(n_)
        for i in range(sl.stop - sl.start):
            r = by_col[sl.start + i]
            pd.append(sl.start + i)
            pa.append(fol[r])
            pb.append(fs.h[r])
            pbin.append(bl.start + i)
            psm.append(smax_w[i])
    return MipProblem(problem, xi0, float(kappa), idx, H, c, ls.k, A_eq, b_eq, A_in, b_in, quad,
                      np.array(pd, dtype=int), np.array(pa).reshape(len(pd), n),
                      np.array(pb, dtype=float), np.array(pbin, dtype=int), groups,
                      np.array(psm, dtype=float))


def _slack_bounds(P) -> np.ndarray:
    """Largest slack g_i - F_i y over y in P for every row (inf when unbounded)."""
    out = np.full(P.n_rows, np.inf)
    for i, (a, b) in enumerate(zip(P.F, P.g)):
        try:
            out[i] = b + pt.support(P, -a)
        except (Unbounded, EmptyPolytope):
            pass
    return out


def _pad(M, n):
    out = np.zeros((n, n))
    out[:M.shape[0], :M.shape[1]] = M
    return out


# --------------------------------------------------------------------------- #
# node problems


FREE, ZERO, ONE = -1, 0, 1


def node_qp(m: MipProblem, pattern) -> QpProblem | None:
    """Relaxation with binaries fixed where ``pattern`` is 0/1 and relaxed where -1.

    Returns None when a constant row already rules the node out.
    """
    kappa = m.kappa
    cap = m.slack_cap
    eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []
    n = m.n_cont
    for j, state in enumerate(pattern):
        a, b, dc = m.pair_a[j], m.pair_b[j], m.pair_dual[j]
        M = cap[j]
        const = not np.any(a)
        e = np.zeros(n)
        e[dc] = 1.0
        if state == ONE:
            if const:
                if abs(b) > 1e-9:
                    return None
            else:
                eq_rows.append(a)
                eq_rhs.append(b)
            in_rows.append(e)
            in_rhs.append(kappa)
        elif state == ZERO:
            eq_rows.append(e)
            eq_rhs.append(0.0)
            if const:
                if b > M + 1e-9:
                    return None
            else:
                in_rows.append(-a)
                in_rhs.append(M - b)
        elif const:
            # constant slack b: d <= kappa (1 - b / M)
            if b > M + 1e-9:
                return None
            in_rows.append(e)
            in_rhs.append(kappa * max(1.0 - b / M, 0.0))
        else:
            r = kappa / M
            in_rows.append(e - r * a)
            in_rhs.append(kappa - r * b)
    A_eq = np.vstack([m.A_eq] + ([np.array(eq_rows)] if eq_rows else []))
    b_eq = np.concatenate([m.b_eq, eq_rhs])
    A_in = np.vstack([m.A_in] + ([np.array(in_rows)] if in_rows else []))
    b_in = np.concatenate([m.b_in, in_rhs])
    return QpProblem(m.H, m.c, m.k, A_eq, b_eq, A_in, b_in, m.quad)


def solve_pattern(m: MipProblem, pattern):
    """Solve a node; returns the SolveResult or None when ruled out."""
    qp = node_qp(m, pattern)
    if qp is None:
        return None
    res = solve_qcqp(qp)
    return res if res.ok else None


def binaries_from(m: MipProblem, Z) -> np.ndarray:
    """A binary vector consistent with a complementarity-feasible Z."""
    d = Z[m.pair_dual]
    s = m.slack(Z)
    return (s < d).astype(int)


@dataclass
class MipSolution:
    status: str
    Z: np.ndarray
    binaries: np.ndarray
    objective: float
    bound: float
    gap: float
    nodes: int
    kappa: float
    escalations: int = 0
    idx: IndexMap = None

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


@dataclass(order=True)
class BnbNode:
    bound: float
    order: int
    depth: int = field(compare=False)
    pattern: tuple = field(compare=False)
    Z: np.ndarray = field(compare=False, default=None)


def _initial_pattern(m: MipProblem):
    """Fix stage-0 pairs whose constant slack is positive (their dual must vanish)."""
    pat = [FREE] * m.n_pairs
    for j in range(m.n_pairs):
        if not np.any(m.pair_a[j]):
            pat[j] = ZERO if m.pair_b[j] > 1e-9 else FREE
    return pat


def _heuristic(m: MipProblem, Z):
    """Fix binaries by the follower's true active set at the relaxation's u."""
    idx = m.idx
    u = Z[idx.u_all]
    try:
        sol = solve_lompc(m.problem, m.xi0, u)
    except Exception:
        return None
    Zf = np.zeros(m.n_cont)
    Zf[:idx.n_primal] = sol.primal
    Zf[idx.n_primal:] = sol.duals.to_vector(idx)
    d = Zf[m.pair_dual]
    s = m.slack(Zf)
    pattern = np.where(d > np.maximum(s, 1e-9), ONE, ZERO)
    res = solve_pattern(m, pattern)
    if res is None:
        return None
    return res.primal, pattern


def branch_and_bound(m: MipProblem, budget: int = NODE_BUDGET, tol: float = 1e-9,
                     node_log=None, warm_pattern=None) -> MipSolution:
    """Best-bound-first branch and bound over the complementarity binaries.

    Raises
    ------
    Infeasible
        No node relaxation is feasible.
    BudgetExhausted
        Node budget hit; ``err.result`` carries the incumbent (if any) and gap.
    """
    counter = itertools.count()
    inc_obj, inc_Z, inc_bin = np.inf, None, None
    writer = None
    if node_log is not None:
        writer = csv.writer(node_log)
        writer.writerow(["node", "depth", "bound", "incumbent"])

    def try_incumbent(Z, pattern):
        nonlocal inc_obj, inc_Z, inc_bin
        obj = m.objective(Z)
        if obj < inc_obj - tol * (1 + abs(obj)):
            inc_obj, inc_Z, inc_bin = obj, Z, np.asarray(pattern, dtype=int)

    if warm_pattern is not None and len(warm_pattern) == m.n_pairs:
        res = solve_pattern(m, warm_pattern)
        if res is not None:
            try_incumbent(res.primal, warm_pattern)

    root = tuple(_initial_pattern(m))
    res = solve_pattern(m, root)
    if res is None:
        raise Infeasible("root relaxation infeasible")
    heap = [BnbNode(res.objective, next(counter), 0, root, res.primal)]
    nodes = 0
    global_bound = res.objective
    while heap:
        node = heapq.heappop(heap)
        global_bound = node.bound
        if node.bound >= inc_obj - tol * (1 + abs(inc_obj)):
            global_bound = inc_obj
            break
        if nodes >= budget:
            heapq.heappush(heap, node)
            break
        nodes += 1
        Z = node.Z
        if writer is not None:
            writer.writerow([node.order, node.depth, f"{node.bound:.12g}", f"{inc_obj:.12g}"])
        h = _heuristic(m, Z)
        if h is not None:
            try_incumbent(*h)
        d = Z[m.pair_dual]
        s = m.slack(Z)
        free = [j for j, st in enumerate(node.pattern) if st == FREE]
        prod = np.array([max(d[j], 0.0) * max(s[j], 0.0) for j in free])
        scale = 1.0 + np.abs(d).max(initial=0.0)
        if not free or prod.max(initial=0.0) <= 1e-9 * scale:
            # complementarity holds up to tolerance: fix the implied pattern and polish
            pat = list(node.pattern)
            for j in free:
                pat[j] = ONE if s[j] < d[j] else ZERO
            res = solve_pattern(m, pat)
            if res is not None:
                try_incumbent(res.primal, pat)
                continue
            if not free:
                continue
        j = free[int(np.argmax(prod))]   # argmax takes the earliest on ties
        for val in (ONE, ZERO):
            pat = list(node.pattern)
            pat[j] = val
            res = solve_pattern(m, pat)
            if res is None:
                continue
            bound = max(res.objective, node.bound)
            if bound < inc_obj - tol * (1 + abs(inc_obj)):
                heapq.heappush(heap, BnbNode(bound, next(counter), node.depth + 1, tuple(pat), res.primal))
    else:
        global_bound = inc_obj

    if inc_Z is None:
        if heap:
            raise BudgetExhausted("node budget exhausted without a feasible point", None)
        raise Infeasible("no binary pattern admits a feasible point")
    if heap:
        global_bound = min(global_bound, heap[0].bound)
    global_bound = min(global_bound, inc_obj)
    gap = inc_obj - global_bound
    sol = MipSolution("Optimal", inc_Z, inc_bin, inc_obj, global_bound, gap, nodes, m.kappa, idx=m.idx)
    if heap and gap > tol * (1 + abs(inc_obj)):
        sol.status = "BudgetExhausted"
        raise BudgetExhausted(f"node budget {budget} exhausted with gap {gap:.3g}", sol)
    return sol


def enumerate_binaries(m: MipProblem, max_binaries: int = 12) -> MipSolution:
    """Exhaustive oracle: solve every binary pattern as a convex QP."""
    if m.n_pairs > max_binaries:
        raise ValueError(f"{m.n_pairs} binaries exceed the enumeration cap {max_binaries}")
    best = None
    count = 0
    for bits in itertools.product((ZERO, ONE), repeat=m.n_pairs):
        count += 1
        res = solve_pattern(m, bits)
        if res is None:
            continue
        if best is None or res.objective < best[0] - 1e-12:
            best = (res.objective, res.primal, np.array(bits))
    if best is None:
        raise Infeasible("no binary pattern is feasible")
    return MipSolution("Optimal", best[1], best[2], best[0], best[0], 0.0, count, m.kappa, idx=m.idx)


# --------------------------------------------------------------------------- #
# certification


@dataclass
class KktReport:
    stationarity: dict
    complementarity: float
    primal: float
    dual_sign: float
    dynamics: float
    tol: float

    @property
    def max_residual(self) -> float:
        return max([*self.stationarity.values(), self.complementarity, self.primal,
                    self.dual_sign, self.dynamics])

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol


def verify_kkt(m: MipProblem, Z, tol: float = 1e-6) -> KktReport:
    """Residuals of the follower KKT system and leader feasibility at Z."""
    Z = np.asarray(Z, dtype=float)
    r_eq = m.A_eq @ Z - m.b_eq
    stat = {name: float(np.abs(r_eq[rows]).max(initial=0.0)) for name, rows in m.groups.items()}
    n_dyn = min(m.groups[k].min() for k in m.groups if m.groups[k].size)
    dyn = float(np.abs(r_eq[:n_dyn]).max(initial=0.0))
    d = Z[m.pair_dual]
    s = m.slack(Z)
    comp = float(np.abs(d * s).max(initial=0.0))
    n_sign = m.n_pairs
    prim_rows = m.A_in[:-n_sign] if n_sign else m.A_in
    prim_rhs = m.b_in[:-n_sign] if n_sign else m.b_in
    prim = float(max(np.max(prim_rows @ Z - prim_rhs, initial=0.0), 0.0))
    for q in m.quad:
        prim = max(prim, float(Z @ q.M @ Z + q.m @ Z - q.bound))
    prim = max(prim, float(max(-s.min(initial=0.0), 0.0)))
    sign = float(max(-d.min(initial=0.0), 0.0))
    return KktReport(stat, comp, prim, sign, dyn, tol)


def big_m_binding(m: MipProblem, sol: MipSolution, rel: float = 1e-6) -> bool:
    """True when some big-M row is within rel*kappa of its kappa-side bound."""
    d = sol.Z[m.pair_dual]
    s = m.slack(sol.Z)
    lim = m.kappa * (1 - rel)
    # slack rows capped by their own set bound cannot be relaxed by a larger kappa
    kappa_side = ~np.isfinite(m.pair_smax) if m.pair_smax is not None else np.ones(m.n_pairs, bool)
    return bool(np.any(d >= lim) or np.any(s[kappa_side] >= lim))


def auto_kappa(problem: Problem, xi0, kappa0: float = KAPPA0, budget: int = NODE_BUDGET,
               max_escalations: int = KAPPA_MAX_ESCALATIONS, warm_pattern=None, node_log=None):
    """Solve with growing kappa until no big-M row is near binding.

    Returns (MipProblem, MipSolution); the solution records the final kappa
    and the number of escalations.  An infeasible relaxation also triggers an
    escalation, since a small kappa can cut off every feasible point.
    """
    kappa = float(kappa0)
    infeasible = False
    for esc in range(max_escalations + 1):
        m = build_pip(problem, xi0, kappa)
        try:
            sol = branch_and_bound(m, budget=budget, warm_pattern=warm_pattern, node_log=node_log)
        except Infeasible:
            infeasible = True
            log.debug("kappa %.3g infeasible, escalating", kappa)
        else:
            infeasible = False
            if not big_m_binding(m, sol):
                sol.escalations = esc
                return m, sol
            log.debug("kappa %.3g binding, escalating", kappa)
        kappa *= KAPPA_FACTOR
    kappa /= KAPPA_FACTOR
    if infeasible:
        raise Infeasible(f"infeasible for every kappa up to {kappa:.3g}")
    raise KappaExhausted(f"big-M rows still binding at kappa={kappa:.3g}")


def lompc_point(m: MipProblem, sol: LompcSolution) -> np.ndarray:
    """Continuous vector Z assembled from a follower solution (used in tests)."""
    Z = np.zeros(m.n_cont)
    Z[:m.idx.n_primal] = sol.primal
    Z[m.idx.n_primal:] = sol.duals.to_vector(m.idx)
    return Z
