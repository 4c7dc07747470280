"""Receding-horizon closed loop for the bilevel controller.

Each step solves the leader problem by one of the two reformulations, applies
the first leader input, recomputes the follower's response to it (so the
applied w is always the follower's true best response) and advances the plant.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dual_reform as dr
from . import kkt_reform as kr
from .errors import (BudgetExhausted, Infeasible, IterLimit, KappaExhausted, NoFeasiblePoint,
                     NonlinearityDetected, StepInfeasible)
from .lompc import solve_lompc
from .model import Problem

log = logging.getLogger(__name__)

DIVERGENCE = 1e6
CONSISTENCY_WARN = 1e-4


class Method(str, enum.Enum):
    DUAL = "dual"
    KKT = "kkt"


@dataclass
class StepStats:
    leader_cost: float
    follower_value: float
    gap: float
    ms: float
    status: str = "ok"
    u_seq: np.ndarray = None
    warm: object = None
    discrepancy: float = 0.0
    extras: dict = field(default_factory=dict)


def _solve(problem: Problem, method: Method, xi, opts: dict):
    """Leader solve; returns (u_seq, w_seq, objective, gap, warm)."""
    if method == Method.DUAL:
        dp = dr.build_pdb(problem, xi, opts.get("eps", dr.DEFAULT_EPS))
        sol = dr.solve_pdb(dp, multistart=opts.get("multistart", 5), seed=opts.get("seed", 0),
                           u_starts=opts.get("u_starts"))
        return sol.u, sol.w, sol.objective, sol.gap, None
    m, sol = kr.auto_kappa(problem, xi, opts.get("kappa0", kr.KAPPA0),
                           budget=opts.get("budget", kr.NODE_BUDGET),
                           warm_pattern=opts.get("warm"))
    return sol.u, sol.w, sol.objective, sol.gap, (m.idx, sol.binaries)


def step(problem: Problem, method, xi, t: int = 0, **opts):
    """One closed-loop step from state ``xi`` at absolute time ``t``.

    Returns (u0, w0, xi_next, StepStats).

    Raises
    ------
    StepInfeasible
        The leader problem (or the follower's response) has no solution.
    """
    method = Method(method)
    prob = problem.at(t)
    xi = np.asarray(xi, dtype=float)
    t0 = time.perf_counter()
    try:
        u_seq, w_seq, obj, gap, warm = _solve(prob, method, xi, opts)
        resp = solve_lompc(prob, xi, u_seq)
    except (Infeasible, NoFeasiblePoint, KappaExhausted, IterLimit) as exc:
        raise StepInfeasible(f"step at t={t} failed: {exc}",
                             {"t": t, "xi": xi.tolist(), "method": method.value,
                              "cause": type(exc).__name__}) from exc
    except BudgetExhausted as exc:
        if exc.result is None:
            raise StepInfeasible(f"step at t={t}: node budget exhausted without incumbent",
                                 {"t": t, "xi": xi.tolist(), "cause": "BudgetExhausted"}) from exc
        sol = exc.result
        u_seq, w_seq, obj, gap = sol.u, sol.w, sol.objective, sol.gap
        warm = (sol.idx, sol.binaries)
        resp = solve_lompc(prob, xi, u_seq)
    ms = 1e3 * (time.perf_counter() - t0)
    u0 = np.asarray(u_seq[0], dtype=float)
    w0 = resp.w[0]
    disc = float(np.abs(w0 - w_seq[0]).max())
    if disc > CONSISTENCY_WARN:
        log.warning("t=%d: leader solver w0=%s, follower response w0=%s", t, w_seq[0], w0)
    xi_next = prob.system.step(xi, u0, w0, t)
    stats = StepStats(obj, resp.value, gap, ms, "ok", np.asarray(u_seq), warm, disc)
    return u0, w0, xi_next, stats


def shift_pattern(idx, binaries) -> np.ndarray:
    """Shift a binary pattern one stage forward for warm-starting the next step.

    Layout is sigma_0..sigma_N then tau_0..tau_{N-1}; the last stage is repeated.
    """
    b = np.asarray(binaries, dtype=int)
    N, m_y, m_o, m_w = idx.N, idx.m_y, idx.m_o, idx.m_w
    sig = [b[m_y * n:m_y * (n + 1)] for n in range(N)] + [b[N * m_y:N * m_y + m_o]]
    t0 = N * m_y + m_o
    tau = [b[t0 + m_w * n:t0 + m_w * (n + 1)] for n in range(N)]
    tail = sig[N] if m_o == m_y else sig[N - 1]
    new_sig = sig[1:N] + [tail, sig[N]]
    return np.concatenate(new_sig + tau[1:] + [tau[-1]])


@dataclass
class Trajectory:
    n_x: int
    n_y: int
    n_u: int
    n_w: int
    records: list = field(default_factory=list)
    status: str = "ok"
    failure_index: int = None
    diagnostics: dict = field(default_factory=dict)

    def add(self, **rec):
        self.records.append(rec)

    @property
    def states(self) -> np.ndarray:
        return np.array([r["xi"] for r in self.records])

    @property
    def inputs_u(self) -> np.ndarray:
        return np.array([r["u"] for r in self.records[:-1]]).reshape(-1, self.n_u)

    @property
    def inputs_w(self) -> np.ndarray:
        return np.array([r["w"] for r in self.records[:-1]]).reshape(-1, self.n_w)

    @property
    def lyap(self) -> np.ndarray:
        return np.array([r["lyap"] for r in self.records])

    def header(self):
        cols = ["step"]
        cols += [f"x{i}" for i in range(self.n_x)] + [f"y{i}" for i in range(self.n_y)]
        cols += [f"u{i}" for i in range(self.n_u)] + [f"w{i}" for i in range(self.n_w)]
        cols += ["lyap", "leader_cost", "follower_value", "status", "gap", "ms"]
        return cols

    def to_csv(self, fh=None, digits: int = 12, timing: bool = True) -> str:
        """Write the trajectory; returns the text when ``fh`` is None.

        ``timing=False`` blanks the wall-time column so identical runs give
        byte-identical files.
        """
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.header())

        def f(v):
            return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.{digits}g}"

        for r in self.records:
            u = r["u"] if r["u"] is not None else [None] * self.n_u
            ww = r["w"] if r["w"] is not None else [None] * self.n_w
            row = [r["step"]] + [f(float(v)) for v in r["xi"]]
            row += [f(None if v is None else float(v)) for v in u]
            row += [f(None if v is None else float(v)) for v in ww]
            row += [f(r["lyap"]), f(r["leader_cost"]), f(r["follower_value"]), r["status"], f(r["gap"]),
                    f(r["ms"]) if timing else ""]
            w.writerow(row)
        return out.getvalue() if fh is None else ""


def _lyap(problem, xi):
    H = problem.bi.H
    return None if H is None else float(xi @ H @ xi)


def simulate(problem: Problem, method, xi0, steps: int, t0: int = 0, **opts) -> Trajectory:
    """Closed loop for ``steps`` steps.

    A failing step ends the run: the trajectory keeps every completed record,
    ``status`` becomes "StepInfeasible" and ``failure_index`` the failed step.
    States with norm above 1e6 end the run with status "Diverged".
    """
    method = Method(method)
    s = problem.system
    traj = Trajectory(s.n_x, s.n_y, s.n_u, s.n_w)
    xi = np.asarray(xi0, dtype=float)
    warm = None
    for k in range(steps + 1):
        rec = dict(step=t0 + k, xi=xi.copy(), u=None, w=None, lyap=_lyap(problem, xi),
                   leader_cost=None, follower_value=None, status="ok", gap=None, ms=None)
        traj.add(**rec)
        if k == steps:
            break
        if np.linalg.norm(xi) > DIVERGENCE:
            traj.status = "Diverged"
            traj.records[-1]["status"] = "Diverged"
            break
        try:
            local = dict(opts)
            if warm is not None and method == Method.KKT:
                local["warm"] = shift_pattern(*warm)
            u0, w0, xi_next, st = step(problem, method, xi, t0 + k, **local)
        except StepInfeasible as exc:
            traj.status = "StepInfeasible"
            traj.failure_index = t0 + k
            traj.diagnostics = exc.diagnostics
            traj.records[-1]["status"] = "StepInfeasible"
            break
        warm = st.warm
        traj.records[-1].update(u=u0, w=w0, leader_cost=st.leader_cost,
                                follower_value=st.follower_value, gap=st.gap, ms=st.ms)
        xi = xi_next
    return traj


def _simulate_args(args):
    problem, method, xi0, steps, opts = args
    return simulate(problem, method, xi0, steps, **opts)


def simulate_many(problem: Problem, method, xi0_list, steps: int, jobs: int = 1, **opts) -> list:
    """Independent initial conditions, optionally in worker processes (order preserved)."""
    args = [(problem, method, np.asarray(x, dtype=float), steps, opts) for x in xi0_list]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_simulate_args, args))
    return [_simulate_args(a) for a in args]


def fit_closed_loop_map(problem: Problem, method, check_tol: float = 1e-6, **opts) -> np.ndarray:
    """Linear one-step closed-loop map from the canonical basis states.

    Raises
    ------
    NonlinearityDetected
        The map fails a superposition spot check.
    """
    if problem.N != 1 or problem.bi.H is not None:
        raise ValueError("closed-loop map fitting needs N = 1 and no Lyapunov constraint")
    p = problem.p
    cols = []
    for e in np.eye(p):
        cols.append(step(problem, method, e, **opts)[2])
    Mmap = np.array(cols).T
    probe = np.linspace(0.5, -0.5, p) + 0.25
    nxt = step(problem, method, probe, **opts)[2]
    err = float(np.abs(nxt - Mmap @ probe).max())
    if err > check_tol * (1 + np.abs(nxt).max()):
        raise NonlinearityDetected(f"superposition check off by {err:.3g}")
    return Mmap


def simulate_fixed_leader(problem: Problem, xi0, steps: int, u_value, t0: int = 0) -> Trajectory:
    """Closed loop with the leader input held at ``u_value`` (e.g. a flat price).

    Only the follower is optimized at each step; used as a baseline.
    """
    s = problem.system
    traj = Trajectory(s.n_x, s.n_y, s.n_u, s.n_w)
    u_const = np.broadcast_to(np.asarray(u_value, dtype=float), (s.n_u,))
    xi = np.asarray(xi0, dtype=float)
    for k in range(steps + 1):
        traj.add(step=t0 + k, xi=xi.copy(), u=None, w=None, lyap=_lyap(problem, xi),
                 leader_cost=None, follower_value=None, status="ok", gap=None, ms=None)
        if k == steps:
            break
        prob = problem.at(t0 + k)
        u_seq = np.tile(u_const, (prob.N, 1))
        t_start = time.perf_counter()
        try:
            resp = solve_lompc(prob, xi, u_seq)
        except (Infeasible, IterLimit) as exc:
            traj.status = "StepInfeasible"
            traj.failure_index = t0 + k
            traj.diagnostics = {"t": t0 + k, "xi": xi.tolist(), "cause": type(exc).__name__}
            traj.records[-1]["status"] = "StepInfeasible"
            break
        traj.records[-1].update(u=u_const.copy(), w=resp.w[0], follower_value=resp.value,
                                ms=1e3 * (time.perf_counter() - t_start))
        xi = prob.system.step(xi, u_const, resp.w[0], t0 + k)
    return traj


def peak_consumption(problem: Problem, traj: Trajectory) -> float:
    """Sum of applied w over logged steps inside the peak window."""
    return float(sum(np.sum(r["w"]) for r in traj.records
                     if r["w"] is not None and r["step"] in problem.bi.peak))
