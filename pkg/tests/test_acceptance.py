"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured numbers.
Run directly with ``python3 tests/test_acceptance.py`` for the same report.
"""

import sys
import time

import numpy as np
import pytest

from bimpc import dual_reform as dr
from bimpc import kkt_reform as kr
from bimpc import polytope as pt
from bimpc import scenarios as sc
from bimpc import sim
from bimpc import synthesis as syn
from bimpc.errors import EmptyPolytope, NotConverged, StepInfeasible
from bimpc.lompc import solve_lompc
from bimpc.model import SystemModel
from bimpc.polytope import PolytopeH

from _instances import feasible_instance
from _report import record

pytestmark = pytest.mark.slow

H_TWOD = np.array([[59.0, -10.0], [-10.0, 44.0]]) / 12
EMPTY0 = PolytopeH(np.zeros((0, 0)), np.zeros(0))


def test_criterion_1_synthesis_anchor():
    prob = sc.twod_problem(with_h=False)
    t = time.perf_counter()
    art = syn.synthesize(prob, sc.TWOD_G)
    secs = time.perf_counter() - t
    err = float(np.abs(art.H - H_TWOD).max())
    res = syn.lyapunov_residual(art.Z, art.H)
    ok = err <= 1e-9 and res <= 1e-9 and secs < 1.0
    assert record(1, ok, f"max|H-H*|={err:.2e} residual={res:.2e} time={secs:.3f}s"), "criterion 1"


MAPS = {
    "stab-ex1": np.array([[2, 4], [3, 0]]) / 4,
    "stab-ex1-mod": np.array([[1, 5], [3, 0]]) / 5,
    "stab-ex2": np.array([[1, 4], [-1, 4]]) / 2,
    "stab-ex2-mod": np.array([[4, 4], [-1, 4]]) / 5,
}


def test_criterion_2_closed_loop_maps():
    worst, notes = 0.0, []
    t = time.perf_counter()
    for name, ref in MAPS.items():
        prob = sc.builtin(name).problem
        for method, opts in (("dual", {"eps": 0.0}), ("kkt", {})):
            M = sim.fit_closed_loop_map(prob, method, **opts)
            err = float(np.abs(M - ref).max())
            worst = max(worst, err)
            if err > 1e-6:
                notes.append(f"{name}/{method} got {np.round(M, 6).tolist()}")
    secs = time.perf_counter() - t
    ok = worst <= 1e-6 and secs < 10.0
    detail = f"max entry error={worst:.2e} time={secs:.1f}s"
    if notes:
        detail += "; " + "; ".join(notes)
    assert record(2, ok, detail), "criterion 2"


def test_criterion_3_follower_anchors():
    rng = np.random.default_rng(2024)
    laws = {
        "ctrb-loss": lambda xi, u: -u,
        "ctrb-gain": lambda xi, u: -(xi[1] + u) / 2,
        "stab-ex2": lambda xi, u: 0.0,
    }
    worst = 0.0
    for name, law in laws.items():
        prob = sc.builtin(name).problem
        for _ in range(20):
            xi0, u = rng.uniform(-3, 3, 2), rng.uniform(-3, 3)
            w = solve_lompc(prob, xi0, [u]).w[0, 0]
            worst = max(worst, abs(w - law(xi0, u)))
    assert record(3, worst <= 1e-8, f"max |w - law|={worst:.2e} over 60 draws"), "criterion 3"


def test_criterion_4_branch_and_bound_vs_enumeration():
    rng = np.random.default_rng(4)
    worst_obj, failures, max_bin = 0.0, 0, 0
    for k in range(25):
        prob, xi0, _ = feasible_instance(rng, N=1 + k % 2)
        m, sol = kr.auto_kappa(prob, xi0)
        max_bin = max(max_bin, m.n_pairs)
        ref = kr.enumerate_binaries(m)
        worst_obj = max(worst_obj, abs(sol.objective - ref.objective) / (1 + abs(ref.objective)))
        if not kr.verify_kkt(m, sol.Z, 1e-6).passed or kr.big_m_binding(m, sol):
            failures += 1
    ok = worst_obj <= 1e-6 and failures == 0 and max_bin <= 12
    detail = (f"max objective gap={worst_obj:.2e} kkt/big-M failures={failures} "
              f"max binaries={max_bin}")
    assert record(4, ok, detail), "criterion 4"


def _sign_feasible_duals(rng, prob):
    idx = prob.index
    mu = rng.standard_normal((prob.N, prob.p))
    lam = [rng.uniform(0, 2, idx.m_y) for _ in range(prob.N)] + [rng.uniform(0, 2, idx.m_o)]
    gam = rng.uniform(0, 2, (prob.N, idx.m_w))
    return mu, lam, gam


def test_criterion_5_duality():
    rng = np.random.default_rng(5)
    strong = 0.0
    for k in range(25):
        prob, xi0, u = feasible_instance(rng, N=1 + k % 2)
        sol = solve_lompc(prob, xi0, u)
        d = sol.duals
        strong = max(strong, abs(dr.zeta(prob, xi0, u, d.mu, d.lam, d.gam) - sol.value))
    weak_excess = -np.inf
    for _ in range(10):
        prob, xi0, u = feasible_instance(rng, N=2, pd=True)
        value = solve_lompc(prob, xi0, u).value
        for _ in range(10):
            z = dr.zeta(prob, xi0, u, *_sign_feasible_duals(rng, prob))
            weak_excess = max(weak_excess, z - value)
    prob = sc.twod_problem()
    rises = 0.0
    for xi0 in sc.twod_initial_conditions(prob):
        vals = [dr.solve_pdb(dr.build_pdb(prob, xi0, e)).objective for e in (0.0, 1e-3, 1e-2, 1e-1)]
        rises = max(rises, max(b - a for a, b in zip(vals, vals[1:])))
    ok = strong <= 1e-6 and weak_excess <= 1e-9 and rises <= 1e-7
    detail = (f"strong duality err={strong:.2e} max(zeta-value) over 100 duals={weak_excess:.2e} "
              f"max objective rise in eps={rises:.2e}")
    assert record(5, ok, detail), "criterion 5"


def _box_violation(prob, traj):
    s, lo, bi = prob.system, prob.lo, prob.bi

    def excess(P, v):
        v = np.atleast_1d(v)
        return float(np.max(P.F @ v - P.g)) if P.n_rows else -np.inf

    worst = -np.inf
    for r in traj.records:
        xi = np.asarray(r["xi"])
        worst = max(worst, excess(bi.X_set, xi[:s.n_x]), excess(lo.Y_set, xi[s.n_x:]))
        if r["u"] is not None:
            worst = max(worst, excess(bi.U_set, r["u"]), excess(lo.W_set, r["w"]))
    return worst


def test_criterion_6_stability_and_feasibility():
    prob = sc.twod_problem()
    art = syn.synthesize(prob.with_stability(None), sc.TWOD_G)
    xs = sc.twod_initial_conditions(prob)
    inside = all(syn.level_set_inside_xi(art.H, x, art.Xi) for x in xs)
    H = prob.bi.H
    infeasible, lyap_excess, box_excess, final = 0, -np.inf, -np.inf, 0.0
    for x in xs:
        tr = sim.simulate(prob, "dual", x, 50, eps=0.01)
        infeasible += tr.status != "ok"
        X = tr.states
        for a, b in zip(X[:-1], X[1:]):
            lyap_excess = max(lyap_excess, b @ H @ b - (a @ H @ a - a @ a))
        box_excess = max(box_excess, _box_violation(prob, tr))
        final = max(final, float(np.linalg.norm(X[-1])))
    ok = inside and infeasible == 0 and lyap_excess <= 1e-6 and final < 1e-3 and box_excess <= 1e-6
    detail = (f"level sets inside Xi={inside} infeasible runs={infeasible} "
              f"max Lyapunov excess={lyap_excess:.3g} max final norm={final:.3g} "
              f"max box excess={box_excess:.2e}")
    assert record(6, ok, detail), "criterion 6"


def test_criterion_7_cross_method_agreement():
    prob = sc.twod_problem()
    xs = syn.sample_initial_states(prob, 10, seed=0, G=sc.TWOD_G)
    d_obj, d_u = 0.0, 0.0
    for x in xs:
        a = dr.solve_pdb(dr.build_pdb(prob, x, 1e-4))
        _, b = kr.auto_kappa(prob, x)
        d_obj = max(d_obj, abs(a.objective - b.objective))
        d_u = max(d_u, float(np.linalg.norm(np.asarray(a.u[0]) - b.u[0])))
    ok = d_obj <= 5e-3 and d_u <= 1e-2
    assert record(7, ok, f"max objective diff={d_obj:.3g} max u0 diff={d_u:.3g}"), "criterion 7"


def test_criterion_8_demand_response():
    scen = sc.builtin("demand-response")
    prob, xi0 = scen.problem, scen.xi0[0]
    steps = scen.defaults["steps"]
    tr = sim.simulate(prob, "kkt", xi0, steps)
    base = sim.simulate_fixed_leader(prob, xi0, steps, scen.defaults["baseline_price"])
    done = [r for r in tr.records if r["u"] is not None]
    ms = max((r["ms"] for r in done), default=0.0)
    prices = np.array([r["u"] for r in done]).ravel()
    in_box = bool(prices.size == 0 or (prices.min() >= 5 - 1e-6 and prices.max() <= 10 + 1e-6))
    start = min(prob.bi.peak)

    def pre_mean(t):
        w = [float(np.sum(r["w"])) for r in t.records if r["w"] is not None and r["step"] < start]
        return float(np.mean(w)) if w else float("nan")

    both_ok = tr.status == "ok" and base.status == "ok"
    peak, peak_base = sim.peak_consumption(prob, tr), sim.peak_consumption(prob, base)
    pre, pre_base = pre_mean(tr), pre_mean(base)
    ok = both_ok and peak < peak_base and pre > pre_base and ms <= 60e3 and in_box
    detail = (f"status={tr.status} (failed at step {tr.failure_index}, "
              f"cause {tr.diagnostics.get('cause') if tr.diagnostics else None}) "
              f"baseline={base.status} steps done={len(done)}/{steps} "
              f"peak w={peak:.3g} vs {peak_base:.3g} pre-window mean w={pre:.3g} vs {pre_base:.3g} "
              f"max step={ms / 1e3:.1f}s prices in [5,10]={in_box}")
    assert record(8, ok, detail), "criterion 8"


def _scalar_follower(a, b1=1.0):
    return SystemModel([[a]], [[b1]], [[1.0]], n_x=0)


def _monte_carlo(sys, K_L, X, Omega, U, rng, n):
    """Largest facet excess of the one-step image over ``n`` samples in X x Omega x U."""
    boxes = [pt.axis_extent(P) for P in (X, Omega, U) if P.dim]

    def draw(P):
        if P.dim == 0:
            return np.zeros(0)
        ext = pt.axis_extent(P)
        while True:
            v = rng.uniform(ext[:, 0], ext[:, 1])
            if pt.contains(P, v):
                return v

    assert boxes
    Acl = sys.A + sys.B2 @ K_L
    worst = -np.inf
    for _ in range(n):
        xi = np.concatenate([draw(X), draw(Omega)])
        y_next = (Acl @ xi + sys.B1 @ draw(U))[sys.n_x:]
        worst = max(worst, float(np.max(Omega.F @ y_next - Omega.g)))
    return worst


def test_criterion_9_invariant_sets():
    Y = pt.box([-1], [1])
    K0 = np.zeros((1, 1))
    cases = [
        (_scalar_follower(0.5), K0, EMPTY0, Y, Y, pt.box([-0.2], [0.2])),
        (_scalar_follower(0.5, 0.0), K0, EMPTY0, Y, Y, pt.box([-1e-9], [1e-9])),
    ]
    viol, notes = -np.inf, []
    sets = []
    for case in cases:
        om = pt.compute_invariant_set(*case)
        viol = max(viol, pt.verify_invariant(*case, om).max_violation)
        sets.append((case, om))
    try:
        pt.compute_invariant_set(_scalar_follower(2.0), K0, EMPTY0, Y, Y, pt.box([-0.1], [0.1]))
        unstable_flagged = False
    except (EmptyPolytope, NotConverged) as exc:
        unstable_flagged = True
        notes.append(f"unstable example flagged {type(exc).__name__}")
    # a coupled two-state follower with a leader state and feedback gain
    sys2 = SystemModel([[0.6, 0.0, 0.0], [0.2, 0.5, 0.1], [0.1, -0.2, 0.4]],
                       [[0.0], [0.3], [0.2]], [[0.0], [1.0], [0.5]], n_x=1)
    K2 = np.array([[0.0, -0.1, -0.05]])
    case2 = (sys2, K2, pt.box([-1], [1]), pt.box([-2, -2], [2, 2]), pt.box([-1], [1]),
             pt.box([-0.5], [0.5]))
    om2 = pt.compute_invariant_set(*case2)
    viol = max(viol, pt.verify_invariant(*case2, om2).max_violation)
    sets.append((case2, om2))
    rng = np.random.default_rng(9)
    mc = -np.inf
    for (sys, K, X, _Y, _W, U), om in sets:
        mc = max(mc, _monte_carlo(sys, K, X, om, U, rng, 1000))
    ok = viol <= 1e-8 and unstable_flagged and mc <= 1e-8
    detail = (f"max facet violation={viol:.2e} Monte-Carlo max excess={mc:.2e} "
              f"(3x1000 samples); " + "; ".join(notes))
    assert record(9, ok, detail), "criterion 9"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
