import dataclasses

import numpy as np
import pytest

from bimpc import kkt_reform as kr, polytope as pt, scenarios as sc
from bimpc.errors import Infeasible
from bimpc.lompc import build_lompc_qp, dp_closed_form, solve_lompc

from _instances import feasible_instance, random_problem


def _draws(seed, n=20):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(-3, 3, 2), rng.uniform(-3, 3)) for _ in range(n)]


def test_cancelling_follower():
    prob = sc.builtin("ctrb-loss").problem
    for xi0, u in _draws(0):
        assert solve_lompc(prob, xi0, [u]).w[0, 0] == pytest.approx(-u, abs=1e-8)


def test_half_cancelling_follower():
    prob = sc.builtin("ctrb-gain").problem
    for xi0, u in _draws(1):
        assert solve_lompc(prob, xi0, [u]).w[0, 0] == pytest.approx(-(xi0[1] + u) / 2, abs=1e-8)


def test_idle_follower():
    prob = sc.builtin("stab-ex2").problem
    for xi0, u in _draws(2):
        assert abs(solve_lompc(prob, xi0, [u]).w[0, 0]) <= 1e-8


def test_qp_block_sizes():
    prob = sc.builtin("ctrb-loss").problem
    qp = build_lompc_qp(prob, np.zeros(2), [0.0])
    assert qp.n == 3


def test_twod_feasible_and_dr_affine():
    prob = sc.twod_problem()
    sol = solve_lompc(prob, [0.1, 0.1], [0.0])
    assert sol.dynamics_residual(prob, [0.1, 0.1], [[0.0]]) <= 1e-8
    dr = sc.demand_response_problem(np.full(96, 24.0))
    u = np.full((dr.N, 1), 5.0)
    sol = solve_lompc(dr, [22.0], u)
    assert sol.dynamics_residual(dr, [22.0], u) <= 1e-8
    assert np.all(sol.w >= -1e-9) and np.all(sol.w <= 0.5 + 1e-9)


def test_y0_outside_is_infeasible():
    with pytest.raises(Infeasible):
        solve_lompc(sc.twod_problem(), [0.0, 1.5], [0.0])


def test_dp_origin_is_zero():
    prob = random_problem(np.random.default_rng(0), N=3, wide=True)
    sol = dp_closed_form(prob, np.zeros(2), np.zeros((3, 1)))
    assert np.allclose(sol.xi, 0) and np.allclose(sol.w, 0)


def test_dp_matches_qp_on_wide_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        p = int(rng.integers(1, 5))
        n_x = int(rng.integers(0, p))
        prob = random_problem(rng, N=int(rng.integers(1, 6)), p=p, n_x=n_x, pd=True, wide=True)
        xi0 = rng.uniform(-1, 1, p)
        u = rng.uniform(-1, 1, (prob.N, 1))
        a, b = dp_closed_form(prob, xi0, u), solve_lompc(prob, xi0, u)
        scale = 1 + np.abs(a.xi).max()
        worst = max(worst, np.abs(a.xi - b.xi).max() / scale, np.abs(a.w - b.w).max() / scale)
    assert worst <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_certificate_satisfies_stationarity(seed):
    prob, xi0, u = feasible_instance(np.random.default_rng(seed), N=2)
    sol = solve_lompc(prob, xi0, u)
    m = kr.build_pip(prob, xi0)
    Z = kr.lompc_point(m, sol)
    rep = kr.verify_kkt(m, Z)
    assert max(rep.stationarity.values()) <= 1e-7
    assert rep.complementarity <= 1e-7 and rep.dual_sign <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_value_monotone_in_w_set(seed):
    prob, xi0, u = feasible_instance(np.random.default_rng(seed), N=2)
    base = solve_lompc(prob, xi0, u).value
    W = prob.lo.W_set
    tight = dataclasses.replace(prob, lo=dataclasses.replace(prob.lo, W_set=pt.PolytopeH(W.F, 0.5 * W.g)))
    try:
        value = solve_lompc(tight, xi0, u).value
    except Infeasible:
        return
    assert value >= base - 1e-9
