import numpy as np
import pytest

from bimpc import scenarios as sc
from bimpc.errors import CadenceGap, MalformedCsv, UnknownScenario
from bimpc.lompc import solve_lompc
from bimpc.model import validate


def response_dynamics(prob):
    """(M, b) with xi1 = M xi0 + b u0 once the follower has responded."""
    def nxt(xi0, u):
        return solve_lompc(prob, xi0, [u]).xi[0]
    M = np.column_stack([nxt(e, 0.0) for e in np.eye(2)])
    b = nxt(np.zeros(2), 1.0)
    return M, b


def ctrb_rank(M, b):
    return np.linalg.matrix_rank(np.column_stack([b, M @ b]), tol=1e-9)


@pytest.mark.parametrize("name", sc.names())
def test_builtins_validate(name):
    s = sc.builtin(name)
    assert validate(s.problem) is s.problem
    assert s.name == name


def test_unknown_scenario():
    with pytest.raises(UnknownScenario):
        sc.builtin("nope")


def test_twod_follower_cost():
    lo = sc.builtin("twod").lo
    assert np.allclose(lo.U, np.diag([0, 1])) and np.allclose(lo.V, np.diag([0, 1]))
    assert np.allclose(lo.W, np.diag([0, 1]))


def test_dr_price_bounds():
    from bimpc import polytope as pt
    U = sc.builtin("demand-response").bi.U_set
    assert np.allclose(pt.axis_extent(U), [[5.0, 10.0]])


def test_stab_ex1_dynamics():
    s = sc.builtin("stab-ex1").system
    assert np.allclose(s.A[0], [1, 2]) and s.B1[0, 0] == 1 and s.B2[0, 0] == 0


def test_loss_of_controllability():
    M, b = response_dynamics(sc.builtin("ctrb-loss").problem)
    assert np.allclose(M, [[2, 1], [0, 1]], atol=1e-8)
    assert ctrb_rank(M, b) < 2


def test_gain_of_controllability():
    M, b = response_dynamics(sc.builtin("ctrb-gain").problem)
    assert np.allclose(M, np.array([[4, -1], [0, 1]]) / 2, atol=1e-8)
    assert np.allclose(b, np.array([-1, 1]) / 2, atol=1e-8)
    assert ctrb_rank(M, b) == 2


def test_synthetic_weather_peak():
    w = sc.synthetic_weather()
    assert w.size == 96
    assert w[15 * 4] == pytest.approx(34.0)
    assert w.max() == pytest.approx(34.0)


def _write(tmp_path, rows):
    f = tmp_path / "w.csv"
    f.write_text("timestamp,temp_c\n" + "".join(f"{t},{v}\n" for t, v in rows))
    return f


def test_load_weather_constant(tmp_path):
    rows = [(f"2024-07-01T00:{m:02d}:00", 22.0) for m in (0, 15, 30, 45)]
    w = sc.load_weather(_write(tmp_path, rows))
    assert np.allclose(w, 22.0)
    p = sc.demand_response_problem(w, N=2)
    assert np.allclose(np.diff([p.system.offset(t) for t in range(8)], axis=0), 0)


def test_load_weather_gap(tmp_path):
    rows = [(f"2024-07-01T00:{m:02d}:00", 22.0) for m in (0, 15, 45)]
    with pytest.raises(CadenceGap):
        sc.load_weather(_write(tmp_path, rows))


def test_load_weather_malformed(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("time,temp\n1,2\n")
    with pytest.raises(MalformedCsv):
        sc.load_weather(f)
    with pytest.raises(MalformedCsv):
        sc.load_weather(_write(tmp_path, [("2024-07-01T00:00:00", "hot")]))


def test_peak_indices():
    idx = sc.peak_indices(13, 17, days=1)
    assert min(idx) == 52 and max(idx) == 67 and len(idx) == 16
