import numpy as np
import pytest

from bimpc import polytope as pt, scenarios as sc
from bimpc import synthesis as syn
from bimpc.errors import NotSchurStable, NotStabilizable
from bimpc.lompc import dp_closed_form
from bimpc.model import BimpcSpec, LompcSpec, PolytopeH, SystemModel, validate

from _instances import random_problem

H_TWOD = np.array([[59.0, -10.0], [-10.0, 44.0]]) / 12
G_TWOD = -0.5 * np.array([[3.0, 1.0]])
EMPTY0 = PolytopeH(np.zeros((0, 0)), np.zeros(0))


def scalar_problem(U=1.0, N=2):
    sys = SystemModel([[1.0]], [[1.0]], [[1.0]], n_x=0)
    lo = LompcSpec(U=[[U]], V=[[1.0]], W1=[[0.0]], Phi=[[0.0]], W2=[[1.0]], N=N,
                   Y_set=pt.box([-1], [1]), W_set=pt.box([-1], [1]), Y_omega=pt.box([-1], [1]))
    bi = BimpcSpec(P=np.eye(1), Q=np.eye(1), R=np.eye(2), X_set=EMPTY0, U_set=pt.box([-1], [1]))
    return validate(sys, lo, bi)


def test_twod_recursions():
    art = syn.recursions(sc.twod_problem(with_h=False))
    assert np.allclose(art.Theta[1], [[2.0]])
    assert np.allclose(art.Gamma, np.diag([1.0, 0.5]))
    assert np.allclose(art.A_Z, [[2, 1], [0, 1]])
    assert np.allclose(art.B_Z, [[1], [0.5]])


def test_zero_terminal_weight_gives_identity_gamma():
    prob = scalar_problem(U=0.0, N=1)
    art = syn.recursions(prob)
    assert np.allclose(art.Lambda[1], 0) and np.allclose(art.Gamma, np.eye(1))


def test_scalar_two_step_recursion():
    art = syn.recursions(scalar_problem())
    assert art.Lambda[2][0, 0] == pytest.approx(1.0)
    assert art.Theta[2][0, 0] == pytest.approx(2.0)
    assert art.Psi[1][0, 0] == pytest.approx(-0.5)
    assert art.Lambda[1][0, 0] == pytest.approx(1.5)
    assert art.Theta[1][0, 0] == pytest.approx(2.5)
    assert art.Psi[0][0, 0] == pytest.approx(-0.6)
    assert art.Lambda[0][0, 0] == pytest.approx(1.6)


def test_choose_gain_twod():
    A_Z, B_Z = np.array([[2.0, 1.0], [0.0, 1.0]]), np.array([[1.0], [0.5]])
    G = syn.choose_gain(A_Z, B_Z)
    assert np.abs(np.linalg.eigvals(A_Z + B_Z @ G)).max() < 1 - 1e-6
    Z = A_Z + B_Z @ G_TWOD
    assert np.abs(np.linalg.eigvals(Z)).max() == pytest.approx(np.sqrt(3) / 2)


def test_choose_gain_stable_and_unstabilizable():
    assert np.allclose(syn.choose_gain([[0.5]], [[0.0]]), 0)
    with pytest.raises(NotStabilizable):
        syn.choose_gain([[2.0]], [[0.0]])


def test_dlyap_examples():
    Z = np.array([[0.5, 0.5], [-0.75, 0.75]])
    H = syn.dlyap(Z)
    assert np.allclose(H, H_TWOD, atol=1e-12)
    assert syn.lyapunov_residual(Z, H) <= 2e-9
    assert np.allclose(syn.dlyap(np.zeros((2, 2))), np.eye(2))
    assert syn.dlyap([[0.5]])[0, 0] == pytest.approx(4 / 3)
    with pytest.raises(NotSchurStable):
        syn.dlyap([[1.5]])


def test_synthesize_twod_matches_h():
    art = syn.synthesize(sc.twod_problem(with_h=False), G_TWOD)
    assert np.abs(art.H - H_TWOD).max() <= 1e-9
    assert syn.lyapunov_residual(art.Z, art.H) <= 1e-9


def test_build_xi_examples():
    art = syn.synthesize(sc.twod_problem(with_h=False), G_TWOD)
    assert pt.contains(art.Xi, [0, 0])
    assert pt.contains(art.Xi, [0.1, 0.1])
    # a small ball fits inside
    r = syn.max_level(np.eye(2), art.Xi)
    assert r > 0


def test_level_set_examples():
    B1 = pt.box([-1, -1], [1, 1])
    assert syn.level_set_inside_xi(np.eye(2), [1, 0], B1)
    assert not syn.level_set_inside_xi(np.eye(2), [1, 0], pt.box([-0.5, -0.5], [0.5, 0.5]))
    # support of the ellipsoid along x equals sqrt(r (H^-1)_11)
    xi0 = np.array([0.3, -0.2])
    r = xi0 @ H_TWOD @ xi0
    top = np.sqrt(r * np.linalg.inv(H_TWOD)[0, 0])
    assert syn.level_set_inside_xi(H_TWOD, xi0, pt.box([-top - 1e-12, -5], [top + 1e-12, 5]))
    assert not syn.level_set_inside_xi(H_TWOD, xi0, pt.box([-top + 1e-6, -5], [top - 1e-6, 5]))


def test_h_constraint_examples():
    Z = np.array([[0.5, 0.5], [-0.75, 0.75]])
    xi0 = np.array([0.4, -0.7])
    assert syn.h_constraint(H_TWOD, xi0, Z @ xi0) == pytest.approx(0.0, abs=1e-12)
    assert syn.h_constraint(H_TWOD, [0, 0], [0, 0]) == 0.0
    assert syn.h_constraint(np.eye(1), [1.0], [0.5]) == pytest.approx(0.25)


@pytest.mark.parametrize("seed", range(10))
def test_recursion_matrices_definite(seed):
    prob = random_problem(np.random.default_rng(seed), N=3)
    art = syn.recursions(prob)
    for L in art.Lambda:
        assert np.linalg.eigvalsh(L).min() >= -1e-9
    for T in art.Theta[1:]:
        assert np.linalg.eigvalsh(T).min() > 0


@pytest.mark.parametrize("seed", range(10))
def test_closed_form_response_matches_theorem_gain(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, N=int(rng.integers(1, 4)), wide=True)
    art = syn.recursions(prob)
    G = rng.standard_normal((1, prob.p))
    xi0 = rng.standard_normal(prob.p)
    u = np.zeros((prob.N, 1))
    u[0] = G @ xi0
    sol = dp_closed_form(prob, xi0, u)
    assert np.allclose(sol.w[0], art.w0_gain(prob, G) @ xi0, atol=1e-9)
    assert np.allclose(sol.xi[0], (art.A_Z + art.B_Z @ G) @ xi0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_build_xi_monotone_in_w(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, N=2)
    art = syn.recursions(prob)
    G = 0.3 * rng.standard_normal((1, prob.p))
    big = syn.build_xi(prob, art, G)
    lo = prob.lo
    half = PolytopeH(lo.W_set.F, 0.5 * lo.W_set.g)
    import dataclasses
    small_prob = dataclasses.replace(prob, lo=dataclasses.replace(lo, W_set=half))
    small = syn.build_xi(small_prob, art, G)
    for a in big.F:
        try:
            s_small = pt.support(small, a)
        except Exception:
            continue
        assert s_small <= pt.support(big, a) + 1e-9


def test_sample_initial_states_inside():
    prob = sc.twod_problem()
    art = syn.synthesize(prob.with_stability(None), G_TWOD)
    pts = syn.sample_initial_states(prob, 5, seed=1, G=G_TWOD)
    for x in pts:
        assert pt.contains(art.Xi, x) and syn.level_set_inside_xi(art.H, x, art.Xi)
