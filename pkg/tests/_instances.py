"""Random small bilevel instances shared by the test modules."""

import numpy as np

from bimpc import polytope as pt
from bimpc.errors import Infeasible
from bimpc.lompc import solve_lompc
from bimpc.model import SystemModel, LompcSpec, BimpcSpec, validate


def _psd(rng, n, rank=None):
    rank = n if rank is None else rank
    M = rng.standard_normal((n, rank))
    return M @ M.T


def random_problem(rng, N=1, p=2, n_x=1, pd=False, boxes=True, wide=False):
    """Scalar-input instance with box sets on y and w (2 rows each).

    ``pd`` makes U and V positive definite; ``wide`` emulates unbounded sets.
    """
    A = rng.uniform(-1.2, 1.2, (p, p))
    B1 = rng.uniform(-1, 1, (p, 1))
    B2 = rng.uniform(-1, 1, (p, 1))
    B2[n_x:] += np.sign(B2[n_x:]) * 0.3 + (B2[n_x:] == 0) * 0.5
    n_y = p - n_x
    U = _psd(rng, p) if pd else _psd(rng, p, 1)
    V = _psd(rng, p) if pd else _psd(rng, p, 1)
    if pd:
        U += 0.1 * np.eye(p)
        V += 0.1 * np.eye(p)
    W2 = np.array([[rng.uniform(0.5, 2.0)]])
    W1 = np.array([[rng.uniform(0.0, 1.0)]])
    Phi = np.array([[rng.uniform(-0.5, 0.5)]])
    if wide:
        Y = pt.emulated_unbounded(n_y)
        W = pt.emulated_unbounded(1)
        Uset = pt.emulated_unbounded(1)
        X = pt.emulated_unbounded(n_x)
    else:
        Y = pt.box([-1.0] * n_y, [1.0] * n_y)
        W = pt.box([-rng.uniform(0.3, 1.5)], [rng.uniform(0.3, 1.5)])
        Uset = pt.box([-2.0], [2.0])
        X = pt.box([-5.0] * n_x, [5.0] * n_x)
    sys = SystemModel(A, B1, B2, n_x=n_x)
    lo = LompcSpec(U=U, V=V, W1=W1, Phi=Phi, W2=W2, N=N, Y_set=Y, W_set=W, Y_omega=Y)
    bi = BimpcSpec(P=np.eye(p), Q=np.eye(p), R=np.diag([1.0, rng.uniform(0, 1)]),
                   X_set=X, U_set=Uset)
    return validate(sys, lo, bi)


def feasible_instance(rng, **kw):
    """(problem, xi0, u) with a feasible follower response."""
    while True:
        prob = random_problem(rng, **kw)
        xi0 = rng.uniform(-0.8, 0.8, prob.p)
        u = rng.uniform(-1, 1, (prob.N, 1))
        try:
            solve_lompc(prob, xi0, u)
        except Infeasible:
            continue
        return prob, xi0, u
