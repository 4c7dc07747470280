"""Stabilizing leader synthesis.

Backward follower recursions give the closed-form follower response to a
leader input sequence {G xi0, 0, ..., 0}.  Pick G so the resulting one-step map
Z is Schur stable, solve Z'HZ - H = -I, and the leader problem with the
constraint xi_1'H xi_1 <= xi_0'(H - I) xi_0 is recursively feasible and
stable from any xi0 whose H-level set lies inside the candidate-feasible set Xi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import polytope as pt
from .errors import NotStabilizable, NotSchurStable, SingularTheta
from .model import Problem
from .polytope import PolytopeH


@dataclass
class SynthesisArtifacts:
    Lambda: list            # Lambda[n], n = 0..N
    Theta: list             # Theta[n], n = 1..N (Theta[0] is None)
    Psi: list               # Psi[n], n = 0..N-1
    Gamma: np.ndarray
    A_Z: np.ndarray
    B_Z: np.ndarray
    G: np.ndarray = None
    Z: np.ndarray = None
    H: np.ndarray = None
    Xi: PolytopeH = None
    extras: dict = field(default_factory=dict)

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.Z)).max())

    def w0_gain(self, problem: Problem, G=None) -> np.ndarray:
        """Follower first input w0 = K xi0 when u0 = G xi0 (constraints inactive)."""
        G = self.G if G is None else G
        s, lo = problem.system, problem.lo
        rhs = s.B2.T @ self.Lambda[1] @ (s.A + s.B1 @ G) + lo.Phi.T @ G
        return -np.linalg.solve(self.Theta[1], rhs)

    def to_dict(self):
        def m(a):
            return None if a is None else np.asarray(a).tolist()
        out = {
            "Lambda": [m(L) for L in self.Lambda],
            "Theta": [m(T) for T in self.Theta],
            "Psi": [m(P) for P in self.Psi],
            "Gamma": m(self.Gamma),
            "A_Z": m(self.A_Z),
            "B_Z": m(self.B_Z),
            "G": m(self.G),
            "Z": m(self.Z),
            "H": m(self.H),
        }
        if self.Z is not None:
            out["spectral_radius"] = self.spectral_radius
        if self.Z is not None and self.H is not None:
            out["lyapunov_residual"] = lyapunov_residual(self.Z, self.H)
        if self.Xi is not None:
            out["Xi"] = self.Xi.to_dict()
            out["Xi_facets"] = self.Xi.n_rows
        out.update(self.extras)
        return out


def recursions(problem: Problem) -> SynthesisArtifacts:
    """Backward follower recursions for Lambda, Theta, Psi and Gamma."""
    s, lo = problem.system, problem.lo
    A, B1, B2 = s.A, s.B1, s.B2
    N = lo.N
    Lam = [None] * (N + 1)
    Theta = [None] * (N + 1)
    Psi = [None] * N
    Lam[N] = lo.U.copy()
    for n in range(N, 0, -1):
        T = lo.W2 + B2.T @ Lam[n] @ B2
        T = 0.5 * (T + T.T)
        if np.linalg.cond(T) > 1e14:
            raise SingularTheta(f"Theta_{n} is singular")
        Theta[n] = T
        K = np.linalg.solve(T, B2.T @ Lam[n] @ A)
        L = A.T @ Lam[n] @ A - A.T @ Lam[n] @ B2 @ K + lo.V
        Lam[n - 1] = 0.5 * (L + L.T)
        Psi[n - 1] = -K
    Gamma = np.eye(s.p) - B2 @ np.linalg.solve(Theta[1], B2.T @ Lam[1])
    A_Z = Gamma @ A
    B_Z = Gamma @ B1 - B2 @ np.linalg.solve(Theta[1], lo.Phi.T)
    return SynthesisArtifacts(Lam, Theta, Psi, Gamma, A_Z, B_Z)


def choose_gain(A_Z, B_Z, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Discrete LQR gain with identity weights, by fixed-point Riccati iteration."""
    A_Z = np.atleast_2d(np.asarray(A_Z, dtype=float))
    B_Z = np.asarray(B_Z, dtype=float).reshape(A_Z.shape[0], -1)
    p, m = B_Z.shape
    S = np.eye(p)
    for _ in range(max_iter):
        BS = B_Z.T @ S
        K = np.linalg.solve(np.eye(m) + BS @ B_Z, BS @ A_Z)
        S_new = A_Z.T @ S @ A_Z - A_Z.T @ S @ B_Z @ K + np.eye(p)
        S_new = 0.5 * (S_new + S_new.T)
        if not np.all(np.isfinite(S_new)) or np.abs(S_new).max() > 1e12:
            raise NotStabilizable("Riccati iteration diverged", A_Z, B_Z)
        done = np.abs(S_new - S).max() <= tol * max(1.0, np.abs(S_new).max())
        S = S_new
        if done:
            break
    BS = B_Z.T @ S
    G = -np.linalg.solve(np.eye(m) + BS @ B_Z, BS @ A_Z)
    rho = np.abs(np.linalg.eigvals(A_Z + B_Z @ G)).max()
    if rho >= 1 - 1e-6:
        raise NotStabilizable(f"closed loop spectral radius {rho:.6f} >= 1", A_Z, B_Z)
    return G


def dlyap(Z) -> np.ndarray:
    """Unique symmetric H with Z'HZ - H = -I, via the Kronecker-vectorized system."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    rho = np.abs(np.linalg.eigvals(Z)).max() if Z.size else 0.0
    if rho >= 1:
        raise NotSchurStable(f"spectral radius {rho} >= 1")
    p = Z.shape[0]
    # vec(Z'HZ) = kron(Z', Z') vec(H) for column-major vec
    K = np.kron(Z.T, Z.T) - np.eye(p * p)
    h = np.linalg.solve(K, -np.eye(p).reshape(-1, order="F"))
    H = h.reshape(p, p, order="F")
    return 0.5 * (H + H.T)


def lyapunov_residual(Z, H) -> float:
    return float(np.linalg.norm(Z.T @ H @ Z - H + np.eye(Z.shape[0]), "fro"))


def _rows_for(F_set: PolytopeH, T: np.ndarray):
    """Rows of {xi0 : T xi0 in F_set}."""
    return F_set.F @ T, F_set.g


def build_xi(problem: Problem, art: SynthesisArtifacts, G) -> PolytopeH:
    """Initial states for which the candidate u = {G xi0, 0, ..., 0} keeps every constraint."""
    s, lo, bi = problem.system, problem.lo, problem.bi
    N, p, n_x = lo.N, s.p, s.n_x
    G = np.atleast_2d(np.asarray(G, dtype=float)).reshape(s.n_u, p)
    Px = np.eye(p)[:n_x]
    Py = np.eye(p)[n_x:]
    rows, rhs = [], []

    def add(F_set, T):
        if F_set.n_rows:
            F, g = _rows_for(F_set, T)
            rows.append(F)
            rhs.append(g)

    add(bi.U_set, G)
    add(lo.W_set, art.w0_gain(problem, G))
    T = np.eye(p)
    add(bi.X_set, Px @ T)
    add(lo.Y_set, Py @ T)
    T = art.A_Z + art.B_Z @ G
    for n in range(1, N):
        add(lo.W_set, art.Psi[n] @ T)
        add(bi.X_set, Px @ T)
        add(lo.Y_set, Py @ T)
        T = (s.A + s.B2 @ art.Psi[n]) @ T
    add(bi.X_set, Px @ T)
    add(lo.Y_omega, Py @ T)
    F = np.vstack(rows) if rows else np.zeros((0, p))
    g = np.concatenate(rhs) if rhs else np.zeros(0)
    return pt.normalize(PolytopeH(F, g))


def level_set_inside_xi(H, xi0, Xi: PolytopeH, tol: float = 1e-9) -> bool:
    """Exact test of {xi : xi'H xi <= xi0'H xi0} being inside Xi."""
    H = np.asarray(H, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    r = float(xi0 @ H @ xi0)
    Hinv = np.linalg.inv(H)
    for a, b in zip(Xi.F, Xi.g):
        if np.sqrt(max(r * (a @ Hinv @ a), 0.0)) > b + tol:
            return False
    return True


def max_level(H, Xi: PolytopeH) -> float:
    """Largest r with {xi'H xi <= r} inside Xi."""
    Hinv = np.linalg.inv(np.asarray(H, dtype=float))
    r = np.inf
    for a, b in zip(Xi.F, Xi.g):
        q = a @ Hinv @ a
        if q > 0:
            r = min(r, max(b, 0.0) ** 2 / q)
    return float(r)


def h_constraint(H, xi0, xi1) -> float:
    """xi1'H xi1 - xi0'(H - I) xi0; feasible iff <= 0."""
    H = np.asarray(H, dtype=float)
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
    return float(xi1 @ H @ xi1 - xi0 @ (H - np.eye(H.shape[0])) @ xi0)


def synthesize(problem: Problem, G=None) -> SynthesisArtifacts:
    """Full pipeline: recursions, gain (chosen unless given), H and Xi."""
    art = recursions(problem)
    if G is None:
        G = choose_gain(art.A_Z, art.B_Z)
    G = np.atleast_2d(np.asarray(G, dtype=float)).reshape(problem.system.n_u, problem.p)
    art.G = G
    art.Z = art.A_Z + art.B_Z @ G
    art.H = dlyap(art.Z)
    art.Xi = build_xi(problem, art, G)
    return art


def sample_initial_states(problem: Problem, count: int, seed: int = 0, G=None,
                          max_draws: int = 100_000) -> list:
    """Uniform draws from Xi whose H-level set also lies inside Xi.

    Rejection sampling over the bounding box of Xi.  The level-set test uses
    the synthesized H (not the problem's own H) so it applies whether or not
    the Lyapunov constraint is enabled.
    """
    art = synthesize(problem.with_stability(None), G)
    ext = pt.axis_extent(art.Xi)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_draws):
        if len(out) == count:
            break
        xi = rng.uniform(ext[:, 0], ext[:, 1])
        if pt.contains(art.Xi, xi) and level_set_inside_xi(art.H, xi, art.Xi):
            out.append(xi)
    if len(out) < count:
        raise ValueError(f"only {len(out)} of {count} states found in Xi")
    return out
