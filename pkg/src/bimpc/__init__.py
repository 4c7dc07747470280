"""Bilevel model predictive control.

A leader MPC chooses inputs u knowing that a follower linear MPC responds
optimally with w.  The package provides follower-aware stabilizing synthesis,
two single-level reformulations of the leader problem (duality gap and big-M
KKT with branch and bound), a closed-loop simulator and a CLI.
"""

from .errors import *  # noqa: F401,F403
from .model import SystemModel, LompcSpec, BimpcSpec, Problem, IndexMap, validate
from .polytope import PolytopeH, box, compute_invariant_set, verify_invariant
from .synthesis import synthesize, SynthesisArtifacts
from .lompc import solve_lompc, DualCertificate, LompcSolution
from .dual_reform import build_pdb, solve_pdb, zeta
from .kkt_reform import build_pip, branch_and_bound, auto_kappa, verify_kkt
from .sim import Method, step, simulate, fit_closed_loop_map, Trajectory
from .scenarios import Scenario, builtin, names

__version__ = "0.1.0"
