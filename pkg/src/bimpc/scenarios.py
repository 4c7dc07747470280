"""Built-in scenarios and weather ingestion for the demand-response case.

Small two-state examples use N = 1 and emulate unconstrained sets with
+-1e6 boxes.  The demand-response scenario models one air-conditioned room
(follower) and a utility choosing prices (leader) over a 15-minute grid.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from . import polytope as pt
from .errors import UnknownScenario, MalformedCsv, CadenceGap
from .model import SystemModel, LompcSpec, BimpcSpec, Problem, validate
from .polytope import PolytopeH

STEP_MINUTES = 15
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES


@dataclass
class Scenario:
    name: str
    problem: Problem
    xi0: list = field(default_factory=list)
    defaults: dict = field(default_factory=dict)
    weather: np.ndarray = None
    description: str = ""

    @property
    def system(self):
        return self.problem.system

    @property
    def lo(self):
        return self.problem.lo

    @property
    def bi(self):
        return self.problem.bi


def _free(dim):
    return pt.emulated_unbounded(dim)


def _empty(dim=0):
    return PolytopeH(np.zeros((0, dim)), np.zeros(0))


def _two_state(A, B1, B2, U, V, W1, Phi, W2, P, Q, R) -> Problem:
    sys = SystemModel(A, B1, B2, n_x=1)
    lo = LompcSpec(U=U, V=V, W1=W1, Phi=Phi, W2=W2, N=1,
                   Y_set=_free(1), W_set=_free(1), Y_omega=_free(1))
    bi = BimpcSpec(P=P, Q=Q, R=R, X_set=_free(1), U_set=_free(1))
    return validate(sys, lo, bi)


def _ctrb_loss():
    # follower cost (u0 + w0)^2
    prob = _two_state([[2, 1], [0, 1]], [0, 1], [0, 1],
                      U=np.zeros((2, 2)), V=np.zeros((2, 2)), W1=1, Phi=1, W2=1,
                      P=np.eye(2), Q=np.eye(2), R=np.eye(2))
    return Scenario("ctrb-loss", prob, [np.array([1.0, 0.0]), np.array([0.0, 1.0])],
                    description="follower cancels the leader input (w = -u)")


def _ctrb_gain():
    # follower cost y1^2 + w0^2
    prob = _two_state([[2, 0], [0, 1]], [0, 1], [1, 1],
                      U=np.diag([0.0, 1.0]), V=np.zeros((2, 2)), W1=0, Phi=0, W2=1,
                      P=np.eye(2), Q=np.eye(2), R=np.eye(2))
    return Scenario("ctrb-gain", prob, [np.array([1.0, 0.0]), np.array([0.0, 1.0])],
                    description="follower response makes the pair controllable in u")


def _stab_ex1(P):
    prob = _two_state([[1, 2], [2, 1]], [1, 1], [0, 1],
                      U=np.diag([0.0, 1.0]), V=np.zeros((2, 2)), W1=0, Phi=0, W2=1,
                      P=P, Q=np.zeros((2, 2)), R=np.diag([1.0, 0.0]))
    return prob


def _stab_ex2(P):
    prob = _two_state([[1, 4], [0, 4]], [1, 1], [0, 1],
                      U=np.zeros((2, 2)), V=np.zeros((2, 2)), W1=0, Phi=0, W2=1,
                      P=P, Q=np.zeros((2, 2)), R=np.diag([1.0, 0.0]))
    return prob


_BASIS = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]

TWOD_G = -0.5 * np.array([[3.0, 1.0]])


def twod_problem(with_h: bool = True) -> Problem:
    sys = SystemModel([[2, 1], [0, 2]], [1, 1], [0, 1], n_x=1)
    lo = LompcSpec(U=np.diag([0.0, 1.0]), V=np.diag([0.0, 1.0]), W1=0, Phi=0, W2=1, N=1,
                   Y_set=pt.box([-1], [1]), W_set=pt.box([-3], [3]), Y_omega=pt.box([-1], [1]),
                   K_L=np.zeros((1, 2)))
    bi = BimpcSpec(P=np.eye(2), Q=np.eye(2), R=np.eye(2),
                   X_set=pt.box([-1], [1]), U_set=pt.box([-2], [2]))
    prob = validate(sys, lo, bi)
    if with_h:
        from .synthesis import synthesize
        art = synthesize(prob, TWOD_G)
        prob = prob.with_stability(art.H)
    return prob


def twod_initial_conditions(problem: Problem, count: int = 5, fill: float = 0.9) -> list:
    """Points spread over angles whose H-level set fills ``fill`` of the largest one inside Xi."""
    from .synthesis import synthesize, max_level
    art = synthesize(problem.with_stability(None), TWOD_G)
    r = fill * max_level(art.H, art.Xi)
    out = []
    for k in range(count):
        th = np.pi * (0.1 + k) / count
        d = np.array([np.cos(th), np.sin(th)])
        out.append(d * np.sqrt(r / (d @ art.H @ d)))
    return out


def _twod():
    prob = twod_problem()
    return Scenario("twod", prob, twod_initial_conditions(prob),
                    defaults={"eps": 0.01, "G": TWOD_G.tolist(), "method": "dual"},
                    description="two-state system with synthesized Lyapunov constraint")


# --------------------------------------------------------------------------- #
# demand response

DR_DEFAULTS = {
    "A": 0.64, "B": 2.64, "beta": 0.10, "q": 6.98,
    "T_d": 22.0, "Phi": 0.02, "W2": 0.01, "N": 24,
    "temp_box": (20.0, 24.0), "duty_box": (0.0, 0.5), "price_box": (5.0, 10.0),
    "peak_weight": 100.0, "peak_hours": (13, 17), "steps": STEPS_PER_DAY,
}


def synthetic_weather(n_steps: int = STEPS_PER_DAY, mean: float = 28.0, amplitude: float = 6.0,
                      peak_hour: float = 15.0) -> np.ndarray:
    """Periodic sinusoidal day sampled every 15 minutes from midnight."""
    hours = np.arange(n_steps) * STEP_MINUTES / 60.0
    return mean + amplitude * np.cos(2 * np.pi * (hours - peak_hour) / 24.0)


def load_weather(path) -> np.ndarray:
    """Read a ``timestamp,temp_c`` CSV on a 15-minute cadence.

    Raises
    ------
    MalformedCsv
        Missing columns, unparsable values or non-increasing timestamps.
    CadenceGap
        Consecutive timestamps more than one sample apart or off-grid.
    """
    times, temps = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "temp_c"} <= set(reader.fieldnames):
            raise MalformedCsv(f"{path}: expected columns timestamp,temp_c")
        for i, row in enumerate(reader, start=2):
            try:
                times.append(datetime.fromisoformat(row["timestamp"].strip()))
                temps.append(float(row["temp_c"]))
            except (ValueError, AttributeError) as exc:
                raise MalformedCsv(f"{path}:{i}: {exc}") from None
    if not temps:
        raise MalformedCsv(f"{path}: no data rows")
    step = timedelta(minutes=STEP_MINUTES)
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        if dt <= timedelta(0):
            raise MalformedCsv(f"{path}: timestamps not increasing at row {i + 2}")
        if dt != step:
            raise CadenceGap(f"{path}: gap of {dt} before row {i + 2}")
    temps = np.asarray(temps)
    if not np.all(np.isfinite(temps)):
        raise MalformedCsv(f"{path}: non-finite temperature")
    return temps


def peak_indices(start_hour: int, end_hour: int, days: int = 2) -> frozenset:
    per_hour = 60 // STEP_MINUTES
    out = []
    for d in range(days):
        base = d * STEPS_PER_DAY
        out.extend(range(base + start_hour * per_hour, base + end_hour * per_hour))
    return frozenset(out)


def demand_response_problem(weather=None, **overrides) -> Problem:
    cfg = {**DR_DEFAULTS, **overrides}
    N = int(cfg["N"])
    steps = int(cfg["steps"])
    if weather is None:
        weather = synthetic_weather(STEPS_PER_DAY)
    weather = np.asarray(weather, dtype=float)
    need = steps + N
    if weather.size < need:
        # the day repeats so receding horizons near midnight see the next morning
        weather = np.resize(weather, need)
    c = (cfg["beta"] * weather + cfg["q"]).reshape(-1, 1)
    sys = SystemModel([[cfg["A"]]], np.zeros((1, 1)), [[-cfg["B"]]], n_x=0, c=c)
    lo_t, hi_t = cfg["temp_box"]
    half = 0.5 * cfg["Phi"]
    lo = LompcSpec(U=1.0, V=1.0, W1=0.0, Phi=half, W2=cfg["W2"], N=N,
                   Y_set=pt.box([lo_t], [hi_t]), W_set=pt.box(*[[v] for v in cfg["duty_box"]]),
                   Y_omega=pt.box([lo_t], [hi_t]), xi_ref=np.array([cfg["T_d"]]))
    bi = BimpcSpec(P=np.zeros((1, 1)), Q=np.zeros((1, 1)), R=np.zeros((2, 2)),
                   X_set=_empty(0), U_set=pt.box(*[[v] for v in cfg["price_box"]]),
                   lin_u=np.ones(1), peak_w=np.array([cfg["peak_weight"]]),
                   peak=peak_indices(*cfg["peak_hours"], days=need // STEPS_PER_DAY + 1))
    return validate(sys, lo, bi)


def _demand_response():
    weather = synthetic_weather(STEPS_PER_DAY)
    prob = demand_response_problem(weather)
    return Scenario("demand-response", prob, [np.array([DR_DEFAULTS["T_d"]])],
                    defaults={"method": "kkt", "steps": STEPS_PER_DAY, "baseline_price": 5.0},
                    weather=weather,
                    description="time-of-use pricing for an air-conditioned room")


_BUILTINS = {
    "ctrb-loss": _ctrb_loss,
    "ctrb-gain": _ctrb_gain,
    "stab-ex1": lambda: Scenario("stab-ex1", _stab_ex1(np.diag([1.0, 0.0])), list(_BASIS),
                                 description="leader cost x1^2 + u0^2; closed loop unstable"),
    "stab-ex1-mod": lambda: Scenario("stab-ex1-mod", _stab_ex1(np.eye(2)), list(_BASIS),
                                     description="leader cost adds y1^2; closed loop stable"),
    "stab-ex2": lambda: Scenario("stab-ex2", _stab_ex2(np.diag([1.0, 0.0])), list(_BASIS),
                                 description="follower never acts; closed loop unstable"),
    "stab-ex2-mod": lambda: Scenario("stab-ex2-mod", _stab_ex2(np.diag([1.0, 3.0])), list(_BASIS),
                                     description="leader cost adds 3 y1^2; closed loop stable"),
    "twod": _twod,
    "demand-response": _demand_response,
}


def names() -> list:
    return list(_BUILTINS)


def builtin(name: str) -> Scenario:
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise UnknownScenario(name) from None
    return factory()


def replace_problem(sc: Scenario, problem: Problem) -> Scenario:
    return dataclasses.replace(sc, problem=problem)
