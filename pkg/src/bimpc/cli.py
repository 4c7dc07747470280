"""Command-line front end.

Subcommands: synthesize, invariant-set, step, simulate, compare and
``scenario list``.  Exit codes: 0 success, 2 configuration error, 3 solver
failure on every point.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dual_reform as dr
from . import kkt_reform as kr
from . import polytope as pt
from . import scenarios as sc
from . import sim
from . import synthesis as syn
from .errors import BimpcError, NotStabilizable, StepInfeasible, UnknownScenario
from .model import validate
from .polytope import PolytopeH

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
DIGITS = 12

log = logging.getLogger("bimpc")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- #
# output helpers


def _fmt(obj):
    """Round floats to 12 significant digits for JSON output."""
    if isinstance(obj, dict):
        return {k: _fmt(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_fmt(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if not np.isfinite(v) else float(f"{v:.{DIGITS}g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_fmt(obj), indent=2, sort_keys=False) + "\n"


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit(text: str, out):
    if out:
        _write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------- #
# scenario loading


def _poly(d, dim):
    if d is None:
        return None
    if isinstance(d, dict) and "lo" in d:
        return pt.box(d["lo"], d["hi"])
    return PolytopeH.from_dict(d, dim)


_POLY_FIELDS = {"Y_set", "W_set", "Y_omega", "X_set", "U_set"}


def _apply(spec, fields: dict):
    upd = {}
    for k, v in fields.items():
        if not hasattr(spec, k):
            raise ConfigError(f"unknown field {k!r} for {type(spec).__name__}")
        if k in _POLY_FIELDS:
            v = _poly(v, getattr(spec, k).dim)
        elif k == "peak":
            v = frozenset(v)
        elif v is not None and k not in ("N", "n_x"):
            v = np.asarray(v, dtype=float)
        upd[k] = v
    return dataclasses.replace(spec, **upd)


def load_scenario(name_or_path: str, weather=None, horizon=None) -> sc.Scenario:
    """Built-in name or JSON override file.

    Override files hold ``base`` (a built-in name) and optional ``system``,
    ``lo``, ``bi`` field overrides (matrices as row-major nested lists,
    polytopes as {"F", "g"} or {"lo", "hi"}), ``xi0``, ``defaults`` and, for
    demand response, ``dr`` parameter overrides and ``weather``.
    """
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        try:
            cfg = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario file {path}: {exc}") from None
    else:
        cfg = {"base": name_or_path}
    base = cfg.get("base")
    if base is None:
        raise ConfigError("scenario file needs a 'base' built-in name")
    try:
        scen = sc.builtin(base)
    except UnknownScenario:
        raise ConfigError(f"unknown scenario {base!r}; see 'bimpc scenario list'") from None
    w_src = weather if weather is not None else cfg.get("weather")
    if base == "demand-response" and (w_src is not None or cfg.get("dr") or horizon):
        wv = scen.weather
        if isinstance(w_src, str):
            wv = sc.load_weather(w_src)
        elif w_src is not None:
            wv = np.asarray(w_src, dtype=float)
        extra = dict(cfg.get("dr", {}))
        if horizon:
            extra["N"] = horizon
        scen = dataclasses.replace(scen, problem=sc.demand_response_problem(wv, **extra), weather=wv)
    prob = scen.problem
    if any(k in cfg for k in ("system", "lo", "bi")):
        system = _apply(prob.system, cfg.get("system", {}))
        lo = _apply(prob.lo, cfg.get("lo", {}))
        bi = _apply(prob.bi, cfg.get("bi", {}))
        prob = validate(system, lo, bi)
    if horizon and base != "demand-response":
        prob = prob.with_horizon(horizon)
    scen = dataclasses.replace(scen, problem=prob)
    if "xi0" in cfg:
        scen = dataclasses.replace(scen, xi0=[np.asarray(x, dtype=float) for x in cfg["xi0"]])
    if "defaults" in cfg:
        scen = dataclasses.replace(scen, defaults={**scen.defaults, **cfg["defaults"]})
    return scen


def _vec(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


def _mat_arg(text: str) -> np.ndarray:
    try:
        return np.array([[float(v) for v in row.split(",")] for row in text.split(";")])
    except ValueError:
        raise ConfigError(f"cannot parse matrix {text!r}") from None


def _gain(args, scen):
    if getattr(args, "G", None):
        return _mat_arg(args.G)
    if "G" in scen.defaults:
        return np.asarray(scen.defaults["G"], dtype=float)
    return None


def _method_opts(args, scen) -> tuple:
    method = args.method or scen.defaults.get("method", "dual")
    if method not in ("dual", "kkt"):
        raise ConfigError(f"unknown method {method!r}")
    if method == "dual" and args.kappa0 is not None:
        raise ConfigError("--kappa0 applies only to --method kkt")
    if method == "kkt" and args.eps is not None:
        raise ConfigError("--eps applies only to --method dual")
    opts = {}
    if method == "dual":
        opts["eps"] = args.eps if args.eps is not None else scen.defaults.get("eps", dr.DEFAULT_EPS)
        opts["seed"] = args.seed
        opts["multistart"] = args.multistart
    else:
        opts["kappa0"] = args.kappa0 if args.kappa0 is not None else kr.KAPPA0
    return method, opts


def _xi_list(args, scen) -> list:
    if getattr(args, "xi0", None):
        out = [_vec(x) for x in args.xi0]
    else:
        out = [np.asarray(x, dtype=float) for x in scen.xi0]
    p = scen.problem.p
    for x in out:
        if x.shape != (p,):
            raise ConfigError(f"initial state {x.tolist()} must have length {p}")
    return out


# --------------------------------------------------------------------------- #
# subcommands


def cmd_synthesize(args) -> int:
    scen = load_scenario(args.scenario, horizon=args.horizon)
    prob = scen.problem.with_stability(None)
    try:
        art = syn.synthesize(prob, _gain(args, scen))
    except NotStabilizable as exc:
        sys.stderr.write(f"error: {exc}\nA_Z = {np.asarray(exc.A_Z).tolist()}\n"
                         f"B_Z = {np.asarray(exc.B_Z).tolist()}\n")
        return EXIT_SOLVER
    report = {"scenario": scen.name, **art.to_dict()}
    xs = [_vec(x) for x in args.xi0] if args.xi0 else []
    report["level_set_checks"] = [
        {"xi0": x, "inside": syn.level_set_inside_xi(art.H, x, art.Xi)} for x in xs]
    _emit(_dumps(report), args.out)
    return EXIT_OK


def cmd_invariant_set(args) -> int:
    scen = load_scenario(args.scenario, horizon=args.horizon)
    prob = scen.problem
    s, lo, bi = prob.system, prob.lo, prob.bi
    K_L = lo.K_L if lo.K_L is not None else np.zeros((s.n_w, s.p))
    omega = pt.compute_invariant_set(s, K_L, bi.X_set, lo.Y_set, lo.W_set, bi.U_set,
                                     max_iter=args.max_iter)
    rep = pt.verify_invariant(s, K_L, bi.X_set, lo.Y_set, lo.W_set, bi.U_set, omega)
    out = {"scenario": scen.name, "Y_omega": omega.to_dict(), "facets": omega.n_rows,
           "max_violation": rep.max_violation, "verified": rep.ok()}
    _emit(_dumps(out), args.out)
    return EXIT_OK


def cmd_step(args) -> int:
    scen = load_scenario(args.scenario, horizon=args.horizon)
    method, opts = _method_opts(args, scen)
    xs = _xi_list(args, scen)
    results, failures = [], 0
    for x in xs:
        try:
            u0, w0, xn, st = sim.step(scen.problem, method, x, args.t, **opts)
            results.append({"xi": x, "u0": u0, "w0": w0, "xi_next": xn, "leader_cost": st.leader_cost,
                            "follower_value": st.follower_value, "gap": st.gap, "status": "ok"})
        except StepInfeasible as exc:
            failures += 1
            results.append({"xi": x, "status": "StepInfeasible", "diagnostics": exc.diagnostics})
    _emit(_dumps({"scenario": scen.name, "method": method, "steps": results}), args.out)
    return EXIT_SOLVER if xs and failures == len(xs) else EXIT_OK


def _summary(prob, traj, converge_tol=1e-3):
    ms = [r["ms"] for r in traj.records if r["ms"] is not None]
    X = traj.states
    return {
        "status": traj.status,
        "failure_index": traj.failure_index,
        "steps_completed": len(traj.records) - 1 if traj.status == "ok" else len(traj.records) - 1,
        "final_norm": float(np.linalg.norm(X[-1])),
        "converged": bool(traj.status == "ok" and np.linalg.norm(X[-1]) < converge_tol),
        "peak_consumption": sim.peak_consumption(prob, traj),
        "mean_ms": float(np.mean(ms)) if ms else None,
        "max_ms": float(np.max(ms)) if ms else None,
    }


def cmd_simulate(args) -> int:
    scen = load_scenario(args.scenario, weather=args.weather, horizon=args.horizon)
    method, opts = _method_opts(args, scen)
    steps = args.steps if args.steps is not None else scen.defaults.get("steps", 50)
    xs = _xi_list(args, scen)
    out_dir = Path(args.out_dir)
    trajs = sim.simulate_many(scen.problem, method, xs, steps, jobs=args.jobs, **opts)
    summary = {"scenario": scen.name, "method": method, "steps": steps, "options": opts,
               "trajectories": []}
    for i, (x, tr) in enumerate(zip(xs, trajs)):
        name = f"traj_{i:03d}.csv"
        _write_atomic(out_dir / name, tr.to_csv(timing=args.timing))
        summary["trajectories"].append({"file": name, "xi0": x, **_summary(scen.problem, tr)})
    base_price = scen.defaults.get("baseline_price")
    if args.baseline or (args.baseline is None and base_price is not None):
        price = base_price if base_price is not None else 0.0
        for i, x in enumerate(xs):
            tr = sim.simulate_fixed_leader(scen.problem, x, steps, price)
            name = f"baseline_{i:03d}.csv"
            _write_atomic(out_dir / name, tr.to_csv(timing=args.timing))
            summary.setdefault("baseline", []).append(
                {"file": name, "xi0": x, "price": price, **_summary(scen.problem, tr)})
    _write_atomic(out_dir / "summary.json", _dumps(summary))
    ok = sum(t.status == "ok" for t in trajs)
    sys.stdout.write(f"{ok}/{len(trajs)} trajectories completed; output in {out_dir}\n")
    return EXIT_SOLVER if trajs and ok == 0 else EXIT_OK


def _compare_point(args):
    problem, x, eps, seed, kappa0 = args
    row = {"xi0": x}
    t = time.perf_counter()
    try:
        sol = dr.solve_pdb(dr.build_pdb(problem, x, eps), seed=seed)
        row.update(dual_objective=sol.objective, dual_u0=sol.u[0], dual_gap=sol.gap,
                   dual_status="ok")
    except BimpcError as exc:
        row.update(dual_status=type(exc).__name__)
    row["dual_ms"] = 1e3 * (time.perf_counter() - t)
    t = time.perf_counter()
    try:
        _, msol = kr.auto_kappa(problem, x, kappa0)
        row.update(kkt_objective=msol.objective, kkt_u0=msol.u[0], kkt_gap=msol.gap,
                   kkt_status="ok")
    except BimpcError as exc:
        row.update(kkt_status=type(exc).__name__)
    row["kkt_ms"] = 1e3 * (time.perf_counter() - t)
    if row["dual_status"] == "ok" and row["kkt_status"] == "ok":
        row["objective_diff"] = abs(row["dual_objective"] - row["kkt_objective"])
        row["u0_diff"] = float(np.linalg.norm(np.asarray(row["dual_u0"]) - row["kkt_u0"]))
    return row


def compare_points(problem, xs, eps, seed=0, kappa0=kr.KAPPA0, jobs=1) -> list:
    work = [(problem, np.asarray(x, dtype=float), eps, seed, kappa0) for x in xs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_compare_point, work))
    return [_compare_point(w) for w in work]


def cmd_compare(args) -> int:
    scen = load_scenario(args.scenario, horizon=args.horizon)
    if args.xi0:
        xs = _xi_list(args, scen)
    elif args.grid:
        xs = syn.sample_initial_states(scen.problem, args.grid, seed=args.seed, G=_gain(args, scen))
    else:
        xs = _xi_list(args, scen)
    eps = args.eps if args.eps is not None else 1e-4
    kappa0 = args.kappa0 if args.kappa0 is not None else kr.KAPPA0
    rows = compare_points(scen.problem, xs, eps, args.seed, kappa0, jobs=args.jobs)
    diffs = [r["objective_diff"] for r in rows if "objective_diff" in r]
    udiffs = [r["u0_diff"] for r in rows if "u0_diff" in r]
    out = {"scenario": scen.name, "eps": eps, "points": rows,
           "max_objective_diff": max(diffs) if diffs else None,
           "max_u0_diff": max(udiffs) if udiffs else None}
    if scen.problem.N == 1 and scen.problem.bi.H is None and len(xs) == scen.problem.p \
            and np.allclose(np.array(xs), np.eye(scen.problem.p)):
        # the maps describe the exact bilevel policy, so the dual side uses eps = 0
        maps = {}
        for m in ("dual", "kkt"):
            extra = {"eps": 0.0, "seed": args.seed} if m == "dual" else {"kappa0": kappa0}
            try:
                maps[m] = sim.fit_closed_loop_map(scen.problem, m, **extra)
            except BimpcError as exc:
                maps[m] = type(exc).__name__
        out["closed_loop_maps"] = maps
    _emit(_dumps(out), args.out)
    return EXIT_SOLVER if rows and not diffs else EXIT_OK


def cmd_scenario_list(args) -> int:
    for name in sc.names():
        sys.stdout.write(f"{name:18s} {sc.builtin(name).description}\n")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("BIMPC_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bimpc", description="Bilevel MPC toolkit")
    ap.add_argument("--jobs", type=int, default=_jobs_default(),
                    help="worker processes for independent points (default $BIMPC_JOBS or 1)")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--scenario", required=True, help="built-in name or JSON override file")
        p.add_argument("--horizon", type=int, default=None)
        p.add_argument("--xi0", action="append", help="initial state 'a,b,...' (repeatable)")
        p.add_argument("--out", default=None, help="output file (default stdout)")
        p.add_argument("--seed", type=int, default=0)
        if method:
            p.add_argument("--method", choices=["dual", "kkt"], default=None)
            p.add_argument("--eps", type=float, default=None, help="duality-gap tolerance (dual)")
            p.add_argument("--kappa0", type=float, default=None, help="initial big-M (kkt)")
            p.add_argument("--multistart", type=int, default=5)

    p = sub.add_parser("synthesize", help="stabilizing synthesis report")
    common(p, method=False)
    p.add_argument("--G", default=None, help="gain as 'a,b;c,d' (rows separated by ';')")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("invariant-set", help="robust invariant follower set")
    common(p, method=False)
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_invariant_set)

    p = sub.add_parser("step", help="single receding-horizon step")
    common(p)
    p.add_argument("--t", type=int, default=0, help="absolute time index")
    p.set_defaults(func=cmd_step)

    p = sub.add_parser("simulate", help="closed-loop simulation")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out-dir", default="bimpc-out")
    p.add_argument("--weather", default=None, help="timestamp,temp_c CSV (demand response)")
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=None,
                   help="also run the flat-price baseline")
    p.add_argument("--timing", action="store_true",
                   help="write wall times into the CSV (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="dual vs KKT reformulation on a set of states")
    common(p)
    p.add_argument("--grid", type=int, default=None, help="number of sampled states in Xi")
    p.add_argument("--G", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("scenario", help="scenario utilities")
    ssub = p.add_subparsers(dest="action", required=True)
    q = ssub.add_parser("list")
    q.set_defaults(func=cmd_scenario_list)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError, ValueError, BimpcError) as exc:
        if isinstance(exc, BimpcError) and not isinstance(exc, (KeyError, ValueError)):
            sys.stderr.write(f"solver error: {exc}\n")
            return EXIT_SOLVER
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
