"""Command-line front end: ``enskog <command> --scenario PATH --out DIR``.

Each command writes ``<command>.csv`` (tabular results) and ``<command>.json``
(a versioned report echoing the inputs) into the output directory and prints
one of them.  Exit codes: 0 success, 2 invalid input, 3 numerical budget,
4 excluded trajectory.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .collision import CollisionQuadrature
from .core import chi_factor
from .dynamics import evolve, event_log, flow_jacobian_fd, trajectory_rows
from .errors import (
    EnskogError,
    EventOrderChanged,
    ExcludedTrajectory,
    InvalidArgument,
    QuadratureBudgetExceeded,
    SurvivalUnderflow,
    UnsupportedOrder,
)
from .genenskog import GESolutionConfig, ge_mild_check
from .residual import SCHEMA_VERSION, decay_flags, epsilon_scan, reports_to_rows
from .scenario import Scenario, ScenarioError, stock_names, stock_path

COMMANDS = ("simulate", "conserve", "reverse", "jacobian", "residual-scan", "ge-check", "validate")

EXIT_OK, EXIT_INVALID, EXIT_BUDGET, EXIT_EXCLUDED = 0, 2, 3, 4


class Table:
    def __init__(self, header, rows=()):
        self.header = list(header)
        self.rows = [list(r) for r in rows]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def records(self):
        return [dict(zip(self.header, (_plain(x) for x in r))) for r in self.rows]


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _plain(x):
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def threads() -> int:
    raw = os.environ.get("ENSKOG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgument(f"ENSKOG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidArgument(f"ENSKOG_THREADS must be a positive integer, got {raw!r}")
    return n


# -- scenario loading -----------------------------------------------------------

def resolve(spec: str) -> Path:
    p = Path(spec)
    if p.exists():
        return p
    if spec in stock_names():
        return Path(str(stock_path(spec)))
    raise InvalidArgument(f"no scenario file or stock scenario named {spec!r}")


def load(args) -> Scenario:
    return apply_overrides(Scenario.load(resolve(args.scenario)), args)


def apply_overrides(sc: Scenario, args) -> Scenario:
    d = dict(sc.raw)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epsilon_ladder:
        try:
            d["epsilon_ladder"] = [float(x) for x in args.epsilon_ladder.split(",") if x.strip()]
        except ValueError:
            raise ScenarioError(f"--epsilon-ladder: expected numbers, got {args.epsilon_ladder!r}") from None
    if args.budget is not None:
        d["budget"] = dict(d.get("budget", {}), samples=args.budget)
    return Scenario.from_dict(d)


def _require_valid(sc: Scenario):
    diag = sc.diagnostics()
    if diag:
        raise ScenarioError("; ".join(diag))


# -- commands -------------------------------------------------------------------

def cmd_validate(sc: Scenario, args):
    diag = sc.diagnostics()
    return Table(["index", "diagnostic"], enumerate(diag)), {"valid": not diag}


def cmd_simulate(sc: Scenario, args):
    _require_valid(sc)
    times = sc.sample_times if sc.sample_times is not None else list(np.linspace(0.0, sc.horizon, 11))
    st = sc.state()
    table = Table(["t", "i", "x", "y", "z", "vx", "vy", "vz"], trajectory_rows(st, [float(t) for t in times]))
    log = event_log(st, max(float(max(times)), 0.0))
    events = [{"t": e.time, "i": e.i, "j": e.j} for e in log]
    return table, {"events": events}


def cmd_conserve(sc: Scenario, args):
    _require_valid(sc)
    st = sc.state()
    log = event_log(st, sc.horizon)
    P0, E0 = st.momentum(), st.energy()
    v = st.velocities.copy()
    rows = []
    expected_total = 0.0
    worst_p = worst_e = 0.0
    for k, e in enumerate(log):
        (vi, vj), (wi, wj) = e.pre, e.post
        g = float(np.dot(vj - vi, e.sigma))
        mu = float(sc.model.mu(abs(g)))
        d_expected = -(1.0 - mu * mu) * g * g / 4.0
        d_actual = 0.5 * (wi @ wi + wj @ wj - vi @ vi - vj @ vj)
        v[e.i], v[e.j] = wi, wj
        expected_total += d_expected
        dp = float(np.max(np.abs(v.sum(0) - P0)))
        de = float(abs(0.5 * np.sum(v * v) - E0 - expected_total))
        worst_p, worst_e = max(worst_p, dp), max(worst_e, de)
        rows.append([k, e.time, e.i, e.j, d_actual, d_expected, dp, de])
    table = Table(["event", "t", "i", "j", "energy_change", "expected_change",
                   "momentum_drift", "energy_drift"], rows)
    return table, {"events": len(log), "max_momentum_drift": worst_p, "max_energy_drift": worst_e}


def cmd_reverse(sc: Scenario, args):
    _require_valid(sc)
    if not sc.model.is_elastic:
        raise ScenarioError("restitution: velocity reversal needs an elastic model")
    st = sc.state()
    out = evolve(st, sc.horizon, wrap=False)
    n_events = len(event_log(st, sc.horizon))
    back = evolve(out.reversed(), sc.horizon, wrap=False).reversed()
    dr = sc.domain.minimum_image(back.positions - st.positions)
    dv = back.velocities - st.velocities
    rows = [[i, *dr[i], *dv[i], float(max(np.max(np.abs(dr[i])), np.max(np.abs(dv[i]))))]
            for i in range(st.n)]
    table = Table(["i", "dx", "dy", "dz", "dvx", "dvy", "dvz", "mismatch"], rows)
    return table, {"events": n_events, "max_mismatch": max(r[-1] for r in rows)}


def cmd_jacobian(sc: Scenario, args):
    """Determinants across the first collision (full map and position block)."""
    _require_valid(sc)
    st = sc.state()
    log = event_log(st, sc.horizon)
    if not len(log):
        raise ScenarioError("jacobian needs at least one collision within the horizon")
    tc = log[0].time
    span = 2.0 * tc if len(log) == 1 else 0.5 * (tc + log[1].time)
    full = flow_jacobian_fd(st, span)
    # a narrow window around the contact isolates the collision itself
    half = 5e-5
    near = evolve(st, tc + half, wrap=False)
    win = flow_jacobian_fd(near, -2 * half, h=1e-8)
    e = log[0]
    chi = float(chi_factor(e.post[0], e.post[1], e.sigma, sc.model))
    rows = [["full_det", full.det], ["full_position_det", full.position_det],
            ["window_det", win.det], ["window_position_det", win.position_det], ["chi", chi]]
    return Table(["quantity", "value"], rows), {"t_collision": tc, "span": span, "window": 2 * half}


def _quad(sc: Scenario) -> CollisionQuadrature:
    q = {"n_theta": 6, "n_phi": 12, "n_v": 6}
    q.update(sc.quad)
    return CollisionQuadrature(**q)


def _scan_one(raw: dict, eps: float):
    sc = Scenario.from_dict(raw)
    probes = (lambda fe: sc.probe_points(eps)) if sc.probes and sc.raw.get("mild", True) else None
    return epsilon_scan(lambda e: sc.evaluator(e), [eps], sc.phis(), probes,
                        order=sc.order, quad=_quad(sc))[0]


def cmd_residual_scan(sc: Scenario, args):
    _require_valid(sc)
    if not sc.phis():
        raise ScenarioError("test_functions: residual-scan needs at least one test function")
    n = threads()
    if n > 1 and len(sc.ladder) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(sc.ladder))) as pool:
            reports = list(pool.map(_scan_one, [sc.raw] * len(sc.ladder), sc.ladder))
    else:
        reports = [_scan_one(sc.raw, eps) for eps in sc.ladder]
    flags = [decay_flags([r.pairing[k] for r in reports]) for k in range(len(reports[0].pairing))]
    reports[-1].decay = tuple(flags)
    table = Table(["epsilon", "phi", "pairing", "pairing_err", "mild_sup", "quad_err"],
                  reports_to_rows(reports))
    return table, {"decay": flags, "mild_decay": decay_flags([r.mild_sup for r in reports])}


def cmd_ge_check(sc: Scenario, args):
    _require_valid(sc)
    if sc.n != 2:
        raise ScenarioError(f"N: ge-check needs exactly two spheres, scenario has {sc.n}")
    t0 = float(sc.raw.get("t0", 0.5))
    probes = [p for p in sc.probe_points() if p[2] >= t0]
    if not probes:
        raise ScenarioError("probes: ge-check needs probe times at or after t0")
    cfg = GESolutionConfig(sc.density(), sc.model, samples=sc.samples, seed=sc.seed)
    res = ge_mild_check(cfg, probes, t0, replicates=sc.replicates, order=sc.order, quad=_quad(sc))
    rows = [[k, p[2], *p[0], *p[1], res.residual[k], res.budget[k], res.lhs[k], res.rhs[k],
             bool(res.residual[k] <= 3 * res.budget[k])] for k, p in enumerate(probes)]
    table = Table(["probe", "t", "x", "y", "z", "vx", "vy", "vz", "residual", "budget",
                   "lhs", "rhs", "within_3_budget"], rows)
    return table, {"t0": t0, "passed": res.passed, "sup": res.sup}


HANDLERS = {
    "simulate": cmd_simulate,
    "conserve": cmd_conserve,
    "reverse": cmd_reverse,
    "jacobian": cmd_jacobian,
    "residual-scan": cmd_residual_scan,
    "ge-check": cmd_ge_check,
    "validate": cmd_validate,
}


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enskog", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file, or the name of a stock scenario")
    p.add_argument("--out", default=None, help="output directory (default: print only)")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--epsilon-ladder", default=None,
                   help="comma-separated kernel widths as fractions of a")
    p.add_argument("--budget", type=int, default=None, help="Monte Carlo samples per estimate")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="what to print on stdout")
    return p


def _code(exc: BaseException) -> int:
    if isinstance(exc, ExcludedTrajectory):
        return EXIT_EXCLUDED
    if isinstance(exc, (QuadratureBudgetExceeded, SurvivalUnderflow, EventOrderChanged, UnsupportedOrder)):
        return EXIT_BUDGET
    return EXIT_INVALID


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise InvalidArgument("--seed must fit in an unsigned 64-bit integer")
        if args.budget is not None and args.budget < 1:
            raise InvalidArgument("--budget must be positive")
        n_threads = threads()
        sc = load(args)
        table, summary = HANDLERS[args.command](sc, args)
    except (EnskogError, OSError, json.JSONDecodeError) as exc:
        code = _code(exc) if isinstance(exc, EnskogError) else EXIT_INVALID
        print(f"enskog {args.command}: {exc}", file=sys.stderr)
        return code
    report = {
        "schema": SCHEMA_VERSION,
        "command": args.command,
        "version": __version__,
        "inputs": {"scenario": sc.echo(), "seed": args.seed, "budget": args.budget,
                   "epsilon_ladder": args.epsilon_ladder, "threads": n_threads},
        "summary": {k: _plain(v) if not isinstance(v, (list, tuple)) else [_plain(x) for x in v]
                    for k, v in summary.items()},
        "table": table.records(),
        "wall_time": time.perf_counter() - started,
    }
    csv_text = table.csv()
    json_text = json.dumps(report, indent=2, default=_plain) + "\n"
    if args.out:
        out = Path(args.out)
        _atomic_write(out / f"{args.command}.csv", csv_text)
        _atomic_write(out / f"{args.command}.json", json_text)
    sys.stdout.write(csv_text if args.format == "csv" else json_text)
    if args.command == "validate" and not summary["valid"]:
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
