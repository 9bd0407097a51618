"""JSON scenario files: sphere data, kernels, budgets and probe specifications."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import RestitutionModel
from .dynamics import FREE_SPACE, Domain, SystemState, evolve
from .errors import InvalidArgument
from .fields import FieldEvaluator, InitialDensity, TestFunction

DEFAULT_LADDER = (0.2, 0.1, 0.05, 0.025)


class ScenarioError(InvalidArgument):
    """Malformed scenario file; the message names the offending field."""


def _need(d, key, where):
    if key not in d:
        raise ScenarioError(f"{where}: missing field '{key}'")
    return d[key]


def _vec(x, where):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected three numbers") from None
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{where}: expected three finite numbers")
    return arr


@dataclass
class Scenario:
    name: str
    a: float
    positions: np.ndarray
    velocities: np.ndarray
    domain: Domain = FREE_SPACE
    model: RestitutionModel = field(default_factory=RestitutionModel.elastic)
    epsilon: float = 0.05
    ladder: tuple = DEFAULT_LADDER
    samples: int = 4096
    order: int = 8
    quad: dict = field(default_factory=dict)
    replicates: int = 4
    seed: int = 0
    horizon: float = 3.0
    sample_times: Optional[List[float]] = None
    test_functions: list = field(default_factory=list)
    probes: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    # -- loading ------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario root must be an object")
        init = _need(d, "initial", "scenario")
        if not isinstance(init, list) or not init:
            raise ScenarioError("initial: expected a non-empty list of spheres")
        pos = np.array([_vec(_need(s, "q", f"initial[{k}]"), f"initial[{k}].q") for k, s in enumerate(init)])
        vel = np.array([_vec(_need(s, "w", f"initial[{k}]"), f"initial[{k}].w") for k, s in enumerate(init)])
        if "N" in d and int(d["N"]) != len(init):
            raise ScenarioError(f"N: declared {d['N']} but initial lists {len(init)} spheres")
        dom = d.get("domain", {"kind": "free"})
        kind = dom.get("kind", "free")
        if kind == "free":
            domain = FREE_SPACE
        elif kind == "torus":
            box = _need(dom, "box", "domain")
            if len(box) != 3:
                raise ScenarioError("domain.box: expected three lengths")
            domain = Domain.torus(*map(float, box))
        else:
            raise ScenarioError(f"domain.kind: unknown value {kind!r}")
        try:
            model = RestitutionModel.from_spec(d.get("restitution", {"kind": "elastic"}))
        except InvalidArgument as exc:
            raise ScenarioError(f"restitution: {exc}") from None
        budget = d.get("budget", {})
        a = float(_need(d, "a", "scenario"))
        return cls(
            name=str(d.get("name", "unnamed")),
            a=a,
            positions=pos,
            velocities=vel,
            domain=domain,
            model=model,
            epsilon=float(d.get("epsilon", 0.05)) * a,
            ladder=tuple(float(x) * a for x in d.get("epsilon_ladder", DEFAULT_LADDER)),
            samples=int(budget.get("samples", 4096)),
            order=int(budget.get("order", 8)),
            quad={k: int(budget[k]) for k in ("n_theta", "n_phi", "n_v") if k in budget},
            replicates=int(budget.get("replicates", 4)),
            seed=int(d.get("seed", 0)),
            horizon=float(d.get("horizon", 3.0)),
            sample_times=d.get("sample_times"),
            test_functions=list(d.get("test_functions", [])),
            probes=list(d.get("probes", [])),
            raw=d,
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)

    # -- checks -------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.positions)

    def diagnostics(self) -> List[str]:
        """Every violated invariant; an empty list means the scenario is valid."""
        out = []
        if not self.a > 0:
            return ["diameter a must be positive"]
        if self.domain.is_torus and min(self.domain.box) <= 2 * self.a:
            out.append("box length must exceed 2a")
        widths = [self.epsilon] + list(self.ladder)
        if any(not e > 0 for e in widths):
            out.append("epsilon ladder entries must be positive")
        if any(b >= a for a, b in zip(self.ladder, self.ladder[1:])):
            out.append("epsilon ladder must be strictly decreasing")
        eps = max(widths)
        for i in range(self.n):
            for j in range(i + 1, self.n):
                d = np.linalg.norm(self.domain.minimum_image(self.positions[j] - self.positions[i]))
                if d <= self.a + 2 * eps:
                    out.append(f"support separation violated (spheres {i}, {j}: "
                               f"|q_i - q_j| = {d:.6g} <= a + 2 eps = {self.a + 2 * eps:.6g})")
        if self.horizon <= 0:
            out.append("horizon must be positive")
        if self.samples < 1:
            out.append("budget.samples must be positive")
        return out

    # -- builders -----------------------------------------------------------

    def state(self) -> SystemState:
        return SystemState(self.positions, self.velocities, self.a, self.domain, self.model)

    def density(self, eps: Optional[float] = None) -> InitialDensity:
        return InitialDensity.from_centers(self.positions, self.velocities,
                                           self.epsilon if eps is None else eps, self.a, self.domain)

    def evaluator(self, eps: Optional[float] = None, samples: Optional[int] = None,
                  seed: Optional[int] = None) -> FieldEvaluator:
        return FieldEvaluator(self.density(eps), self.model, samples=samples or self.samples,
                              seed=self.seed if seed is None else seed,
                              horizon=max(self.horizon, 1.0))

    def phis(self) -> List[TestFunction]:
        out = []
        for k, spec in enumerate(self.test_functions):
            kind = spec.get("kind")
            where = f"test_functions[{k}]"
            if kind == "bump":
                out.append(TestFunction.bump(_vec(_need(spec, "r0", where), where + ".r0"),
                                             _vec(_need(spec, "v0", where), where + ".v0"),
                                             float(_need(spec, "t0", where)),
                                             float(_need(spec, "wr", where)),
                                             float(_need(spec, "wv", where)),
                                             float(_need(spec, "wt", where))))
            elif kind == "plateau":
                out.append(TestFunction.plateau(
                    _vec(spec["r_lo"], where), _vec(spec["r_hi"], where),
                    _vec(spec["v_lo"], where), _vec(spec["v_hi"], where),
                    float(spec["t_lo"]), float(spec["t_hi"]),
                    float(spec["margin_r"]), float(spec["margin_v"]), float(spec["margin_t"])))
            else:
                raise ScenarioError(f"{where}.kind: unknown value {kind!r}")
        return out

    def probe_points(self, eps: Optional[float] = None):
        """Concrete (r, v, t) probes; offsets given in units of the kernel width."""
        eps = self.epsilon if eps is None else eps
        st = self.state()
        out = []
        for k, spec in enumerate(self.probes):
            kind = spec.get("kind")
            off_r = np.asarray(spec.get("offset_r", [0, 0, 0]), float) * eps
            off_v = np.asarray(spec.get("offset_v", [0, 0, 0]), float) * eps
            for t in spec.get("times", []):
                t = float(t)
                if kind == "nominal":
                    s = evolve(st, t, wrap=False)
                    i = int(spec["sphere"])
                    out.append((s.positions[i] + off_r, s.velocities[i] + off_v, t))
                elif kind == "ghost":
                    i = int(spec["sphere"])
                    out.append((self.positions[i] + self.velocities[i] * t + off_r,
                                self.velocities[i] + off_v, t))
                else:
                    raise ScenarioError(f"probes[{k}].kind: unknown value {kind!r}")
        for spec in self.raw.get("points", []):
            out.append((_vec(spec["r"], "points.r"), _vec(spec["v"], "points.v"), float(spec["t"])))
        return out

    def echo(self) -> dict:
        return dict(self.raw)


def stock_names() -> List[str]:
    pkg = resources.files("enskog") / "scenarios"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".json"))


def stock_path(name: str):
    return resources.files("enskog") / "scenarios" / f"{name}.json"


def load_stock(name: str) -> Scenario:
    return Scenario.load(stock_path(name))
