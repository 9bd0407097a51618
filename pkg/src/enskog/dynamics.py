"""Event-driven flow of N hard spheres, forward and backward in time."""
from __future__ import annotations

import csv
import heapq
import itertools
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .core import ELASTIC, RestitutionModel, collide_inelastic, inverse_collision
from .errors import (
    CollisionCapExceeded,
    EventOrderChanged,
    GrazingCollision,
    InvalidArgument,
    InvalidState,
    SimultaneousCollision,
)

TOL_GRAZING = 1e-9
TOL_TIME = 1e-12
COLLISION_CAP = 10 ** 6
OVERLAP_TOL = 1e-12

_IMAGES = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


@dataclass(frozen=True)
class Domain:
    """Free space when ``box`` is None, otherwise the torus with these side lengths."""

    box: Optional[tuple] = None

    @classmethod
    def torus(cls, alpha: float, beta: float, gamma: float) -> "Domain":
        return cls((float(alpha), float(beta), float(gamma)))

    @property
    def is_torus(self) -> bool:
        return self.box is not None

    def minimum_image(self, dr):
        dr = np.asarray(dr, dtype=float)
        if self.box is None:
            return dr
        L = np.asarray(self.box)
        return dr - L * np.round(dr / L)

    def wrap(self, r):
        r = np.asarray(r, dtype=float)
        if self.box is None:
            return r
        L = np.asarray(self.box)
        return r - L * np.floor(r / L)

    def check(self, a: float):
        if self.box is not None and min(self.box) <= 2 * a:
            raise InvalidState("box length must exceed 2a")

    def to_spec(self):
        return {"kind": "free"} if self.box is None else {"kind": "torus", "box": list(self.box)}


FREE_SPACE = Domain()


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    i: int
    j: int
    sigma: np.ndarray
    pre: tuple
    post: tuple


@dataclass
class EventLog:
    events: List[CollisionEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, k):
        return self.events[k]

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events])

    def signature(self):
        return [(e.i, e.j) for e in self.events]


@dataclass(frozen=True)
class SystemState:
    positions: np.ndarray
    velocities: np.ndarray
    a: float
    domain: Domain = FREE_SPACE
    model: RestitutionModel = ELASTIC
    time: float = 0.0

    def __post_init__(self):
        r = np.array(self.positions, dtype=float).reshape(-1, 3)
        v = np.array(self.velocities, dtype=float).reshape(-1, 3)
        if r.shape != v.shape:
            raise InvalidState("positions and velocities differ in length")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise InvalidState("non-finite phase coordinates")
        if not self.a > 0:
            raise InvalidState("diameter must be positive")
        self.domain.check(self.a)
        r.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "velocities", v)
        d = self.min_distance()
        if d < self.a - OVERLAP_TOL * max(1.0, self.a):
            raise InvalidState(f"spheres overlap: minimum distance {d!r} < a")

    @property
    def n(self) -> int:
        return len(self.positions)

    def min_distance(self) -> float:
        if self.n < 2:
            return np.inf
        i, j = np.triu_indices(self.n, 1)
        dr = self.domain.minimum_image(self.positions[j] - self.positions[i])
        return float(np.min(np.linalg.norm(dr, axis=1)))

    def momentum(self) -> np.ndarray:
        return self.velocities.sum(axis=0)

    def energy(self) -> float:
        return 0.5 * float(np.sum(self.velocities ** 2))

    def with_phase(self, positions, velocities, time=None, check=True) -> "SystemState":
        if check:
            return replace(self, positions=positions, velocities=velocities,
                           time=self.time if time is None else time)
        obj = object.__new__(SystemState)
        for k, val in (("positions", np.asarray(positions, float)),
                       ("velocities", np.asarray(velocities, float)),
                       ("a", self.a), ("domain", self.domain), ("model", self.model),
                       ("time", self.time if time is None else time)):
            object.__setattr__(obj, k, val)
        return obj

    def reversed(self) -> "SystemState":
        return self.with_phase(self.positions, -self.velocities, check=False)

    def wrapped(self) -> "SystemState":
        return self.with_phase(self.domain.wrap(self.positions), self.velocities, check=False)


def _forward_times(rel, u, a):
    """Smallest t >= 0 with |rel + u t| = a for approaching pairs, else inf."""
    if np.ndim(u) == 1:
        # one velocity against a stack of offsets (the event loop)
        b = rel @ u
        uu = float(u @ u)
    else:
        b = np.einsum("...i,...i->...", rel, u)
        uu = np.einsum("...i,...i->...", u, u)
    c = np.einsum("...i,...i->...", rel, rel) - a * a
    disc = b * b - uu * c
    ok = (b < 0) & (disc >= 0) & (uu > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        # c / (-b + sqrt(disc)) is the cancellation-free form of (-b - sqrt(disc)) / uu
        t = np.where(ok, c / (-b + np.sqrt(np.where(ok, disc, 0.0))), np.inf)
    return np.where(ok, np.maximum(t, 0.0), np.inf)


def time_to_collision(p1, p2, a: float, domain: Domain = FREE_SPACE) -> Optional[float]:
    """Forward time until two spheres first touch, or None if they never do."""
    r1, v1 = (np.asarray(x, float) for x in p1)
    r2, v2 = (np.asarray(x, float) for x in p2)
    rel = domain.minimum_image(r2 - r1)
    if np.linalg.norm(rel) < a - OVERLAP_TOL * max(1.0, a):
        raise InvalidState("overlapping input")
    u = v2 - v1
    if not domain.is_torus:
        t = float(np.min(_forward_times(rel, u, a)))
        return None if not np.isfinite(t) else t
    speed = float(np.linalg.norm(u))
    if speed == 0.0:
        return None
    # advance in windows of half a box, over which the nearest images suffice;
    # a line of irrational slope can take arbitrarily long, so give up eventually
    step = 0.5 * min(domain.box) / speed
    elapsed = 0.0
    for _ in range(10 ** 5):
        t = float(np.min(_forward_times(rel + _IMAGES * np.asarray(domain.box), u, a)))
        if t <= step:
            return elapsed + t
        rel = domain.minimum_image(rel + u * step)
        elapsed += step
    return None


class _Engine:
    """Priority-queue event loop; direction -1 runs the inelastic flow backward."""

    def __init__(self, state: SystemState, direction: int, cap: int,
                 tol_grazing: float, tol_time: float):
        self.r = np.array(state.positions, dtype=float)
        self.v = np.array(state.velocities, dtype=float)
        self.a = state.a
        self.domain = state.domain
        self.model = state.model
        self.direction = direction
        self.cap = cap
        self.tol_grazing = tol_grazing
        self.tol_time = tol_time
        self.n = len(self.r)
        self.now = 0.0
        self.count = np.zeros(self.n, dtype=int)
        self.queue: list = []
        speed = np.max(np.linalg.norm(self.v, axis=1)) if self.n else 0.0
        self.speed_scale = max(float(speed), 1.0)

    def _predict(self, i, j):
        rel = self.domain.minimum_image(self.r[j] - self.r[i])
        if self.domain.is_torus:
            rel = rel + _IMAGES * np.asarray(self.domain.box)
        u = self.direction * (self.v[j] - self.v[i])
        t = float(np.min(_forward_times(rel, u, self.a)))
        if self.domain.is_torus:
            # the nearest images only stay valid while the pair moves less than half a box
            speed = float(np.linalg.norm(u))
            horizon = 0.5 * min(self.domain.box) / speed if speed > 0 else np.inf
            if t > horizon:
                if np.isfinite(horizon):
                    heapq.heappush(self.queue, (self.now + horizon, i, j, self.count[i], self.count[j], 1))
                return
        if np.isfinite(t):
            heapq.heappush(self.queue, (self.now + t, i, j, self.count[i], self.count[j], 0))

    def _predict_all(self, spheres=None):
        if spheres is None:
            for i, j in itertools.combinations(range(self.n), 2):
                self._predict(i, j)
            return
        done = set()
        for i in spheres:
            for k in range(self.n):
                if k == i:
                    continue
                pair = (min(i, k), max(i, k))
                if pair not in done:
                    done.add(pair)
                    self._predict(*pair)

    def _pop_valid(self):
        while self.queue:
            t, i, j, ci, cj, _ = self.queue[0]
            if ci == self.count[i] and cj == self.count[j]:
                return self.queue[0]
            heapq.heappop(self.queue)
        return None

    def _next_collision(self):
        """Earliest valid collision entry, skipping re-prediction markers."""
        live = [e for e in self.queue
                if not e[5] and e[3] == self.count[e[1]] and e[4] == self.count[e[2]]]
        return min(live) if live else None

    def run(self, duration: float):
        events = []
        self._predict_all()
        while True:
            head = self._pop_valid()
            if head is None or head[0] > duration:
                break
            heapq.heappop(self.queue)
            t, i, j = head[0], head[1], head[2]
            if head[5]:
                self.r += self.direction * self.v * (t - self.now)
                self.now = t
                self._predict(i, j)
                continue
            nxt = self._next_collision()
            if nxt is not None and nxt[0] - t <= self.tol_time and {i, j} & {nxt[1], nxt[2]}:
                raise SimultaneousCollision(f"events at t={t!r} and t={nxt[0]!r} share a sphere")
            self.r += self.direction * self.v * (t - self.now)
            self.now = t
            rel = self.domain.minimum_image(self.r[i] - self.r[j])
            sigma = rel / np.linalg.norm(rel)
            vi, vj = self.v[i].copy(), self.v[j].copy()
            gn = float(np.dot(vj - vi, sigma))
            if abs(gn) < self.tol_grazing * self.speed_scale:
                raise GrazingCollision(f"grazing collision between {i} and {j} at t={t!r}")
            if self.direction > 0:
                wi, wj = collide_inelastic(vi, vj, sigma, self.model)
            else:
                wi, wj = inverse_collision(vi, vj, sigma, self.model)
            self.v[i], self.v[j] = wi, wj
            self.count[i] += 1
            self.count[j] += 1
            events.append(CollisionEvent(self.direction * t, i, j, sigma, (vi, vj), (wi.copy(), wj.copy())))
            if len(events) > self.cap:
                raise CollisionCapExceeded(f"more than {self.cap} collisions")
            self._predict_all((i, j))
        self.r += self.direction * self.v * (duration - self.now)
        self.now = duration
        return events


def _run(state: SystemState, t: float, cap: int = COLLISION_CAP,
         tol_grazing: float = TOL_GRAZING, tol_time: float = TOL_TIME):
    if t == 0:
        return state, EventLog()
    if t < 0 and state.model.is_elastic:
        back, log = _run(state.reversed(), -t, cap, tol_grazing, tol_time)
        events = [CollisionEvent(-e.time, e.i, e.j, e.sigma,
                                 (-e.pre[0], -e.pre[1]), (-e.post[0], -e.post[1]))
                  for e in log.events]
        return back.with_phase(back.positions, -back.velocities,
                               time=state.time + t, check=False), EventLog(events)
    eng = _Engine(state, 1 if t > 0 else -1, cap, tol_grazing, tol_time)
    events = eng.run(abs(t))
    return state.with_phase(eng.r, eng.v, time=state.time + t, check=False), EventLog(events)


def evolve(state: SystemState, t: float, *, wrap: bool = True, cap: int = COLLISION_CAP,
           tol_grazing: float = TOL_GRAZING, tol_time: float = TOL_TIME) -> SystemState:
    """Exact hard-sphere trajectory over time t (negative t runs backward)."""
    out, _ = _run(state, t, cap, tol_grazing, tol_time)
    return out.wrapped() if wrap else out


def event_log(state: SystemState, horizon: float, **kw) -> EventLog:
    """Collision events in [0, horizon] (times relative to ``state.time``)."""
    if horizon < 0:
        raise InvalidArgument("horizon must be non-negative")
    return _run(state, horizon, **kw)[1]


def partition_times(log: EventLog, horizon: float) -> List[float]:
    """Instants 0 = T0 < T1 < ... <= horizon with at most one collision per sphere per cell.

    Cut points are midpoints between consecutive event times, so none of them
    coincides with a collision.
    """
    cuts = [0.0]
    seen: set = set()
    prev = None
    for e in sorted(log.events, key=lambda e: e.time):
        if e.time > horizon:
            break
        if {e.i, e.j} & seen:
            cuts.append(0.5 * (prev + e.time))
            seen = set()
        seen |= {e.i, e.j}
        prev = e.time
    if horizon > cuts[-1]:
        cuts.append(float(horizon))
    return cuts


@dataclass(frozen=True)
class JacobianResult:
    matrix: np.ndarray
    det: float
    position_det: float
    signature: list


def flow_jacobian_fd(state: SystemState, t: float, h: float = 1e-6,
                     safety: Optional[float] = None) -> JacobianResult:
    """Central-difference Jacobian of the flow map over time t.

    ``det`` is the full 6N x 6N determinant; ``position_det`` is the determinant
    of the position block (velocities held fixed).
    """
    base, log = _run(state, t)
    safety = 100 * h if safety is None else safety
    for e in log.events:
        if abs(e.time) < safety or abs(abs(e.time) - abs(t)) < safety:
            raise EventOrderChanged("a collision lies within the safety window of the endpoints")
    sig = log.signature()
    x0 = np.concatenate([state.positions.ravel(), state.velocities.ravel()])
    n3 = state.positions.size
    cols = []
    for k in range(len(x0)):
        outs = []
        for s in (1.0, -1.0):
            x = x0.copy()
            x[k] += s * h
            pert = state.with_phase(x[:n3].reshape(-1, 3), x[n3:].reshape(-1, 3), check=False)
            res, plog = _run(pert, t)
            if plog.signature() != sig:
                raise EventOrderChanged("perturbation changed the collision sequence")
            outs.append(np.concatenate([res.positions.ravel(), res.velocities.ravel()]))
        cols.append((outs[0] - outs[1]) / (2 * h))
    J = np.array(cols).T
    return JacobianResult(J, float(np.linalg.det(J)), float(np.linalg.det(J[:n3, :n3])), sig)


def write_trajectory_csv(path, state: SystemState, times: Sequence[float]) -> None:
    """Rows (t, i, x, y, z, vx, vy, vz) at the requested sample times."""
    with open(path, "w", newline="") as fh:
        write_trajectory_rows(fh, state, times)


def trajectory_rows(state: SystemState, times: Sequence[float]):
    current, t_now = state, 0.0
    for t in sorted(times):
        current = evolve(current, t - t_now)
        t_now = t
        for i in range(current.n):
            yield (t, i, *current.positions[i], *current.velocities[i])


def write_trajectory_rows(fh, state: SystemState, times: Sequence[float]) -> None:
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(["t", "i", "x", "y", "z", "vx", "vy", "vz"])
    for row in trajectory_rows(state, times):
        w.writerow([row[0], row[1]] + [format(x, ".17g") for x in row[2:]])


# -- vectorized few-body flow in free space -----------------------------------

@dataclass
class BatchFlow:
    positions: np.ndarray
    velocities: np.ndarray
    jacobian: np.ndarray
    n_events: np.ndarray
    valid: np.ndarray
    event_times: Optional[np.ndarray] = None


def flow_batch(r, v, t, a: float, model: RestitutionModel = ELASTIC,
               max_events: int = 64, record: int = 0) -> BatchFlow:
    """Evolve a batch of free-space N-sphere systems over time t.

    ``r`` and ``v`` have shape (B, N, 3); ``t`` is a scalar or shape (B,).
    ``jacobian`` is |d(state at t)/d(state at 0)|: the product of chi over
    backward events and of 1/chi over forward ones.  Rows whose input overlaps
    are flagged invalid and left untouched.
    """
    r = np.array(r, dtype=float)
    v = np.array(v, dtype=float)
    B, N, _ = r.shape
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    direction = np.where(t < 0, -1.0, 1.0)
    remaining = np.abs(t).copy()
    logj = np.zeros(B)
    nev = np.zeros(B, dtype=int)
    pairs = list(itertools.combinations(range(N), 2))
    valid = np.ones(B, dtype=bool)
    etimes = np.full((B, max(record, 0)), np.inf)
    for i, j in pairs:
        d = np.linalg.norm(r[:, j] - r[:, i], axis=1)
        valid &= d >= a * (1 - 1e-12)
    active = valid & (remaining > 0)
    if not pairs:
        r += (direction * remaining)[:, None, None] * v
        return BatchFlow(r, v, np.ones(B), nev, valid, etimes if record else None)
    for _ in range(max_events + 1):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        rr, vv, dd = r[idx], v[idx], direction[idx]
        times = np.stack([_forward_times(rr[:, j] - rr[:, i], dd[:, None] * (vv[:, j] - vv[:, i]), a)
                          for i, j in pairs], axis=1)
        k = np.argmin(times, axis=1)
        tau = times[np.arange(len(idx)), k]
        hit = tau < remaining[idx]
        step = np.where(hit, tau, remaining[idx])
        r[idx] += (dd * step)[:, None, None] * vv
        remaining[idx] -= step
        done = idx[~hit]
        remaining[done] = 0.0
        active[done] = False
        for p, (i, j) in enumerate(pairs):
            rows = idx[hit & (k == p)]
            if rows.size == 0:
                continue
            rel = r[rows, i] - r[rows, j]
            sigma = rel / np.linalg.norm(rel, axis=1, keepdims=True)
            vi, vj = v[rows, i], v[rows, j]
            fwd = direction[rows] > 0
            wi = np.empty_like(vi)
            wj = np.empty_like(vj)
            if fwd.any():
                wi[fwd], wj[fwd] = collide_inelastic(vi[fwd], vj[fwd], sigma[fwd], model)
                g_post = np.abs(np.einsum("ij,ij->i", wj[fwd] - wi[fwd], sigma[fwd]))
                if not model.is_elastic:
                    logj[rows[fwd]] -= np.log(model.chi(g_post))
            if (~fwd).any():
                b = ~fwd
                wi[b], wj[b] = inverse_collision(vi[b], vj[b], sigma[b], model)
                g_post = np.abs(np.einsum("ij,ij->i", vj[b] - vi[b], sigma[b]))
                if not model.is_elastic:
                    logj[rows[b]] += np.log(model.chi(g_post))
            v[rows, i], v[rows, j] = wi, wj
            if record:
                slot = nev[rows]
                keep = slot < record
                etimes[rows[keep], slot[keep]] = np.abs(t[rows[keep]]) - remaining[rows[keep]]
            nev[rows] += 1
    else:
        raise CollisionCapExceeded(f"batch flow exceeded {max_events} events")
    return BatchFlow(r, v, np.exp(logj), nev, valid, etimes if record else None)
