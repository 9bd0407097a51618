"""Regularized one- and two-particle fields built from kernel initial data.

The initial density is a sum of N kernels.  Two one-particle fields are
evaluated from it:

* ``f_eps``: every kernel streams freely, plus a gain term that adds the
  post-collision states of every kernel pair that has collided by time t;
* ``F1``: the exact one-particle marginal of the N-sphere flow, written as the
  free term weighted by a survival probability plus the same gain term.

Pointwise values come from Monte Carlo in initial coordinates with common
random numbers, so each evaluator is a deterministic, smooth function of its
arguments for a fixed seed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import (ELASTIC, Kernel, RestitutionModel, Support, _BUMP_MASS, bump, bump_grad,
                   collide_inelastic, sample_ball_bump)
from .dynamics import (FREE_SPACE, Domain, SystemState, _forward_times, event_log,
                       flow_batch, partition_times)
from .errors import InvalidArgument, InvalidState, QuadratureBudgetExceeded

DEFAULT_BUDGET = 2 * 10 ** 8


def _seq(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def _as_points(r, v, t=None):
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    scalar = r.ndim == 1
    r = r.reshape(-1, 3)
    v = v.reshape(-1, 3)
    if t is None:
        return r, v, scalar
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(r),)).copy()
    return r, v, t, scalar


def _out(x, scalar):
    return float(x[0]) if scalar else x


# -- initial data -------------------------------------------------------------

@dataclass(frozen=True)
class InitialDensity:
    """Sum of N unit kernels centred at (q_i, w_i)."""

    kernels: Tuple[Kernel, ...]
    a: float
    domain: Domain = FREE_SPACE

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        problems = self.diagnostics()
        if problems:
            raise InvalidState("; ".join(problems))

    @classmethod
    def from_centers(cls, positions, velocities, eps: float, a: float,
                     domain: Domain = FREE_SPACE) -> "InitialDensity":
        ks = tuple(Kernel(tuple(q), tuple(w), eps) for q, w in zip(positions, velocities))
        return cls(ks, a, domain)

    def diagnostics(self) -> List[str]:
        out = []
        if not self.a > 0:
            out.append("diameter must be positive")
        if self.domain.is_torus and min(self.domain.box) <= 2 * self.a:
            out.append("box length must exceed 2a")
        for i, j in itertools.combinations(range(len(self.kernels)), 2):
            ki, kj = self.kernels[i], self.kernels[j]
            d = np.linalg.norm(self.domain.minimum_image(
                np.subtract(kj.position, ki.position)))
            if d <= self.a + ki.eps + kj.eps:
                out.append(f"support separation violated for kernels {i} and {j}")
        return out

    @property
    def n(self) -> int:
        return len(self.kernels)

    @property
    def eps(self) -> float:
        return max(k.eps for k in self.kernels)

    @property
    def positions(self) -> np.ndarray:
        return np.array([k.position for k in self.kernels])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([k.velocity for k in self.kernels])

    def with_eps(self, eps: float) -> "InitialDensity":
        return InitialDensity.from_centers(self.positions, self.velocities, eps, self.a, self.domain)

    def center_state(self, model: RestitutionModel = ELASTIC) -> SystemState:
        return SystemState(self.positions, self.velocities, self.a, self.domain, model)

    def __call__(self, r, v):
        return eval_f0(self, r, v)

    def sample(self, rng: np.random.Generator, n: int):
        """Joint initial states, sphere i drawn from kernel i; shape (n, N, 3)."""
        r = np.empty((n, self.n, 3))
        v = np.empty((n, self.n, 3))
        for i, k in enumerate(self.kernels):
            r[:, i], v[:, i] = k.sample(rng, n)
        return r, v


def eval_f0(d: InitialDensity, r, v):
    r, v, scalar = _as_points(r, v)
    out = np.zeros(len(r))
    for k in d.kernels:
        out += k(r, v) if len(r) > 1 else np.atleast_1d(k(r, v))
    return _out(out, scalar)


# -- test functions -----------------------------------------------------------

def _taper(x, lo, hi, m):
    """1 on [lo, hi], C1 smoothstep down to 0 over a margin m on each side."""
    below = np.clip((lo - x) / m, 0.0, 1.0)
    above = np.clip((x - hi) / m, 0.0, 1.0)
    u = np.maximum(below, above)
    val = 1.0 - u * u * (3.0 - 2.0 * u)
    du = np.where(below > 0, -1.0 / m, np.where(above > 0, 1.0 / m, 0.0))
    return val, -6.0 * u * (1.0 - u) * du


def _radial(x, c, w):
    d = x - c
    s = np.linalg.norm(d, axis=-1) / w
    val = bump(s)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(s[..., None] > 0, (bump_grad(s) / (w * w * np.where(s > 0, s, 1.0)))[..., None] * d, 0.0)
    return val, g


@dataclass(frozen=True)
class _Term:
    coef: float
    kind: str
    params: tuple

    def eval(self, r, v, t):
        """(value, grad_r, d/dt) for one term."""
        if self.kind == "bump":
            r0, v0, t0, wr, wv, wt = self.params
            br, gr = _radial(r, np.asarray(r0), wr)
            bv, _ = _radial(v, np.asarray(v0), wv)
            st = (t - t0) / wt
            bt = bump(np.abs(st))
            dt = bump_grad(np.abs(st)) * np.sign(st) / wt
            base = self.coef * bv
            return base * br * bt, (base * bt)[..., None] * gr, base * br * dt
        lo_r, hi_r, m_r, lo_v, hi_v, m_v, t_lo, t_hi, m_t = self.params
        pr, dpr = _taper(r, np.asarray(lo_r), np.asarray(hi_r), m_r)
        pv, _ = _taper(v, np.asarray(lo_v), np.asarray(hi_v), m_v)
        pt, dpt = _taper(t, t_lo, t_hi, m_t)
        prod_r = np.prod(pr, axis=-1)
        grad = np.stack([dpr[..., k] * np.prod(np.delete(pr, k, axis=-1), axis=-1)
                         for k in range(3)], axis=-1)
        base = self.coef * np.prod(pv, axis=-1)
        return base * prod_r * pt, (base * pt)[..., None] * grad, base * prod_r * dpt

    def t_breaks(self):
        if self.kind == "bump":
            t0, wt = self.params[2], self.params[5]
            return (t0 - wt, t0, t0 + wt)
        lo, hi, m = self.params[6], self.params[7], self.params[8]
        return (lo - m, lo, hi, hi + m)

    def t_range(self):
        if self.kind == "bump":
            t0, wt = self.params[2], self.params[5]
            return t0 - wt, t0 + wt
        return self.params[6] - self.params[8], self.params[7] + self.params[8]


@dataclass(frozen=True)
class TestFunction:
    """Linear combination of C1 profiles in (r, v, t) with compact support.

    ``bump`` builds a product of radial bumps; ``plateau`` equals one on a
    box and tapers to zero over the given margins.
    """

    __test__ = False

    terms: Tuple[_Term, ...]

    @classmethod
    def bump(cls, r0, v0, t0: float, wr: float, wv: float, wt: float,
             scale: float = 1.0) -> "TestFunction":
        if min(wr, wv, wt) <= 0:
            raise InvalidArgument("bump widths must be positive")
        p = (tuple(map(float, r0)), tuple(map(float, v0)), float(t0), float(wr), float(wv), float(wt))
        return cls((_Term(float(scale), "bump", p),))

    @classmethod
    def plateau(cls, r_lo, r_hi, v_lo, v_hi, t_lo: float, t_hi: float,
                margin_r: float, margin_v: float, margin_t: float,
                scale: float = 1.0) -> "TestFunction":
        if min(margin_r, margin_v, margin_t) <= 0:
            raise InvalidArgument("taper margins must be positive")
        p = (tuple(map(float, r_lo)), tuple(map(float, r_hi)), float(margin_r),
             tuple(map(float, v_lo)), tuple(map(float, v_hi)), float(margin_v),
             float(t_lo), float(t_hi), float(margin_t))
        return cls((_Term(float(scale), "plateau", p),))

    def __add__(self, other: "TestFunction") -> "TestFunction":
        return TestFunction(self.terms + other.terms)

    def __mul__(self, c: float) -> "TestFunction":
        return TestFunction(tuple(_Term(c * t.coef, t.kind, t.params) for t in self.terms))

    __rmul__ = __mul__

    @property
    def t_max(self) -> float:
        return max(t.t_range()[1] for t in self.terms)

    @property
    def t_breaks(self) -> np.ndarray:
        """Instants where the time profile is not smooth, for quadrature splitting."""
        return np.unique([b for term in self.terms for b in term.t_breaks() if b > 0])

    @property
    def t_min(self) -> float:
        return max(0.0, min(t.t_range()[0] for t in self.terms))

    def _all(self, r, v, t):
        r = np.asarray(r, float)
        v = np.asarray(v, float)
        t = np.asarray(t, float)
        val = 0.0
        grad = 0.0
        dt = 0.0
        for term in self.terms:
            a, b, c = term.eval(r, v, t)
            val, grad, dt = val + a, grad + b, dt + c
        return val, grad, dt

    def __call__(self, r, v, t):
        return self._all(r, v, t)[0]

    def grad_r(self, r, v, t):
        return self._all(r, v, t)[1]

    def dt(self, r, v, t):
        return self._all(r, v, t)[2]

    def transport(self, r, v, t):
        """d phi/dt + v . grad_r phi."""
        _, g, d = self._all(r, v, t)
        return d + np.einsum("...i,...i->...", np.asarray(v, float), g)


# -- two-body pushforward -----------------------------------------------------

def two_body(p1, u1, p2, u2, t, a: float, model: RestitutionModel = ELASTIC):
    """Free-space two-sphere flow from (p, u) at time 0 to time t >= 0.

    Returns positions, velocities and the contact time tau (inf if none).
    Spheres collide at most once in free space.
    """
    t = np.asarray(t, dtype=float)
    tau = _forward_times(p2 - p1, u2 - u1, a)
    hit = tau < t
    ts = np.where(hit, tau, 0.0)[..., None]
    c1 = p1 + u1 * ts
    c2 = p2 + u2 * ts
    sig = c1 - c2
    nrm = np.linalg.norm(sig, axis=-1, keepdims=True)
    sig = np.where(nrm > 0, sig / np.where(nrm > 0, nrm, 1.0), np.array([1.0, 0, 0]))
    w1, w2 = collide_inelastic(u1, u2, sig, model)
    w1 = np.where(hit[..., None], w1, u1)
    w2 = np.where(hit[..., None], w2, u2)
    rest = (t[..., None] - ts)
    x1 = np.where(hit[..., None], c1 + w1 * rest, p1 + u1 * t[..., None])
    x2 = np.where(hit[..., None], c2 + w2 * rest, p2 + u2 * t[..., None])
    return x1, w1, x2, w2, tau


# -- evaluator ---------------------------------------------------------------

class FieldEvaluator:
    """Pointwise and paired evaluation of f_eps, F1 and F2 for one initial density.

    ``samples`` is the Monte Carlo size per pair and per point; random numbers
    are drawn once per evaluator so repeated calls agree exactly.
    """

    def __init__(self, initial: InitialDensity, model: RestitutionModel = ELASTIC, *,
                 samples: int = 4096, seed: int = 0, horizon: float = 10.0,
                 budget: int = DEFAULT_BUDGET):
        if initial.domain.is_torus:
            raise InvalidArgument("field evaluation is implemented in free space only")
        self.initial = initial
        self.model = model
        self.samples = int(samples)
        self.seed = int(seed)
        self.horizon = float(horizon)
        self.budget = int(budget)
        self.a = initial.a
        self.nominal_log = event_log(initial.center_state(model), self.horizon)
        self.partition = partition_times(self.nominal_log, self.horizon)
        n = initial.n
        rng = _seq(self.seed, 1)
        K = self.samples
        self._u_r = sample_ball_bump(rng, n * K).reshape(n, K, 3)
        self._u_v = sample_ball_bump(rng, n * K).reshape(n, K, 3)
        self._u_gain_v = sample_ball_bump(rng, K)
        self._u_disk = np.sqrt(rng.random(K))[:, None] * np.stack(
            [np.cos(th := 2 * np.pi * rng.random(K)), np.sin(th)], axis=1)
        self._u_s = rng.random(K)
        self._support_cache = {}

    # bookkeeping

    @property
    def n(self) -> int:
        return self.initial.n

    @property
    def pointwise_limit(self) -> float:
        """Largest t for which pointwise F1/F2 formulas hold (first partition cell)."""
        return np.inf if self.n <= 2 else self.partition[1]

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise InvalidArgument("t must be non-negative")
        if np.any(t > self.pointwise_limit + 1e-12):
            raise InvalidArgument("pointwise evaluation is limited to the first partition cell")

    def _charge(self, work: float):
        if work > self.budget:
            raise QuadratureBudgetExceeded(f"requested {work:.3g} samples, budget {self.budget}")

    def _partner(self, j):
        k = self.initial.kernels[j]
        return (np.asarray(k.position) + k.eps * self._u_r[j],
                np.asarray(k.velocity) + k.eps * self._u_v[j])

    # free term and survival

    def free(self, r, v, t):
        r, v, t, scalar = _as_points(r, v, t)
        return _out(np.asarray(eval_f0(self.initial, r - v * t[:, None], v)).reshape(-1), scalar)

    def survival(self, r, v, t, return_error: bool = False):
        """(1/(N-1)) sum_j P[partner j does not meet (r, v) in backward time t]."""
        r, v, t, scalar = _as_points(r, v, t)
        self._check_time(t)
        if self.n < 2:
            one = np.ones(len(r))
            return (_out(one, scalar), _out(0 * one, scalar)) if return_error else _out(one, scalar)
        self._charge(len(r) * self.samples * self.n)
        acc = np.zeros((len(r), self.samples))
        for j in range(self.n):
            p, u = self._partner(j)
            for lo in range(0, len(r), 256):
                sl = slice(lo, lo + 256)
                x2 = p[None] + u[None] * t[sl, None, None]
                rel = x2 - r[sl, None]
                relv = u[None] - v[sl, None]
                far = np.linalg.norm(rel, axis=-1) >= self.a
                tb = _forward_times(rel, -relv, self.a)
                acc[sl] += far & (tb > t[sl, None])
        acc /= self.n - 1
        mean = acc.mean(axis=1)
        if not return_error:
            return _out(mean, scalar)
        return _out(mean, scalar), _out(acc.std(axis=1) / math.sqrt(self.samples), scalar)

    # gain term

    def _gain_pair(self, r, v, t, i, j):
        """Per-sample gain estimates for kernels (i, j); shape (M, K)."""
        a = self.a
        ki, kj = self.initial.kernels[i], self.initial.kernels[j]
        eps_i, eps_j = ki.eps, kj.eps
        wi, wj = np.asarray(ki.velocity), np.asarray(kj.velocity)
        qi = np.asarray(ki.position)
        v1pp = wi + eps_i * self._u_gain_v                   # (K,3)
        d = v1pp[None] - v[:, None]                          # (M,K,3)
        kappa = np.linalg.norm(d, axis=-1)
        ok = kappa > 0
        kap = np.where(ok, kappa, 1.0)
        sig = d / kap[..., None]
        lam, dlam = self.model.lambda_from_kappa(kap)
        chi = np.ones_like(lam) if self.model.is_elastic else self.model.chi(lam)
        v1s = np.einsum("mi,mki->mk", v, sig)
        par2 = v1s + lam - kap
        wpar = sig @ wj
        rho2 = eps_j ** 2 - (par2 - wpar) ** 2
        ok &= rho2 > 0
        rho = np.sqrt(np.where(ok, rho2, 0.0))
        # orthonormal frame perpendicular to sigma
        helper = np.where(np.abs(sig[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        e1 = np.cross(sig, helper)
        e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
        e2 = np.cross(sig, e1)
        wperp = wj - wpar[..., None] * sig
        v2pp = (wperp + rho[..., None] * (self._u_disk[:, :1] * e1 + self._u_disk[:, 1:] * e2)
                + par2[..., None] * sig)
        # collision time s in (0, t) with p1(s) = A - kappa sigma s inside the ball around q_i
        A = r - v * t[:, None]
        D = A - qi
        ds = np.einsum("mi,mki->mk", D, sig)
        disc = ds ** 2 - np.einsum("mi,mi->m", D, D)[:, None] + eps_i ** 2
        ok &= disc > 0
        sq = np.sqrt(np.where(disc > 0, disc, 0.0))
        lo = np.maximum((ds - sq) / kap, 0.0)
        hi = np.minimum((ds + sq) / kap, t[:, None])
        length = hi - lo
        ok &= length > 0
        s = lo + np.where(ok, length, 0.0) * self._u_s
        p1 = A[:, None] - kap[..., None] * sig * s[..., None]
        x1 = r[:, None] - v[:, None] * (t[:, None, None] - s[..., None])
        p2 = x1 + a * sig - v2pp * s[..., None]
        dens1_over_q = ki.norm * bump(np.linalg.norm(p1 - qi, axis=-1) / eps_i) * _BUMP_MASS * eps_i ** 3
        dens2 = np.asarray(kj(p2, v2pp))
        w = (a * a * lam * chi * dlam / kap ** 2 * dens1_over_q * dens2
             * math.pi * rho ** 2 * length)
        return np.where(ok, w, 0.0)

    def _maybe_scattered(self, r, v, t, i, j):
        """Indices of points that can carry gain from pair (i, j)."""
        times = np.unique(t)
        if len(times) > 64:
            return np.arange(len(r))
        keep = np.zeros(len(r), dtype=bool)
        for tv in times:
            sel = t == tv
            if tv < self._first_contact(i, j):
                continue
            sup = self.scatter_support(i, j, float(tv))
            if sup is None:
                continue
            keep |= sel & (np.linalg.norm(r - sup.position, axis=1) <= sup.r_radius) \
                & (np.linalg.norm(v - sup.velocity, axis=1) <= sup.v_radius)
        return np.nonzero(keep)[0]

    def gain(self, r, v, t, return_error: bool = False):
        """Post-collision (B+) term, common to f_eps and F1."""
        r, v, t, scalar = _as_points(r, v, t)
        self._check_time(t)
        M = len(r)
        mean = np.zeros(M)
        se = np.zeros(M)
        if self.n >= 2:
            self._charge(M * self.samples * self.n * (self.n - 1))
            pairs = list(itertools.permutations(range(self.n), 2))
            rows = {p: self._maybe_scattered(r, v, t, *p) for p in pairs}
            union = np.unique(np.concatenate([rows[p] for p in pairs]))
            for lo in range(0, len(union), 128):
                blk = union[lo:lo + 128]
                acc = np.zeros((len(blk), self.samples))
                for i, j in pairs:
                    sub = np.isin(blk, rows[(i, j)])
                    if sub.any():
                        b = blk[sub]
                        acc[sub] += self._gain_pair(r[b], v[b], t[b], i, j)
                acc /= self.n - 1
                mean[blk] = acc.mean(axis=1)
                se[blk] = acc.std(axis=1) / math.sqrt(self.samples)
        if not return_error:
            return _out(mean, scalar)
        return _out(mean, scalar), _out(se, scalar)

    # one-particle fields

    def f_eps(self, r, v, t, return_error: bool = False):
        r, v, t, scalar = _as_points(r, v, t)
        g, se = self.gain(r, v, t, return_error=True)
        val = np.asarray(self.free(r, v, t)).reshape(-1) + g
        return (_out(val, scalar), _out(se, scalar)) if return_error else _out(val, scalar)

    def F1(self, r, v, t, return_error: bool = False):
        r, v, t, scalar = _as_points(r, v, t)
        free = np.asarray(self.free(r, v, t)).reshape(-1)
        S = np.ones_like(free)
        se_s = np.zeros_like(free)
        m = free > 0
        if m.any():
            S[m], se_s[m] = self.survival(r[m], v[m], t[m], return_error=True)
        g, se_g = self.gain(r, v, t, return_error=True)
        val = free * S + g
        se = np.hypot(free * se_s, se_g)
        return (_out(val, scalar), _out(se, scalar)) if return_error else _out(val, scalar)

    # two-particle field

    def F2(self, x1, x2, t, return_error: bool = False):
        """Two-particle marginal at (x1, x2) = ((r1, v1), (r2, v2))."""
        r1, v1, s1 = _as_points(*x1)
        r2, v2, _ = _as_points(*x2)
        t = np.broadcast_to(np.asarray(t, float), (len(r1),)).copy()
        self._check_time(t)
        if np.any(np.linalg.norm(r2 - r1, axis=1) < self.a * (1 - 1e-12)):
            raise InvalidArgument("F2 arguments overlap")
        if self.n < 2:
            raise InvalidArgument("F2 needs at least two spheres")
        if self.n == 2:
            flow = flow_batch(np.stack([r1, r2], 1), np.stack([v1, v2], 1), -t, self.a, self.model)
            f1 = np.asarray(eval_f0(self.initial, flow.positions[:, 0], flow.velocities[:, 0])).reshape(-1)
            f2 = np.asarray(eval_f0(self.initial, flow.positions[:, 1], flow.velocities[:, 1])).reshape(-1)
            val = np.where(flow.valid, f1 * f2 * flow.jacobian, 0.0)
            return (_out(val, s1), _out(0 * val, s1)) if return_error else _out(val, s1)
        val, se = self._F2_mc(r1, v1, r2, v2, t)
        return (_out(val, s1), _out(se, s1)) if return_error else _out(val, s1)

    def _F2_mc(self, r1, v1, r2, v2, t):
        n, K = self.n, self.samples
        self._charge(len(r1) * K * math.factorial(n))
        vals = np.zeros(len(r1))
        ses = np.zeros(len(r1))
        for m in range(len(r1)):
            prop = PushforwardProposal(self, float(t[m]))
            total = np.zeros(K)
            for i, j in itertools.permutations(range(n), 2):
                rest = [k for k in range(n) if k not in (i, j)]
                rng = _seq(self.seed, 7, m, i, j)
                xs = [prop.sample(k, rng, K) for k in rest]
                q = np.prod([prop.density(k, *x) for k, x in zip(rest, xs)], axis=0)
                order = [i, j] + rest
                R = np.empty((K, n, 3))
                V = np.empty((K, n, 3))
                R[:, 0], V[:, 0] = r1[m], v1[m]
                R[:, 1], V[:, 1] = r2[m], v2[m]
                for c, x in enumerate(xs):
                    R[:, 2 + c], V[:, 2 + c] = x
                flow = flow_batch(R, V, -t[m], self.a, self.model)
                dens = np.ones(K)
                for c, k in enumerate(order):
                    dens *= np.asarray(self.initial.kernels[k](flow.positions[:, c], flow.velocities[:, c]))
                w = np.where(flow.valid & (q > 0), dens * flow.jacobian / np.where(q > 0, q, 1.0), 0.0)
                total += w
            vals[m] = total.mean()
            ses[m] = total.std() / math.sqrt(K)
        return vals, ses

    # supports

    def scatter_support(self, i: int, j: int, t: float, samples: int = 2048) -> Optional[Support]:
        """Bound on sphere i's post-collision states from pair (i, j) at time t.

        Every sampled pair that ever touches is extrapolated along its
        post-collision line to time t, whether or not the contact has
        happened yet, so the ball also covers the states reached later in
        the collision window.
        """
        key = (i, j, float(t), samples)
        hit = self._support_cache.get(key)
        if hit is not None or key in self._support_cache:
            return hit
        rng = _seq(self.seed, 3, i, j)
        p1, u1 = self.initial.kernels[i].sample(rng, samples)
        p2, u2 = self.initial.kernels[j].sample(rng, samples)
        tau = _forward_times(p2 - p1, u2 - u1, self.a)
        ok = np.isfinite(tau)
        out = None
        if ok.any():
            x1, w1, _, _, _ = two_body(p1[ok], u1[ok], p2[ok], u2[ok], tau[ok] + 1.0, self.a, self.model)
            x1 = x1 + w1 * (t - tau[ok] - 1.0)[:, None]
            c, cv = x1.mean(0), w1.mean(0)
            eps = self.initial.eps
            rr = np.linalg.norm(x1 - c, axis=1).max()
            rv = np.linalg.norm(w1 - cv, axis=1).max()
            out = Support(c, cv, 1.25 * rr + 0.25 * eps, 1.25 * rv + 0.25 * eps)
        self._support_cache[key] = out
        return out

    def supports(self, t: float) -> List[Support]:
        """Ball bounds for the free-streamed kernels and the scattered pair components."""
        out = []
        for k in self.initial.kernels:
            pos = np.asarray(k.position) + np.asarray(k.velocity) * t
            out.append(Support(pos, np.asarray(k.velocity), k.eps * (1 + abs(t)) * 1.0001, k.eps * 1.0001))
        for i, j in itertools.permutations(range(self.n), 2):
            sup = self.scatter_support(i, j, t)
            if sup is not None and t >= self._first_contact(i, j):
                out.append(sup)
        return out

    def _first_contact(self, i, j, samples: int = 2048) -> float:
        key = ("first", i, j)
        if key not in self._support_cache:
            rng = _seq(self.seed, 3, i, j)
            p1, u1 = self.initial.kernels[i].sample(rng, samples)
            p2, u2 = self.initial.kernels[j].sample(rng, samples)
            tau = _forward_times(p2 - p1, u2 - u1, self.a)
            # slack: the sampled minimum is not the exact lower edge of the window
            ki, kj = self.initial.kernels[i], self.initial.kernels[j]
            speed = np.linalg.norm(np.subtract(ki.velocity, kj.velocity)) + 2 * (ki.eps + kj.eps)
            sampled = float(tau.min()) - 4 * (ki.eps + kj.eps) / max(speed, 1e-12)
            # centres cannot close faster than the largest relative speed
            gap = np.linalg.norm(np.subtract(ki.position, kj.position)) - 2 * (ki.eps + kj.eps) - self.a
            self._support_cache[key] = max(sampled, gap / max(speed, 1e-12))
        return self._support_cache[key]


class PushforwardProposal:
    """Per-sphere proposal at time t for importance sampling over extra spheres.

    Equal-weight mixture of the freely streamed kernel and a Gaussian fitted
    to N-sphere pushforward samples (covariance inflated fourfold).
    """

    def __init__(self, fe: FieldEvaluator, t: float, fit_samples: int = 2000):
        self.fe = fe
        self.t = t
        rng = _seq(fe.seed, 11, int(round(t * 1e6)))
        R, V = fe.initial.sample(rng, fit_samples)
        flow = flow_batch(R, V, t, fe.a, fe.model)
        eps = fe.initial.eps
        self.gauss = []
        for k in range(fe.n):
            X = np.concatenate([flow.positions[flow.valid, k], flow.velocities[flow.valid, k]], axis=1)
            mu = X.mean(0)
            cov = 4.0 * np.cov(X.T) + (0.01 * eps) ** 2 * np.eye(6)
            L = np.linalg.cholesky(cov)
            logdet = 2 * np.log(np.diag(L)).sum()
            self.gauss.append((mu, L, logdet))

    def sample(self, k, rng, n):
        kern = self.fe.initial.kernels[k]
        p, u = kern.sample(rng, n)
        mu, L, _ = self.gauss[k]
        g = mu + rng.normal(size=(n, 6)) @ L.T
        pick = rng.random(n) < 0.5
        r = np.where(pick[:, None], p + u * self.t, g[:, :3])
        v = np.where(pick[:, None], u, g[:, 3:])
        return r, v

    def density(self, k, r, v):
        kern = self.fe.initial.kernels[k]
        free = np.asarray(kern(r - v * self.t, v))
        mu, L, logdet = self.gauss[k]
        z = np.linalg.solve(L, (np.concatenate([r, v], axis=1) - mu).T)
        gauss = np.exp(-0.5 * (z * z).sum(0) - 0.5 * logdet - 3 * np.log(2 * np.pi))
        return 0.5 * free + 0.5 * gauss


# -- module-level entry points ------------------------------------------------

def eval_f_eps(fe: FieldEvaluator, r, v, t):
    return fe.f_eps(r, v, t)


def eval_F1(fe: FieldEvaluator, r, v, t):
    return fe.F1(r, v, t)


def eval_F2(fe: FieldEvaluator, x1, x2, t):
    return fe.F2(x1, x2, t)


# -- pairings with test functions --------------------------------------------

@dataclass
class PairingSamples:
    """Per-sample time integrals (length K) for the two one-particle fields."""

    f_eps: np.ndarray
    F1: np.ndarray

    @staticmethod
    def _stat(x):
        return float(x.mean()), float(x.std() / math.sqrt(len(x)))


def _gauss(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * w


def pairing_samples(fe: FieldEvaluator, phi: TestFunction, *, samples: Optional[int] = None,
                    order: int = 8, transport: bool = False, seed: Optional[int] = None,
                    max_events: int = 16) -> PairingSamples:
    """Integrate phi (or its transport derivative) along sampled trajectories.

    Each sample draws one N-sphere initial state.  F1 follows the true flow;
    f_eps follows every sphere freely plus, with weight 1/(N-1), the
    two-sphere collided trajectory of each ordered pair after its contact.
    Time nodes are Gauss points between breakpoints at all event and contact
    times, shared by both fields.
    """
    K = int(samples or fe.samples)
    n, a, model = fe.n, fe.a, fe.model
    T = phi.t_max
    if T <= 0:
        z = np.zeros(K)
        return PairingSamples(z, z.copy())
    rng = _seq(fe.seed if seed is None else seed, 5)
    R, V = fe.initial.sample(rng, K)
    fn = phi.transport if transport else phi
    fwd = flow_batch(R, V, T, a, model, max_events=max_events, record=max_events)
    pairs = list(itertools.permutations(range(n), 2))
    taus = [] if n < 2 else [_forward_times(R[:, j] - R[:, i], V[:, j] - V[:, i], a)
                             for i, j in itertools.combinations(range(n), 2)]
    bp = np.concatenate([np.zeros((K, 1)), fwd.event_times] + [t[:, None] for t in taus]
                        + [np.broadcast_to(phi.t_breaks, (K, len(phi.t_breaks))),
                           np.full((K, 1), T)], axis=1)
    bp = np.sort(np.clip(bp, 0.0, T), axis=1)
    xg, wg = _gauss(order)
    lo, hi = bp[:, :-1], bp[:, 1:]
    tn = (lo[..., None] + (hi - lo)[..., None] * xg).reshape(K, -1)   # (K, S*order)
    wn = ((hi - lo)[..., None] * wg).reshape(K, -1)
    keep = wn.any(axis=0)
    tn, wn = tn[:, keep], wn[:, keep]
    P = tn.shape[1]
    fe._charge(K * P * max(n, 1) * 2)
    # true flow at every node
    flow = flow_batch(np.repeat(R, P, 0), np.repeat(V, P, 0), tn.reshape(-1), a, model,
                      max_events=max_events)
    ttrue = tn.reshape(-1)
    F1 = np.zeros(K)
    for i in range(n):
        vals = np.asarray(fn(flow.positions[:, i], flow.velocities[:, i], ttrue)).reshape(K, P)
        F1 += (vals * wn).sum(1)
    F1 = np.where(fwd.valid, F1, 0.0)
    fe_part = np.zeros(K)
    for i in range(n):
        ghost = np.asarray(fn(R[:, None, i] + V[:, None, i] * tn[..., None],
                              np.broadcast_to(V[:, None, i], (K, P, 3)), tn))
        fe_part += (ghost * wn).sum(1)
    for i, j in pairs:
        x1, w1, _, _, tau = two_body(R[:, None, i], V[:, None, i], R[:, None, j], V[:, None, j],
                                     tn, a, model)
        after = tn > tau
        vals = np.asarray(fn(x1, w1, tn))
        fe_part += (np.where(after, vals, 0.0) * wn).sum(1) / (n - 1)
    return PairingSamples(fe_part, F1)


def weak_pairing(fe: FieldEvaluator, which: str, phi: TestFunction, *,
                 transport: bool = False, initial_term: bool = False,
                 samples: Optional[int] = None, order: int = 8,
                 return_error: bool = False):
    """Integral of field * phi over phase space and time.

    With ``transport`` the field is paired with d phi/dt + v . grad phi, and
    ``initial_term`` then adds the t = 0 boundary contribution, the integral
    of f0 * phi(., 0).
    """
    if which not in ("f_eps", "F1"):
        raise InvalidArgument("which must be 'f_eps' or 'F1'")
    ps = pairing_samples(fe, phi, samples=samples, order=order, transport=transport)
    x = ps.f_eps if which == "f_eps" else ps.F1
    if initial_term:
        rng = _seq(fe.seed, 6)
        R, V = fe.initial.sample(rng, len(x))
        x = x + sum(np.asarray(phi(R[:, i], V[:, i], 0.0)) for i in range(fe.n))
    val, se = PairingSamples._stat(x)
    return (val, se) if return_error else val
