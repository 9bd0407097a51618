"""Generalized Enskog machinery for few-sphere kernel initial data.

For initial data made of N separated kernels, the cumulant series of the
generalized Enskog solution terminates at order N - 1, and the solution equals
the one-particle marginal of the N-sphere flow.  This module evaluates the
series, the direct marginal, the two-sphere closed form with its survival
factor zeta, and a mild-form check of the two-sphere equation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .collision import CollisionQuadrature, _two_thirds, q_ge2
from .core import ELASTIC, RestitutionModel
from .dynamics import _forward_times, flow_batch
from .errors import InvalidArgument, SurvivalUnderflow, UnsupportedOrder
from .fields import FieldEvaluator, InitialDensity, PushforwardProposal, _seq, eval_f0

ZETA_FLOOR = 1e-8


def t_star(r, v, a: float):
    """Backward contact time for relative position r = r2 - r1 and velocity v = v2 - v1.

    Smallest t >= 0 with |r - v t| = a, or inf.  Broadcasts over leading axes.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    rr = np.einsum("...i,...i->...", r, r)
    if np.any(rr < a * a * (1 - 1e-12)):
        raise InvalidArgument("|r| < a: spheres overlap")
    vv = np.einsum("...i,...i->...", v, v)
    vr = np.einsum("...i,...i->...", v, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = a * a - rr + vr * vr / vv
        ok = (vv > 0) & (vr >= 0) & (disc >= 0)
        speed = np.sqrt(vv)
        t = (vr / speed - np.sqrt(np.where(ok, disc, 0.0))) / speed
    out = np.where(ok, np.maximum(t, 0.0), np.inf)
    return float(out) if out.ndim == 0 else out


# -- cumulants ----------------------------------------------------------------

def _set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[head] + part[k]] + part[k + 1:]
        yield [[head]] + part


def cumulant_terms(s: int, n: int):
    """(weight, blocks) pairs of the cumulant of order 1 + n with cluster {1..s}.

    Blocks list sphere indices (0-based) after declusterization.
    """
    if n < 0 or n > 2:
        raise UnsupportedOrder("cumulants are implemented for n = 0, 1, 2")
    if s < 1:
        raise InvalidArgument("cluster must hold at least one sphere")
    elements = ["Y"] + list(range(s, s + n))
    out = []
    for part in _set_partitions(elements):
        k = len(part)
        w = (-1) ** (k - 1) * math.factorial(k - 1)
        blocks = []
        for b in part:
            idx = []
            for e in b:
                idx.extend(range(s) if e == "Y" else [e])
            blocks.append(sorted(idx))
        out.append((w, blocks))
    return out


def cumulant_apply(n: int, t: float, s: int, integrand: Callable, r, v, a: float,
                   model: RestitutionModel = ELASTIC):
    """Apply the (1 + n)-th cumulant of backward flows to ``integrand``.

    ``r`` and ``v`` hold s + n phase points, shape (s + n, 3) or batched
    (B, s + n, 3).  Each block of a partition evolves backward by t on its
    own; a block whose spheres overlap contributes zero.  ``integrand(R, V)``
    receives the evolved batch and returns B values.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    single = r.ndim == 2
    if single:
        r, v = r[None], v[None]
    if r.shape[1] != s + n:
        raise InvalidArgument("expected s + n phase points")
    total = np.zeros(len(r))
    for w, blocks in cumulant_terms(s, n):
        R = np.empty_like(r)
        V = np.empty_like(v)
        ok = np.ones(len(r), dtype=bool)
        jac = np.ones(len(r))
        for b in blocks:
            if len(b) == 1:
                R[:, b[0]] = r[:, b[0]] - v[:, b[0]] * t
                V[:, b[0]] = v[:, b[0]]
                continue
            fl = flow_batch(r[:, b], v[:, b], -t, a, model)
            R[:, b], V[:, b] = fl.positions, fl.velocities
            ok &= fl.valid
            jac *= fl.jacobian
        vals = np.asarray(integrand(R, V), dtype=float) * jac
        total += w * np.where(ok, vals, 0.0)
    return float(total[0]) if single else total


def _exclusion(R, a):
    ok = np.ones(len(R), dtype=bool)
    for i, j in itertools.combinations(range(R.shape[1]), 2):
        ok &= np.linalg.norm(R[:, j] - R[:, i], axis=1) >= a
    return ok


# -- solution configuration ---------------------------------------------------

@dataclass
class GESolutionConfig:
    """Few-sphere free-space kernel data with Monte Carlo budgets."""

    initial: InitialDensity
    model: RestitutionModel = ELASTIC
    samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.initial.n > 3:
            raise InvalidArgument("generalized Enskog series is implemented for N <= 3")
        if self.initial.domain.is_torus:
            raise InvalidArgument("generalized Enskog solutions are built in free space")
        for k in self.initial.kernels:
            if k.eps > self.initial.a:
                raise InvalidArgument("kernel radius must not exceed the diameter")

    @property
    def n(self) -> int:
        return self.initial.n

    def evaluator(self, seed: Optional[int] = None) -> FieldEvaluator:
        return FieldEvaluator(self.initial, self.model, samples=self.samples,
                              seed=self.seed if seed is None else seed)


def _proposal_mix(fe: FieldEvaluator, t: float):
    prop = PushforwardProposal(fe, t)

    def sample(rng, m):
        k = rng.integers(0, fe.n, size=m)
        r = np.empty((m, 3))
        v = np.empty((m, 3))
        for c in range(fe.n):
            sel = k == c
            if sel.any():
                r[sel], v[sel] = prop.sample(c, rng, int(sel.sum()))
        return r, v

    def density(r, v):
        return sum(prop.density(c, r, v) for c in range(fe.n)) / fe.n

    return sample, density


def _joint_proposal(fe: FieldEvaluator, t: float, m: int):
    """Proposal for m extra spheres at time t, sampled as one block.

    Equal-weight mixture of independent per-slot draws and the pushforward of
    m distinct kernels evolved together, which keeps the correlations that a
    collision among the extra spheres creates.  Returns (sample, density) on
    arrays of shape (K, m, 3).
    """
    one, one_density = _proposal_mix(fe, t)
    kernels = fe.initial.kernels
    a, model = fe.a, fe.model
    assign = list(itertools.permutations(range(len(kernels)), m))

    def sample(rng, K):
        R = np.empty((K, m, 3))
        V = np.empty((K, m, 3))
        block = rng.random(K) < 0.5
        for c in range(m):
            R[~block, c], V[~block, c] = one(rng, int((~block).sum()))
        idx = np.nonzero(block)[0]
        pick = rng.integers(0, len(assign), size=len(idx))
        for g, ks in enumerate(assign):
            sel = idx[pick == g]
            if not len(sel):
                continue
            for c, k in enumerate(ks):
                R[sel, c], V[sel, c] = kernels[k].sample(rng, len(sel))
            if m > 1:
                fl = flow_batch(R[sel], V[sel], t, a, model)
                R[sel], V[sel] = fl.positions, fl.velocities
            else:
                R[sel] += V[sel] * t
        return R, V

    def density(R, V):
        ind = np.ones(len(R))
        for c in range(m):
            ind *= one_density(R[:, c], V[:, c])
        fl = flow_batch(R, V, -t, a, model)
        blk = np.zeros(len(R))
        for ks in assign:
            term = fl.jacobian.copy()
            for c, k in enumerate(ks):
                term *= np.asarray(kernels[k](fl.positions[:, c], fl.velocities[:, c])).reshape(-1)
            blk += term
        blk = np.where(fl.valid, blk, 0.0) / len(assign)
        return 0.5 * ind + 0.5 * blk

    return sample, density


def ge_series_terms(cfg: GESolutionConfig, r, v, t: float, *, samples: Optional[int] = None,
                    seed: Optional[int] = None):
    """Per-sample estimates of every series term at one point (r, v, t).

    Returns a list: the free term followed by one array per order n >= 1.
    """
    if t <= 0:
        raise InvalidArgument("the series is evaluated for t > 0")
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    K = int(samples or cfg.samples)
    fe = cfg.evaluator()
    a, N = cfg.initial.a, cfg.n
    terms = [np.full(K, float(eval_f0(cfg.initial, r - v * t, v)))]
    if N == 1:
        return terms
    rng = _seq(cfg.seed if seed is None else seed, 21)

    def integrand(R, V):
        vals = np.ones(len(R))
        for i in range(R.shape[1]):
            vals *= np.asarray(eval_f0(cfg.initial, R[:, i], V[:, i])).reshape(-1)
        return np.where(_exclusion(R, a), vals, 0.0)

    for n in range(1, N):
        Rs = np.empty((K, 1 + n, 3))
        Vs = np.empty((K, 1 + n, 3))
        Rs[:, 0], Vs[:, 0] = r, v
        sample, density = _joint_proposal(fe, t, n)
        Rs[:, 1:], Vs[:, 1:] = sample(rng, K)
        q = density(Rs[:, 1:], Vs[:, 1:])
        vals = cumulant_apply(n, t, 1, integrand, Rs, Vs, a, cfg.model)
        terms.append(np.where(q > 0, vals / np.where(q > 0, q, 1.0), 0.0) / math.factorial(n))
    return terms


def ge_series_f1(cfg: GESolutionConfig, r, v, t: float, *, samples: Optional[int] = None,
                 seed: Optional[int] = None, return_error: bool = False):
    """Truncated cumulant series for the one-particle solution at (r, v, t)."""
    terms = ge_series_terms(cfg, r, v, t, samples=samples, seed=seed)
    tot = np.sum(terms, axis=0)
    val = float(tot.mean())
    if not return_error:
        return val
    return val, float(tot.std() / math.sqrt(len(tot)))


def direct_marginal(cfg: GESolutionConfig, r, v, t: float, *, samples: Optional[int] = None,
                    seed: int = 1, return_error: bool = False):
    """(1/(N-1)!) integral of the backward N-sphere flow of prod f0 over spheres 2..N."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    K = int(samples or cfg.samples)
    N, a = cfg.n, cfg.initial.a
    if N == 1:
        val = float(eval_f0(cfg.initial, r - v * t, v))
        return (val, 0.0) if return_error else val
    fe = cfg.evaluator()
    sample, density = _joint_proposal(fe, t, N - 1)
    rng = _seq(seed, 31)
    R = np.empty((K, N, 3))
    V = np.empty((K, N, 3))
    R[:, 0], V[:, 0] = r, v
    R[:, 1:], V[:, 1:] = sample(rng, K)
    q = density(R[:, 1:], V[:, 1:])
    fl = flow_batch(R, V, -t, a, cfg.model)
    vals = fl.jacobian.copy()
    for c in range(N):
        vals *= np.asarray(eval_f0(cfg.initial, fl.positions[:, c], fl.velocities[:, c])).reshape(-1)
    w = np.where(fl.valid & (q > 0), vals / np.where(q > 0, q, 1.0), 0.0) / math.factorial(N - 1)
    val = float(w.mean())
    return (val, float(w.std() / math.sqrt(K))) if return_error else val


# -- two spheres ----------------------------------------------------------------

def _two(cfg: GESolutionConfig):
    if cfg.n != 2:
        raise InvalidArgument("this closed form needs exactly two spheres")


def f1_two_particle(cfg: GESolutionConfig, r, v, t, *, return_error: bool = False,
                    evaluator: Optional[FieldEvaluator] = None):
    """Survival-weighted free term plus the post-collision term (two spheres)."""
    _two(cfg)
    fe = evaluator or cfg.evaluator()
    return fe.F1(r, v, t, return_error=return_error)


def zeta(cfg: GESolutionConfig, r, v, t, *, evaluator: Optional[FieldEvaluator] = None):
    """Reciprocal of the survival integral; raises SurvivalUnderflow below the floor."""
    fe = evaluator or cfg.evaluator()
    S = np.asarray(fe.survival(r, v, t), dtype=float)
    if np.any(S < ZETA_FLOOR):
        raise SurvivalUnderflow("survival integral below 1e-8; zeta is undefined here")
    out = 1.0 / S
    return float(out) if out.ndim == 0 else out


@dataclass
class GECheck:
    """Mild-form check of the two-sphere generalized Enskog equation at probes."""

    residual: np.ndarray
    budget: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def sup(self) -> float:
        return float(np.max(self.residual)) if len(self.residual) else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.all(self.residual <= 3.0 * self.budget))


def _fz(fe: FieldEvaluator, refine: int = 64):
    """f * zeta for the two-sphere solution: free term plus gain over survival.

    Survival estimates resting on fewer than 8 surviving samples are redone
    with ``refine`` times as many, so that a Monte Carlo zero is not mistaken
    for a genuine underflow.
    """
    fine = []

    def fz(r, v, t):
        r = np.atleast_2d(r)
        v = np.atleast_2d(v)
        free = np.asarray(fe.free(r, v, t), dtype=float).reshape(-1)
        g = np.asarray(fe.gain(r, v, t), dtype=float).reshape(-1)
        out = free.copy()
        m = g != 0
        if m.any():
            S = np.asarray(fe.survival(r[m], v[m], t), dtype=float).reshape(-1)
            low = S * fe.samples < 8
            if low.any():
                if not fine:
                    fine.append(FieldEvaluator(fe.initial, fe.model, samples=fe.samples * refine,
                                               seed=fe.seed + 7919, horizon=fe.horizon))
                idx = np.nonzero(m)[0][low]
                S[low] = np.asarray(fine[0].survival(r[idx], v[idx], np.full(len(idx), t)),
                                    dtype=float).reshape(-1)
            if np.any(S < ZETA_FLOOR):
                raise SurvivalUnderflow("survival integral below 1e-8 where f is non-zero")
            out[m] += g[m] / S
        return out
    return fz


def ge_mild_check(cfg: GESolutionConfig, probes: Sequence, t0: float, *, replicates: int = 4,
                  order: int = 8, quad: Optional[CollisionQuadrature] = None,
                  window_nodes: bool = True) -> GECheck:
    """|F1(r,v,t) - F1(r - v(t - t0), v, t0) - int_{t0}^t Q_GE(...)(r - v(t - s), v, s) ds|.

    The estimate averages ``replicates`` independent Monte Carlo seeds; the
    budget is the replicate standard error plus the quadrature error (orders
    cut to two thirds in time and in the collision integral).
    """
    _two(cfg)
    if t0 <= 0:
        raise InvalidArgument("t0 must be positive")
    quad = quad or CollisionQuadrature(n_theta=8, n_phi=16, n_v=6)
    a = cfg.initial.a
    fes = [cfg.evaluator(seed=cfg.seed + 1000 * k) for k in range(replicates)]
    window = _contact_window(cfg)
    res, bud, L, Rh = [], [], [], []
    for r, v, t in probes:
        r = np.asarray(r, float)
        v = np.asarray(v, float)
        t = float(t)
        if t < t0:
            raise InvalidArgument("probe time precedes t0")
        per = []
        qerrs = []
        for fe in fes:
            lhs = float(fe.F1(r, v, t)) - float(fe.F1(r - v * (t - t0), v, t0))
            fz = _fz(fe)
            one = lambda rr, vv, tt: np.ones(len(np.atleast_2d(rr)))

            def integral(n):
                nodes, weights = _nodes(t0, t, window if window_nodes else None, n)
                tot = err = 0.0
                for s, w in zip(nodes, weights):
                    x = r - v * (t - s)
                    q = q_ge2(fz, one, x, v, float(s), a, quad, model=cfg.model,
                              supports=fe.supports(float(s)))
                    tot += w * q.value
                    err += w * q.error
                return tot, err

            fine, qerr = integral(order)
            coarse, _ = integral(_two_thirds(order, 1))
            per.append((lhs, fine))
            qerrs.append(abs(qerr) + abs(fine - coarse))
        per = np.array(per)
        d = per[:, 0] - per[:, 1]
        se = d.std(ddof=1) / math.sqrt(len(d)) if len(d) > 1 else 0.0
        res.append(abs(d.mean()))
        bud.append(se + float(np.mean(qerrs)))
        L.append(per[:, 0].mean())
        Rh.append(per[:, 1].mean())
    return GECheck(np.array(res), np.array(bud), np.array(L), np.array(Rh))


def _contact_window(cfg: GESolutionConfig, samples: int = 4096):
    rng = _seq(cfg.seed, 41)
    R, V = cfg.initial.sample(rng, samples)
    tau = _forward_times(R[:, 1] - R[:, 0], V[:, 1] - V[:, 0], cfg.initial.a)
    tau = tau[np.isfinite(tau)]
    return (float(tau.min()), float(tau.max())) if len(tau) else None


def _nodes(t0, t1, window, order):
    cuts = [t0]
    if window is not None:
        lo, hi = window
        pad = 0.25 * max(hi - lo, 1e-9)
        cuts += [c for c in (lo - pad, hi + pad) if t0 < c < t1]
    cuts.append(t1)
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        nodes.append(lo + (hi - lo) * 0.5 * (x + 1))
        weights.append((hi - lo) * 0.5 * w)
    return np.concatenate(nodes), np.concatenate(weights)
