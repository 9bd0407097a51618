"""Residuals of the Boltzmann-Enskog equation for the regularized solution.

``weak_residual`` pairs f_eps - F1 with the transport derivative of a test
function; the collision integrals of the two fields agree by construction, so
this difference is the whole weak residual.  ``mild_residual`` checks the
equation integrated along characteristics at individual phase points.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .collision import CollisionQuadrature, _two_thirds, q_be_inelastic
from .dynamics import _forward_times
from .errors import InvalidArgument
from .fields import FieldEvaluator, TestFunction, _seq, pairing_samples

SCHEMA_VERSION = 1


@dataclass
class ResidualReport:
    epsilon: float
    pairing: Tuple[float, ...]
    pairing_err: Tuple[float, ...]
    mild_sup: float
    quad_err: float
    decay: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        vals = list(self.pairing) + list(self.pairing_err)
        if not np.all(np.isfinite(vals)):
            raise InvalidArgument("non-finite residual")


def weak_residual(fe: FieldEvaluator, phi: TestFunction, *, samples: Optional[int] = None,
                  order: int = 8, return_error: bool = False):
    """Pairing of (f_eps - F1) with d phi/dt + v . grad phi."""
    ps = pairing_samples(fe, phi, samples=samples, order=order, transport=True)
    d = ps.f_eps - ps.F1
    val, se = float(d.mean()), float(d.std() / math.sqrt(len(d)))
    return (val, se) if return_error else val


def ghost_defect(fe: FieldEvaluator, phi: TestFunction, *, samples: int = 20000, seed: int = 99):
    """Closed form of the two-sphere weak residual.

    Sample by sample the difference reduces to minus phi evaluated on each
    freely streamed sphere at its contact time, because phi vanishes at its
    final time.  Returns (value, standard error).
    """
    if fe.n != 2:
        raise InvalidArgument("closed form is derived for two spheres")
    rng = _seq(seed, 1)
    R, V = fe.initial.sample(rng, samples)
    tau = _forward_times(R[:, 1] - R[:, 0], V[:, 1] - V[:, 0], fe.a)
    hit = tau < phi.t_max
    ts = np.where(hit, tau, 0.0)
    acc = np.zeros(samples)
    for i in range(2):
        x = R[:, i] + V[:, i] * ts[:, None]
        acc -= np.where(hit, np.asarray(phi(x, V[:, i], ts)), 0.0)
    return float(acc.mean()), float(acc.std() / math.sqrt(samples))


def _window(fe: FieldEvaluator, samples: int = 2048):
    """Earliest and latest sampled contact times over all pairs (inf if none)."""
    rng = _seq(fe.seed, 13)
    R, V = fe.initial.sample(rng, samples)
    lo, hi = np.inf, -np.inf
    for i in range(fe.n):
        for j in range(i + 1, fe.n):
            tau = _forward_times(R[:, j] - R[:, i], V[:, j] - V[:, i], fe.a)
            tau = tau[np.isfinite(tau)]
            if len(tau):
                lo, hi = min(lo, tau.min()), max(hi, tau.max())
    return lo, hi


def _time_nodes(t: float, window, order: int):
    """Composite Gauss nodes on [0, t], split at the (padded) collision window."""
    lo, hi = window
    cuts = [0.0]
    if np.isfinite(lo):
        pad = 0.25 * max(hi - lo, 1e-9)
        cuts += [c for c in (lo - pad, hi + pad) if 0.0 < c < t]
    cuts.append(t)
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        nodes.append(a + (b - a) * 0.5 * (x + 1))
        weights.append((b - a) * 0.5 * w)
    return np.concatenate(nodes), np.concatenate(weights)


def mild_residual(fe: FieldEvaluator, probes: Sequence, model=None, *,
                  quad: Optional[CollisionQuadrature] = None, order: int = 8,
                  return_all: bool = False):
    """Sup over probes of |f_eps - free term - time integral of Q(f_eps, f_eps)|.

    Q is evaluated at points (r - v (t - s), v, s) with support-adapted
    quadrature; the time integral is composite Gauss with extra nodes over the
    collision window.  Returns (sup, quadrature error), or per-probe arrays
    with ``return_all``.
    """
    model = fe.model if model is None else model
    quad = quad or CollisionQuadrature(n_theta=8, n_phi=16, n_v=6)
    win = _window(fe)
    res, errs = [], []
    for r, v, t in probes:
        r = np.asarray(r, float)
        v = np.asarray(v, float)
        t = float(t)
        if t <= 0:
            raise InvalidArgument("probe times must be positive")
        lhs = float(fe.f_eps(r, v, t)) - float(fe.free(r, v, t))

        def integral(n):
            nodes, weights = _time_nodes(t, win, n)
            tot, err = 0.0, 0.0
            for s, w in zip(nodes, weights):
                x = r - v * (t - s)
                q = q_be_inelastic(fe.f_eps, x, v, float(s), fe.a, model, quad,
                                   supports=fe.supports(float(s)))
                tot += w * q.value
                err += w * q.error
            return tot, err

        fine, qerr = integral(order)
        coarse, _ = integral(_two_thirds(order, 1))
        res.append(abs(lhs - fine))
        errs.append(abs(qerr) + abs(fine - coarse))
    res, errs = np.array(res), np.array(errs)
    if return_all:
        return res, errs
    k = int(np.argmax(res)) if len(res) else 0
    return (float(res.max()) if len(res) else 0.0), (float(errs[k]) if len(errs) else 0.0)


def decay_flags(values: Sequence[float], ratio: float = 0.8) -> bool:
    """True if |values| shrinks by at least ``ratio`` at every step."""
    a = np.abs(np.asarray(values, dtype=float))
    return bool(np.all(a[1:] < ratio * a[:-1]))


def epsilon_scan(build: Callable[[float], FieldEvaluator], epsilons: Sequence[float],
                 phis: Sequence[TestFunction], probes: Optional[Callable] = None, *,
                 samples: Optional[int] = None, order: int = 8,
                 quad: Optional[CollisionQuadrature] = None,
                 ratio: float = 0.8) -> List[ResidualReport]:
    """One report per epsilon; ``build(eps)`` returns the evaluator for that width.

    ``probes(fe)`` (optional) returns mild-form probe points for that evaluator.
    The last report carries the decay flag of every test function.
    """
    if not len(epsilons):
        raise InvalidArgument("empty epsilon ladder")
    reports = []
    for eps in epsilons:
        fe = build(float(eps))
        pv, pe = [], []
        for phi in phis:
            v, e = weak_residual(fe, phi, samples=samples, order=order, return_error=True)
            pv.append(v)
            pe.append(e)
        mild, merr = (0.0, 0.0)
        if probes is not None:
            mild, merr = mild_residual(fe, probes(fe), quad=quad)
        reports.append(ResidualReport(float(eps), tuple(pv), tuple(pe), mild, merr + max(pe, default=0.0)))
    flags = tuple(decay_flags([r.pairing[k] for r in reports], ratio) for k in range(len(phis)))
    reports[-1].decay = flags
    return reports


# -- serialization ------------------------------------------------------------

CSV_FIELDS = ["epsilon", "phi", "pairing", "pairing_err", "mild_sup", "quad_err"]


def reports_to_rows(reports: Sequence[ResidualReport]):
    for rep in reports:
        for k, (p, e) in enumerate(zip(rep.pairing, rep.pairing_err)):
            yield [rep.epsilon, k, p, e, rep.mild_sup, rep.quad_err]


def _fmt(x):
    return str(x) if isinstance(x, (int, np.integer)) else format(float(x), ".17g")


def reports_to_csv(reports: Sequence[ResidualReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_FIELDS)
    for row in reports_to_rows(reports):
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def reports_to_json(reports: Sequence[ResidualReport]) -> str:
    return json.dumps({"schema": SCHEMA_VERSION,
                       "reports": [asdict(r) for r in reports]}, indent=2)
