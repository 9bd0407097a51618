"""Quadrature of hard-sphere collision integrals.

All integrals share one layout: a unit-sphere rule for sigma times a tensor
Gauss rule for the partner velocity v2, with the half-space condition
(v2 - v1, sigma) >= 0 applied node by node.  When the integrand is known to
vanish outside a few balls (``Support`` hints), the sphere rule is restricted
to caps and the velocity rule to boxes that cover those balls; overlapping
regions are reweighted by the number of regions containing each node, so the
union is counted once.

Every routine returns ``QuadResult(value, error)``; ``error`` is the change
when all orders drop to two thirds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import ELASTIC, RestitutionModel, Support, inverse_collision
from .errors import InvalidArgument, QuadratureBudgetExceeded


class QuadResult(NamedTuple):
    value: float
    error: float


# -- rules --------------------------------------------------------------------

def _rotation_to(axis):
    """Orthonormal matrix whose third column is ``axis``."""
    z = np.asarray(axis, dtype=float)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass(frozen=True)
class SphereQuadrature:
    """Nodes on the unit sphere with weights; exact up to degree ``order``.

    The product rule (Gauss-Legendre in cos(theta), uniform in azimuth)
    integrates spherical polynomials of degree min(2 n_theta - 1, n_phi - 1).
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @classmethod
    def gauss(cls, n_theta: int = 24, n_phi: int = 48) -> "SphereQuadrature":
        return cls.cap((0.0, 0.0, 1.0), math.pi, n_theta, n_phi)

    @classmethod
    def cap(cls, axis, half_angle: float, n_theta: int = 24, n_phi: int = 48) -> "SphereQuadrature":
        """Rule on {sigma : angle(sigma, axis) <= half_angle}."""
        if n_theta < 1 or n_phi < 1:
            raise InvalidArgument("sphere rule needs positive orders")
        c_lo = math.cos(min(max(half_angle, 0.0), math.pi))
        x, w = np.polynomial.legendre.leggauss(n_theta)
        c = c_lo + (1.0 - c_lo) * 0.5 * (x + 1.0)
        wc = (1.0 - c_lo) * 0.5 * w
        phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
        s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
        pts = np.stack([np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)),
                        np.repeat(c[:, None], n_phi, axis=1)], axis=-1).reshape(-1, 3)
        wts = np.repeat(wc, n_phi) * (2.0 * math.pi / n_phi)
        pts = pts @ _rotation_to(axis).T
        order = min(2 * n_theta - 1, n_phi - 1) if half_angle >= math.pi else 0
        return cls(pts, wts, order)

    def integrate(self, fn) -> float:
        return float(np.sum(self.weights * fn(self.nodes)))


@dataclass(frozen=True)
class VelocityQuadrature:
    """Tensor Gauss-Legendre rule on an axis-aligned box."""

    lo: np.ndarray
    hi: np.ndarray
    n: int = 16

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.hi <= self.lo):
            raise InvalidArgument("velocity box must have positive extent")

    @classmethod
    def covering(cls, centers, radii, n: int = 16, margin: float = 0.05) -> "VelocityQuadrature":
        """Bounding box of the balls B(center, radius), widened by ``margin`` (relative)."""
        c = np.atleast_2d(np.asarray(centers, dtype=float))
        r = np.broadcast_to(np.asarray(radii, dtype=float), (len(c),))[:, None]
        lo, hi = (c - r).min(0), (c + r).max(0)
        pad = margin * (hi - lo)
        return cls(lo - pad, hi + pad, n)

    @property
    def nodes(self) -> np.ndarray:
        return self._rule()[0]

    @property
    def weights(self) -> np.ndarray:
        return self._rule()[1]

    def _rule(self):
        x, w = np.polynomial.legendre.leggauss(self.n)
        axes = [self.lo[k] + (self.hi[k] - self.lo[k]) * 0.5 * (x + 1.0) for k in range(3)]
        wax = [(self.hi[k] - self.lo[k]) * 0.5 * w for k in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        wg = np.einsum("i,j,k->ijk", *wax).reshape(-1)
        return g, wg

    def contains(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.all((v >= self.lo - 1e-12) & (v <= self.hi + 1e-12), axis=-1)


@dataclass(frozen=True)
class CollisionQuadrature:
    """Orders and limits shared by every collision integral."""

    n_theta: int = 24
    n_phi: int = 48
    n_v: int = 16
    margin: float = 0.05
    velocity_box: Optional[tuple] = None
    budget: int = 5 * 10 ** 8
    refine: bool = True

    def coarse(self) -> "CollisionQuadrature":
        """Rule with two thirds of each order, used for the error estimate."""
        return replace(self, n_theta=_two_thirds(self.n_theta, 2), n_phi=_two_thirds(self.n_phi, 4),
                       n_v=_two_thirds(self.n_v, 2), refine=False)


def _two_thirds(n: int, floor: int) -> int:
    return max(min(-(-2 * n // 3), n - 1), floor)


DEFAULT_QUAD = CollisionQuadrature()


# -- region construction ------------------------------------------------------

@dataclass(frozen=True)
class _Region:
    axis: Optional[np.ndarray]    # None means the whole sphere
    cos_alpha: float
    box: VelocityQuadrature

    def contains(self, sig, v2):
        """Membership mask on the (S, V) product grid."""
        if self.axis is None:
            ins = np.ones(len(sig), dtype=bool)
        else:
            ins = sig @ self.axis >= self.cos_alpha - 1e-12
        return ins[:, None] & self.box.contains(v2)[None, :]


def _cap_towards(r, center, radius, a, sign):
    """Cap of sigma with |r + sign a sigma - center| <= radius, or None if empty.

    Returns (axis, cos_alpha); axis None means the full sphere.
    """
    d_vec = sign * (np.asarray(center, float) - r)
    d = float(np.linalg.norm(d_vec))
    if d == 0.0:
        return (None, -1.0) if a <= radius else None
    c = (d * d + a * a - radius * radius) / (2.0 * a * d)
    if c > 1.0:
        return None
    if c <= -1.0:
        return None, -1.0
    return d_vec / d, c


def _regions(r, v, a, supports: Optional[Sequence[Support]], cfg: CollisionQuadrature, kind: str):
    if supports is None:
        if cfg.velocity_box is None:
            raise InvalidArgument("need support hints or an explicit velocity_box")
        lo, hi = cfg.velocity_box
        return [_Region(None, -1.0, VelocityQuadrature(lo, hi, cfg.n_v))]
    out = []
    if kind == "loss":
        for s in supports:
            cap = _cap_towards(r, s.position, s.r_radius, a, -1.0)
            if cap is None:
                continue
            box = VelocityQuadrature.covering(s.velocity, s.v_radius, cfg.n_v, cfg.margin)
            out.append(_Region(cap[0], cap[1], box))
        return out
    here = [s for s in supports if np.linalg.norm(r - s.position) <= s.r_radius]
    for sb in supports:
        cap = _cap_towards(r, sb.position, sb.r_radius, a, 1.0)
        if cap is None:
            continue
        for sa in here:
            # v1' + v2' = v1 + v2 fixes v2 given both post velocities
            c = np.asarray(sa.velocity) + np.asarray(sb.velocity) - v
            box = VelocityQuadrature.covering(c, sa.v_radius + sb.v_radius, cfg.n_v, cfg.margin)
            out.append(_Region(cap[0], cap[1], box))
    return out


def _integrate(r, v, a, supports, cfg, kind, integrand, chunk=1 << 18):
    """Sum of integrand(sig, v2) over regions; integrand returns (S, V) values."""
    regions = _regions(r, v, a, supports, cfg, kind)
    total = 0.0
    work = 0
    for reg in regions:
        if reg.axis is None:
            sq = SphereQuadrature.gauss(cfg.n_theta, cfg.n_phi)
        else:
            sq = SphereQuadrature.cap(reg.axis, math.acos(max(-1.0, min(1.0, reg.cos_alpha))),
                                      cfg.n_theta, cfg.n_phi)
        vn, vw = reg.box._rule()
        work += len(sq.nodes) * len(vn)
        if work > cfg.budget:
            raise QuadratureBudgetExceeded(f"collision quadrature needs more than {cfg.budget} nodes")
        step = max(1, chunk // len(vn))
        for lo in range(0, len(sq.nodes), step):
            sig = sq.nodes[lo:lo + step]
            sw = sq.weights[lo:lo + step]
            vals = integrand(sig, vn)
            if len(regions) > 1:
                count = sum(o.contains(sig, vn) for o in regions)
                vals = vals / np.maximum(count, 1)
            total += float(sw @ vals @ vw)
    return total


def _disk_rule(n_r: int, n_a: int):
    """Nodes and weights on the unit disk (Gauss in r with weight r, uniform angle)."""
    x, w = np.polynomial.legendre.leggauss(n_r)
    rad = 0.5 * (x + 1.0)
    wr = 0.5 * w * rad
    ang = 2.0 * math.pi * (np.arange(n_a) + 0.5) / n_a
    pts = np.stack([np.outer(rad, np.cos(ang)), np.outer(rad, np.sin(ang))], -1).reshape(-1, 2)
    return pts, np.repeat(wr, n_a) * (2.0 * math.pi / n_a)


def _gain_pre(pair, r, v, t, a, model: RestitutionModel, cfg: CollisionQuadrature,
              supports: Sequence[Support], chunk=1 << 18) -> float:
    """Gain term in pre-collision variables.

    The pre-collision velocity v1'' of the sphere at r fixes sigma and the
    normal speeds, so it is integrated over a support ball; the partner's
    tangential velocity then ranges over a disk cut from its own ball.
    """
    here = [s for s in supports if np.linalg.norm(r - s.position) <= s.r_radius]
    if not here:
        return 0.0
    cA = np.array([s.velocity for s in here], float)
    RA = np.array([s.v_radius for s in here], float)
    pB = np.array([s.position for s in supports], float)
    cB = np.array([s.velocity for s in supports], float)
    RB = np.array([s.v_radius for s in supports], float)
    rB = np.array([s.r_radius for s in supports], float)
    dn, dw = _disk_rule(cfg.n_theta, cfg.n_phi)
    total = 0.0
    work = 0
    for ia in range(len(here)):
        box = VelocityQuadrature.covering(cA[ia], RA[ia], cfg.n_v, 0.0)
        vn, vw = box._rule()
        keep = np.linalg.norm(vn - cA[ia], axis=1) <= RA[ia]
        vn, vw = vn[keep], vw[keep]
        d = vn - v
        kap = np.linalg.norm(d, axis=1)
        ok = kap > 0
        vn, vw, d, kap = vn[ok], vw[ok], d[ok], kap[ok]
        sig = d / kap[:, None]
        lam, dlam = model.lambda_from_kappa(kap)
        chi = np.ones_like(lam) if model.is_elastic else model.chi(lam)
        par2 = sig @ v + lam - kap
        jac = a * a * lam * chi * dlam / kap ** 2
        cnt_a = (np.linalg.norm(vn[:, None] - cA[None], axis=-1) <= RA[None] + 1e-12).sum(1)
        r2 = r + a * sig
        inpos = np.linalg.norm(r2[:, None] - pB[None], axis=-1) <= rB[None]
        helper = np.where(np.abs(sig[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        e1 = np.cross(sig, helper)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(sig, e1)
        for ib in range(len(supports)):
            rho2 = RB[ib] ** 2 - (par2 - sig @ cB[ib]) ** 2
            m = inpos[:, ib] & (rho2 > 0)
            if not m.any():
                continue
            idx = np.nonzero(m)[0]
            rho = np.sqrt(rho2[idx])
            work += len(idx) * len(dn)
            if work > cfg.budget:
                raise QuadratureBudgetExceeded(f"collision quadrature needs more than {cfg.budget} nodes")
            step = max(1, chunk // len(dn))
            for lo in range(0, len(idx), step):
                k = idx[lo:lo + step]
                rk = rho[lo:lo + step]
                s_ = sig[k]
                base = cB[ib] - (s_ @ cB[ib])[:, None] * s_ + par2[k, None] * s_
                v2 = (base[:, None] + rk[:, None, None] * (dn[None, :, :1] * e1[k, None]
                                                         + dn[None, :, 1:] * e2[k, None]))
                K, D = v2.shape[:2]
                v2f = v2.reshape(-1, 3)
                v1f = np.repeat(vn[k], D, axis=0)
                r2f = np.repeat(r2[k], D, axis=0)
                vals = np.asarray(pair(np.broadcast_to(r, r2f.shape), v1f, r2f, v2f, t),
                                  dtype=float).reshape(K, D)
                inb = (np.linalg.norm(v2f[:, None] - cB[None], axis=-1) <= RB[None] + 1e-12) \
                    & np.repeat(inpos[k], D, axis=0)
                cnt = cnt_a[k, None] * inb.sum(1).reshape(K, D)
                vals = vals / np.maximum(cnt, 1)
                total += float(np.sum((jac[k] * vw[k] * rk ** 2)[:, None] * vals * dw[None]))
    return total


def _with_error(compute, cfg: CollisionQuadrature) -> QuadResult:
    fine = compute(cfg)
    if not cfg.refine:
        return QuadResult(fine, 0.0)
    return QuadResult(fine, abs(fine - compute(cfg.coarse())))


# -- collision integrals -------------------------------------------------------

def _gain_loss(pair: Callable, r, v, t, a, model: RestitutionModel, cfg, supports, part: str):
    """Gain or loss part for a pair function pair(r1, v1, r2, v2, t) on flat arrays."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)

    def loss(sig, v2):
        g = np.einsum("vk,sk->sv", v2 - v, sig)
        pos = g > 0
        S, V = g.shape
        r2 = np.repeat(r - a * sig, V, axis=0)
        v2f = np.tile(v2, (S, 1))
        vals = np.zeros(S * V)
        m = pos.reshape(-1)
        if m.any():
            r1 = np.broadcast_to(r, (int(m.sum()), 3))
            v1 = np.broadcast_to(v, (int(m.sum()), 3))
            vals[m] = pair(r1, v1, r2[m], v2f[m], t)
        return a * a * np.where(pos, g, 0.0) * vals.reshape(S, V)

    def gain(sig, v2):
        g = np.einsum("vk,sk->sv", v2 - v, sig)
        pos = g > 0
        S, V = g.shape
        m = pos.reshape(-1)
        vals = np.zeros(S * V)
        if m.any():
            sigf = np.repeat(sig, V, axis=0)[m]
            v2f = np.tile(v2, (S, 1))[m]
            v1f = np.broadcast_to(v, v2f.shape)
            v1pp, v2pp = inverse_collision(v1f, v2f, sigf, model)
            chi = 1.0 if model.is_elastic else model.chi(g.reshape(-1)[m])
            r2 = r + a * sigf
            vals[m] = chi * pair(np.broadcast_to(r, r2.shape), v1pp, r2, v2pp, t)
        return a * a * np.where(pos, g, 0.0) * vals.reshape(S, V)

    if part == "gain" and supports is not None:
        return _gain_pre(pair, r, v, t, a, model, cfg, supports)
    fn = gain if part == "gain" else loss
    return _integrate(r, v, a, supports, cfg, part, fn)


def _collision(pair, r, v, t, a, model, quad, supports, parts=("gain", "loss")):
    cfg = quad or DEFAULT_QUAD

    def compute(c):
        out = 0.0
        if "gain" in parts:
            out += _gain_loss(pair, r, v, t, a, model, c, supports, "gain")
        if "loss" in parts:
            out -= _gain_loss(pair, r, v, t, a, model, c, supports, "loss")
        return out

    return _with_error(compute, cfg)


def _product(f):
    def pair(r1, v1, r2, v2, t):
        out = np.zeros(len(r2))
        if np.ndim(r1) == 2 and len(r1) > 1 and r1.strides[0] == 0 and v1.strides[0] == 0:
            f1 = np.asarray(f(r1[:1], v1[:1], t), dtype=float).reshape(-1)
        else:
            f1 = np.asarray(f(r1, v1, t), dtype=float).reshape(-1)
        f1 = np.broadcast_to(f1, (len(r2),))
        m = f1 != 0
        if m.any():
            out[m] = f1[m] * np.asarray(f(r2[m], v2[m], t), dtype=float).reshape(-1)
        return out
    return pair


def q_be(f, r, v, t, a: float, quad: Optional[CollisionQuadrature] = None, *,
         supports: Optional[Sequence[Support]] = None, parts=("gain", "loss")) -> QuadResult:
    """Elastic collision integral Q(f, f)(r, v, t).

    ``f(r, v, t)`` must accept (M, 3) arrays and return M values.
    """
    return _collision(_product(f), r, v, t, a, ELASTIC, quad, supports, parts)


def q_be_inelastic(f, r, v, t, a: float, model: RestitutionModel,
                   quad: Optional[CollisionQuadrature] = None, *,
                   supports: Optional[Sequence[Support]] = None,
                   parts=("gain", "loss")) -> QuadResult:
    """Inelastic collision integral: gain at inverse-collision velocities times chi."""
    return _collision(_product(f), r, v, t, a, model, quad, supports, parts)


def bbgky_rhs(F2, r, v, t, a: float, quad: Optional[CollisionQuadrature] = None, *,
              model: RestitutionModel = ELASTIC,
              supports: Optional[Sequence[Support]] = None,
              parts=("gain", "loss")) -> QuadResult:
    """Collision term of the first hierarchy equation for a pair function
    ``F2(r1, v1, r2, v2, t)`` evaluated on contact configurations."""
    return _collision(F2, r, v, t, a, model, quad, supports, parts)


def q_ge2(f, zeta, r, v, t, a: float, quad: Optional[CollisionQuadrature] = None, *,
          model: RestitutionModel = ELASTIC,
          supports: Optional[Sequence[Support]] = None,
          parts=("gain", "loss")) -> QuadResult:
    """Two-particle generalized Enskog integral: products f * zeta at both arguments.

    ``zeta`` is only evaluated where ``f`` is non-zero; where ``f`` vanishes the
    product is 0 and an underflowing survival integral is irrelevant.
    """
    def fz(rr, vv, tt):
        vals = np.asarray(f(rr, vv, tt), dtype=float).reshape(-1)
        out = np.zeros_like(vals)
        m = vals != 0
        if m.any():
            rr = np.broadcast_to(rr, (len(vals), 3))
            vv = np.broadcast_to(vv, (len(vals), 3))
            out[m] = vals[m] * np.asarray(zeta(rr[m], vv[m], tt), dtype=float).reshape(-1)
        return out

    return _collision(_product(fz), r, v, t, a, model, quad, supports, parts)
