"""Collision algebra for unit-mass hard spheres and the C1 regularization kernels.

Vectors are numpy arrays whose last axis has length 3; every function
broadcasts over leading axes so batches of collisions can be processed at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NoInverseError

SIGMA_TOL = 1e-12


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(np.abs(np.linalg.norm(sigma, axis=-1) - 1.0) > SIGMA_TOL):
        raise InvalidArgument("sigma must be a unit vector")
    return sigma


@dataclass(frozen=True)
class RestitutionModel:
    """Coefficient of restitution as a function of the normal relative speed g.

    ``kind`` is one of ``"elastic"``, ``"constant"`` or ``"curve"``.  Curves
    must make ``g -> mu(g) g`` strictly increasing on ``[0, g_max]`` for the
    inverse collision to exist.
    """

    kind: str = "elastic"
    value: float = 1.0
    curve: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    g_max: float = 100.0
    spec: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("elastic", "constant", "curve"):
            raise InvalidArgument(f"unknown restitution kind {self.kind!r}")
        if self.kind == "constant" and not 0.0 < self.value <= 1.0:
            raise InvalidArgument("restitution coefficient must lie in (0, 1]")
        if self.kind == "curve":
            if self.curve is None:
                raise InvalidArgument("curve model needs a callable")
            g = np.linspace(0.0, self.g_max, 4001)
            mu = np.asarray(self.curve(g), dtype=float)
            if np.any(mu <= 0.0) or np.any(mu > 1.0) or not np.all(np.isfinite(mu)):
                raise InvalidArgument("mu(g) must lie in (0, 1] on the working range")
            object.__setattr__(self, "_monotone", bool(np.all(np.diff(mu * g) > 0.0)))

    @classmethod
    def elastic(cls) -> "RestitutionModel":
        return cls("elastic", 1.0, spec={"kind": "elastic"})

    @classmethod
    def constant(cls, mu: float) -> "RestitutionModel":
        if mu == 1.0:
            return cls("elastic", 1.0, spec={"kind": "elastic"})
        return cls("constant", float(mu), spec={"kind": "constant", "mu": float(mu)})

    @classmethod
    def exponential(cls, mu_inf: float, amplitude: float, scale: float = 1.0,
                    g_max: float = 100.0) -> "RestitutionModel":
        """mu(g) = mu_inf + amplitude * exp(-g / scale)."""

        def curve(g):
            return mu_inf + amplitude * np.exp(-np.asarray(g, dtype=float) / scale)

        spec = {"kind": "curve", "form": "exp", "mu_inf": mu_inf,
                "amplitude": amplitude, "scale": scale, "g_max": g_max}
        return cls("curve", float("nan"), curve, g_max, spec)

    @classmethod
    def from_spec(cls, spec) -> "RestitutionModel":
        if spec is None:
            return cls.elastic()
        if isinstance(spec, (int, float)):
            return cls.constant(float(spec))
        kind = spec.get("kind", "elastic")
        if kind == "elastic":
            return cls.elastic()
        if kind == "constant":
            return cls.constant(float(spec["mu"]))
        if kind == "curve" and spec.get("form", "exp") == "exp":
            return cls.exponential(float(spec["mu_inf"]), float(spec["amplitude"]),
                                   float(spec.get("scale", 1.0)), float(spec.get("g_max", 100.0)))
        raise InvalidArgument(f"unsupported restitution spec {spec!r}")

    @property
    def is_elastic(self) -> bool:
        return self.kind == "elastic"

    def mu(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "elastic":
            return np.ones_like(g)
        if self.kind == "constant":
            return np.full_like(g, self.value)
        return np.asarray(self.curve(g), dtype=float)

    def _h(self, x):
        return self.mu(x) * x

    def _dh(self, x):
        if self.kind != "curve":
            return self.mu(x)
        step = 1e-6 * np.maximum(1.0, np.abs(x))
        lo = np.maximum(x - step, 0.0)
        hi = x + step
        return (self._h(hi) - self._h(lo)) / (hi - lo)

    def pre_speed(self, g):
        """Normal relative speed g'' before a collision that leaves speed g."""
        g = np.asarray(g, dtype=float)
        if self.kind == "elastic":
            return g.copy()
        if self.kind == "constant":
            return g / self.value
        if not getattr(self, "_monotone"):
            raise NoInverseError("g -> mu(g) g is not strictly increasing on [0, g_max]")
        if np.any(g > self._h(np.asarray(self.g_max))):
            raise NoInverseError("post-collision speed exceeds the invertible range")
        lo = np.zeros_like(g)
        hi = np.full_like(g, self.g_max)
        # bisection to 1e-12 absolute; 60 halvings of g_max <= 1e3 is enough
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = self._h(mid) > g
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.all(hi - lo < 1e-13):
                break
        return 0.5 * (lo + hi)

    def chi(self, g):
        """Gain-term weight for post-collision normal speed g."""
        gpp = self.pre_speed(g)
        return 1.0 / (self.mu(gpp) * self._dh(gpp))

    def lambda_from_kappa(self, kappa):
        """Map the velocity displacement of an inverse collision to the post speed.

        For an inverse collision moving sphere 1 by ``kappa`` along sigma, return
        the post-collision normal speed ``lam`` and ``d lam / d kappa``.
        """
        kappa = np.asarray(kappa, dtype=float)
        if self.kind == "elastic":
            return kappa.copy(), np.ones_like(kappa)
        if self.kind == "constant":
            c = 2.0 * self.value / (1.0 + self.value)
            return c * kappa, np.full_like(kappa, c)
        # kappa = (1 + mu(g'')) g'' / 2 is increasing whenever mu g is
        k = lambda x: 0.5 * (1.0 + self.mu(x)) * x
        lo = np.zeros_like(kappa)
        hi = np.full_like(kappa, self.g_max)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = k(mid) > kappa
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        gpp = 0.5 * (lo + hi)
        dk = 0.5 * (1.0 + self.mu(gpp)) + 0.5 * (self._dh(gpp) - self.mu(gpp))
        return self._h(gpp), self._dh(gpp) / dk


ELASTIC = RestitutionModel.elastic()


def collide_elastic(v1, v2, sigma):
    sigma = _check_sigma(sigma)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    dv = _dot(v2 - v1, sigma)[..., None] * sigma
    return v1 + dv, v2 - dv


def collide_inelastic(v1, v2, sigma, model: RestitutionModel = ELASTIC):
    sigma = _check_sigma(sigma)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    n = _dot(v2 - v1, sigma)
    factor = 0.5 * (1.0 + model.mu(np.abs(n))) * n
    dv = factor[..., None] * sigma
    return v1 + dv, v2 - dv


def inverse_collision(v1, v2, sigma, model: RestitutionModel = ELASTIC):
    """Velocities (v1'', v2'') that collide_inelastic maps onto (v1, v2)."""
    sigma = _check_sigma(sigma)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    n = _dot(v2 - v1, sigma)
    g = np.abs(n)
    gpp = model.pre_speed(g)
    mu = model.mu(gpp)
    # (1 + mu)/(2 mu) * n, written through g'' to stay exact when mu g'' = g
    factor = 0.5 * (1.0 + mu) * gpp * np.sign(n)
    dv = factor[..., None] * sigma
    return v1 + dv, v2 - dv


def chi_factor(v1, v2, sigma, model: RestitutionModel = ELASTIC):
    """mu(g'')^-1 times the 6-D velocity Jacobian of the inverse collision.

    Centre-of-mass and tangential directions map identically, so the Jacobian
    reduces to d g'' / d g = 1 / (d(mu(g'') g'')/d g'').
    """
    sigma = _check_sigma(sigma)
    g = np.abs(_dot(np.asarray(v2, float) - np.asarray(v1, float), sigma))
    out = model.chi(g)
    return float(out) if np.ndim(out) == 0 else out


def kinetic_energy(*velocities) -> float:
    return 0.5 * float(sum(np.sum(np.asarray(v) ** 2) for v in velocities))


# -- regularization kernels ---------------------------------------------------

# integral of (1 - |x|^2)^2 over the unit ball
_BUMP_MASS = 32.0 * math.pi / 105.0


def bump(s):
    """C1 radial profile (1 - s^2)^2 clamped to zero for s >= 1."""
    s = np.asarray(s, dtype=float)
    return np.where(s < 1.0, (1.0 - s * s) ** 2, 0.0)


def bump_grad(s):
    """Derivative of :func:`bump` with respect to s."""
    s = np.asarray(s, dtype=float)
    return np.where(s < 1.0, -4.0 * s * (1.0 - s * s), 0.0)


def sample_ball_bump(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n points in the unit ball with density proportional to bump(|x|)."""
    # |x|^2 ~ Beta(3/2, 3) for density s^2 (1 - s^2)^2 ds
    s = np.sqrt(rng.beta(1.5, 3.0, size=n))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * s[:, None]


@dataclass(frozen=True)
class Kernel:
    """Product bump in position and velocity around (position, velocity).

    Vanishes unless |r - position| < eps and |v - velocity| < eps, integrates
    to one over R^3 x R^3 and is continuously differentiable.
    """

    position: tuple
    velocity: tuple
    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidArgument("kernel width must be positive")
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        object.__setattr__(self, "velocity", tuple(float(x) for x in self.velocity))

    @property
    def norm(self) -> float:
        return 1.0 / (_BUMP_MASS * self.eps ** 3) ** 2

    @property
    def peak(self) -> float:
        return self.norm

    def __call__(self, r, v):
        return kernel_eval(self, r, v)

    def sample(self, rng: np.random.Generator, n: int):
        r = np.asarray(self.position) + self.eps * sample_ball_bump(rng, n)
        v = np.asarray(self.velocity) + self.eps * sample_ball_bump(rng, n)
        return r, v

    def gradient(self, r, v):
        """Gradient of the kernel with respect to r and v."""
        dr = np.asarray(r, float) - np.asarray(self.position)
        dv = np.asarray(v, float) - np.asarray(self.velocity)
        sr = np.linalg.norm(dr, axis=-1) / self.eps
        sv = np.linalg.norm(dv, axis=-1) / self.eps
        br, bv = bump(sr), bump(sv)
        # d/dx (1 - |x|^2/eps^2)^2 = -4 (1 - s^2) x / eps^2
        gr = np.where(sr < 1, -4.0 * (1 - sr ** 2), 0.0)[..., None] * dr / self.eps ** 2
        gv = np.where(sv < 1, -4.0 * (1 - sv ** 2), 0.0)[..., None] * dv / self.eps ** 2
        return self.norm * gr * bv[..., None], self.norm * br[..., None] * gv


def kernel_eval(k: Kernel, r, v):
    dr = np.linalg.norm(np.asarray(r, float) - np.asarray(k.position), axis=-1) / k.eps
    dv = np.linalg.norm(np.asarray(v, float) - np.asarray(k.velocity), axis=-1) / k.eps
    out = k.norm * bump(dr) * bump(dv)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Support:
    """Ball-shaped bound on where one component of a density can be non-zero."""

    position: np.ndarray
    velocity: np.ndarray
    r_radius: float
    v_radius: float
