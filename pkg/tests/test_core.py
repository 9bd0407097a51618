import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from enskog.core import (
    ELASTIC,
    Kernel,
    RestitutionModel,
    bump,
    bump_grad,
    chi_factor,
    collide_elastic,
    collide_inelastic,
    inverse_collision,
)
from enskog.errors import InvalidArgument

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
vec = st.tuples(finite, finite, finite).map(np.array)


def unit(draw_vec):
    n = np.linalg.norm(draw_vec)
    return draw_vec / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, st.floats(0.05, 1.0))
def test_inverse_collision_round_trip(v1, v2, s, mu):
    sigma = unit(s)
    model = RestitutionModel.constant(mu)
    w1, w2 = collide_inelastic(v1, v2, sigma, model)
    b1, b2 = inverse_collision(w1, w2, sigma, model)
    if abs(np.dot(v2 - v1, sigma)) > 1e-6:
        np.testing.assert_allclose(b1, v1, atol=1e-9)
        np.testing.assert_allclose(b2, v2, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, st.floats(0.05, 1.0))
def test_momentum_and_energy_loss(v1, v2, s, mu):
    sigma = unit(s)
    w1, w2 = collide_inelastic(v1, v2, sigma, RestitutionModel.constant(mu))
    np.testing.assert_allclose(w1 + w2, v1 + v2, atol=1e-12)
    g = np.dot(v2 - v1, sigma)
    dE = 0.5 * (w1 @ w1 + w2 @ w2 - v1 @ v1 - v2 @ v2)
    assert dE == pytest.approx(-(1 - mu * mu) * g * g / 4, abs=1e-10)


def test_elastic_is_involution():
    rng = np.random.default_rng(1)
    v1, v2 = rng.normal(size=(2, 3))
    sigma = unit(rng.normal(size=3))
    w1, w2 = collide_elastic(v1, v2, sigma)
    b1, b2 = collide_elastic(w1, w2, sigma)
    np.testing.assert_allclose([b1, b2], [v1, v2], atol=1e-14)


def _inverse_jacobian_fd(v1, v2, sigma, model, h=1e-6):
    x0 = np.concatenate([v1, v2])
    cols = []
    for k in range(6):
        out = []
        for s in (1, -1):
            x = x0.copy()
            x[k] += s * h
            out.append(np.concatenate(inverse_collision(x[:3], x[3:], sigma, model)))
        cols.append((out[0] - out[1]) / (2 * h))
    return np.linalg.det(np.array(cols).T)


@pytest.mark.parametrize("model", [ELASTIC, RestitutionModel.constant(0.5),
                                   RestitutionModel.exponential(0.4, 0.5, 1.0)])
def test_chi_factor_matches_fd_jacobian(model):
    rng = np.random.default_rng(7)
    sigma = unit(rng.normal(size=3))
    v1 = rng.normal(size=3)
    v2 = v1 + 1.3 * sigma + 0.4 * unit(np.cross(sigma, [1.0, 0, 0]))
    g = abs(np.dot(v2 - v1, sigma))
    jac = _inverse_jacobian_fd(v1, v2, sigma, model)
    gpp = model.pre_speed(g)
    expected = abs(jac) / float(model.mu(gpp))
    assert float(chi_factor(v1, v2, sigma, model)) == pytest.approx(expected, rel=1e-6)


def test_chi_constant_model_is_inverse_square():
    model = RestitutionModel.constant(0.5)
    assert float(model.chi(0.7)) == pytest.approx(4.0, abs=1e-12)


def test_bump_mass_radial_quadrature():
    mass, _ = integrate.quad(lambda s: 4 * math.pi * s * s * float(bump(s)), 0, 1)
    assert mass == pytest.approx(32 * math.pi / 105, rel=1e-12)


def test_bump_gradient():
    s = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = (bump(s + h) - bump(s - h)) / (2 * h)
    np.testing.assert_allclose(bump_grad(s), fd, atol=1e-8)
    assert float(bump(1.0)) == 0.0 and float(bump(1.5)) == 0.0


def test_kernel_unit_mass_monte_carlo():
    k = Kernel((0.3, -0.1, 0.0), (1.0, 0.0, 0.5), 0.2)
    rng = np.random.default_rng(0)
    n = 200_000
    r = k.position + rng.uniform(-0.2, 0.2, size=(n, 3))
    v = k.velocity + rng.uniform(-0.2, 0.2, size=(n, 3))
    vol = 0.4 ** 6
    vals = np.asarray(k(r, v))
    est, se = vals.mean() * vol, vals.std() * vol / math.sqrt(n)
    assert abs(est - 1.0) < 4 * se


def test_kernel_samples_stay_in_support():
    k = Kernel((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.1)
    r, v = k.sample(np.random.default_rng(3), 5000)
    assert np.all(np.linalg.norm(r, axis=1) < 0.1)
    assert np.all(np.linalg.norm(v, axis=1) < 0.1)


def test_lambda_from_kappa_inverts_curve():
    model = RestitutionModel.exponential(0.4, 0.5, 1.0)
    g = np.linspace(0.05, 4, 30)
    kappa = 0.5 * (1 + model.mu(g)) * g
    lam, dlam = model.lambda_from_kappa(kappa)
    # lam is the post speed mu(g) g for the pre speed g
    np.testing.assert_allclose(lam, model.mu(g) * g, rtol=1e-9)
    h = 1e-6
    lp, _ = model.lambda_from_kappa(kappa + h)
    lm, _ = model.lambda_from_kappa(kappa - h)
    np.testing.assert_allclose(dlam, (lp - lm) / (2 * h), rtol=1e-5)


def test_bad_restitution_spec():
    with pytest.raises(InvalidArgument):
        RestitutionModel.from_spec({"kind": "spline"})
    with pytest.raises(InvalidArgument):
        RestitutionModel.constant(1.5)
