import math

import numpy as np
import pytest

from enskog.core import RestitutionModel
from enskog.dynamics import Domain, SystemState, evolve
from enskog.errors import InvalidArgument, InvalidState
from enskog.fields import (
    FieldEvaluator,
    InitialDensity,
    TestFunction,
    eval_f0,
    two_body,
)
from enskog.genenskog import _proposal_mix

CENTERS = ([[0, 0, 0], [3, 0.3, 0]], [[0, 0, 0], [-2, 0, 0]])


def density(eps=0.2):
    return InitialDensity.from_centers(*CENTERS, eps, 1.0)


def test_separation_diagnostic():
    with pytest.raises(InvalidState, match="support separation violated"):
        InitialDensity.from_centers([[0, 0, 0], [1.0, 0, 0]], [[0, 0, 0], [0, 0, 0]], 0.1, 1.0)


def test_torus_size_diagnostic():
    with pytest.raises(InvalidState, match="box length must exceed 2a"):
        InitialDensity.from_centers([[0, 0, 0]], [[0, 0, 0]], 0.1, 1.0, Domain.torus(1.5, 5, 5))


def test_torus_not_supported_pointwise():
    d = InitialDensity.from_centers([[0, 0, 0], [3, 0, 0]], [[0, 0, 0], [0, 0, 0]], 0.1, 1.0,
                                    Domain.torus(8, 8, 8))
    with pytest.raises(InvalidArgument):
        FieldEvaluator(d)


def test_fields_are_free_streaming_before_contact():
    d = density()
    fe = FieldEvaluator(d, samples=256)
    rng = np.random.default_rng(2)
    p, u = d.kernels[1].sample(rng, 40)
    t = 0.3
    r = p + u * t
    free = np.asarray(eval_f0(d, r - u * t, u))
    np.testing.assert_allclose(fe.f_eps(r, u, t), free, rtol=1e-12)
    np.testing.assert_allclose(fe.F1(r, u, t), free, rtol=1e-12)
    assert np.all(np.asarray(fe.survival(r, u, t)) == 1.0)


def test_survival_strictly_between_inside_window():
    d = density()
    fe = FieldEvaluator(d, samples=4096)
    st = evolve(d.center_state(), 1.0)
    # sphere 0 at the nominal contact instant, but with its pre-collision velocity
    S = float(fe.survival(st.positions[0], np.zeros(3), 1.0))
    assert 0.0 < S < 1.0


def test_two_body_matches_event_engine():
    rng = np.random.default_rng(4)
    d = density()
    R, V = d.sample(rng, 30)
    for model in (RestitutionModel.elastic(), RestitutionModel.constant(0.5)):
        x1, w1, x2, w2, _ = two_body(R[:, 0], V[:, 0], R[:, 1], V[:, 1], np.full(30, 2.0), 1.0, model)
        for k in range(30):
            ref = evolve(SystemState(R[k], V[k], 1.0, model=model), 2.0)
            np.testing.assert_allclose([x1[k], x2[k]], ref.positions, atol=1e-10)
            np.testing.assert_allclose([w1[k], w2[k]], ref.velocities, atol=1e-10)


def _mass(fe, which, t, n=6000, seed=0):
    sample, dens = _proposal_mix(fe, t)
    rng = np.random.default_rng(seed)
    r, v = sample(rng, n)
    q = dens(r, v)
    field = fe.F1 if which == "F1" else fe.f_eps
    w = np.asarray(field(r, v, np.full(n, t))) / q
    return w.mean(), w.std() / math.sqrt(n)


@pytest.mark.parametrize("model", [RestitutionModel.elastic(), RestitutionModel.constant(0.5)])
def test_post_collision_masses(model):
    # F1 keeps one unit per sphere; the literal f_eps keeps the ghosts as well
    fe = FieldEvaluator(density(), model, samples=256, seed=3)
    m1, s1 = _mass(fe, "F1", 1.6)
    assert abs(m1 - 2.0) < 4 * s1 + 0.03
    m2, s2 = _mass(fe, "f_eps", 1.6)
    assert abs(m2 - 4.0) < 4 * s2 + 0.06


def test_F2_factorizes_before_contact():
    d = density(0.05)
    fe = FieldEvaluator(d, samples=64)
    rng = np.random.default_rng(8)
    R, V = d.sample(rng, 20)
    t = 0.4
    x1, x2 = R[:, 0] + V[:, 0] * t, R[:, 1] + V[:, 1] * t
    F2 = np.asarray(fe.F2((x1, V[:, 0]), (x2, V[:, 1]), t))
    prod = np.asarray(eval_f0(d, R[:, 0], V[:, 0])) * np.asarray(eval_f0(d, R[:, 1], V[:, 1]))
    np.testing.assert_allclose(F2, prod, rtol=1e-10)


def test_test_function_derivatives():
    phi = TestFunction.bump([0.2, 0, 0], [0, 0.1, 0], 1.0, 0.8, 0.7, 0.5) \
        + 0.5 * TestFunction.plateau([-1, -1, -1], [0, 0, 0], [-1, -1, -1], [1, 1, 1],
                                     0.5, 1.5, 0.3, 0.3, 0.2)
    rng = np.random.default_rng(0)
    r = rng.uniform(-1, 0.6, (50, 3))
    v = rng.uniform(-0.5, 0.5, (50, 3))
    t = rng.uniform(0.4, 1.6, 50)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (phi(r + e, v, t) - phi(r - e, v, t)) / (2 * h)
        np.testing.assert_allclose(phi.grad_r(r, v, t)[:, k], fd, atol=1e-6)
    fd_t = (phi(r, v, t + h) - phi(r, v, t - h)) / (2 * h)
    np.testing.assert_allclose(phi.dt(r, v, t), fd_t, atol=1e-6)
    assert np.all(phi(r, v, np.full(50, phi.t_max + 0.01)) == 0)


def test_test_function_rejects_bad_widths():
    with pytest.raises(InvalidArgument):
        TestFunction.bump([0, 0, 0], [0, 0, 0], 1.0, 0.0, 1.0, 1.0)
