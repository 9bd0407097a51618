import math

import numpy as np
import pytest

from enskog.core import RestitutionModel
from enskog.dynamics import Domain, SystemState, evolve
from enskog.errors import InvalidArgument, SurvivalUnderflow, UnsupportedOrder
from enskog.fields import InitialDensity
from enskog.genenskog import (
    GESolutionConfig,
    cumulant_apply,
    cumulant_terms,
    direct_marginal,
    f1_two_particle,
    ge_mild_check,
    ge_series_f1,
    t_star,
    zeta,
)

CENTERS = ([[0, 0, 0], [3, 0.3, 0]], [[0, 0, 0], [-2, 0, 0]])


def density(eps=0.2):
    return InitialDensity.from_centers(*CENTERS, eps, 1.0)


def test_t_star_cases():
    assert t_star([3, 0, 0], [2, 0, 0], 1.0) == pytest.approx(1.0)
    assert t_star([3, 0, 0], [-1, 0, 0], 1.0) == math.inf
    assert t_star([3, 0, 0], [0, 0, 0], 1.0) == math.inf
    assert t_star([0, 3, 0], [2, 0, 0], 1.0) == math.inf
    out = t_star(np.array([[3.0, 0, 0], [0, 2, 0]]), np.array([[1.0, 0, 0], [0, 1, 0]]), 1.0)
    np.testing.assert_allclose(out, [2.0, 1.0])
    with pytest.raises(InvalidArgument):
        t_star([0.5, 0, 0], [1, 0, 0], 1.0)


def test_cumulant_terms_structure():
    assert cumulant_terms(1, 0) == [(1, [[0]])]
    assert sorted(w for w, _ in cumulant_terms(1, 1)) == [-1, 1]
    for s in (1, 2):
        terms = cumulant_terms(s, 2)
        assert len(terms) == 5
        assert sum(w for w, _ in terms) == 0
        for _, blocks in terms:
            assert sorted(i for b in blocks for i in b) == list(range(s + 2))
    with pytest.raises(UnsupportedOrder):
        cumulant_terms(1, 3)


def test_cumulant_vanishes_without_interaction():
    r = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    v = np.array([[0.0, 0, 0], [0.0, 1, 0]])
    integrand = lambda R, V: np.exp(-np.sum(R ** 2, axis=(1, 2)) / 50) * (1 + V[:, 1, 1])
    assert cumulant_apply(1, 1.5, 1, integrand, r, v, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_cumulant_detects_backward_collision():
    # receding pair that touched one time unit ago
    r = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    v = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    integrand = lambda R, V: V[:, 0, 0]
    # pair block: collided flow sends sphere 0 back with velocity +1; free block keeps -1
    assert cumulant_apply(1, 1.0, 1, integrand, r, v, 1.0) == pytest.approx(2.0)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        GESolutionConfig(InitialDensity.from_centers([[0, 0, 0], [3, 0, 0]], [[0, 0, 0]] * 2, 0.1, 1.0,
                                                     Domain.torus(8, 8, 8)))
    four = InitialDensity.from_centers([[0, 0, 0], [3, 0, 0], [6, 0, 0], [9, 0, 0]], [[0, 0, 0]] * 4, 0.1, 1.0)
    with pytest.raises(InvalidArgument):
        GESolutionConfig(four)


def test_series_reduces_to_free_term_before_contact():
    cfg = GESolutionConfig(density(), samples=2000)
    r, v = np.array([0.05, 0.0, 0.0]), np.array([0.02, 0.0, 0.0])
    val = ge_series_f1(cfg, r + v * 0.3, v, 0.3)
    assert val == pytest.approx(f1_two_particle(cfg, r + v * 0.3, v, 0.3), rel=1e-12)


@pytest.mark.parametrize("model", [RestitutionModel.elastic(), RestitutionModel.constant(0.5)])
def test_series_direct_marginal_and_closed_form_agree(model):
    d = density()
    cfg = GESolutionConfig(d, model, samples=400_000)
    st = evolve(SystemState(d.center_state().positions, d.center_state().velocities, 1.0, model=model), 1.6)
    r, v = st.positions[0], st.velocities[0]
    s, se_s = ge_series_f1(cfg, r, v, 1.6, return_error=True)
    m, se_m = direct_marginal(cfg, r, v, 1.6, return_error=True)
    c, se_c = f1_two_particle(cfg, r, v, 1.6, return_error=True)
    assert c > 0
    assert abs(s - c) < 4 * math.hypot(se_s, se_c)
    assert abs(m - c) < 4 * math.hypot(se_m, se_c)


def test_zeta_inverts_survival():
    cfg = GESolutionConfig(density(), samples=4096)
    fe = cfg.evaluator()
    st = evolve(density().center_state(), 1.0)
    r, v = st.positions[0], np.zeros(3)
    assert zeta(cfg, r, v, 1.0, evaluator=fe) * float(fe.survival(r, v, 1.0)) == pytest.approx(1.0)
    assert zeta(cfg, [0, 0, 0], [0, 0, 0], 0.2) == 1.0


def test_zeta_underflow():
    cfg = GESolutionConfig(density(), samples=256)
    # nominal free line of sphere 1 runs straight through sphere 0: every partner hits it
    with pytest.raises(SurvivalUnderflow):
        zeta(cfg, [0.0, 0.3, 0.0], [-2.0, 0.0, 0.0], 1.5)


def test_mild_check_argument_checks():
    cfg = GESolutionConfig(density(), samples=64)
    with pytest.raises(InvalidArgument):
        ge_mild_check(cfg, [], 0.0)
    with pytest.raises(InvalidArgument):
        ge_mild_check(cfg, [([0, 0, 0], [0, 0, 0], 0.2)], 0.5, replicates=1)
