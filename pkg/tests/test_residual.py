import json

import numpy as np
import pytest

from enskog.core import RestitutionModel
from enskog.errors import InvalidArgument
from enskog.fields import FieldEvaluator, InitialDensity, TestFunction
from enskog.residual import (
    ResidualReport,
    decay_flags,
    epsilon_scan,
    ghost_defect,
    mild_residual,
    reports_to_csv,
    reports_to_json,
    weak_residual,
)

CENTERS = ([[0, 0, 0], [3, 0.3, 0]], [[0, 0, 0], [-2, 0, 0]])
PHI = TestFunction.bump([-0.3, 0.05, 0], [0, 0, 0], 1.0, 0.9, 0.6, 1.0)


def evaluator(eps=0.2, model=RestitutionModel.elastic()):
    return FieldEvaluator(InitialDensity.from_centers(*CENTERS, eps, 1.0), model, samples=2048, seed=5)


@pytest.mark.parametrize("model", [RestitutionModel.elastic(), RestitutionModel.constant(0.5)])
def test_weak_residual_matches_closed_form(model):
    fe = evaluator(model=model)
    w, we = weak_residual(fe, PHI, return_error=True)
    g, ge = ghost_defect(fe, PHI, samples=40000)
    assert g < 0
    assert abs(w - g) < 4 * np.hypot(we, ge) + 1e-3 * abs(g)


def test_ghost_defect_needs_two_spheres():
    d = InitialDensity.from_centers([[0, 0, 0], [3, 0, 0], [-3, 0, 0]], [[0, 0, 0]] * 3, 0.1, 1.0)
    with pytest.raises(InvalidArgument):
        ghost_defect(FieldEvaluator(d), PHI)


def test_mild_residual_vanishes_away_from_contact():
    fe = evaluator()
    probes = [([2.4, 0.3, 0.0], [-2.0, 0.0, 0.0], 0.3), ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.2)]
    sup, err = mild_residual(fe, probes)
    assert sup == 0.0 and err == 0.0


def test_mild_residual_rejects_nonpositive_time():
    with pytest.raises(InvalidArgument):
        mild_residual(evaluator(), [([0, 0, 0], [0, 0, 0], 0.0)])


def test_decay_flags():
    assert decay_flags([1.0, 0.5, 0.2])
    assert not decay_flags([1.0, 0.9, 0.2])
    assert decay_flags([-1.0, 0.5, -0.1])
    assert decay_flags([3.0])


def test_scan_reports_and_serialization():
    reps = epsilon_scan(evaluator, [0.2, 0.1], [PHI, 2.0 * PHI], samples=512)
    assert [r.epsilon for r in reps] == [0.2, 0.1]
    assert reps[0].decay is None and len(reps[-1].decay) == 2
    text = reports_to_csv(reps)
    lines = text.split("\r\n")
    assert lines[0] == "epsilon,phi,pairing,pairing_err,mild_sup,quad_err"
    assert lines[-1] == "" and len(lines) == 6
    assert float(lines[1].split(",")[2]) == reps[0].pairing[0]
    doc = json.loads(reports_to_json(reps))
    assert doc["schema"] == 1 and len(doc["reports"]) == 2


def test_scan_is_deterministic():
    a = reports_to_csv(epsilon_scan(evaluator, [0.2], [PHI], samples=256))
    b = reports_to_csv(epsilon_scan(evaluator, [0.2], [PHI], samples=256))
    assert a == b


def test_report_validation():
    with pytest.raises(InvalidArgument):
        ResidualReport(0.1, (float("nan"),), (0.0,), 0.0, 0.0)
    with pytest.raises(InvalidArgument):
        epsilon_scan(evaluator, [], [PHI])
