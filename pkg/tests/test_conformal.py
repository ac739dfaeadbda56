import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccssl.conformal import (
    ConformalCalibrator,
    NonConformityMeasure,
    RawPValues,
    calibrate,
    nonconformity,
    normalize_argmax_one,
    normalize_max_ratio,
    normalize_rows,
    p_values,
    prediction_set,
    score_matrix,
)
from ccssl.prob import ValidationError, credal_membership, make_prob

DIFF = NonConformityMeasure("diff")


def brute_scores(measure, probs):
    out = np.empty_like(probs)
    for i, row in enumerate(probs):
        for y in range(len(row)):
            other = max(row[j] for j in range(len(row)) if j != y)
            out[i, y] = other - row[y] if measure.kind == "diff" else other / (row[y] + measure.gamma)
    return out


def test_nonconformity_examples():
    p = make_prob([0.7, 0.2, 0.1])
    assert nonconformity(DIFF, p, 0) == pytest.approx(-0.5)
    assert nonconformity(DIFF, p, 1) == pytest.approx(0.5)
    assert nonconformity(NonConformityMeasure("prop", 0.1), p, 0) == pytest.approx(0.25)
    assert nonconformity(NonConformityMeasure("prop", 0.01), make_prob([1.0, 0.0]), 1) == pytest.approx(100.0)


def test_prop_zero_gamma_zero_probability():
    m = NonConformityMeasure("prop", 0.0)
    with pytest.raises(ValidationError, match="infinite_on_zero"):
        nonconformity(m, make_prob([1.0, 0.0]), 1)
    m_inf = NonConformityMeasure("prop", 0.0, infinite_on_zero=True)
    assert nonconformity(m_inf, make_prob([1.0, 0.0]), 1) == np.inf
    assert nonconformity(m_inf, make_prob([1.0, 0.0]), 0) == 0.0


def test_measure_validation():
    with pytest.raises(ValidationError):
        NonConformityMeasure("margin")
    with pytest.raises(ValidationError):
        NonConformityMeasure("prop", -0.1)
    with pytest.raises(ValidationError):
        nonconformity(DIFF, make_prob([0.5, 0.5]), 2)


@pytest.mark.parametrize("measure", [DIFF, NonConformityMeasure("prop", 0.1)])
def test_score_matrix_matches_loop(measure):
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(5), 200)
    probs[:10] = np.eye(5)[rng.integers(0, 5, 10)]
    probs[10:20, :2] = 0.5
    probs[10:20, 2:] = 0.0
    assert np.allclose(score_matrix(measure, probs), brute_scores(measure, probs), atol=1e-15)


def test_calibrate_examples():
    assert list(calibrate([[1, 0], [0, 1]], [0, 1], DIFF).scores) == [-1, -1]
    assert list(calibrate([[1, 0], [0, 1]], [1, 0], DIFF).scores) == [1, 1]
    assert calibrate([[0.6, 0.4]], [0], DIFF).scores == pytest.approx([-0.2])


def test_calibrate_errors():
    with pytest.raises(ValidationError):
        calibrate([], [], DIFF)
    with pytest.raises(ValidationError):
        calibrate([[0.5, 0.5]], [0, 1], DIFF)
    with pytest.raises(ValidationError):
        calibrate([[0.5, 0.5]], [2], DIFF)


def _cal(scores):
    return ConformalCalibrator(np.array(scores), DIFF, 2)


@pytest.mark.parametrize("cand, expected", [(0.3, 0.4), (0.9, 0.0), (0.1, 0.8)])
def test_p_value_examples(cand, expected):
    # a 2-class prediction whose class-0 diff score is cand (up to rounding)
    p = make_prob([(1 - cand) / 2, (1 + cand) / 2])
    s = nonconformity(DIFF, p, 0)
    assert s == pytest.approx(cand)
    # use the computed score in place of its decimal so ties are exact
    scores = [s if v == cand else v for v in (0.8, 0.1, 0.5, 0.2)]
    assert p_values(_cal(scores), p).values[0] == pytest.approx(expected)


def test_p_values_grid_and_storage_order():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(4), 50)
    y = rng.integers(0, 4, 50)
    cal = calibrate(probs, y, DIFF)
    shuffled = ConformalCalibrator(rng.permutation(cal.scores), DIFF, 4)
    q = rng.dirichlet(np.ones(4), 100)
    a = cal.p_value_matrix(q)
    assert np.array_equal(a, shuffled.p_value_matrix(q))
    j = a * (cal.L + 1)
    assert np.allclose(j, np.round(j), atol=1e-9)
    brute = np.array([[np.sum(cal.scores >= s) for s in row] for row in score_matrix(DIFF, q)]) / (cal.L + 1)
    assert np.array_equal(a, brute)


def test_p_values_dimension_mismatch():
    cal = _cal([0.1, 0.2])
    with pytest.raises(ValidationError):
        p_values(cal, make_prob([0.2, 0.3, 0.5]))


def test_raw_p_values_grid_check():
    RawPValues([0.4, 0.2], L=4)
    with pytest.raises(ValidationError):
        RawPValues([0.33, 0.2], L=4)
    with pytest.raises(ValidationError):
        RawPValues([1.2, 0.2])


def test_normalization_examples():
    assert np.allclose(normalize_max_ratio(RawPValues([0.8, 0.4, 0.2])).values, [1, 0.5, 0.25])
    assert np.allclose(normalize_max_ratio(RawPValues([0.4, 0.4])).values, [1, 1])
    assert np.allclose(normalize_max_ratio(RawPValues([0, 0, 0.5])).values, [0, 0, 1])
    assert np.allclose(normalize_argmax_one(RawPValues([0.8, 0.4, 0.2])).values, [1, 0.4, 0.2])
    assert np.allclose(normalize_argmax_one(RawPValues([0.4, 0.4])).values, [1, 0.4])
    assert np.allclose(normalize_argmax_one(RawPValues([1, 0.2])).values, [1, 0.2])


def test_all_zero_fallback_uses_least_nonconforming_class():
    raw = RawPValues([0.0, 0.0, 0.0], candidate_scores=[0.4, -0.1, 0.2])
    assert np.array_equal(normalize_max_ratio(raw).values, [0, 1, 0])
    assert np.array_equal(normalize_argmax_one(raw).values, [0, 1, 0])
    with pytest.raises(ValidationError):
        normalize_rows(np.zeros((1, 2)), "softmax")


def test_prediction_set_examples():
    raw = RawPValues([0.4, 0.02, 0.8])
    assert prediction_set(raw, 0.25) == {0, 2}
    assert prediction_set(raw, 0.9) == frozenset()
    assert prediction_set(raw, 0.01) == {0, 1, 2}
    with pytest.raises(ValidationError):
        prediction_set(raw, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=2, max_size=6), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_prediction_sets_nested(js, d1, d2):
    raw = RawPValues(np.asarray(js) / 11.0, L=10)
    lo, hi = sorted((d1, d2))
    assert prediction_set(raw, hi) <= prediction_set(raw, lo)


def test_normalization_dominance_and_containment():
    rng = np.random.default_rng(4)
    for _ in range(500):
        K = int(rng.integers(2, 7))
        raw = rng.integers(0, 11, K) / 11.0
        n1 = normalize_max_ratio(RawPValues(raw)).values
        n2 = normalize_argmax_one(RawPValues(raw)).values
        assert np.all(n2 <= n1 + 1e-15)
        for _ in range(5):
            p = rng.dirichlet(np.ones(K))
            if credal_membership(normalize_argmax_one(RawPValues(raw)), p):
                assert credal_membership(normalize_max_ratio(RawPValues(raw)), p)


def test_json_round_trip_is_exact():
    rng = np.random.default_rng(5)
    cal = calibrate(rng.dirichlet(np.ones(3), 40), rng.integers(0, 3, 40), NonConformityMeasure("prop", 0.1))
    text = cal.to_json()
    doc = json.loads(text)
    assert doc["schema_version"] == 1 and doc["measure"] == {"kind": "prop", "gamma": 0.1, "infinite_on_zero": False}
    back = ConformalCalibrator.from_json(text)
    assert np.array_equal(back.scores, cal.scores) and back.K == 3 and back.measure == cal.measure
    assert back.to_json() == text
    doc["schema_version"] = 7
    with pytest.raises(ValidationError):
        ConformalCalibrator.from_json(json.dumps(doc))
