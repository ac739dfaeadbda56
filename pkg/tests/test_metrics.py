import json

import numpy as np
import pytest

from ccssl.conformal import RawPValues, prediction_set
from ccssl.metrics import accuracy, aggregate_validity, coverage, ece, efficiency_profile, strong_validity_error, validity_report
from ccssl.prob import ValidationError


def _pis_with_true(values):
    # two-class rows whose true class 0 carries the given degree
    return np.array([[v, 1.0] for v in values]), np.zeros(len(values), dtype=int)


def test_strong_validity_examples():
    P, y = _pis_with_true([0.8, 0.03, 0.5, 0.2])
    assert strong_validity_error(P, y, 0.05) == 0.25
    P, y = _pis_with_true([1, 1, 1])
    assert strong_validity_error(P, y, 0.2) == 0.0
    P, y = _pis_with_true([0, 0])
    assert strong_validity_error(P, y, 0.1) == 1.0


def test_strong_validity_errors():
    with pytest.raises(ValidationError):
        strong_validity_error(np.ones((2, 2)), [0], 0.1)
    with pytest.raises(ValidationError):
        strong_validity_error(np.ones((2, 2)), [0, 0], 1.0)


def test_strong_validity_monotone_in_delta():
    rng = np.random.default_rng(0)
    P = rng.integers(0, 11, (300, 4)) / 11
    y = rng.integers(0, 4, 300)
    rates = [strong_validity_error(P, y, d) for d in np.linspace(0.01, 0.99, 40)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_coverage_examples():
    assert coverage([{0}, {0, 1}, {1}], [0, 1, 0]) == pytest.approx(2 / 3)
    assert coverage([{0, 1, 2}] * 4, [0, 1, 2, 1]) == 1.0
    assert coverage([set()] * 3, [0, 1, 2]) == 0.0
    with pytest.raises(ValidationError):
        coverage([{0}], [0, 1])


def test_coverage_and_strong_validity_are_complementary():
    rng = np.random.default_rng(1)
    L = 19
    raw = rng.integers(0, L + 1, (500, 3)) / (L + 1)
    y = rng.integers(0, 3, 500)
    for delta in (0.05, 0.1, 0.25, 0.5):
        sets = [prediction_set(RawPValues(r), delta) for r in raw]
        assert coverage(sets, y) >= 1 - strong_validity_error(raw, y, delta) - 1e-12


def test_efficiency_profile_examples():
    assert np.allclose(efficiency_profile([[1, 0.2], [1, 0.4]]), [1, 0.3])
    assert np.allclose(efficiency_profile([[1, 0.5, 0]]), [1, 0.5, 0])
    assert np.allclose(efficiency_profile(np.ones((5, 3))), [1, 1, 1])
    # rank-aligned: the top degree comes first regardless of class
    assert np.allclose(efficiency_profile([[0.2, 1], [1, 0.4]]), [1, 0.3])
    with pytest.raises(ValidationError):
        efficiency_profile(np.zeros((0, 3)))


def test_accuracy_examples():
    assert accuracy([[0.9, 0.1], [0.2, 0.8]], [0, 1]) == 1.0
    assert accuracy([[0.9, 0.1], [0.2, 0.8]], [1, 0]) == 0.0
    assert accuracy([[0.5, 0.5]], [0]) == 1.0
    with pytest.raises(ValidationError):
        accuracy([[0.5, 0.5]], [0, 1])


def test_ece_examples():
    assert ece([[1.0, 0.0]] * 4, [0] * 4).ece == 0.0
    rep = ece([[0.8, 0.2]] * 10, [0] * 5 + [1] * 5)
    assert rep.ece == pytest.approx(0.3)
    assert sum(rep.bin_count) == 10
    # 0.8 lies on the edge between bins 11 and 12 of 15 and belongs to the lower one
    assert rep.bin_count[11] == 10


def test_ece_perfect_calibration_is_zero():
    # within each occupied bin the accuracy equals the mean confidence
    preds = [[0.6, 0.4]] * 5 + [[0.9, 0.1]] * 10
    labels = [0, 0, 0, 1, 1] + [0] * 9 + [1]
    assert ece(preds, labels).ece == pytest.approx(0.0, abs=1e-12)


def test_ece_is_permutation_invariant():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(4), 400)
    y = rng.integers(0, 4, 400)
    perm = rng.permutation(400)
    assert ece(P, y).ece == pytest.approx(ece(P[perm], y[perm]).ece, abs=1e-15)
    rep = ece(P, y, bins=10)
    assert 0 <= rep.ece <= 1 and sum(rep.bin_count) == 400


def test_ece_errors():
    with pytest.raises(ValidationError):
        ece([[0.5, 0.5]], [0], bins=0)
    with pytest.raises(ValidationError):
        ece([[0.5, 0.5]], [0, 1])


def test_reports_serialize():
    P, y = _pis_with_true([0.8, 0.03, 0.5, 0.2])
    rep = validity_report(P, y)
    doc = json.loads(rep.to_json())
    assert doc["schema_version"] == 1 and doc["deltas"] == [0.05, 0.1, 0.25] and doc["n"] == 4
    header, rows = rep.csv_rows()
    assert header[0] == "delta" and len(rows) == 3
    header, rows = ece([[0.8, 0.2]], [0]).csv_rows()
    assert len(rows) == 15 and header[-1] == "count"


def test_aggregate_validity_keeps_raw_std():
    a = validity_report([[1, 0.0], [1, 0.5]], [1, 1], [0.1, 0.6])
    b = validity_report([[1, 0.5], [1, 0.5]], [1, 1], [0.1, 0.6])
    agg = aggregate_validity([a, b])
    assert agg.error_rates == [0.25, 1.0] and agg.n == 4
    assert agg.std == pytest.approx([np.std([0.5, 0.0], ddof=1), 0.0])
    header, rows = agg.csv_rows()
    assert header[-1] == "std" and len(rows) == 2
    with pytest.raises(ValueError):
        aggregate_validity([a, validity_report([[1, 0.0]], [1], [0.2])])
