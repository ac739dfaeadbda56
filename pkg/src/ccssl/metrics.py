"""Validity, coverage, efficiency, calibration and accuracy of (credal) predictions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np

from .prob import ValidationError

DEFAULT_DELTAS = (0.05, 0.1, 0.25)


def _matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return np.asarray(rows, dtype=np.float64)
    return np.vstack([np.asarray(getattr(r, "values", r), dtype=np.float64) for r in rows])


def _labels(labels, n) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ValidationError(f"length mismatch: {n} rows vs {y.size} labels")
    return y


def strong_validity_error(pis, labels, delta: float) -> float:
    """Fraction of samples whose true label has possibility at most ``delta``."""
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta!r}")
    P = _matrix(pis)
    if len(P) == 0:
        raise ValidationError("need at least one sample")
    y = _labels(labels, len(P))
    return float(np.mean(P[np.arange(len(y)), y] <= delta))


def coverage(sets: Sequence, labels) -> float:
    if len(sets) == 0:
        raise ValidationError("need at least one sample")
    y = _labels(labels, len(sets))
    return float(np.mean([int(t) in s for s, t in zip(sets, y)]))


def efficiency_profile(pis) -> np.ndarray:
    """Per-rank mean possibility: rank 0 is each row's most plausible class."""
    P = _matrix(pis)
    if len(P) == 0:
        raise ValidationError("need at least one possibility distribution")
    return np.sort(P, axis=1)[:, ::-1].mean(axis=0)


def accuracy(predictions, labels) -> float:
    P = _matrix(predictions)
    y = _labels(labels, len(P))
    if len(P) == 0:
        raise ValidationError("need at least one sample")
    return float(np.mean(np.argmax(P, axis=1) == y))


@dataclass
class ValidityReport:
    deltas: List[float]
    error_rates: List[float]
    n: int
    raw: bool = False
    std: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self):
        header = ["delta", "error_rate", "n", "raw"]
        if self.std:
            return header + ["std"], [[d, r, self.n, int(self.raw), s]
                                      for d, r, s in zip(self.deltas, self.error_rates, self.std)]
        return header, [[d, r, self.n, int(self.raw)] for d, r in zip(self.deltas, self.error_rates)]


def validity_report(pis, labels, deltas=DEFAULT_DELTAS, raw: bool = False) -> ValidityReport:
    P = _matrix(pis)
    rates = [strong_validity_error(P, labels, d) for d in deltas]
    return ValidityReport([float(d) for d in deltas], rates, len(P), raw)


def aggregate_validity(reports: List[ValidityReport]) -> ValidityReport:
    """Mean error rate per delta over runs (e.g. seeds), with the sample standard deviation.

    Deviations are stored unscaled; any display scaling is left to the reader.
    """
    if not reports:
        raise ValueError("need at least one report")
    deltas = reports[0].deltas
    if any(r.deltas != deltas or r.raw != reports[0].raw for r in reports):
        raise ValueError("reports disagree on deltas or on raw/normalized")
    rates = np.array([r.error_rates for r in reports])
    std = rates.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(len(deltas))
    return ValidityReport(deltas, rates.mean(axis=0).tolist(), sum(r.n for r in reports), reports[0].raw,
                          std.tolist())


@dataclass
class EceReport:
    ece: float
    bins: int
    bin_confidence: List[float]
    bin_accuracy: List[float]
    bin_count: List[int]

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self):
        header = ["bin", "lower", "upper", "confidence", "accuracy", "count"]
        rows = []
        for b in range(self.bins):
            rows.append([b, b / self.bins, (b + 1) / self.bins,
                         self.bin_confidence[b], self.bin_accuracy[b], self.bin_count[b]])
        return header, rows


def ece(predictions, labels, bins: int = 15) -> EceReport:
    """Expected calibration error over equal-width, right-closed confidence bins.

    Bin ``b`` holds confidences in ``(b/bins, (b+1)/bins]``; a confidence that
    lands exactly on an edge goes to the lower bin.
    """
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    P = _matrix(predictions)
    y = _labels(labels, len(P))
    n = len(P)
    conf = P.max(axis=1)
    correct = (np.argmax(P, axis=1) == y).astype(np.float64)
    # the small offset keeps products like 0.8 * 15 = 12.000000000000002 in the lower bin
    idx = np.clip(np.ceil(conf * bins - 1e-9).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        mean_acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / max(n, 1) * np.abs(mean_acc - mean_conf))) if n else 0.0
    return EceReport(min(max(value, 0.0), 1.0), bins, mean_conf.tolist(), mean_acc.tolist(),
                     counts.astype(int).tolist())
