"""Inductive conformal prediction over a probabilistic classifier.

Calibration scores are kept sorted so a p-value is one binary search per
candidate label.  p-values follow the non-randomized formula: the fraction of
the ``L`` calibration scores (out of ``L + 1``) that are at least as
non-conforming as the candidate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .prob import PossDist, ProbDist, ValidationError, _as_vector

SCHEMA_VERSION = 1
MEASURE_KINDS = ("diff", "prop")


@dataclass(frozen=True)
class NonConformityMeasure:
    """``diff``: max other probability minus own; ``prop``: their ratio with offset ``gamma``.

    ``infinite_on_zero`` opts into scoring a zero-probability class as ``+inf``
    under ``prop`` with ``gamma == 0``; by default that case is an error.
    """

    kind: str = "diff"
    gamma: float = 0.0
    infinite_on_zero: bool = False

    def __post_init__(self):
        if self.kind not in MEASURE_KINDS:
            raise ValidationError(f"unknown non-conformity measure {self.kind!r}; expected one of {MEASURE_KINDS}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValidationError(f"gamma must be a finite value >= 0, got {self.gamma!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": float(self.gamma), "infinite_on_zero": self.infinite_on_zero}


def _other_max(probs: np.ndarray) -> np.ndarray:
    """For each entry, the maximum over the *other* entries of its row."""
    if probs.shape[-1] < 2:
        raise ValidationError("need K >= 2")
    top2 = -np.partition(-probs, 1, axis=-1)[..., :2]
    out = np.broadcast_to(top2[..., :1], probs.shape).copy()
    first = np.argmax(probs, axis=-1)
    np.put_along_axis(out, first[..., None], top2[..., 1:2], axis=-1)
    return out


def score_matrix(measure: NonConformityMeasure, probs: np.ndarray) -> np.ndarray:
    """Non-conformity of every (row, candidate class) pair; shape matches ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    other = _other_max(probs)
    if measure.kind == "diff":
        return other - probs
    denom = probs + measure.gamma
    zero = denom == 0
    if np.any(zero):
        if not measure.infinite_on_zero:
            raise ValidationError(
                "prop measure with gamma=0 hit a class with zero predicted probability; "
                "set gamma > 0 or enable infinite_on_zero"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            out = other / denom
        out[zero] = np.inf
        return out
    return other / denom


def nonconformity(measure: NonConformityMeasure, p_hat, y: int) -> float:
    p = _as_vector(p_hat)
    if p.ndim != 1 or p.size < 2:
        raise ValidationError("need a distribution with K >= 2")
    if not 0 <= y < p.size:
        raise ValidationError(f"class index {y} out of range [0, {p.size})")
    return float(score_matrix(measure, p[None, :])[0, y])


@dataclass(frozen=True, eq=False)
class RawPValues:
    """Conformal p-values per class, with the candidate scores that produced them.

    ``L`` is the calibration size when known; values then lie on the grid
    ``j / (L + 1)``.
    """

    values: np.ndarray
    L: Optional[int] = None
    candidate_scores: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValidationError("need K >= 2 p-values")
        if np.any(~np.isfinite(v)) or np.any((v < 0) | (v > 1)):
            raise ValidationError("p-values must lie in [0, 1]")
        if self.L is not None:
            j = v * (self.L + 1)
            if np.any(np.abs(j - np.round(j)) > 1e-9):
                raise ValidationError(f"p-values are not on the grid j/(L+1) for L={self.L}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.candidate_scores is not None:
            s = np.array(self.candidate_scores, dtype=np.float64)
            if s.shape != v.shape:
                raise ValidationError("candidate_scores must match the p-value shape")
            s.setflags(write=False)
            object.__setattr__(self, "candidate_scores", s)

    @property
    def K(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class ConformalCalibrator:
    """Frozen, sorted calibration scores plus the measure that produced them."""

    scores: np.ndarray
    measure: NonConformityMeasure
    K: int

    def __post_init__(self):
        s = np.sort(np.array(self.scores, dtype=np.float64))
        if s.ndim != 1 or s.size < 1:
            raise ValidationError("calibration needs at least one score")
        if np.any(np.isnan(s)):
            raise ValidationError("calibration scores contain NaN")
        if self.K < 2:
            raise ValidationError(f"K must be >= 2, got {self.K}")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def L(self) -> int:
        return self.scores.size

    def p_value_matrix(self, probs: np.ndarray, return_scores: bool = False):
        """Raw p-values for a batch of predictions of shape ``(n, K)``."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.K:
            raise ValidationError(f"expected predictions of shape (n, {self.K}), got {probs.shape}")
        cand = score_matrix(self.measure, probs)
        # count of calibration scores >= candidate score
        counts = self.L - np.searchsorted(self.scores, cand, side="left")
        pv = counts / (self.L + 1)
        return (pv, cand) if return_scores else pv

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "measure": self.measure.to_dict(),
            "K": int(self.K),
            "scores": [float(x) for x in self.scores],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ConformalCalibrator":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported calibrator schema_version {version!r}")
        m = doc["measure"]
        return cls(np.asarray(doc["scores"], dtype=np.float64),
                   NonConformityMeasure(m["kind"], float(m.get("gamma", 0.0)), bool(m.get("infinite_on_zero", False))),
                   int(doc["K"]))


def calibrate(predictions: Sequence, labels: Sequence[int], measure: NonConformityMeasure) -> ConformalCalibrator:
    """Score every calibration pair and freeze the sorted scores."""
    if len(predictions) == 0:
        raise ValidationError("empty calibration set")
    if len(predictions) != len(labels):
        raise ValidationError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    probs = np.vstack([_as_vector(p) for p in predictions]) if not isinstance(predictions, np.ndarray) \
        else np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    K = probs.shape[1]
    if np.any((y < 0) | (y >= K)):
        bad = int(np.flatnonzero((y < 0) | (y >= K))[0])
        raise ValidationError(f"label at position {bad} is {y[bad]}, out of range [0, {K})")
    scores = score_matrix(measure, probs)[np.arange(len(y)), y]
    return ConformalCalibrator(scores, measure, K)


def p_values(cal: ConformalCalibrator, p_hat) -> RawPValues:
    p = _as_vector(p_hat)
    if p.shape != (cal.K,):
        raise ValidationError(f"dimension mismatch: calibrator K={cal.K}, prediction shape {p.shape}")
    pv, cand = cal.p_value_matrix(p[None, :], return_scores=True)
    return RawPValues(pv[0], cal.L, cand[0])


def _fallback_rows(values: np.ndarray, scores: Optional[np.ndarray]) -> np.ndarray:
    """One-hot rows on the least non-conforming class, used for all-zero p-value rows."""
    key = -values if scores is None else scores
    out = np.zeros_like(values)
    out[np.arange(len(values)), np.argmin(key, axis=1)] = 1.0
    return out


def max_ratio_rows(values: np.ndarray, scores: Optional[np.ndarray] = None) -> np.ndarray:
    """Divide each row by its maximum; all-zero rows fall back to a one-hot."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max(axis=1, keepdims=True)
    zero = peak[:, 0] <= 0
    out = values / np.where(peak > 0, peak, 1.0)
    if np.any(zero):
        out[zero] = _fallback_rows(values[zero], None if scores is None else scores[zero])
    return out


def argmax_one_rows(values: np.ndarray, scores: Optional[np.ndarray] = None) -> np.ndarray:
    """Raise the (lowest-index) argmax of each row to 1, keep the rest."""
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    zero = values.max(axis=1) <= 0
    out[np.arange(len(values)), np.argmax(values, axis=1)] = 1.0
    if np.any(zero):
        out[zero] = _fallback_rows(values[zero], None if scores is None else scores[zero])
    return out


NORMALIZERS = {"max-ratio": max_ratio_rows, "argmax-one": argmax_one_rows}


def normalize_rows(values: np.ndarray, how: str, scores: Optional[np.ndarray] = None) -> np.ndarray:
    try:
        fn = NORMALIZERS[how]
    except KeyError:
        raise ValidationError(f"unknown normalization {how!r}; expected one of {tuple(NORMALIZERS)}") from None
    return fn(values, scores)


def normalize_max_ratio(raw: RawPValues) -> PossDist:
    s = None if raw.candidate_scores is None else raw.candidate_scores[None, :]
    return PossDist(max_ratio_rows(raw.values[None, :], s)[0])


def normalize_argmax_one(raw: RawPValues) -> PossDist:
    s = None if raw.candidate_scores is None else raw.candidate_scores[None, :]
    return PossDist(argmax_one_rows(raw.values[None, :], s)[0])


def prediction_set(raw, delta: float) -> frozenset:
    """Classes whose p-value reaches ``delta``; may be empty."""
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta!r}")
    v = raw.values if isinstance(raw, RawPValues) else np.asarray(raw, dtype=np.float64)
    return frozenset(int(i) for i in np.flatnonzero(v >= delta))
