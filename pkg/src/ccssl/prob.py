"""Probability and possibility distributions over a finite label space.

A :class:`PossDist` induces a credal set, i.e. the convex set of all
distributions whose probability of any event never exceeds the event's
possibility.  For possibility measures that set has a compact description by
cumulative bounds: sort the classes by ascending possibility; a distribution is
a member iff each prefix sum stays below the possibility of the prefix's last
class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit

SIMPLEX_TOL = 1e-9
KL_EPS = 1e-12
_FMAX = float(np.finfo(np.float64).max)


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@njit(cache=True, nogil=True)
def _first_bad(x, upper):
    # one pass instead of several small numpy calls; construction sits on hot paths
    for i in range(x.size):
        v = x[i]
        if not (v >= 0.0 and v <= upper):
            return i
    return -1


def _as_vector(x) -> np.ndarray:
    if isinstance(x, (ProbDist, PossDist)):
        return x.values
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ProbDist:
    """A point on the probability simplex over ``K >= 2`` classes."""

    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1 or w.size < 2:
            raise ValidationError(f"need a 1-d vector with K >= 2 entries, got shape {w.shape}")
        bad = _first_bad(w, _FMAX)
        if bad >= 0:
            raise ValidationError(f"weight at index {bad} is {w[bad]!r}; weights must be finite and >= 0")
        total = w.sum()
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"weights sum to {total!r}, expected 1 within {SIMPLEX_TOL}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def _trusted(cls, w: np.ndarray) -> "ProbDist":
        # for vectors a kernel has already normalized; skips the checks
        obj = object.__new__(cls)
        w.setflags(write=False)
        object.__setattr__(obj, "weights", w)
        return obj

    @property
    def values(self) -> np.ndarray:
        return self.weights

    @property
    def K(self) -> int:
        return self.weights.size

    def __len__(self):
        return self.weights.size

    def __getitem__(self, i):
        return float(self.weights[i])

    def __eq__(self, other):
        if not isinstance(other, ProbDist):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())

    def __repr__(self):
        return f"ProbDist({np.array2string(self.weights, precision=6, separator=', ')})"


@dataclass(frozen=True, eq=False)
class PossDist:
    """Possibility degrees in [0, 1] with maximum 1."""

    degrees: np.ndarray

    def __post_init__(self):
        d = _frozen(self.degrees)
        if d.ndim != 1 or d.size < 2:
            raise ValidationError(f"need a 1-d vector with K >= 2 entries, got shape {d.shape}")
        bad = _first_bad(d, 1.0)
        if bad >= 0:
            raise ValidationError(f"degree at index {bad} is {d[bad]!r}; degrees must lie in [0, 1]")
        if abs(d.max() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"maximum degree is {d.max()!r}; a normalized possibility distribution needs max 1")
        object.__setattr__(self, "degrees", d)

    @property
    def values(self) -> np.ndarray:
        return self.degrees

    @property
    def K(self) -> int:
        return self.degrees.size

    def __len__(self):
        return self.degrees.size

    def __getitem__(self, i):
        return float(self.degrees[i])

    def __eq__(self, other):
        if not isinstance(other, PossDist):
            return NotImplemented
        return np.array_equal(self.degrees, other.degrees)

    def __hash__(self):
        return hash(self.degrees.tobytes())

    def __repr__(self):
        return f"PossDist({np.array2string(self.degrees, precision=6, separator=', ')})"


def make_prob(weights: Sequence[float]) -> ProbDist:
    """Normalize non-negative weights into a :class:`ProbDist`."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise ValidationError(f"need at least 2 weights, got shape {w.shape}")
    bad = np.flatnonzero(~np.isfinite(w) | (w < 0))
    if bad.size:
        raise ValidationError(f"weight at index {bad[0]} is {w[bad[0]]!r}; weights must be finite and >= 0")
    total = w.sum()
    if total <= 0:
        raise ValidationError("weights have zero total mass")
    return ProbDist(w / total)


def make_poss(degrees: Sequence[float]) -> PossDist:
    return PossDist(np.asarray(degrees, dtype=np.float64))


def degenerate(y: int, K: int) -> ProbDist:
    """Point mass at class ``y``."""
    if K < 2:
        raise ValidationError(f"K must be >= 2, got {K}")
    if not 0 <= y < K:
        raise ValidationError(f"class index {y} out of range [0, {K})")
    w = np.zeros(K)
    w[y] = 1.0
    return ProbDist(w)


def kl_divergence(p, q) -> float:
    """KL(p || q) with ``0 log 0 = 0`` and ``q`` clamped below at 1e-12."""
    p = _as_vector(p)
    q = _as_vector(q)
    if p.shape != q.shape:
        raise ValidationError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(max(kl_rows(p, q), 0.0))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL divergence along the last axis (no input validation)."""
    qc = np.maximum(q, KL_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / qc), 0.0)
    return terms.sum(axis=-1)


def possibility_measure(pi: PossDist, A: Iterable[int]) -> float:
    """Max possibility over the event ``A``; 0 for the empty event."""
    idx = list(A)
    for i in idx:
        if not 0 <= i < pi.K:
            raise ValidationError(f"class index {i} out of range [0, {pi.K})")
    if not idx:
        return 0.0
    return float(pi.degrees[idx].max())


def ascending_order(degrees: np.ndarray) -> np.ndarray:
    # stable: ties keep ascending class index
    return np.argsort(degrees, kind="stable")


@dataclass(frozen=True, eq=False)
class CredalSet:
    """Credal set of a possibility distribution, held as cumulative bounds."""

    pi: PossDist
    sorted_order: np.ndarray
    cumulative_bounds: np.ndarray

    @classmethod
    def from_possibility(cls, pi: PossDist) -> "CredalSet":
        order = ascending_order(pi.degrees)
        order.setflags(write=False)
        bounds = _frozen(pi.degrees[order])
        return cls(pi, order, bounds)

    @property
    def K(self) -> int:
        return self.pi.K

    def contains(self, p, tol: float = SIMPLEX_TOL) -> bool:
        return credal_membership(self, p, tol)


def credal_membership(Q, p, tol: float = SIMPLEX_TOL) -> bool:
    """True iff every ascending-possibility prefix sum of ``p`` is within its bound."""
    if isinstance(Q, PossDist):
        Q = CredalSet.from_possibility(Q)
    p = _as_vector(p)
    if p.shape != (Q.K,):
        raise ValidationError(f"dimension mismatch: credal set has K={Q.K}, distribution has shape {p.shape}")
    if tol < 0:
        raise ValidationError("tol must be >= 0")
    prefix = np.cumsum(p[Q.sorted_order])
    return bool(np.all(prefix <= Q.cumulative_bounds + tol))
