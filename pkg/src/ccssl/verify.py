"""Fuzzing the exact credal projection against the Frank-Wolfe oracle."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np

from .credal_loss import OracleConfig, oracle_rows, project, project_rows
from .prob import ValidationError

TIMING_EDGES_US = (1, 2, 5, 10, 20, 50, 100, 1000)
# the exact projection must not beat the feasible oracle point by more than rounding
UPPER_BOUND_SLACK = 1e-9


def random_instances(K: int, n: int, rng: np.random.Generator, grid_fraction: float = 0.5):
    """``n`` random (pi, p_hat) pairs.

    Possibility degrees are uniform with one random class raised to 1.  A
    ``grid_fraction`` share of rows is snapped to a grid ``j / (L + 1)`` with a
    random small ``L``, which produces the ties and zeros real p-values have.
    ``p_hat`` is Dirichlet(1).
    """
    pis = rng.uniform(0.0, 1.0, (n, K))
    snap = rng.uniform(size=n) < grid_fraction
    L = rng.integers(1, 20, n)
    pis[snap] = np.floor(pis[snap] * (L[snap, None] + 1)) / (L[snap, None] + 1)
    pis[np.arange(n), rng.integers(0, K, n)] = 1.0
    p_hats = rng.dirichlet(np.ones(K), n)
    return pis, p_hats


def constraint_violation(pis: np.ndarray, ps: np.ndarray) -> np.ndarray:
    """Per-row worst violation of the simplex and of the cumulative possibility bounds."""
    order = np.argsort(pis, axis=1, kind="mergesort")
    lv = np.take_along_axis(pis, order, axis=1)
    cs = np.cumsum(np.take_along_axis(ps, order, axis=1), axis=1)
    bound = np.max(cs - lv, axis=1)
    neg = np.max(-ps, axis=1)
    mass = np.abs(ps.sum(axis=1) - 1.0)
    return np.maximum(np.maximum(bound, neg), np.maximum(mass, 0.0))


@dataclass
class KReport:
    K: int
    instances: int
    max_abs_loss_diff: float
    max_exact_minus_oracle: float
    max_violation_exact: float
    max_violation_oracle: float
    oracle_unconverged: int
    capped: int
    seconds: float


@dataclass
class OracleCheckReport:
    tolerance: float
    seed: int
    per_k: List[KReport]
    timing_edges_us: List[float]
    timing_counts: List[int]
    passed: bool = field(default=False)

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    @property
    def max_abs_loss_diff(self) -> float:
        return max(r.max_abs_loss_diff for r in self.per_k)

    @property
    def max_violation(self) -> float:
        return max(max(r.max_violation_exact, r.max_violation_oracle) for r in self.per_k)


def _chunks(n: int, parts: int):
    step = -(-n // parts)
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def _oracle_parallel(pis, p_hats, cfg, threads):
    if threads <= 1 or len(pis) < 2 * threads:
        return oracle_rows(pis, p_hats, cfg)
    parts = _chunks(len(pis), threads)
    with ThreadPoolExecutor(threads) as ex:
        res = list(ex.map(lambda ab: oracle_rows(pis[ab[0]:ab[1]], p_hats[ab[0]:ab[1]], cfg), parts))
    # concatenation in chunk order keeps the result independent of scheduling
    return tuple(np.concatenate(cols) for cols in zip(*res))


def _timing_histogram(pis, p_hats, edges) -> List[int]:
    counts = [0] * (len(edges) + 1)
    for pi, q in zip(pis, p_hats):
        t0 = time.perf_counter_ns()
        project(pi, q)
        us = (time.perf_counter_ns() - t0) / 1000.0
        counts[int(np.searchsorted(edges, us, side="right"))] += 1
    return counts


def oracle_check(k_values: Sequence[int], instances: int, tolerance: float = 1e-4, seed: int = 0,
                 threads: int = 1, oracle: OracleConfig = OracleConfig(), timing_sample: int = 1000
                 ) -> OracleCheckReport:
    """Compare exact and oracle losses on ``instances`` random problems per ``K``."""
    if instances < 1:
        raise ValidationError("instances must be >= 1")
    if not tolerance > 0:
        raise ValidationError("tolerance must be > 0")
    if any(k < 2 for k in k_values):
        raise ValidationError("every K must be >= 2")
    children = np.random.SeedSequence(seed).spawn(len(k_values))
    per_k = []
    timing = [0] * (len(TIMING_EDGES_US) + 1)
    passed = True
    for K, child in zip(k_values, children):
        rng = np.random.default_rng(child)
        pis, p_hats = random_instances(K, instances, rng)
        t0 = time.perf_counter()
        p_ex, l_ex, capped = project_rows(pis, p_hats)
        p_or, l_or, _, _, conv = _oracle_parallel(pis, p_hats, oracle, threads)
        secs = time.perf_counter() - t0
        diff = l_ex - l_or
        rep = KReport(K, instances, float(np.max(np.abs(diff))), float(np.max(diff)),
                      float(np.max(constraint_violation(pis, p_ex))), float(np.max(constraint_violation(pis, p_or))),
                      int(np.sum(~conv)), int(np.sum(capped)), secs)
        per_k.append(rep)
        if rep.max_abs_loss_diff > tolerance or rep.max_exact_minus_oracle > UPPER_BOUND_SLACK or rep.capped:
            passed = False
        m = min(timing_sample, instances)
        for i, c in enumerate(_timing_histogram(pis[:m], p_hats[:m], TIMING_EDGES_US)):
            timing[i] += c
    return OracleCheckReport(tolerance, seed, per_k, [float(e) for e in TIMING_EDGES_US], timing, passed)
