"""KL projection of a prediction onto the credal set of a possibility distribution.

The credal loss of a prediction ``p_hat`` is ``min_{p in Q} KL(p || p_hat)``.
:func:`credal_projection` computes the minimizer exactly by settling classes
face by face, from the lowest possibility level upward; each settled group
receives the remaining budget of its level in proportion to ``p_hat``.
:func:`oracle_projection` solves the same problem with a pairwise Frank-Wolfe
method and is kept only to cross-check the exact routine.

The kernels work on plain float arrays and are compiled with numba; the
public wrappers validate inputs and build result objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numba
import numpy as np

from .prob import KL_EPS, PossDist, ProbDist, ValidationError, _as_vector

FEAS_TOL = 1e-9


@numba.njit(cache=True, nogil=True)
def _kl(p, q):
    s = 0.0
    for i in range(p.size):
        if p[i] > 0.0:
            s += p[i] * np.log(p[i] / max(q[i], KL_EPS))
    return max(s, 0.0)


@numba.njit(cache=True, nogil=True)
def _stable_argsort(x):
    """Stable ascending argsort; expected linear time via buckets over [min, max]."""
    K = x.size
    if K <= 64:
        return np.argsort(x, kind="mergesort")
    lo, hi = x.min(), x.max()
    scale = K / (hi - lo) if hi > lo else 0.0
    counts = np.zeros(K + 1, np.int64)
    b = np.empty(K, np.int64)
    for i in range(K):
        j = min(max(int((x[i] - lo) * scale), 0), K - 1)
        b[i] = j
        counts[j + 1] += 1
    for j in range(K):
        counts[j + 1] += counts[j]
    order = np.empty(K, np.int64)
    pos = counts[:K].copy()
    for i in range(K):
        order[pos[b[i]]] = i
        pos[b[i]] += 1
    # placement kept index order, so sorting each bucket stably is enough
    for j in range(K):
        s, e = counts[j], counts[j + 1]
        if e - s <= 1:
            continue
        if e - s > 32:
            sub = order[s:e].copy()
            keys = np.empty(e - s)
            for t in range(e - s):
                keys[t] = x[sub[t]]
            o = np.argsort(keys, kind="mergesort")
            for t in range(e - s):
                order[s + t] = sub[o[t]]
            continue
        for t in range(s + 1, e):
            v = order[t]
            kv = x[v]
            u = t - 1
            while u >= s and x[order[u]] > kv:
                order[u + 1] = order[u]
                u -= 1
            order[u + 1] = v
    return order


@numba.njit(cache=True, nogil=True)
def _project_kernel(pi, p_hat, out, faces, tol):
    """Fill ``out`` with the projection; return (n_faces, inside, capped)."""
    K = pi.size
    order = _stable_argsort(pi)
    lv = np.empty(K)
    q = np.empty(K)
    for k in range(K):
        lv[k] = pi[order[k]]
        q[k] = p_hat[order[k]]

    # fast path: p_hat already satisfies every cumulative bound
    c = 0.0
    inside = True
    for k in range(K):
        c += q[k]
        if c > lv[k] + tol:
            inside = False
            break
    if inside:
        for k in range(K):
            out[k] = p_hat[k]
        return 0, True, False

    vals = np.empty(K)
    lo = 0  # settled classes always form a prefix of the ascending order
    assigned = 0.0
    n_faces = 0
    while lo < K:
        if n_faces >= K:
            return n_faces, False, True
        hi = K - 1
        accepted = False
        scans = 0
        while hi >= lo:
            scans += 1
            if scans > K:
                return n_faces, False, True
            level = lv[hi]
            budget = max(level - assigned, 0.0)
            mass = 0.0
            for k in range(lo, hi + 1):
                mass += q[k]
            n = hi - lo + 1
            ok = True
            run = assigned
            for k in range(lo, hi + 1):
                run += budget * (q[k] / mass if mass > 0.0 else 1.0 / n)
                if run > lv[k] + tol:
                    ok = False
                    break
            if ok:
                for k in range(lo, hi + 1):
                    vals[k] = budget * (q[k] / mass if mass > 0.0 else 1.0 / n)
                assigned += budget
                faces[n_faces] = level
                n_faces += 1
                lo = hi + 1
                accepted = True
                break
            # next candidate: the highest level strictly below this one
            while hi >= lo and lv[hi] == level:
                hi -= 1
        if not accepted:
            return n_faces, False, True
    for k in range(K):
        out[order[k]] = vals[k]
    return n_faces, False, False


@numba.njit(cache=True, nogil=True)
def _project_rows(pis, p_hats, out, losses, capped, tol):
    n, K = pis.shape
    faces = np.empty(K)
    for i in range(n):
        _, inside, cap = _project_kernel(pis[i], p_hats[i], out[i], faces, tol)
        capped[i] = cap
        losses[i] = 0.0 if inside else _kl(out[i], p_hats[i])


def project_rows(pis: np.ndarray, p_hats: np.ndarray, tol: float = FEAS_TOL):
    """Batch projection without validation.

    Returns ``(p_r, losses, capped)`` for row-aligned arrays of shape ``(n, K)``.
    """
    pis = np.ascontiguousarray(pis, dtype=np.float64)
    p_hats = np.ascontiguousarray(p_hats, dtype=np.float64)
    out = np.empty_like(p_hats)
    losses = np.empty(len(p_hats))
    capped = np.zeros(len(p_hats), dtype=np.bool_)
    _project_rows(pis, p_hats, out, losses, capped, tol)
    return out, losses, capped


def project(pi, p_hat, tol: float = FEAS_TOL) -> Tuple[np.ndarray, float]:
    """Single-instance projection on raw arrays; returns ``(p_r, loss)``."""
    pi = np.ascontiguousarray(pi, dtype=np.float64)
    p_hat = np.ascontiguousarray(p_hat, dtype=np.float64)
    out = np.empty_like(p_hat)
    faces = np.empty(p_hat.size)
    _, inside, capped = _project_kernel(pi, p_hat, out, faces, tol)
    if capped:
        raise RuntimeError("credal projection hit its iteration cap")
    return out, (0.0 if inside else _kl(out, p_hat))


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """Minimizer ``p_r`` of KL(. || p_hat) over the credal set, and the minimum."""

    p_r: ProbDist
    loss: float
    inside: bool
    faces: tuple = ()
    converged: bool = True
    iterations: int = 0
    gap: float = 0.0


def _check_inputs(pi, p_hat) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(pi, PossDist):
        pi = PossDist(np.asarray(pi, dtype=np.float64))
    if not isinstance(p_hat, ProbDist):
        p_hat = ProbDist(np.asarray(p_hat, dtype=np.float64))
    if pi.K != p_hat.K:
        raise ValidationError(f"dimension mismatch: pi has K={pi.K}, p_hat has K={p_hat.K}")
    return np.ascontiguousarray(pi.degrees), np.ascontiguousarray(p_hat.weights)


def credal_projection(pi, p_hat, tol: float = FEAS_TOL) -> ProjectionResult:
    """Exact KL projection of ``p_hat`` onto the credal set of ``pi``.

    ``faces`` lists the possibility level settled in each pass.  Returns
    ``p_hat`` itself with zero loss when it already lies in the set.
    """
    pv, qv = _check_inputs(pi, p_hat)
    out = np.empty_like(qv)
    faces = np.empty(qv.size)
    n_faces, inside, capped = _project_kernel(pv, qv, out, faces, tol)
    if capped:
        raise RuntimeError("credal projection hit its iteration cap")
    if inside:
        return ProjectionResult(p_hat if isinstance(p_hat, ProbDist) else ProbDist(qv), 0.0, True)
    # clean rounding so the result passes the simplex check exactly
    out = np.maximum(out, 0.0)
    out /= out.sum()
    return ProjectionResult(ProbDist._trusted(out), float(_kl(out, qv)), False, tuple(float(f) for f in faces[:n_faces]),
                            iterations=n_faces)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def credal_loss(pi, logits) -> float:
    """Credal loss of ``softmax(logits)``."""
    p_hat = softmax(logits)
    pv, _ = _check_inputs(pi, p_hat)
    return project(pv, p_hat)[1]


def credal_loss_gradient(pi, logits) -> np.ndarray:
    """Gradient of the credal loss w.r.t. the logits, ``p_hat - p_r``.

    The minimizer is held fixed as a target; by the envelope theorem this is
    the exact gradient wherever the minimizer is unique, which KL's strict
    convexity guarantees.
    """
    p_hat = softmax(logits)
    pv, _ = _check_inputs(pi, p_hat)
    p_r, loss = project(pv, p_hat)
    if loss == 0.0:
        return np.zeros_like(p_hat)
    return p_hat - p_r


# ---------------------------------------------------------------------------
# Frank-Wolfe verification oracle


@dataclass(frozen=True)
class OracleConfig:
    max_iterations: int = 100_000
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be > 0")


@numba.njit(cache=True, nogil=True)
def _lmo(pi, g, out):
    # Extreme point minimizing <g, p>: give the lowest-gradient classes as much
    # mass as the possibility measure allows, one class at a time.
    order = np.argsort(g, kind="mergesort")
    top = 0.0
    for k in range(order.size):
        c = order[k]
        nxt = max(top, pi[c])
        out[c] = nxt - top
        top = nxt


@numba.njit(cache=True, nogil=True)
def _grad(x, p_hat, g):
    for i in range(x.size):
        g[i] = np.log(max(x[i], 1e-300) / max(p_hat[i], KL_EPS)) + 1.0


@numba.njit(cache=True, nogil=True)
def _dphi(x, d, t, p_hat):
    s = 0.0
    for i in range(x.size):
        if d[i] != 0.0:
            s += d[i] * np.log(max(x[i] + t * d[i], 1e-300) / max(p_hat[i], KL_EPS))
    return s


@numba.njit(cache=True, nogil=True)
def _line_search(x, d, p_hat, tmax):
    if _dphi(x, d, tmax, p_hat) <= 0.0:
        return tmax
    if _dphi(x, d, 0.0, p_hat) >= 0.0:
        return 0.0
    a = 0.0
    b = tmax
    for _ in range(100):
        m = 0.5 * (a + b)
        if _dphi(x, d, m, p_hat) > 0.0:
            b = m
        else:
            a = m
        if b - a <= 1e-16 * max(1.0, tmax):
            break
    return 0.5 * (a + b)


@numba.njit(cache=True, nogil=True)
def _frank_wolfe(pi, p_hat, x, max_iter, tol):
    """Pairwise Frank-Wolfe with exact line search; returns (iterations, gap, converged)."""
    K = pi.size
    cap = 256 + 32 * K
    verts = np.zeros((cap, K))
    w = np.zeros(cap)
    g = np.empty(K)
    s = np.empty(K)
    d = np.empty(K)
    # start at the vertex favouring the classes p_hat favours
    for i in range(K):
        g[i] = -p_hat[i]
    _lmo(pi, g, verts[0])
    w[0] = 1.0
    n_act = 1
    for i in range(K):
        x[i] = verts[0, i]
    gap = np.inf
    for it in range(max_iter):
        _grad(x, p_hat, g)
        _lmo(pi, g, s)
        gap = 0.0
        for i in range(K):
            gap += g[i] * (x[i] - s[i])
        if gap <= tol:
            return it, gap, True
        # away vertex: worst active vertex along the gradient
        a = 0
        best = -np.inf
        for j in range(n_act):
            if w[j] <= 0.0:
                continue
            v = 0.0
            for i in range(K):
                v += g[i] * verts[j, i]
            if v > best:
                best = v
                a = j
        for i in range(K):
            d[i] = s[i] - verts[a, i]
        t = _line_search(x, d, p_hat, w[a])
        if t <= 0.0:
            # no progress along the pairwise direction; fall back to a plain FW step
            for i in range(K):
                d[i] = s[i] - x[i]
            t = _line_search(x, d, p_hat, 1.0)
            for j in range(n_act):
                w[j] *= 1.0 - t
            sidx = -1
            for j in range(n_act):
                same = True
                for i in range(K):
                    if verts[j, i] != s[i]:
                        same = False
                        break
                if same:
                    sidx = j
                    break
            if sidx < 0 and n_act < cap:
                sidx = n_act
                n_act += 1
                for i in range(K):
                    verts[sidx, i] = s[i]
                w[sidx] = 0.0
            if sidx >= 0:
                w[sidx] += t
            for i in range(K):
                x[i] += t * d[i]
            continue
        # move weight t from the away vertex to s
        sidx = -1
        for j in range(n_act):
            same = True
            for i in range(K):
                if verts[j, i] != s[i]:
                    same = False
                    break
            if same:
                sidx = j
                break
        if sidx < 0:
            if n_act == cap:
                # compact: drop zero-weight vertices
                m = 0
                for j in range(n_act):
                    if w[j] > 0.0:
                        verts[m] = verts[j]
                        w[m] = w[j]
                        if j == a:
                            a = m
                        m += 1
                n_act = m
            if n_act == cap:
                return it, gap, False
            sidx = n_act
            n_act += 1
            for i in range(K):
                verts[sidx, i] = s[i]
            w[sidx] = 0.0
        w[sidx] += t
        w[a] -= t
        for i in range(K):
            x[i] += t * d[i]
        if w[a] <= 1e-15:
            w[a] = 0.0
            # swap-remove the away vertex
            last = n_act - 1
            if a != last:
                verts[a] = verts[last]
                w[a] = w[last]
            n_act -= 1
            # recompute x from the active set to stop drift
            for i in range(K):
                x[i] = 0.0
            for j in range(n_act):
                for i in range(K):
                    x[i] += w[j] * verts[j, i]
    _grad(x, p_hat, g)
    _lmo(pi, g, s)
    gap = 0.0
    for i in range(K):
        gap += g[i] * (x[i] - s[i])
    return max_iter, gap, gap <= tol


@numba.njit(cache=True, nogil=True)
def _oracle_rows(pis, p_hats, out, losses, gaps, iters, conv, max_iter, tol):
    for r in range(pis.shape[0]):
        it, gap, ok = _frank_wolfe(pis[r], p_hats[r], out[r], max_iter, tol)
        losses[r] = _kl(out[r], p_hats[r])
        gaps[r] = gap
        iters[r] = it
        conv[r] = ok


def oracle_rows(pis: np.ndarray, p_hats: np.ndarray, cfg: OracleConfig = OracleConfig()):
    """Batch Frank-Wolfe oracle; returns ``(p, losses, gaps, iterations, converged)``."""
    pis = np.ascontiguousarray(pis, dtype=np.float64)
    p_hats = np.ascontiguousarray(p_hats, dtype=np.float64)
    n = len(p_hats)
    out = np.empty_like(p_hats)
    losses = np.empty(n)
    gaps = np.empty(n)
    iters = np.empty(n, dtype=np.int64)
    conv = np.empty(n, dtype=np.bool_)
    _oracle_rows(pis, p_hats, out, losses, gaps, iters, conv, cfg.max_iterations, cfg.tolerance)
    return out, losses, gaps, iters, conv


def oracle_projection(pi, p_hat, cfg: OracleConfig = OracleConfig()) -> ProjectionResult:
    """Frank-Wolfe approximation of the credal projection.

    Non-convergence within ``cfg.max_iterations`` is reported through
    ``converged=False`` rather than raised.  The returned point is feasible,
    so its loss upper-bounds the exact minimum; the duality ``gap`` bounds the
    excess.
    """
    pv, qv = _check_inputs(pi, p_hat)
    x = np.empty_like(qv)
    it, gap, ok = _frank_wolfe(pv, qv, x, cfg.max_iterations, cfg.tolerance)
    x = np.maximum(x, 0.0)
    x /= x.sum()
    loss = float(_kl(x, qv))
    return ProjectionResult(ProbDist(x), loss, loss <= 1e-12, converged=bool(ok), iterations=int(it), gap=float(gap))
