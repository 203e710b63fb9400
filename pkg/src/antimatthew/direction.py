"""Common descent directions over convex hulls of gradients.

Directions are negated convex combinations ``d = -sum_i alpha_i h_i`` of hull
vectors, so ``d . g <= 0`` means "does not increase the quantity whose gradient
is g" to first order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

CONSTRAINT_TOL = 1e-8


class SolverError(ValueError):
    pass


@dataclass
class DirectionResult:
    alpha: np.ndarray
    d: np.ndarray
    objective: float = 0.0
    infeasible: bool = False
    iterations: int = 0
    gap: float = 0.0
    flags: list[str] = field(default_factory=list)

    def __iter__(self):
        yield self.alpha
        yield self.d


def _correctly_rounded_sqrt(q: Fraction) -> float:
    """float(sqrt(q)) rounded to nearest for a nonnegative rational q."""
    if q == 0:
        return 0.0
    p, r = q.numerator, q.denominator
    k = max(0, (128 + r.bit_length() - p.bit_length()) // 2 + 2)
    num = p << (2 * k)
    m = math.isqrt(num // r)
    if m * m * r == num:
        return float(Fraction(m, 1 << k))
    # the true root lies strictly inside (m, m+1) / 2^k; m has >= 64 bits so
    # no float or rounding midpoint is inside that interval
    return float(Fraction(2 * m + 1, 1 << (k + 1)))


def normalize(g: np.ndarray) -> tuple[np.ndarray, bool]:
    """Unit-norm copy of ``g`` and a zero-norm flag.

    Each component is the correctly rounded value of ``g_i / ||g||``, computed
    in exact rational arithmetic, so the result depends only on the direction
    of ``g``: ``normalize(c * g)`` equals ``normalize(g)`` bit for bit whenever
    ``c * g`` is itself exact. Vectors with norm <= 1e-12 are returned unchanged.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise SolverError("non-finite gradient")
    sq = sum((Fraction(float(v)) ** 2 for v in g), Fraction(0))
    if sq <= Fraction(1, 10 ** 24):
        return g.copy(), True
    out = np.empty_like(g)
    for i, v in enumerate(g):
        fv = Fraction(float(v))
        mag = _correctly_rounded_sqrt(fv * fv / sq)
        out[i] = mag if v >= 0 else -mag
    return out, False


def _as_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    G = np.array([np.asarray(v, dtype=float).ravel() for v in vectors])
    if G.ndim != 2 or G.shape[0] == 0:
        raise SolverError("need at least one vector")
    if not np.all(np.isfinite(G)):
        raise SolverError("non-finite input vector")
    return G


def _support_solve(K: np.ndarray, support: np.ndarray) -> np.ndarray | None:
    """Minimiser of a.Ka on the affine hull of ``support``; None if it leaves the simplex."""
    k = len(support)
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = K[np.ix_(support, support)]
    A[:k, k] = A[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0][:k]
    if not np.all(np.isfinite(sol)) or np.any(sol < 0) or abs(sol.sum() - 1.0) > 1e-9:
        return None
    alpha = np.zeros(K.shape[0])
    alpha[support] = sol / sol.sum()
    return alpha


def min_norm_weights(K: np.ndarray, tol: float = 1e-10, max_iter: int = 1000):
    """Away-step Frank-Wolfe on min alpha^T K alpha over the simplex.

    Uses exact line search along each step. Every few iterations the iterate's
    support is tried as the optimal face with one small linear solve, which
    ends the slow zig-zag near degenerate optima. Returns ``(alpha, gap,
    iterations)`` where ``gap`` is the final Frank-Wolfe duality gap
    ``a.Ka - min_i (Ka)_i``.
    """
    m = K.shape[0]
    if m == 1:
        return np.ones(1), 0.0, 0
    # start at the shortest vertex
    alpha = np.zeros(m)
    alpha[int(np.argmin(np.diag(K)))] = 1.0
    scale = max(1.0, float(np.max(np.abs(np.diag(K)))))
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Ka = K @ alpha
        aKa = float(alpha @ Ka)
        s = int(np.argmin(Ka))
        gap = aKa - float(Ka[s])
        if gap <= tol * scale:
            break
        support = np.flatnonzero(alpha > 0)
        if it % 10 == 0:
            cand = _support_solve(K, support)
            if cand is not None:
                Kc = K @ cand
                cgap = float(cand @ Kc) - float(Kc.min())
                if cgap <= tol * scale:
                    alpha, gap = cand, cgap
                    break
        v = int(support[np.argmax(Ka[support])])
        away_gain = float(Ka[v]) - aKa
        if gap >= away_gain or alpha[v] >= 1.0:
            direction = -alpha.copy()
            direction[s] += 1.0
            gmax = 1.0
        else:
            direction = alpha.copy()
            direction[v] -= 1.0
            gmax = alpha[v] / (1.0 - alpha[v])
        Kd = K @ direction
        curv = float(direction @ Kd)
        slope = float(alpha @ Kd)
        if curv <= 0:
            step = gmax if slope < 0 else 0.0
        else:
            step = min(max(-slope / curv, 0.0), gmax)
        if step <= 0:
            break
        alpha = alpha + step * direction
        alpha[alpha < 1e-15] = 0.0
        alpha /= alpha.sum()
    return alpha, max(float(gap), 0.0), it


def min_norm_direction(grads: Sequence[np.ndarray], tol: float = 1e-10,
                       max_iter: int = 1000) -> DirectionResult:
    """Min-norm point of the convex hull of ``grads``; ``d`` is its negation."""
    G = _as_matrix(grads)
    alpha, gap, it = min_norm_weights(G @ G.T, tol, max_iter)
    d = -(alpha @ G)
    return DirectionResult(alpha, d, objective=float(d @ d), iterations=it, gap=gap)


# ---------------------------------------------------------------------------
# dense simplex method


@dataclass
class LPResult:
    x: np.ndarray
    status: str          # optimal | infeasible | unbounded | iteration_limit
    value: float
    iterations: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]
    T[:, col] = 0.0
    T[row, col] = 1.0


def _run_simplex(T, basis, allowed, max_iter, tol):
    """Bland's-rule iterations on tableau T (objective row last). Returns status, iters."""
    it = 0
    n = T.shape[1] - 1
    while True:
        cost = T[-1, :n]
        entering = next((j for j in range(n) if allowed[j] and cost[j] < -tol), None)
        if entering is None:
            return "optimal", it
        if it >= max_iter:
            return "iteration_limit", it
        col = T[:-1, entering]
        best, leave = None, None
        for i in np.flatnonzero(col > tol):
            ratio = T[i, -1] / col[i]
            if (best is None or ratio < best - tol
                    or (abs(ratio - best) <= tol and basis[i] < basis[leave])):
                best, leave = ratio, i
        if leave is None:
            return "unbounded", it
        _pivot(T, leave, entering)
        basis[leave] = entering
        it += 1


def simplex_solve(c: np.ndarray, A_eq: np.ndarray, b_eq: np.ndarray,
                  max_iter: int = 1000, tol: float = 1e-11) -> LPResult:
    """Minimise ``c.x`` subject to ``A_eq x = b_eq, x >= 0`` (two-phase, Bland's rule)."""
    A = np.array(A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1 with one artificial per row
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    allowed = [True] * (n + m)
    status, it1 = _run_simplex(T, basis, allowed, max_iter, tol)
    if status == "iteration_limit":
        return LPResult(np.zeros(n), status, np.nan, it1)
    if -T[-1, -1] > 1e-9:
        return LPResult(np.zeros(n), "infeasible", np.nan, it1)

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n:
            j = next((j for j in range(n) if abs(T[i, j]) > tol), None)
            if j is None:
                continue
            _pivot(T, i, j)
            basis[i] = j
        keep.append(i)
    T = np.vstack([T[keep], T[-1:]])
    basis = [basis[i] for i in keep]
    T = np.delete(T, np.s_[n:n + m], axis=1)

    # phase 2
    T[-1, :] = 0.0
    T[-1, :n] = c
    for i, j in enumerate(basis):
        T[-1] -= c[j] * T[i]
    status, it2 = _run_simplex(T, basis, [True] * n, max_iter - it1, tol)
    x = np.zeros(n)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    return LPResult(x, status, float(c @ x), it1 + it2)


def constrained_direction(objective_grad: np.ndarray, constraint_grads: Sequence[np.ndarray],
                          hull: Sequence[np.ndarray]) -> DirectionResult:
    """Best descent direction for one objective inside the negated hull.

    Solves ``min_alpha d.g  s.t. d.c_j <= 0,  d = -alpha^T H,  alpha in simplex``.
    If the program is infeasible (or the simplex hits its iteration cap) the
    min-norm direction over ``{g} + constraints`` is returned instead with
    ``infeasible=True``; that direction is zeroed if it still breaks a
    constraint by more than 1e-8.
    """
    H = _as_matrix(hull)
    g = np.asarray(objective_grad, dtype=float).ravel()
    C = _as_matrix(constraint_grads) if len(constraint_grads) else np.zeros((0, H.shape[1]))
    if not np.all(np.isfinite(g)) or not np.all(np.isfinite(C)):
        raise SolverError("non-finite input vector")
    k, j = H.shape[0], C.shape[0]

    cost = -(H @ g)
    cscale = np.max(np.abs(cost))
    cost = cost / cscale if cscale > 0 else cost
    B = (H @ C.T).T                    # row j: h_i . c_j
    rows = []
    for row in B:
        s = np.max(np.abs(row))
        if s > 0:
            rows.append(row / s)
    B = np.array(rows).reshape(len(rows), k)
    nc = B.shape[0]
    A = np.zeros((1 + nc, k + nc))
    A[0, :k] = 1.0
    A[1:, :k] = -B
    A[1:, k:] = np.eye(nc)
    b = np.zeros(1 + nc)
    b[0] = 1.0
    c = np.concatenate([cost, np.zeros(nc)])
    cap = 10 * (k + j) ** 2
    lp = simplex_solve(c, A, b, max_iter=cap)

    if lp.status == "optimal":
        alpha = np.clip(lp.x[:k], 0.0, None)
        alpha /= alpha.sum()
        d = -(alpha @ H)
        if j == 0 or float(np.max(C @ d)) <= CONSTRAINT_TOL:
            return DirectionResult(alpha, d, objective=float(d @ g), iterations=lp.iterations)
        flag = "constraint_tolerance"
    else:
        flag = lp.status

    fb = min_norm_direction([g, *C])
    d = fb.d
    if j and float(np.max(C @ d)) > CONSTRAINT_TOL:
        d = np.zeros_like(d)
    # report weights over the hull when possible: the fallback lives on {g} + C
    return DirectionResult(fb.alpha, d, objective=float(d @ g), infeasible=True,
                           iterations=lp.iterations + fb.iterations, gap=fb.gap,
                           flags=[flag])
