"""Linear epsilon-insensitive support vector regression.

Solves

    minimize_{w, b}  1/2 w.w + C * sum_i max(0, |w.x_i + b - z_i| - eps)

through its dual in the signed coefficients ``beta_i`` (``w = X^T beta``):

    minimize  1/2 beta^T K beta - z.beta + eps * |beta|_1
    s.t.      sum(beta) = 0,  -C <= beta_i <= C

using deterministic pairwise coordinate steps with exact line search. Once the
set of points sitting on the tube boundary has been identified, the free
coefficients are refined by one linear solve. The bias is recovered from the
primal: given the optimal ``w`` the loss is piecewise linear in ``b`` and the
midpoint of its minimizing interval is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import lsq_linear

_TAU = 1e-12


@dataclass(frozen=True)
class SvrProblem:
    inputs: np.ndarray
    targets: np.ndarray
    C: float
    epsilon: float

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        z = np.asarray(self.targets, dtype=float).ravel()
        if X.shape[0] < 1:
            raise ValueError("need at least one training point")
        if X.shape[0] != z.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {z.shape[0]} targets")
        if not (self.C > 0 and self.epsilon > 0):
            raise ValueError("C and epsilon must be positive")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(z))):
            raise ValueError("inputs and targets must be finite")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", z)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class SvrModel:
    w: np.ndarray
    b: float
    objective: float = math.nan
    kkt_residual: float = math.nan
    n_iter: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
        object.__setattr__(self, "b", float(self.b))


class SvrConvergenceError(RuntimeError):
    """The dual solver hit ``max_iter`` before meeting the tolerance."""

    def __init__(self, message: str, model: SvrModel, residual: float):
        super().__init__(message)
        self.model = model
        self.residual = residual


def predict(model: SvrModel, x) -> float | np.ndarray:
    """``b + w.x`` for one vector, or row-wise for a 2-D array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.w.shape[0]:
        raise ValueError(f"expected {model.w.shape[0]} features, got {x.shape[-1]}")
    if x.ndim == 1:
        return float(model.b + model.w @ x)
    return model.b + x @ model.w


def primal_objective(w: np.ndarray, b: float, problem: SvrProblem) -> float:
    r = problem.inputs @ w + b - problem.targets
    loss = np.maximum(np.abs(r) - problem.epsilon, 0.0)
    return 0.5 * float(w @ w) + problem.C * float(loss.sum())


# ---------------------------------------------------------------------------
# Dual solver


@numba.njit(cache=True, nogil=True)
def _max_violation(g, beta, ub, eps):
    min_up = np.inf
    min_down = np.inf
    for k in range(beta.shape[0]):
        if beta[k] < ub[k]:
            up = g[k] + (eps if beta[k] >= 0.0 else -eps)
            if up < min_up:
                min_up = up
        if beta[k] > -ub[k]:
            down = -g[k] + (eps if beta[k] <= 0.0 else -eps)
            if down < min_down:
                min_down = down
    return -(min_up + min_down)


@numba.njit(cache=True, nogil=True)
def _pair_step(a, q, eps, bi, bj, hi):
    # minimize 1/2 a t^2 + q t + eps|bi + t| + eps|bj - t| over t in [0, hi]
    pts = np.empty(4)
    pts[0] = 0.0
    m = 1
    if 0.0 < -bi < hi:
        pts[m] = -bi
        m += 1
    if 0.0 < bj < hi:
        pts[m] = bj
        m += 1
    pts[m] = hi
    m += 1
    if m == 4 and pts[1] > pts[2]:
        pts[1], pts[2] = pts[2], pts[1]
    for s in range(m - 1):
        t0 = pts[s]
        t1 = pts[s + 1]
        mid = 0.5 * (t0 + t1)
        si = 1.0 if bi + mid > 0.0 else -1.0
        sj = 1.0 if bj - mid > 0.0 else -1.0
        c = q + eps * si - eps * sj
        if a > 0.0:
            t = -c / a
            if t <= t0:
                return t0
            if t < t1:
                return t
        elif c >= 0.0:
            return t0
    return hi


@numba.njit(cache=True, nogil=True)
def _smo(K, z, ub, eps, tol, max_iter, beta):
    n = beta.shape[0]
    g = K @ beta - z
    viol = _max_violation(g, beta, ub, eps)
    it = 0
    while it < max_iter:
        # first index: steepest feasible increase
        i = -1
        min_up = np.inf
        for k in range(n):
            if beta[k] < ub[k]:
                up = g[k] + (eps if beta[k] >= 0.0 else -eps)
                if up < min_up:
                    min_up = up
                    i = k
        min_down = np.inf
        j = -1
        best = -1.0
        for k in range(n):
            if beta[k] > -ub[k]:
                down = -g[k] + (eps if beta[k] <= 0.0 else -eps)
                if down < min_down:
                    min_down = down
                s = min_up + down
                if s < 0.0:
                    a = K[i, i] + K[k, k] - 2.0 * K[i, k]
                    if a <= _TAU:
                        a = _TAU
                    gain = s * s / a
                    if gain > best:
                        best = gain
                        j = k
        viol = -(min_up + min_down)
        if viol <= tol or j < 0:
            break
        a = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if a < 0.0:
            a = 0.0
        hi_i = ub[i] - beta[i]
        hi_j = beta[j] + ub[j]
        hi = min(hi_i, hi_j)
        t = _pair_step(a, g[i] - g[j], eps, beta[i], beta[j], hi)
        if t <= 0.0:
            # no progress possible along the chosen pair
            break
        if t == hi_i:
            beta[i] = ub[i]
        elif t == -beta[i]:
            beta[i] = 0.0
        else:
            beta[i] += t
        if t == hi_j:
            beta[j] = -ub[j]
        elif t == beta[j]:
            beta[j] = 0.0
        else:
            beta[j] -= t
        for k in range(n):
            g[k] += t * (K[k, i] - K[k, j])
        it += 1
    return it


def _violation(K: np.ndarray, z: np.ndarray, beta: np.ndarray, ub: np.ndarray, eps: float) -> float:
    return float(_max_violation(K @ beta - z, beta, ub, eps))


def _polish(K, z, beta, ub, eps):
    """Exact solve for the free coefficients given the current active set."""
    scale = np.maximum(ub, 1.0)
    free = (np.abs(beta) > 1e-13 * scale) & (np.abs(beta) < ub - 1e-13 * scale)
    if not free.any():
        return beta
    F = np.flatnonzero(free)
    B = np.flatnonzero(~free)
    sign = np.sign(beta[F])
    nf = F.size
    A = np.zeros((nf + 1, nf + 1))
    A[:nf, :nf] = K[np.ix_(F, F)]
    A[:nf, nf] = 1.0
    A[nf, :nf] = 1.0
    rhs = np.empty(nf + 1)
    rhs[:nf] = z[F] - eps * sign - K[np.ix_(F, B)] @ beta[B]
    rhs[nf] = -beta[B].sum()
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    candidate = beta.copy()
    candidate[F] = sol[:nf]
    if np.any(np.sign(candidate[F]) != sign) or np.any(np.abs(candidate[F]) > ub[F]):
        return beta
    if _violation(K, z, candidate, ub, eps) <= _violation(K, z, beta, ub, eps):
        return candidate
    return beta


def _merge_duplicates(X: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.column_stack([X, z])
    uniq, first, counts = np.unique(rows, axis=0, return_index=True, return_counts=True)
    order = np.argsort(first, kind="stable")
    uniq = uniq[order]
    return uniq[:, :-1], uniq[:, -1], counts[order]


def optimal_bias(u: np.ndarray, eps: float, weights: np.ndarray | None = None) -> float:
    """Midpoint of the set of ``b`` minimizing ``sum_i weights_i * max(0, |u_i + b| - eps)``.

    ``weights`` must be positive integers so the subgradient test is exact.
    """
    u = np.asarray(u, dtype=float)
    wts = np.ones(u.size, dtype=np.int64) if weights is None else np.asarray(weights, dtype=np.int64)
    # slope of the i-th term: -w_i for b < -u_i - eps, +w_i for b > -u_i + eps
    lo_break = -u - eps
    hi_break = -u + eps
    points = np.unique(np.concatenate([lo_break, hi_break]))

    def slope_right(b):  # slope on (b, next breakpoint)
        return int(wts[b >= hi_break].sum() - wts[b < lo_break].sum())

    def slope_left(b):  # slope on (previous breakpoint, b)
        return int(wts[b > hi_break].sum() - wts[b <= lo_break].sum())

    left = right = None
    for p in points:
        if left is None and slope_right(p) >= 0:
            left = p
        if slope_left(p) <= 0:
            right = p
    assert left is not None and right is not None
    if slope_right(left) > 0:
        return float(left)
    return float(0.5 * (left + right))


def train_svr(problem: SvrProblem, tol: float = 1e-8, max_iter: int = 1_000_000) -> SvrModel:
    """Fit a linear epsilon-SVR; deterministic for fixed inputs."""
    X, z, counts = _merge_duplicates(problem.inputs, problem.targets)
    ub = problem.C * counts.astype(float)
    K = X @ X.T
    beta = np.zeros(z.size)
    inner_tol = min(tol, 1e-9) * 1e-2
    n_iter = int(_smo(K, z, ub, problem.epsilon, inner_tol, max_iter, beta))
    beta = _polish(K, z, beta, ub, problem.epsilon)
    w = X.T @ beta
    b = optimal_bias(X @ w - z, problem.epsilon, counts)
    model = SvrModel(w, b, primal_objective(w, b, problem), n_iter=n_iter)
    residual = kkt_check(model, problem)
    model = SvrModel(w, b, model.objective, residual, n_iter)
    if residual > tol:
        dual_gap = _violation(K, z, beta, ub, problem.epsilon)
        if n_iter >= max_iter or dual_gap > inner_tol:
            raise SvrConvergenceError(
                f"no convergence after {n_iter} iterations (KKT residual {residual:.3g})",
                model,
                residual,
            )
    return model


# ---------------------------------------------------------------------------
# Optimality certificate


def _stationarity(w, fixed_x, fixed_sum, Xb, C, signs):
    """Best bounded choice of boundary coefficients; returns the residual norm."""
    target = np.concatenate([w - fixed_x, [-fixed_sum]])
    if Xb.shape[0] == 0:
        return float(np.abs(target).max())
    A = np.vstack([Xb.T, np.ones(Xb.shape[0])])
    # beta_i = -C * s_i with s_i in [0, 1] * sign(r_i)
    lower = np.where(signs > 0, -C, 0.0)
    upper = np.where(signs > 0, 0.0, C)
    res = lsq_linear(A, target, bounds=(lower, upper), method="bvls", tol=1e-14)
    return float(np.abs(A @ res.x - target).max())


def kkt_check(model: SvrModel, problem: SvrProblem) -> float:
    """Largest violation of the optimality conditions at ``(model.w, model.b)``.

    Points are split into outside/inside/on the tube; the on-tube points'
    multipliers are chosen (within their bounds) to best satisfy
    stationarity. The tolerance used to call a point "on the tube" counts as
    a violation itself, and the smallest resulting residual is reported.
    """
    if model.w.shape[0] != problem.n_features:
        raise ValueError("model and problem dimensions differ")
    X, z, C, eps = problem.inputs, problem.targets, problem.C, problem.epsilon
    w = model.w
    r = X @ w + model.b - z
    gap = np.abs(r) - eps
    signs = np.where(r >= 0, 1.0, -1.0)
    thresholds = np.unique(np.concatenate([[0.0], np.abs(gap)]))
    best = math.inf
    for theta in thresholds:
        if theta >= best:
            break
        on = np.abs(gap) <= theta
        out = gap > theta
        beta_fixed = np.where(out, -C * signs, 0.0)
        resid = _stationarity(w, X.T @ beta_fixed, beta_fixed.sum(), X[on], C, signs[on])
        best = min(best, max(resid, float(theta)))
    return best
