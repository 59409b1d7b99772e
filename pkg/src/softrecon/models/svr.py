"""ε-SVR trained by sequential minimal optimisation.

The dual is solved in the doubled form over ``z = [α; α*]`` (length 2l):

    min ½ zᵀ Q z + pᵀ z   s.t.  sᵀ z = 0,  0 ≤ z ≤ C

with ``s = [1…1, −1…−1]``, ``Q_ij = s_i s_j K(i mod l, j mod l)`` and
``p = [ε − y; ε + y]``. Working pairs are chosen by maximal violation for
the first index and second-order gain for the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SolverStalled

TAU = 1e-12


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)
    return np.exp(-gamma * d2)


@dataclass
class SVRSolution:
    coef: np.ndarray  # α − α*, length l
    bias: float
    iterations: int
    kkt_gap: float
    objective: float


def dual_objective(k: np.ndarray, y: np.ndarray, epsilon: float, alpha: np.ndarray,
                   alpha_star: np.ndarray) -> float:
    beta = alpha - alpha_star
    return float(0.5 * beta @ k @ beta + epsilon * np.sum(alpha + alpha_star) - y @ beta)


def solve_svr_dual(k: np.ndarray, y: np.ndarray, c: float, epsilon: float, tol: float = 1e-3,
                   max_iter: int = 1_000_000) -> SVRSolution:
    """Solve one scalar ε-SVR on a precomputed (l, l) kernel."""
    y = np.asarray(y, dtype=float)
    l = len(y)
    s = np.concatenate([np.ones(l), -np.ones(l)])
    z = np.zeros(2 * l)
    grad = np.concatenate([epsilon - y, epsilon + y])
    diag = np.diag(k)
    up_mask = np.empty(2 * l, dtype=bool)
    low_mask = np.empty(2 * l, dtype=bool)
    it = 0
    gap = np.inf
    while True:
        # I_up: can move along +s; I_low: can move along -s.
        up_mask[:l] = z[:l] < c
        up_mask[l:] = z[l:] > 0
        low_mask[:l] = z[:l] > 0
        low_mask[l:] = z[l:] < c
        minus_sg = -s * grad
        cand = np.where(up_mask, minus_sg, -np.inf)
        i = int(np.argmax(cand))
        g_max = cand[i]
        low_vals = np.where(low_mask, minus_sg, np.inf)
        g_min = float(np.min(low_vals))
        gap = g_max - g_min
        if gap < tol:
            break
        if it >= max_iter:
            raise SolverStalled(f"SMO stopped at {it} iterations with KKT gap {gap:.3g}")
        ii = i % l
        ki = np.concatenate([k[ii], k[ii]])
        kdiag = np.concatenate([diag, diag])
        b = g_max - minus_sg
        quad = diag[ii] + kdiag - 2.0 * ki * (s * s[i])
        quad = np.where(quad > 0, quad, TAU)
        gain = np.where(low_mask & (b > 0), -(b * b) / quad, np.inf)
        j = int(np.argmin(gain))
        if not np.isfinite(gain[j]):
            break
        jj = j % l
        zi_old, zj_old = z[i], z[j]
        qij = s[i] * s[j] * k[ii, jj]
        if s[i] != s[j]:
            q = diag[ii] + diag[jj] + 2.0 * qij
            q = q if q > 0 else TAU
            delta = (-grad[i] - grad[j]) / q
            diff = z[i] - z[j]
            z[i] += delta
            z[j] += delta
            if diff > 0:
                if z[j] < 0:
                    z[j], z[i] = 0.0, diff
            elif z[i] < 0:
                z[i], z[j] = 0.0, -diff
            if diff > 0:
                if z[i] > c:
                    z[i], z[j] = c, c - diff
            elif z[j] > c:
                z[j], z[i] = c, c + diff
        else:
            q = diag[ii] + diag[jj] - 2.0 * qij
            q = q if q > 0 else TAU
            delta = (grad[i] - grad[j]) / q
            total = z[i] + z[j]
            z[i] -= delta
            z[j] += delta
            if total > c:
                if z[i] > c:
                    z[i], z[j] = c, total - c
                if z[j] > c:
                    z[j], z[i] = c, total - c
            else:
                if z[j] < 0:
                    z[j], z[i] = 0.0, total
                if z[i] < 0:
                    z[i], z[j] = 0.0, total
        di, dj = z[i] - zi_old, z[j] - zj_old
        v = s[i] * di * k[ii] + s[j] * dj * k[jj]
        grad[:l] += v
        grad[l:] -= v
        it += 1

    alpha, alpha_star = z[:l], z[l:]
    bias = -_rho(z, grad, s, c)
    return SVRSolution(alpha - alpha_star, bias, it, float(gap),
                       dual_objective(k, y, epsilon, alpha, alpha_star))


def _rho(z, grad, s, c) -> float:
    sg = s * grad
    at_upper = z >= c
    at_lower = z <= 0
    free = ~(at_upper | at_lower)
    if np.any(free):
        return float(np.mean(sg[free]))
    ub_mask = (at_upper & (s < 0)) | (at_lower & (s > 0))
    lb_mask = (at_upper & (s > 0)) | (at_lower & (s < 0))
    ub = np.min(sg[ub_mask]) if np.any(ub_mask) else np.inf
    lb = np.max(sg[lb_mask]) if np.any(lb_mask) else -np.inf
    return float((ub + lb) / 2)


def kkt_violation(k: np.ndarray, y: np.ndarray, c: float, epsilon: float, coef: np.ndarray,
                  bias: float) -> float:
    """Largest violation of the ε-SVR optimality conditions at ``(coef, bias)``."""
    f = k @ coef + bias
    r = y - f
    a = np.maximum(coef, 0.0)
    a_star = np.maximum(-coef, 0.0)
    viol = np.zeros(len(y))
    # α: zero needs r ≤ ε, interior needs r = ε, at C needs r ≥ ε; likewise α* with −r.
    for w, res in ((a, r), (a_star, -r)):
        lo = w <= 1e-12
        hi = w >= c - 1e-12
        mid = ~(lo | hi)
        viol = np.maximum(viol, np.where(lo, np.maximum(res - epsilon, 0.0), 0.0))
        viol = np.maximum(viol, np.where(hi, np.maximum(epsilon - res, 0.0), 0.0))
        viol = np.maximum(viol, np.where(mid, np.abs(res - epsilon), 0.0))
    return float(viol.max()) if len(viol) else 0.0
