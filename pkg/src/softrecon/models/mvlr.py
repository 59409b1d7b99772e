from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import RankDeficient


def fit_ols(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``Y ≈ X W + b`` via QR of ``[X, 1]``; returns ``(W, b)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) != len(y):
        raise ValueError("X and Y differ in row count")
    a = np.column_stack([x, np.ones(len(x))])
    if a.shape[0] <= x.shape[1]:
        raise RankDeficient(f"{a.shape[0]} rows cannot determine {a.shape[1]} coefficients")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise RankDeficient(f"design condition {sv[0] / max(sv[-1], 1e-300):.3g}")
    q, r = np.linalg.qr(a)
    coef = solve_triangular(r, q.T @ y)
    g = a.T @ (a @ coef - y)
    rel = np.linalg.norm(g) / (np.linalg.norm(a) ** 2 * np.linalg.norm(coef) + np.linalg.norm(a)
                               * np.linalg.norm(y) + 1e-300)
    if rel > 1e-8:
        raise RankDeficient(f"normal-equation residual {rel:.3g} exceeds 1e-8")
    return coef[:-1], coef[-1]
