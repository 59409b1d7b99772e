"""Tensor-product Bézier surfaces: evaluation, marker parameterisation and least-squares fitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateBounds, IndexOutOfRange, MissingMarker, RankDeficient
from .geometry import PointSet

MAX_DEGREE = 8
UV_FORMAT_VERSION = 1


def bernstein(i: int, m: int, u):
    """Bernstein basis polynomial ``C(m, i) u^i (1 - u)^(m - i)``; ``u`` may be an array."""
    if not (0 <= i <= m):
        raise IndexOutOfRange(f"index {i} outside 0..{m}")
    u = np.asarray(u, dtype=float)
    out = comb(m, i) * u ** i * (1.0 - u) ** (m - i)
    return float(out) if out.ndim == 0 else out


def bernstein_matrix(m: int, u) -> np.ndarray:
    """All degree-``m`` basis values at each ``u``: shape (len(u), m + 1)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return np.stack([bernstein(i, m, u) for i in range(m + 1)], axis=-1)


@dataclass(frozen=True)
class BezierSurface:
    """Control grid ``control_points[i, j]`` with i along u (degree m) and j along v (degree n)."""

    control_points: np.ndarray

    def __post_init__(self):
        c = np.array(self.control_points, dtype=float)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"control grid must be (m+1, n+1, 3), got {c.shape}")
        m, n = c.shape[0] - 1, c.shape[1] - 1
        if not (1 <= m <= MAX_DEGREE and 1 <= n <= MAX_DEGREE):
            raise ValueError(f"degrees ({m}, {n}) outside 1..{MAX_DEGREE}")
        if not np.all(np.isfinite(c)):
            raise ValueError("control points must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "control_points", c)

    @property
    def degrees(self) -> tuple[int, int]:
        return self.control_points.shape[0] - 1, self.control_points.shape[1] - 1

    def to_vector(self) -> np.ndarray:
        """Row-major control points with xyz interleaved."""
        return self.control_points.reshape(-1).copy()

    @classmethod
    def from_vector(cls, values, degrees: tuple[int, int]) -> "BezierSurface":
        m, n = degrees
        return cls(np.asarray(values, dtype=float).reshape(m + 1, n + 1, 3))


def evaluate_surface(s: BezierSurface, u, v) -> np.ndarray:
    """Surface point(s) at parameters ``(u, v)``; vector inputs give (K, 3)."""
    m, n = s.degrees
    scalar = np.ndim(u) == 0 and np.ndim(v) == 0
    bu = bernstein_matrix(m, u)
    bv = bernstein_matrix(n, v)
    pts = np.einsum("ki,kj,ijc->kc", bu, bv, s.control_points)
    return pts[0] if scalar else pts


@dataclass(frozen=True)
class MarkerParamTable:
    """Frozen (u, v) parameters per marker id, taken from the flat membrane."""

    ids: tuple
    uv: np.ndarray
    degrees: tuple[int, int] = (4, 4)
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        ids = tuple(self.ids)
        if len(ids) != len(uv):
            raise ValueError("ids and uv rows differ in count")
        if len(set(ids)) != len(ids):
            raise ValueError("marker ids must be unique")
        if np.any(uv < 0.0) or np.any(uv > 1.0):
            raise ValueError("uv parameters must lie in [0, 1]")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))

    def __len__(self):
        return len(self.ids)

    def lookup(self, ids: Sequence) -> np.ndarray:
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in index]
        if missing:
            raise MissingMarker(f"no uv entry for markers {missing}")
        return self.uv[[index[k] for k in ids]]

    def with_degrees(self, degrees) -> "MarkerParamTable":
        return MarkerParamTable(self.ids, self.uv, tuple(degrees), self.bounds)

    def to_json(self) -> dict:
        return {
            "format_version": UV_FORMAT_VERSION,
            "degrees": list(self.degrees),
            "bounds": None if self.bounds is None else list(self.bounds),
            "entries": [{"id": k, "u": float(u), "v": float(v)}
                        for k, (u, v) in zip(self.ids, self.uv)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "MarkerParamTable":
        if d.get("format_version") != UV_FORMAT_VERSION:
            raise ValueError(f"unsupported uv table format_version {d.get('format_version')}")
        entries = d["entries"]
        bounds = d.get("bounds")
        return cls(tuple(e["id"] for e in entries),
                   np.array([[e["u"], e["v"]] for e in entries]),
                   tuple(d.get("degrees", (4, 4))),
                   None if bounds is None else tuple(bounds))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MarkerParamTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def assign_uv(flat_markers: PointSet, bounds=None, degrees=(4, 4)) -> MarkerParamTable:
    """Normalise planar marker coordinates of the flat membrane into the unit square.

    ``bounds`` is ``(x_min, x_max, y_min, y_max)`` in mm and defaults to the
    markers' bounding box. Markers up to 1 mm outside the bounds are clamped.
    """
    xy = flat_markers.points[:, :2]
    if bounds is None:
        bounds = (xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max())
    x0, x1, y0, y1 = (float(b) for b in bounds)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        raise DegenerateBounds(f"bounds {bounds} narrower than 1 mm")
    outside = ((xy[:, 0] < x0 - 1.0) | (xy[:, 0] > x1 + 1.0)
               | (xy[:, 1] < y0 - 1.0) | (xy[:, 1] > y1 + 1.0))
    if np.any(outside):
        bad = [k for k, o in zip(flat_markers.ids, outside) if o]
        raise ValueError(f"markers {bad} lie more than 1 mm outside the bounds")
    u = np.clip((xy[:, 0] - x0) / (x1 - x0), 0.0, 1.0)
    v = np.clip((xy[:, 1] - y0) / (y1 - y0), 0.0, 1.0)
    return MarkerParamTable(flat_markers.ids, np.column_stack([u, v]), tuple(degrees),
                            (x0, x1, y0, y1))


def design_matrix(uv: np.ndarray, m: int, n: int) -> np.ndarray:
    """(N, (m+1)(n+1)) tensor basis; column ``i*(n+1)+j`` holds ``B_i,m(u) B_j,n(v)``."""
    bu = bernstein_matrix(m, uv[:, 0])
    bv = bernstein_matrix(n, uv[:, 1])
    return (bu[:, :, None] * bv[:, None, :]).reshape(len(uv), -1)


class SurfaceFitter:
    """Least-squares control-grid solver for a fixed uv table.

    The QR factorisation of the design matrix is computed once and shared
    by every frame and all three coordinates.
    """

    def __init__(self, uv: np.ndarray, degrees: tuple[int, int]):
        m, n = degrees
        if not (1 <= m <= MAX_DEGREE and 1 <= n <= MAX_DEGREE):
            raise ValueError(f"degrees ({m}, {n}) outside 1..{MAX_DEGREE}")
        self.degrees = (m, n)
        self.a = design_matrix(np.asarray(uv, dtype=float), m, n)
        n_rows, n_cols = self.a.shape
        if n_rows < n_cols:
            raise RankDeficient(f"{n_rows} markers cannot determine {n_cols} control points")
        sv = np.linalg.svd(self.a, compute_uv=False)
        if sv[-1] < 1e-10 * sv[0]:
            raise RankDeficient(f"design matrix condition {sv[0] / max(sv[-1], 1e-300):.3g}")
        self.q, self.r = np.linalg.qr(self.a)

    def solve(self, points: np.ndarray) -> np.ndarray:
        """Control points (m+1, n+1, 3) for one (N, 3) frame, or (F, m+1, n+1, 3) for (F, N, 3)."""
        p = np.asarray(points, dtype=float)
        m, n = self.degrees
        if p.ndim == 2:
            c = solve_triangular(self.r, self.q.T @ p)
            return c.reshape(m + 1, n + 1, 3)
        f = p.shape[0]
        rhs = np.einsum("nk,fnc->kfc", self.q, p).reshape(self.q.shape[1], -1)
        c = solve_triangular(self.r, rhs).reshape(-1, f, 3)
        return np.moveaxis(c, 1, 0).reshape(f, m + 1, n + 1, 3)

    def normal_residual(self, points: np.ndarray, control: np.ndarray) -> float:
        """Relative norm of ``Aᵀ(A c − p)``; zero at the exact minimiser."""
        c = control.reshape(-1, 3)
        g = self.a.T @ (self.a @ c - points)
        scale = np.linalg.norm(self.a) * np.linalg.norm(points) + 1e-300
        return float(np.linalg.norm(g) / scale)


@dataclass
class FitResult:
    surface: BezierSurface
    energy: float
    normal_residual: float = field(default=0.0)


def fit_surface_detailed(markers: PointSet, params: MarkerParamTable, m: int, n: int) -> FitResult:
    uv = params.lookup(markers.ids)
    fitter = SurfaceFitter(uv, (m, n))
    c = fitter.solve(markers.points)
    nres = fitter.normal_residual(markers.points, c)
    if nres > 1e-8:
        raise RankDeficient(f"normal-equation residual {nres:.3g} exceeds 1e-8")
    r = fitter.a @ c.reshape(-1, 3) - markers.points
    return FitResult(BezierSurface(c), float(np.sum(r * r)), nres)


def fit_surface(markers: PointSet, params: MarkerParamTable, m: int | None = None,
                n: int | None = None) -> BezierSurface:
    """Control grid minimising the summed squared marker-to-surface distances."""
    if m is None or n is None:
        m, n = params.degrees
    return fit_surface_detailed(markers, params, m, n).surface


def fitting_energy(s: BezierSurface, markers: PointSet, params: MarkerParamTable) -> float:
    d = markers.points - evaluate_surface(s, *params.lookup(markers.ids).T)
    return float(np.sum(d * d))


def sample_grid(s: BezierSurface, res_u: int, res_v: int) -> np.ndarray:
    """Row-major (res_u * res_v, 3) samples at uniform parameters."""
    if res_u < 2 or res_v < 2:
        raise ValueError("grid resolution must be at least 2")
    u = np.arange(res_u) / (res_u - 1)
    v = np.arange(res_v) / (res_v - 1)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return evaluate_surface(s, uu.reshape(-1), vv.reshape(-1))


@dataclass
class Residuals:
    ids: tuple
    distances: np.ndarray
    mean: float
    std: float


def fitting_residual(s: BezierSurface, markers: PointSet, params: MarkerParamTable) -> Residuals:
    """Per-marker distance between captured position and the surface at its uv."""
    uv = params.lookup(markers.ids)
    d = np.linalg.norm(markers.points - evaluate_surface(s, uv[:, 0], uv[:, 1]), axis=1)
    return Residuals(markers.ids, d, float(d.mean()), float(d.std()))
