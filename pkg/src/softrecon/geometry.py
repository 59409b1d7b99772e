"""Rigid-body math: point sets, rotations, and the quaternion least-squares transform solve.

Angles are degrees at every public function and radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CollinearPoints, DegenerateMatrix, SizeMismatch

ORTHO_TOL = 1e-9
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class PointSet:
    """Ordered markers: ``points`` is (N, 3) in mm, ``ids`` names each row."""

    points: np.ndarray
    ids: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SizeMismatch(f"points must be (N, 3), got {pts.shape}")
        ids = tuple(self.ids)
        if len(ids) != len(pts):
            raise SizeMismatch(f"{len(pts)} points but {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise SizeMismatch("marker ids must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def subset(self, ids: Sequence) -> "PointSet":
        index = {k: i for i, k in enumerate(self.ids)}
        return PointSet(self.points[[index[k] for k in ids]], tuple(ids))


@dataclass(frozen=True)
class EulerAngles:
    yaw: float
    pitch: float
    roll: float

    def as_tuple(self):
        return (self.yaw, self.pitch, self.roll)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map a point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def as_vector(self) -> np.ndarray:
        """12 values: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])


def is_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return (np.linalg.norm(r.T @ r - np.eye(3)) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol)


def rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def tait_bryan_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic z-y'-x'' composition ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def jacobi_eigh(a: np.ndarray, tol: float = _JACOBI_TOL, max_sweeps: int = _JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns, unsorted.
    Iteration stops once the off-diagonal Frobenius norm falls below
    ``tol`` times the matrix norm.
    """
    a = [list(map(float, row)) for row in np.asarray(a, dtype=float)]
    n = len(a)
    v = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    scale = math.sqrt(sum(x * x for row in a for x in row)) or 1.0
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i][j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k][p], v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    return np.array([a[i][i] for i in range(n)]), np.array(v)


def _check_pair(src: PointSet, dst: PointSet):
    if len(src) != len(dst):
        raise SizeMismatch(f"source has {len(src)} points, destination {len(dst)}")
    if src.ids != dst.ids:
        raise SizeMismatch("source and destination ids differ")
    if len(src) < 3:
        raise SizeMismatch("at least 3 points are required")


def solve_rigid_transform(src: PointSet, dst: PointSet) -> RigidTransform:
    """Least-squares ``(R, T)`` with ``dst ≈ R @ src + T`` via the unit-quaternion method.

    The rotation is the eigenvector of the largest eigenvalue of the
    symmetric 4x4 matrix built from the cross-covariance of the centred
    sets; it is always a proper rotation, even when a reflection would fit
    the data better.
    """
    _check_pair(src, dst)
    a, b = src.points, dst.points
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb

    sv = np.linalg.svd(a0, compute_uv=False)
    if sv[0] == 0.0 or sv[1] < 1e-9 * sv[0]:
        raise CollinearPoints("source points are collinear")

    s = a0.T @ b0
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    evals, evecs = jacobi_eigh(n)
    q = evecs[:, int(np.argmax(evals))]
    r = quaternion_to_rotation(q)
    if not is_rotation(r):
        raise DegenerateMatrix("quaternion solve produced a non-orthonormal rotation")
    t = cb - r @ ca
    return RigidTransform(r, t)


def transform_energy(t: RigidTransform, src: PointSet, dst: PointSet) -> float:
    """Sum of squared residuals ``Σ‖dᵢ − (R mᵢ + T)‖²``."""
    d = dst.points - t.apply(src.points)
    return float(np.sum(d * d))


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def _wrap_deg(a: float) -> float:
    """Wrap into (-180, 180]."""
    a = math.fmod(a, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


def rotation_to_tait_bryan(r: np.ndarray) -> EulerAngles:
    """Decompose ``R = Rz(yaw) Ry(pitch) Rx(roll)``; roll is 0 at gimbal lock."""
    r = np.asarray(r, dtype=float)
    cp = math.hypot(r[0, 0], r[1, 0])
    pitch = math.atan2(-r[2, 0], cp)
    if abs(abs(math.degrees(pitch)) - 90.0) <= 1e-7:
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    else:
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
    return EulerAngles(_wrap_deg(math.degrees(yaw)), math.degrees(pitch),
                       _wrap_deg(math.degrees(roll)))


def angle_difference(a: float, b: float) -> float:
    """Absolute difference of two angles in degrees, taking the short way round."""
    return abs(_wrap_deg(a - b))


def rotation_error(pred: np.ndarray, truth: np.ndarray) -> EulerAngles:
    """Per-axis absolute Euler-angle errors (degrees) with wrap-around."""
    p, t = rotation_to_tait_bryan(pred), rotation_to_tait_bryan(truth)
    return EulerAngles(angle_difference(p.yaw, t.yaw), angle_difference(p.pitch, t.pitch),
                       angle_difference(p.roll, t.roll))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``m`` in the Frobenius norm (polar projection)."""
    m = np.asarray(m, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        raise DegenerateMatrix("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-9:
        raise DegenerateMatrix(f"smallest singular value {s[-1]:.3g} below 1e-9")
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt))
    return (u * d) @ vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    return quaternion_to_rotation(q)


def slerp(q0: np.ndarray, q1: np.ndarray, t) -> np.ndarray:
    """Spherical interpolation of unit quaternions; ``t`` may be an array."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1, dot = -q1, -dot
    t = np.asarray(t, dtype=float)[..., None]
    if dot > 0.9995:
        out = q0 + t * (q1 - q0)
    else:
        omega = math.acos(dot)
        so = math.sin(omega)
        out = (np.sin((1.0 - t) * omega) / so) * q0 + (np.sin(t * omega) / so) * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Vectorised conversion of (K, 4) quaternions to (K, 3, 3) matrices."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = w * w + x * x - y * y - z * z
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = w * w - x * x + y * y - z * z
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = w * w - x * x - y * y + z * z
    return out
