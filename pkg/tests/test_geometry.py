import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softrecon.errors import CollinearPoints, DegenerateMatrix, SizeMismatch
from oracles import grid_search_energy
from softrecon.geometry import (
    PointSet,
    RigidTransform,
    apply_transform,
    is_rotation,
    jacobi_eigh,
    nearest_rotation,
    random_rotation,
    rot_x,
    rot_y,
    rot_z,
    rotation_error,
    rotation_to_tait_bryan,
    solve_rigid_transform,
    tait_bryan_to_rotation,
    transform_energy,
)

TRIANGLE = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def pset(points):
    return PointSet(np.asarray(points, dtype=float), tuple(f"m{i}" for i in range(len(points))))


class TestSolveRigidTransform:
    def test_identity(self):
        t = solve_rigid_transform(pset(TRIANGLE), pset(TRIANGLE))
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)

    def test_known_rotation_and_translation(self):
        r = rot_z(90)
        dst = TRIANGLE @ r.T + np.array([1.0, 2.0, 3.0])
        t = solve_rigid_transform(pset(TRIANGLE), pset(dst))
        np.testing.assert_allclose(t.rotation, r, atol=1e-9)
        np.testing.assert_allclose(t.translation, [1, 2, 3], atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_noisy_beats_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(-50, 50, size=(6, 3))
        r0, t0 = random_rotation(rng), rng.uniform(-20, 20, 3)
        dst = src @ r0.T + t0 + rng.normal(0, 0.1, size=(6, 3))
        sol = solve_rigid_transform(pset(src), pset(dst))
        assert transform_energy(sol, pset(src), pset(dst)) <= grid_search_energy(src, dst, r0, t0)

    def test_mismatched_ids(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(-30, 30, size=(8, 3))
        dst = src @ random_rotation(rng).T + 5 + rng.normal(0, 0.3, size=(8, 3))
        sol = solve_rigid_transform(pset(src), pset(dst))
        e0 = transform_energy(sol, pset(src), pset(dst))
        for axis in range(3):
            for sign in (-1, 1):
                rot = [rot_x, rot_y, rot_z][axis](sign * 0.1)
                moved = RigidTransform(rot @ sol.rotation, sol.translation)
                assert transform_energy(moved, pset(src), pset(dst)) >= e0
                shift = np.zeros(3)
                shift[axis] = sign * 0.01
                moved = RigidTransform(sol.rotation, sol.translation + shift)
                assert transform_energy(moved, pset(src), pset(dst)) >= e0

    def test_reflection_still_proper(self):
        src = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10.0]])
        mirrored = src * np.array([1, 1, -1.0])
        t = solve_rigid_transform(pset(src), pset(mirrored))
        assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_collinear(self):
        with pytest.raises(CollinearPoints):
            solve_rigid_transform(pset([[0, 0, 0], [1, 1, 1], [2, 2, 2]]),
                                  pset([[0, 0, 0], [1, 1, 1], [2, 2, 2]]))

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            solve_rigid_transform(pset(TRIANGLE), pset(np.vstack([TRIANGLE, [[1, 1, 1]]])))
        other = PointSet(TRIANGLE, ("a", "b", "c"))
        with pytest.raises(SizeMismatch):
            solve_rigid_transform(pset(TRIANGLE), other)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 20), st.integers(0, 2**32 - 1))
    def test_exact_pairs(self, n, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(-100, 100, size=(n, 3))
        r, t = random_rotation(rng), rng.uniform(-100, 100, 3)
        sol = solve_rigid_transform(pset(src), pset(src @ r.T + t))
        assert is_rotation(sol.rotation)
        resid = np.linalg.norm(sol.apply(src) - (src @ r.T + t), axis=1).max()
        assert resid <= 1e-9


def test_jacobi_matches_characteristic_relation():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    a = a + a.T
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(a @ v, v * w, atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(4), atol=1e-12)


class TestApplyTransform:
    def test_identity(self):
        np.testing.assert_array_equal(apply_transform(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])

    def test_rotation(self):
        t = RigidTransform(rot_z(90), np.zeros(3))
        np.testing.assert_allclose(apply_transform(t, [1, 0, 0]), [0, 1, 0], atol=1e-15)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        t = RigidTransform(random_rotation(rng), rng.normal(size=3) * 30)
        p = rng.normal(size=3) * 40
        np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)


class TestTaitBryan:
    def test_identity(self):
        assert rotation_to_tait_bryan(np.eye(3)).as_tuple() == (0.0, 0.0, 0.0)

    def test_pure_yaw(self):
        e = rotation_to_tait_bryan(rot_z(30))
        np.testing.assert_allclose(e.as_tuple(), (30, 0, 0), atol=1e-12)

    def test_composite(self):
        r = rot_z(10) @ rot_y(20) @ rot_x(30)
        np.testing.assert_allclose(rotation_to_tait_bryan(r).as_tuple(), (10, 20, 30), atol=1e-9)

    def test_gimbal_lock_sets_roll_zero(self):
        e = rotation_to_tait_bryan(rot_z(40) @ rot_y(90))
        assert e.roll == 0.0
        assert e.pitch == pytest.approx(90.0)
        np.testing.assert_allclose(tait_bryan_to_rotation(*e.as_tuple()), rot_z(40) @ rot_y(90),
                                   atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-179.9, 180), st.floats(-89, 89), st.floats(-179.9, 180))
    def test_round_trip(self, yaw, pitch, roll):
        e = rotation_to_tait_bryan(tait_bryan_to_rotation(yaw, pitch, roll))
        np.testing.assert_allclose(e.as_tuple(), (yaw, pitch, roll), atol=1e-9)


class TestNearestRotation:
    def test_already_rotation(self):
        r = random_rotation(np.random.default_rng(2))
        np.testing.assert_allclose(nearest_rotation(r), r, atol=1e-12)

    def test_scaled(self):
        r = rot_z(30) @ rot_x(12)
        np.testing.assert_allclose(nearest_rotation(1.1 * r), r, atol=1e-12)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(5)
        r = random_rotation(rng)
        m = r + rng.uniform(-0.05, 0.05, size=(3, 3))
        best = np.linalg.norm(nearest_rotation(m) - m)
        for _ in range(10_000):
            assert np.linalg.norm(random_rotation(rng) - m) >= best

    def test_idempotent(self):
        m = np.random.default_rng(9).normal(size=(3, 3))
        once = nearest_rotation(m)
        np.testing.assert_allclose(nearest_rotation(once), once, atol=1e-12)
        assert is_rotation(once)

    def test_degenerate(self):
        with pytest.raises(DegenerateMatrix):
            nearest_rotation(np.diag([1.0, 1.0, 0.0]))


class TestRotationError:
    def test_zero(self):
        assert rotation_error(rot_z(5), rot_z(5)).as_tuple() == pytest.approx((0, 0, 0), abs=1e-12)

    def test_one_degree_yaw(self):
        e = rotation_error(rot_z(31), rot_z(30))
        assert e.yaw == pytest.approx(1.0, abs=1e-9)
        assert e.pitch == pytest.approx(0.0, abs=1e-9)

    def test_wrap(self):
        e = rotation_error(rot_z(179.5), rot_z(-179.5))
        assert e.yaw == pytest.approx(1.0, abs=1e-9)
        assert math.isfinite(e.roll)
