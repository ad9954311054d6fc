import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ablate_eval.errors import NumericalError, ValidationError
from ablate_eval.phantom import PhantomConfig, make_phantom
from ablate_eval.rigid import (RigidRegConfig, RigidTransform, apply_rigid, euler_to_matrix, matrix_to_euler, ncc,
                               register_rigid)
from ablate_eval.volume import GridMeta, Mask, Volume

from conftest import SMALL

angles = st.floats(-1.2, 1.2)
vec = st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))


def ncc_reference(a, b):
    a = [float(v) for v in np.ravel(a)]
    b = [float(v) for v in np.ravel(b)]
    ma = sum(a) / len(a)
    mb = sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def test_euler_convention():
    # R = Rz Ry Rx; a pure z rotation by 90 degrees maps x to y
    np.testing.assert_allclose(euler_to_matrix(0, 0, math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    ax, ay, az = 0.1, -0.2, 0.3
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    np.testing.assert_allclose(euler_to_matrix(ax, ay, az), rz @ ry @ rx, atol=1e-14)


@given(angles, angles, angles)
def test_euler_roundtrip(ax, ay, az):
    np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(ax, ay, az)), [ax, ay, az], atol=1e-9)


@given(angles, angles, angles, vec, vec, vec)
def test_inverse_and_compose(ax, ay, az, t, c, p):
    T = RigidTransform.from_pose([ax, ay, az, *t], c)
    pts = np.array([p, [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(T.inverse()(T(pts)), pts, atol=1e-9)
    assert T.compose(T.inverse()).is_identity() or np.allclose(T.compose(T.inverse())(pts), pts, atol=1e-9)
    U = RigidTransform.from_pose([az, ax, ay, *p], t)
    np.testing.assert_allclose(T.compose(U)(pts), T(U(pts)), atol=1e-9)


def test_rotation_validated():
    with pytest.raises(ValidationError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_json_roundtrip(tmp_path):
    T = RigidTransform.from_pose([0.1, 0.2, 0.3, 1, 2, 3], [4, 5, 6])
    T.save(tmp_path / "t.json")
    U = RigidTransform.load(tmp_path / "t.json")
    np.testing.assert_array_equal(U.rotation, T.rotation)
    np.testing.assert_array_equal(U.translation, T.translation)


def test_apply_rigid_integer_shift():
    rng = np.random.default_rng(0)
    g = GridMeta((6, 6, 6), (2.0, 2.0, 2.0))
    vol = Volume(rng.normal(size=g.shape), g)
    T = RigidTransform.from_pose([0, 0, 0, 2.0, 0, 0], g.center)
    out = apply_rigid(vol, T, oob=-99.0)
    # output at x reads input at x - 2 mm: one voxel along x
    np.testing.assert_allclose(out.data[:, :, 1:], vol.data[:, :, :-1], atol=1e-6)
    assert np.all(out.data[:, :, 0] == -99.0)
    m = apply_rigid(Mask(vol.data > 0, g), T)
    np.testing.assert_array_equal(m.data[:, :, 1:], vol.data[:, :, :-1] > 0)


def test_ncc_reference(rng):
    a = rng.normal(size=(8, 8, 8))
    b = 0.3 * a + rng.normal(size=(8, 8, 8))
    assert ncc(a, b) == pytest.approx(ncc_reference(a, b), abs=1e-10)
    region = rng.random((8, 8, 8)) < 0.5
    assert ncc(a, b, region) == pytest.approx(ncc_reference(a[region], b[region]), abs=1e-10)
    assert ncc(a, np.zeros_like(a)) == 0.0
    assert ncc(a, 2 * a + 5) == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-50, 50))
def test_ncc_affine_invariance(seed, scale, offset):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4, 4))
    b = rng.normal(size=(4, 4, 4))
    assert ncc(a * scale + offset, b) == pytest.approx(ncc(a, b), abs=1e-9)
    assert ncc(a, b) == pytest.approx(ncc(b, a), abs=1e-12)


def test_register_rigid_small():
    vol, lung, _ = make_phantom(PhantomConfig(seed=5, tumor_radius_mm=8.0, **SMALL))
    T_true = RigidTransform.from_pose([0.0, np.deg2rad(3.0), np.deg2rad(-2.0), 3.0, -2.0, 1.5], vol.grid.center)
    moving = apply_rigid(vol, T_true, oob=-1000.0)
    T = register_rigid(moving, vol, RigidRegConfig(pyramid_levels=2))
    # the estimate undoes the applied motion
    err = T.compose(T_true)
    assert err.angle_deg < 0.5
    assert np.linalg.norm(err(vol.grid.center) - vol.grid.center) < 0.5 * 2.5
    assert T.meta["ncc"] > T.meta["ncc_identity"]


def test_register_rigid_rejects_constant():
    g = GridMeta((8, 8, 8))
    with pytest.raises(NumericalError):
        register_rigid(Volume(np.zeros(g.shape), g), Volume(np.ones(g.shape), g))


def test_register_rigid_never_worse_than_identity(rng):
    g = GridMeta((16, 16, 16))
    a = Volume(rng.normal(size=g.shape), g)
    b = Volume(rng.normal(size=g.shape), g)
    T = register_rigid(a, b, RigidRegConfig(pyramid_levels=1, max_iters_per_level=3))
    assert T.meta["ncc"] >= T.meta["ncc_identity"]
