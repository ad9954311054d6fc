import numpy as np

from ablate_eval import pipeline as pl
from ablate_eval.deformable import DeformConfig
from ablate_eval.evaluation import endpoint_error, random_pose, strictly_ordered, world_points
from ablate_eval.rigid import RigidRegConfig, RigidTransform
from ablate_eval.volume import DisplacementField


def test_truth_has_zero_endpoint_error(small_case):
    c = small_case
    epe = endpoint_error(c.field_truth, c.rigid_truth.inverse(), c.field_truth, c.rigid_truth, c.post_lung)
    assert epe.shape == (c.post_lung.count,)
    assert epe.max() < 1e-9


def test_endpoint_error_sees_rigid_mistakes(small_case):
    c = small_case
    zero = DisplacementField.zeros(c.post.grid)
    # identity registration: error is |x - T(x + g(x))| per voxel
    epe = endpoint_error(zero, RigidTransform.identity(c.post.grid.center), c.field_truth, c.rigid_truth, c.post_lung)
    pts = world_points(c.post.grid, c.post_lung)
    ref = np.linalg.norm(pts - c.rigid_truth(pts + c.field_truth.data[c.post_lung.data]), axis=1)
    np.testing.assert_allclose(epe, ref, atol=1e-12)
    # a rigid estimate whose inverse lands 2 mm off along x everywhere
    shift = RigidTransform.from_pose((0, 0, 0, 2.0, 0, 0), c.post.grid.center)
    wrong = shift.compose(c.rigid_truth).inverse()
    e = endpoint_error(c.field_truth, wrong, c.field_truth, c.rigid_truth, c.post_lung)
    np.testing.assert_allclose(e, 2.0, atol=1e-9)


def test_registration_beats_identity(small_case):
    c = small_case
    T1 = pl.rigid_stage(c.pre, c.post, c.pre_lung, c.post_lung, RigidRegConfig())
    field, _ = pl.deform_stage(c.pre, c.post, c.pre_lung, c.post_lung, T1, c.pre_tumor, c.treatment,
                               DeformConfig.from_json({"levels": [[6, 3, 1], [4, 2, 1]]}))
    zero = DisplacementField.zeros(c.post.grid)
    before = endpoint_error(zero, RigidTransform.identity(c.post.grid.center), c.field_truth, c.rigid_truth,
                            c.post_lung).mean()
    after = endpoint_error(field, T1, c.field_truth, c.rigid_truth, c.post_lung).mean()
    assert after < 0.5 * before
    assert after < 2.5  # one 2.5 mm voxel on the coarse grid


def test_random_pose_is_seeded():
    assert random_pose(3, 4.0, 5.0) == random_pose(3, 4.0, 5.0)
    p = random_pose(4, 4.0, 5.0)
    assert all(abs(v) <= np.deg2rad(4.0) for v in p[:3]) and all(abs(v) <= 5.0 for v in p[3:])


def test_strictly_ordered():
    def m(ncc, dice, rmse):
        return {"lung": {"ncc": ncc, "dice": dice, "rmse": rmse}}
    r = {"metrics": {"no_registration": m(0.1, 0.8, 300), "rigid": m(0.4, 0.9, 200),
                     "rigid_deformable": m(0.5, 0.95, 200)}}
    assert strictly_ordered(r) == {"ncc": True, "dice": True, "rmse": False}
