import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poseprior import autodiff as ad
from poseprior import operators as op
from poseprior.skeleton import H36M, CameraIntrinsics, Trajectory, mpjpe

K1000 = CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0)
T5000 = Trajectory(0.0, 0.0, 5000.0)


def body(seed, spread=250.0):
    pose = np.random.default_rng(seed).normal(scale=spread, size=(17, 3))
    pose[0] = 0.0
    return pose


def test_project_principal_ray_and_plug_in():
    pose = np.zeros((17, 3))
    pose[1] = (500.0, 0.0, 0.0)
    uv = op.project_perspective(pose, T5000, K1000)
    np.testing.assert_allclose(uv[0], (500.0, 500.0))
    np.testing.assert_allclose(uv[1], (600.0, 500.0))


def test_project_rejects_joint_behind_camera():
    pose = np.zeros((17, 3))
    pose[10, 2] = -6000.0
    with pytest.raises(ValueError, match="joint 10"):
        op.project_perspective(pose, T5000, K1000)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
def test_projection_scale_ambiguity(seed, lam):
    pose = body(seed)
    tr = np.array([300.0, -200.0, 5000.0])
    a = op.project_perspective(pose, tr, K1000)
    b = op.project_perspective(lam * pose, lam * tr, K1000)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_inverse_project_degenerate_rays():
    p2d = np.full((17, 2), 500.0)
    np.testing.assert_allclose(op.inverse_project_init(p2d, K1000, T5000), 0.0, atol=1e-9)


def test_inverse_project_hand_computed_ray():
    p2d = np.full((17, 2), 500.0)
    p2d[4] = (600.0, 500.0)
    out = op.inverse_project_init(p2d, K1000, T5000)
    n = math.sqrt(0.1 ** 2 + 1.0)
    expected = (0.1 / n * 5000, 0.0, 5000 / n - 5000)
    np.testing.assert_allclose(out[4], expected, atol=1e-9)
    assert out[4] == pytest.approx((497.5, 0.0, -24.8), abs=0.05)
    np.testing.assert_array_equal(out[0], 0.0)


def test_inverse_project_rejects_zero_trajectory():
    with pytest.raises(ValueError):
        op.inverse_project_init(np.zeros((17, 2)), K1000, np.zeros(3))


def test_round_trip_exact_when_joints_lie_at_trajectory_distance():
    # place each joint on the sphere of radius ||T|| around the camera, where
    # the unit-ray approximation is exact
    rng = np.random.default_rng(0)
    tr = np.array([200.0, -100.0, 5000.0])
    dist = np.linalg.norm(tr)
    dirs = tr / dist + rng.normal(scale=0.05, size=(17, 3))
    dirs[0] = tr / dist
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pose = dirs * dist - tr
    p2d = op.project_perspective(pose, tr, K1000)
    np.testing.assert_allclose(op.inverse_project_init(p2d, K1000, tr), pose, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_init_reprojection_close_for_shallow_poses(seed):
    rng = np.random.default_rng(seed)
    tr = np.array([rng.uniform(-400, 400), rng.uniform(-400, 400), rng.uniform(4000, 7000)])
    pose = rng.normal(scale=120.0, size=(17, 3))
    pose[0] = 0.0
    depth = np.linalg.norm(pose + tr, axis=1)
    assert np.all(np.abs(depth / np.linalg.norm(tr) - 1) <= 0.10)
    p2d = op.project_perspective(pose, tr, K1000)
    back = op.project_perspective(op.inverse_project_init(p2d, K1000, tr), tr, K1000)
    np.testing.assert_allclose(back[0], p2d[0], atol=1e-9)
    assert np.max(np.abs(back - p2d)) <= 0.01 * 1000.0


def test_apply_noise_intensity_zero_is_identity():
    pose = body(1)
    out = op.apply_noise(pose, "gaussian", 0.0, 150.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, pose)


def test_apply_noise_gaussian_std():
    rng = np.random.default_rng(2)
    zeros = np.zeros((10_000 // 51 + 1, 17, 3))
    noise = op.apply_noise(zeros, "gaussian", 0.5, 150.0, rng).reshape(-1)[:10_000]
    assert noise.std() == pytest.approx(75.0, rel=0.03)


def test_apply_noise_uniform_bounds_and_std():
    rng = np.random.default_rng(3)
    noise = op.apply_noise(np.zeros((500, 17, 3)), "uniform", 0.2, 150.0, rng)
    assert np.max(np.abs(noise)) <= 30.0
    assert noise.std() == pytest.approx(30.0 / math.sqrt(3), rel=0.03)


def test_gaussian_noise_mpjpe_inflation_matches_chi_mean():
    sigma = 40.0
    chi3_mean = math.sqrt(2) * math.gamma(2.0) / math.gamma(1.5)
    assert chi3_mean == pytest.approx(1.5958, abs=1e-4)
    rng = np.random.default_rng(4)
    gt = np.zeros((2000, 17, 3))
    noisy = op.apply_noise(gt, "gaussian", sigma / 100.0, 100.0, rng)
    assert mpjpe(noisy, gt) == pytest.approx(chi3_mean * sigma, rel=0.03)


def test_apply_noise_rejects_negative_intensity():
    with pytest.raises(ValueError):
        op.apply_noise(body(0), "gaussian", -0.1, 100.0, np.random.default_rng(0))


def test_apply_mask_examples():
    pose = body(5)
    full = op.apply_mask(pose, np.ones(17, bool))
    np.testing.assert_array_equal(full.values[0], pose)
    m = H36M.group_mask("right_leg")
    y = op.apply_mask(pose, m)
    hidden = np.flatnonzero(~m)
    assert [H36M.joint_names[j] for j in hidden] == ["r_hip", "r_knee", "r_foot"]
    np.testing.assert_array_equal(y.values[0, hidden], 0.0)
    np.testing.assert_array_equal(y.values[0, m], pose[m])
    again = op.apply_mask(y.values[0], m)
    np.testing.assert_array_equal(again.values, y.values)
    with pytest.raises(ValueError):
        op.apply_mask(pose, np.zeros(17, bool))


def test_residual_zero_for_consistent_measurements():
    pose = body(6)
    ops = [
        op.Projection.create(K1000, T5000),
        op.AdditiveNoise("gaussian", 0.0),
        op.Masking.create(H36M.group_mask("left_arm")),
    ]
    for o in ops:
        y = op.forward_op(o, pose)
        assert op.residual(o, pose, y) == pytest.approx(0.0, abs=1e-18)
        bumped = pose.copy()
        bumped[9, 1] += 3.0
        assert op.residual(o, bumped, y) > 0


def test_residual_mask_single_coordinate():
    pose = body(7)
    o = op.Masking.create(np.ones(17, bool))
    y = op.forward_op(o, pose)
    x = pose.copy()
    x[3, 2] += 0.25
    assert op.residual(o, x, y) == pytest.approx(0.0625)


def test_residual_ignores_masked_joints():
    pose = body(8)
    m = H36M.group_mask("spine")
    o = op.Masking.create(m)
    y = op.forward_op(o, pose)
    x = pose.copy()
    x[~m] += 1000.0
    assert op.residual(o, x, y) == 0.0


def test_residual_kind_mismatch():
    pose = body(9)
    y2d = op.forward_op(op.Projection.create(K1000, T5000), pose)
    with pytest.raises(op.OperatorMismatch):
        op.residual(op.AdditiveNoise(), pose, y2d)


def test_projection_residual_gradient_matches_finite_differences():
    pose = body(10, spread=200.0)
    o = op.Projection.create(K1000, Trajectory(150.0, -80.0, 4500.0))
    y = op.Measurement(op.forward_op(o, body(11, spread=200.0)).values)
    err = ad.finite_diff_check(lambda t, x: op.residual_tensor(o, x, y), pose[None], step=1e-4)
    assert err <= 1e-4


def test_pinv_direction_is_gauss_newton_step_for_projection():
    pose = body(12, spread=150.0)
    target = pose + np.random.default_rng(13).normal(scale=2.0, size=pose.shape)
    o = op.Projection.create(K1000, T5000)
    y = op.forward_op(o, target)
    step = op.pinv_direction(o, pose, y)[0]
    before = op.residual(o, pose, y)
    after = op.residual(o, pose + step, y)
    assert after < 1e-3 * before


def test_stack_rejects_mixed_kinds():
    with pytest.raises(op.OperatorMismatch):
        op.stack_operators([op.AdditiveNoise(), op.Masking.create(np.ones(17, bool))])
