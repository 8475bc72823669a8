import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from poseprior import skeleton as sk


def random_pose(seed, spread=300.0):
    return np.random.default_rng(seed).normal(scale=spread, size=(17, 3))


def test_topology_is_a_tree_rooted_at_pelvis():
    topo = sk.H36M
    assert topo.n_joints == 17
    assert len(topo.bones) == 16
    assert topo.parent[0] == -1
    for j in range(1, 17):
        k, hops = j, 0
        while k != 0:
            k = topo.parent[k]
            hops += 1
            assert hops <= 17


@pytest.mark.parametrize(
    "group, names",
    [
        ("right_leg", {"r_hip", "r_knee", "r_foot"}),
        ("left_leg", {"l_hip", "l_knee", "l_foot"}),
        ("right_arm", {"r_shoulder", "r_elbow", "r_wrist"}),
        ("left_arm", {"l_shoulder", "l_elbow", "l_wrist"}),
        ("spine", {"pelvis", "thorax", "neck"}),
    ],
)
def test_part_groups(group, names):
    idx = sk.H36M.group_indices(group)
    assert {sk.H36M.joint_names[i] for i in idx} == names


def test_unknown_group_lists_valid_names():
    with pytest.raises(KeyError, match="left_arm"):
        sk.H36M.group_indices("tail")


def test_root_center_examples():
    pose = random_pose(0)
    pose[0] = (100.0, 200.0, 5000.0)
    out = sk.root_center(pose)
    np.testing.assert_array_equal(out[0], 0.0)
    np.testing.assert_allclose(out, pose - pose[0])
    np.testing.assert_array_equal(sk.root_center(out), out)


def test_bone_lengths_unit_offsets():
    pose = np.zeros((17, 3))
    for p, c in sk.H36M.bones:
        pose[c] = pose[p] + (1.0, 0.0, 0.0)
    np.testing.assert_allclose(sk.bone_lengths(pose), 1.0)


def test_bone_lengths_translation_invariant():
    pose = random_pose(1)
    np.testing.assert_allclose(
        sk.bone_lengths(pose + (10.0, -4.0, 3000.0)), sk.bone_lengths(pose), rtol=1e-12
    )


def test_mpjpe_examples():
    gt = random_pose(2)
    assert sk.mpjpe(gt, gt) == 0.0
    pred = gt.copy()
    pred[5] += (0.0, 17.0, 0.0)
    assert sk.mpjpe(pred, gt) == pytest.approx(1.0)
    d = np.array([3.0, 4.0, 12.0])
    assert sk.mpjpe(gt + d, gt) == pytest.approx(13.0)


def test_pa_mpjpe_removes_similarity():
    gt = random_pose(3)
    rot = Rotation.from_euler("xyz", [30, -50, 110], degrees=True).as_matrix()
    pred = 2.0 * gt @ rot.T + (40.0, -20.0, 900.0)
    assert sk.pa_mpjpe(pred, gt) <= 1e-9
    assert sk.pa_mpjpe(gt, gt) <= 1e-9


def test_pa_mpjpe_does_not_use_reflections():
    gt = random_pose(4)
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    assert sk.pa_mpjpe(mirrored, gt) > 1.0


def test_pa_mpjpe_degenerate_gt():
    with pytest.raises(ValueError):
        sk.pa_mpjpe(random_pose(5), np.ones((17, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_mpjpe_never_exceeds_mpjpe(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(scale=300, size=(17, 3))
    pred = gt + rng.normal(scale=rng.uniform(1, 400), size=(17, 3))
    assert sk.pa_mpjpe(pred, gt) <= sk.mpjpe(pred, gt) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mpjpe_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (sk.root_center(rng.normal(scale=200, size=(17, 3))) for _ in range(3))
    assert sk.mpjpe(a, b) == pytest.approx(sk.mpjpe(b, a))
    assert sk.mpjpe(a, a) == 0.0 and sk.mpjpe(a, b) > 0
    assert sk.mpjpe(a, c) <= sk.mpjpe(a, b) + sk.mpjpe(b, c) + 1e-9


def test_pck_auc_examples():
    gt = random_pose(6)
    assert sk.pck_auc([gt], [gt]) == (100.0, 100.0)
    far = gt + (200.0, 0.0, 0.0)
    assert sk.pck_auc([far], [gt]) == (0.0, 0.0)


def test_pck_auc_at_75mm_by_enumeration():
    # integer coordinates keep the error at exactly 75 mm
    gt = np.round(random_pose(7))
    pred = gt + (0.0, 75.0, 0.0)
    passing = sum(1 for th in range(0, 151, 5) if 75.0 < th)
    assert passing == 15
    pck, auc = sk.pck_auc([pred], [gt])
    assert pck == 100.0
    assert auc == pytest.approx(100.0 * passing / 31)
    assert auc == pytest.approx(48.387, abs=1e-3)


def test_pck_auc_empty():
    with pytest.raises(ValueError):
        sk.pck_auc([], [])


def test_camera_types_validate():
    with pytest.raises(ValueError):
        sk.CameraIntrinsics(fx=0.0)
    with pytest.raises(ValueError):
        sk.Trajectory(0.0, 0.0, -1.0)
