"""17-joint skeleton topology, camera types and pose metrics.

Poses are ``(17, 3)`` arrays in millimeters (or ``(N, 17, 3)`` batches);
2D poses are ``(17, 2)`` arrays in pixels. Joint order follows the common
Human3.6M 17-joint convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "N_JOINTS",
    "SkeletonTopology",
    "H36M",
    "CameraIntrinsics",
    "Trajectory",
    "root_center",
    "bone_lengths",
    "mpjpe",
    "per_joint_error",
    "pa_mpjpe",
    "procrustes_align",
    "pck_auc",
    "AUC_THRESHOLDS",
]

N_JOINTS = 17

JOINT_NAMES = (
    "pelvis",
    "r_hip", "r_knee", "r_foot",
    "l_hip", "l_knee", "l_foot",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# "hip" in the spine group is the central hip joint, i.e. the pelvis root.
PART_GROUPS = {
    "right_leg": ("r_hip", "r_knee", "r_foot"),
    "left_leg": ("l_hip", "l_knee", "l_foot"),
    "right_arm": ("r_shoulder", "r_elbow", "r_wrist"),
    "left_arm": ("l_shoulder", "l_elbow", "l_wrist"),
    "spine": ("pelvis", "thorax", "neck"),
    "two_legs": ("r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot"),
    "two_arms": (
        "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    ),
}


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple = JOINT_NAMES
    parent: tuple = PARENTS
    part_groups: dict = field(default_factory=lambda: dict(PART_GROUPS))
    name: str = "h36m17"

    def __post_init__(self):
        if len(self.parent) != len(self.joint_names):
            raise ValueError("parent array and joint names differ in length")
        roots = [j for j, p in enumerate(self.parent) if p < 0]
        if roots != [0]:
            raise ValueError("topology must have the single root at index 0")
        for j, p in enumerate(self.parent):
            if j and not 0 <= p < j:
                raise ValueError(f"joint {j} must have a parent with a smaller index")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parent) if p >= 0]

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def group_indices(self, group: str) -> list[int]:
        if group not in self.part_groups:
            raise KeyError(
                f"unknown part group {group!r}; valid: {sorted(self.part_groups)}"
            )
        return [self.index(n) for n in self.part_groups[group]]

    def group_mask(self, group: str) -> np.ndarray:
        """Observation mask with the joints of ``group`` hidden (False)."""
        mask = np.ones(self.n_joints, dtype=bool)
        mask[self.group_indices(group)] = False
        return mask


H36M = SkeletonTopology()


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


@dataclass(frozen=True)
class Trajectory:
    """Pelvis position in the camera frame, millimeters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not self.z > 0:
            raise ValueError(f"trajectory depth must be positive, got z={self.z}")

    @classmethod
    def from_array(cls, a) -> "Trajectory":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def scaled(self, factor: float) -> "Trajectory":
        return Trajectory(self.x * factor, self.y * factor, self.z * factor)


def root_center(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., :1, :]


def bone_lengths(pose: np.ndarray, topo: SkeletonTopology = H36M) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    parents = [p for p, _ in topo.bones]
    children = [c for _, c in topo.bones]
    return np.linalg.norm(pose[..., children, :] - pose[..., parents, :], axis=-1)


def per_joint_error(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint Euclidean distance, in the units of the input."""
    return float(per_joint_error(pred, gt).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform of ``pred`` that best matches ``gt`` in least squares.

    Rotation is proper (det +1); a reflection is avoided by flipping the sign
    of the smallest singular direction.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    norm_g = np.sum(g0 ** 2)
    if norm_g <= 1e-24:
        raise ValueError("degenerate ground-truth pose: all joints coincide")
    norm_p = np.sum(p0 ** 2)
    if norm_p <= 1e-24:
        return np.broadcast_to(mu_g, gt.shape).copy()
    u, s, vt = np.linalg.svd(p0.T @ g0)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    s = s.copy()
    s[-1] *= d
    u[:, -1] *= d
    rot = u @ vt
    scale = s.sum() / norm_p
    return scale * p0 @ rot + mu_g


def pa_mpjpe(pred, gt) -> float:
    return mpjpe(procrustes_align(pred, gt), gt)


AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)


def pck_auc(preds, gts, threshold: float = 150.0) -> tuple[float, float]:
    """PCK at ``threshold`` mm and AUC over the 0..150 mm grid, both in percent.

    A joint counts as correct when its error is strictly below the threshold;
    an exact match counts at every threshold, including 0.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.size == 0 or gts.size == 0:
        raise ValueError("pck_auc needs at least one pose")
    err = per_joint_error(preds, gts).reshape(-1)
    exact = err == 0.0
    pck = 100.0 * float(np.mean((err < threshold) | exact))
    curve = [np.mean((err < th) | exact) for th in AUC_THRESHOLDS]
    return pck, 100.0 * float(np.mean(curve))
