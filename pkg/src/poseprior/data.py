"""Synthetic skeleton data, normalization bookkeeping and pose files.

The generator walks the 17-joint tree from the pelvis. Every bone has a rest
direction in the body frame; its orientation is the parent's accumulated
rotation times a local rotation whose Euler angles are drawn uniformly inside
per-bone limits. Bone lengths are fixed, so each sampled pose satisfies them
exactly and the learned prior has hard constraints to pick up.

Body frame: X toward the subject's left, Y up, Z forward. Camera frame:
x right, y down, z away from the camera.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .operators import (
    AdditiveNoise,
    Masking,
    Measurement,
    Projection,
    apply_mask,
    apply_noise,
    inverse_project_init,
    project_perspective,
)
from .skeleton import H36M, CameraIntrinsics, SkeletonTopology, Trajectory, bone_lengths, root_center
from .solvers import ProblemSpec

__all__ = [
    "SEGMENT_LENGTHS_MM",
    "ANGLE_LIMITS_DEG",
    "SyntheticGenConfig",
    "PoseRecord",
    "NormalizationInfo",
    "TaskSample",
    "generate_synthetic_dataset",
    "compute_normalization",
    "normalize",
    "denormalize",
    "save_pose_file",
    "load_pose_file",
    "format_spec",
    "make_task_dataset",
    "average_bone_length",
    "PoseFileError",
]

# Bone order follows H36M.bones: the bone ending at joint 1, 2, ..., 16.
SEGMENT_LENGTHS_MM = (
    132.0, 442.0, 454.0,  # right hip offset, thigh, shin
    132.0, 442.0, 454.0,  # left
    233.0, 257.0, 121.0, 115.0,  # pelvis-spine, spine-thorax, thorax-neck, neck-head
    151.0, 278.0, 251.0,  # left shoulder offset, upper arm, forearm
    151.0, 278.0, 251.0,  # right
)

_REST_DIRECTIONS = {
    1: (-1, 0, 0), 2: (0, -1, 0), 3: (0, -1, 0),
    4: (1, 0, 0), 5: (0, -1, 0), 6: (0, -1, 0),
    7: (0, 1, 0), 8: (0, 1, 0), 9: (0, 1, 0), 10: (0, 1, 0),
    11: (1, 0, 0), 12: (0, -1, 0), 13: (0, -1, 0),
    14: (-1, 0, 0), 15: (0, -1, 0), 16: (0, -1, 0),
}

# Local Euler limits in degrees for the bone ending at each joint, as
# (x: flexion, y: twist about the bone, z: abduction). Local rotation is
# Rz @ Rx @ Ry. Positive x swings a downward bone backward, an upward bone
# forward; positive z swings a downward bone toward +X.
ANGLE_LIMITS_DEG = {
    1: ((0, 0), (0, 0), (0, 0)),
    2: ((-90, 25), (-20, 20), (-35, 8)),     # right hip joint
    3: ((0, 120), (0, 0), (0, 0)),           # right knee (hinge)
    4: ((0, 0), (0, 0), (0, 0)),
    5: ((-90, 25), (-20, 20), (-8, 35)),     # left hip joint
    6: ((0, 120), (0, 0), (0, 0)),           # left knee
    7: ((-10, 30), (-25, 25), (-12, 12)),    # lower back
    8: ((-10, 20), (-20, 20), (-10, 10)),    # upper back
    9: ((-15, 25), (-25, 25), (-12, 12)),    # lower neck
    10: ((-20, 30), (0, 0), (-15, 15)),      # head
    11: ((0, 0), (0, 0), (0, 0)),
    12: ((-120, 40), (-45, 45), (0, 90)),    # left shoulder joint
    13: ((-140, 0), (0, 0), (0, 0)),         # left elbow (hinge)
    14: ((0, 0), (0, 0), (0, 0)),
    15: ((-120, 40), (-45, 45), (-90, 0)),   # right shoulder joint
    16: ((-140, 0), (0, 0), (0, 0)),         # right elbow
}

HINGE_JOINTS = (3, 6, 13, 16)


class PoseFileError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticGenConfig:
    n_poses: int = 5000
    segment_lengths_mm: tuple = SEGMENT_LENGTHS_MM
    joint_angle_limits: dict = field(default_factory=lambda: dict(ANGLE_LIMITS_DEG))
    trajectory_depth_range_mm: tuple = (4000.0, 7000.0)
    yaw_range_deg: tuple = (-180.0, 180.0)
    pitch_range_deg: tuple = (-10.0, 10.0)
    lateral_fraction: float = 0.1
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    seed: int = 0

    def __post_init__(self):
        if len(self.segment_lengths_mm) != 16 or min(self.segment_lengths_mm) <= 0:
            raise ValueError("need 16 positive segment lengths")
        lo, hi = self.trajectory_depth_range_mm
        if not 0 < lo <= hi:
            raise ValueError(f"bad depth range {self.trajectory_depth_range_mm}")
        for j, lim in self.joint_angle_limits.items():
            for a, b in lim:
                if a > b:
                    raise ValueError(f"angle limit for joint {j} has min > max")


@dataclass
class PoseRecord:
    id: str
    pose3d: np.ndarray  # (17, 3) mm, camera frame, absolute
    trajectory: Trajectory
    intrinsics: CameraIntrinsics
    pose2d: np.ndarray | None = None  # (17, 2) px

    @property
    def rooted(self) -> np.ndarray:
        return root_center(self.pose3d)


@dataclass(frozen=True)
class NormalizationInfo:
    scale_mm: float

    def __post_init__(self):
        if not self.scale_mm > 0:
            raise ValueError("scale_mm must be positive")


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def sample_rooted_poses(cfg: SyntheticGenConfig, rng, n: int | None = None, return_angles: bool = False):
    """Forward kinematics for ``n`` poses; returns rooted camera-frame poses.

    With ``return_angles`` also returns the drawn local angles, shape
    ``(n, 17, 3)`` in degrees (row 0 unused).
    """
    n = cfg.n_poses if n is None else n
    topo = H36M
    yaw = np.deg2rad(rng.uniform(*cfg.yaw_range_deg, size=n))
    pitch = np.deg2rad(rng.uniform(*cfg.pitch_range_deg, size=n))
    # body -> camera: 180 degrees about x maps up to -y and forward to -z
    base = _rot_x(np.full(n, math.pi))
    g = [None] * topo.n_joints
    g[0] = _rot_x(pitch) @ _rot_y(yaw) @ base
    pos = np.zeros((n, topo.n_joints, 3))
    angles = np.zeros((n, topo.n_joints, 3))
    for b, (p, j) in enumerate(topo.bones):
        lim = cfg.joint_angle_limits[j]
        ang = np.stack([rng.uniform(lo, hi, size=n) for lo, hi in lim], axis=-1)
        angles[:, j] = ang
        ax, ay, az = np.deg2rad(ang).T
        g[j] = g[p] @ (_rot_z(az) @ _rot_x(ax) @ _rot_y(ay))
        d = np.asarray(_REST_DIRECTIONS[j], dtype=np.float64)
        pos[:, j] = pos[:, p] + cfg.segment_lengths_mm[b] * (g[j] @ d)
    if return_angles:
        return pos, angles
    return pos


def generate_synthetic_dataset(cfg: SyntheticGenConfig, rng=None) -> list[PoseRecord]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    rooted = sample_rooted_poses(cfg, rng)
    n = len(rooted)
    z = rng.uniform(*cfg.trajectory_depth_range_mm, size=n)
    x = rng.uniform(-cfg.lateral_fraction, cfg.lateral_fraction, size=n) * z
    y = rng.uniform(-cfg.lateral_fraction, cfg.lateral_fraction, size=n) * z
    traj = np.stack([x, y, z], axis=-1)
    k = cfg.intrinsics
    p2d = project_perspective(rooted, traj, np.broadcast_to(k.as_array(), (n, 4)))
    width = len(str(max(n - 1, 0)))
    return [
        PoseRecord(
            id=f"syn{cfg.seed}-{i:0{width}d}",
            pose3d=rooted[i] + traj[i],
            trajectory=Trajectory.from_array(traj[i]),
            intrinsics=k,
            pose2d=p2d[i],
        )
        for i in range(n)
    ]


def _rooted_stack(records_or_poses) -> np.ndarray:
    if isinstance(records_or_poses, np.ndarray):
        return root_center(records_or_poses)
    return np.stack([r.rooted for r in records_or_poses])


def compute_normalization(records) -> NormalizationInfo:
    """RMS of all non-root rooted coordinates (the root is identically zero)."""
    poses = _rooted_stack(records) if len(records) else np.empty((0, 17, 3))
    if len(poses) == 0:
        raise ValueError("cannot compute normalization of an empty dataset")
    return NormalizationInfo(float(np.sqrt(np.mean(poses[:, 1:, :] ** 2))))


def normalize(poses_mm, info: NormalizationInfo) -> np.ndarray:
    """Rooted ``(..., 17, 3)`` mm poses to flattened ``(..., 51)`` model units."""
    p = np.asarray(poses_mm, dtype=np.float64)
    return (p / info.scale_mm).reshape(p.shape[:-2] + (-1,))


def denormalize(x, info: NormalizationInfo) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x * info.scale_mm).reshape(x.shape[:-1] + (-1, 3))


def average_bone_length(lengths=SEGMENT_LENGTHS_MM) -> float:
    return float(np.mean(lengths))


# --------------------------------------------------------------------------
# pose files

POSE_FILE_VERSION = "poseprior-poses v1"
_FIELDS = (
    ["id"]
    + [f"pose3d_{j}_{c}" for j in range(17) for c in "xyz"]
    + ["traj_x", "traj_y", "traj_z"]
    + ["fx", "fy", "cx", "cy"]
    + [f"pose2d_{j}_{c}" for j in range(17) for c in "uv"]
)


def format_spec() -> str:
    return (
        f"# {POSE_FILE_VERSION}\n"
        "# One record per line, comma separated, floats in %.17g (lossless).\n"
        "# The first non-empty line must be the version header above.\n"
        "# Fields (the 34 pose2d values are optional, all or none):\n"
        + "\n".join(f"{i:3d} {name}" for i, name in enumerate(_FIELDS))
        + "\n"
    )


def save_pose_file(records, path) -> None:
    buf = io.StringIO()
    buf.write(f"# {POSE_FILE_VERSION}\n")
    for r in records:
        if "," in r.id or "\n" in r.id:
            raise PoseFileError(f"record id {r.id!r} contains a delimiter")
        vals = list(np.asarray(r.pose3d, dtype=np.float64).reshape(-1))
        vals += list(r.trajectory.as_array()) + list(r.intrinsics.as_array())
        if r.pose2d is not None:
            vals += list(np.asarray(r.pose2d, dtype=np.float64).reshape(-1))
        buf.write(r.id + "," + ",".join("%.17g" % v for v in vals) + "\n")
    Path(path).write_text(buf.getvalue())


def load_pose_file(path) -> list[PoseRecord]:
    records = []
    header_seen = False
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if not header_seen:
                if line[1:].strip() != POSE_FILE_VERSION:
                    raise PoseFileError(
                        f"line {lineno}: unsupported pose file version {line[1:].strip()!r}"
                    )
                header_seen = True
            continue
        if not header_seen:
            raise PoseFileError(f"line {lineno}: missing version header '# {POSE_FILE_VERSION}'")
        parts = line.split(",")
        n_vals = len(parts) - 1
        if n_vals not in (58, 92):
            raise PoseFileError(
                f"line {lineno}: expected 58 or 92 numeric fields (51 pose, 3 trajectory, "
                f"4 intrinsics, optional 34 pose2d), got {n_vals}"
            )
        try:
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise PoseFileError(f"line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise PoseFileError(f"line {lineno}: non-finite value")
        try:
            records.append(
                PoseRecord(
                    id=parts[0],
                    pose3d=vals[:51].reshape(17, 3),
                    trajectory=Trajectory.from_array(vals[51:54]),
                    intrinsics=CameraIntrinsics(*vals[54:58]),
                    pose2d=vals[58:].reshape(17, 2) if n_vals == 92 else None,
                )
            )
        except ValueError as exc:
            raise PoseFileError(f"line {lineno}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# task datasets


@dataclass
class TaskSample:
    problem: ProblemSpec
    ground_truth: np.ndarray  # rooted (17, 3) mm
    record_id: str
    index: int


def make_task_dataset(
    records,
    task: str,
    *,
    noise_kind: str = "gaussian",
    intensity: float = 0.5,
    avg_bone_mm: float | None = None,
    mask_group: str | None = None,
    mean_pose=None,
    depth_factor: float = 1.0,
    init: str | None = None,
    seed: int = 0,
    topo: SkeletonTopology = H36M,
) -> list[TaskSample]:
    """Turn pose records into inverse problems with ground truth kept for scoring.

    ``estimate``: 2D measurement, projection operator, inverse-projection init
    (the operator and init use the trajectory scaled by ``depth_factor``).
    ``denoise``: noisy 3D measurement, init = measurement.
    ``complete``: masked 3D measurement, masked joints of the init filled
    from ``mean_pose``.
    ``init="random"`` leaves the init empty; the solver then starts from
    Gaussian noise.
    Per-sample noise uses the stream ``default_rng([seed, index])``.
    """
    if task not in ("estimate", "denoise", "complete"):
        raise ValueError(f"unknown task {task!r}; valid: estimate, denoise, complete")
    if task == "complete":
        if mask_group is None:
            raise ValueError("completion needs a mask group")
        mask = topo.group_mask(mask_group)
        if mean_pose is None:
            raise ValueError("completion needs the dataset mean pose for the init fill")
        mean_pose = np.asarray(mean_pose, dtype=np.float64).reshape(17, 3)
    if task == "denoise" and avg_bone_mm is None:
        avg_bone_mm = average_bone_length()
    out = []
    for i, r in enumerate(records):
        gt = r.rooted
        if task == "estimate":
            p2d = r.pose2d
            if p2d is None:
                p2d = project_perspective(gt, r.trajectory, r.intrinsics)
            traj = r.trajectory.scaled(depth_factor)
            op = Projection.create(r.intrinsics, traj)
            y = Measurement(np.asarray(p2d, dtype=np.float64)[None])
            x_init = inverse_project_init(p2d, r.intrinsics, traj)
        elif task == "denoise":
            rng = np.random.default_rng([seed, i])
            noisy = apply_noise(gt, noise_kind, intensity, avg_bone_mm, rng)
            op = AdditiveNoise(noise_kind, intensity * avg_bone_mm)
            y = Measurement(noisy[None])
            x_init = noisy
        else:
            op = Masking.create(mask)
            y = apply_mask(gt, mask)
            x_init = np.where(mask[:, None], gt, mean_pose)
        if init == "random":
            x_init = None
        elif init not in (None, "inverse-proj", "measurement"):
            raise ValueError(f"unknown init {init!r}")
        out.append(TaskSample(ProblemSpec(op, y, x_init), gt, r.id, i))
    return out


def check_record_consistency(record: PoseRecord, tol_px: float = 1e-6) -> bool:
    if record.pose2d is None:
        return True
    re = project_perspective(record.rooted, record.trajectory, record.intrinsics)
    return bool(np.max(np.abs(re - record.pose2d)) <= tol_px)


def check_bone_lengths(record_or_pose, lengths=SEGMENT_LENGTHS_MM, tol: float = 1e-9) -> bool:
    pose = record_or_pose.pose3d if isinstance(record_or_pose, PoseRecord) else record_or_pose
    return bool(np.max(np.abs(bone_lengths(pose) - np.asarray(lengths))) <= tol)
