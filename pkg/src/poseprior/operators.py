"""Forward measurement operators for estimation, denoising and completion.

Operators act on pelvis-rooted poses in millimeters. All operator fields
carry a leading batch axis so a stack of problems can be handled at once;
the constructors accept single-problem inputs and add that axis.

Residual units: pixels for :class:`Projection`; for the 3D operators the
difference is divided by the ``unit_mm`` argument first (the solvers pass
the model's normalization scale, so 3D residuals live in model units).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .skeleton import CameraIntrinsics, Trajectory, root_center

__all__ = [
    "Projection",
    "AdditiveNoise",
    "Masking",
    "Measurement",
    "OperatorMismatch",
    "project_perspective",
    "inverse_project_init",
    "apply_noise",
    "apply_mask",
    "forward_op",
    "residual",
    "residual_tensor",
    "pinv_direction",
    "is_linear",
    "stack_operators",
    "stack_measurements",
]


class OperatorMismatch(ValueError):
    pass


def _as_batch(a, tail_ndim):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == tail_ndim else a


@dataclass(frozen=True)
class Projection:
    """Perspective camera with known intrinsics and pelvis trajectory."""

    intrinsics: np.ndarray  # (B, 4): fx, fy, cx, cy
    trajectory: np.ndarray  # (B, 3) mm, camera frame

    kind = "projection"

    @classmethod
    def create(cls, K: CameraIntrinsics | np.ndarray, traj: Trajectory | np.ndarray) -> "Projection":
        k = K.as_array() if isinstance(K, CameraIntrinsics) else K
        tr = traj.as_array() if isinstance(traj, Trajectory) else traj
        return cls(_as_batch(k, 1), _as_batch(tr, 1))

    def __post_init__(self):
        if np.any(self.trajectory[:, 2] <= 0):
            raise ValueError("projection trajectory must have positive depth")
        if np.any(self.intrinsics[:, :2] <= 0):
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class AdditiveNoise:
    """Identity forward map; the measurement carries the noise."""

    noise_kind: str = "gaussian"
    sigma_mm: float = 0.0
    batch: int = 1

    kind = "noise"

    def __post_init__(self):
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ValueError(f"noise kind must be gaussian or uniform, got {self.noise_kind!r}")
        if self.sigma_mm < 0:
            raise ValueError("sigma_mm must be >= 0")


@dataclass(frozen=True)
class Masking:
    mask: np.ndarray  # (B, 17) bool, True = observed

    kind = "mask"

    @classmethod
    def create(cls, mask) -> "Masking":
        m = np.asarray(mask, dtype=bool)
        return cls(m[None] if m.ndim == 1 else m)

    def __post_init__(self):
        if np.any(~self.mask.any(axis=-1)):
            raise ValueError("mask must keep at least one observed joint")


@dataclass(frozen=True)
class Measurement:
    """Observed values: ``(B, 17, 2)`` pixels or ``(B, 17, 3)`` millimeters.

    For masking, hidden joints hold zeros and ``mask`` says which entries are
    real; the residual reads the mask, never the zeros.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurement contains non-finite values")

    @property
    def is_2d(self) -> bool:
        return self.values.shape[-1] == 2

    def __getitem__(self, i):
        return Measurement(self.values[i:i + 1], None if self.mask is None else self.mask[i:i + 1])


def project_perspective(pose_rel, traj, K) -> np.ndarray:
    """Pinhole projection of a rooted pose placed at ``traj``.

    Accepts a single pose ``(17, 3)`` or a batch ``(B, 17, 3)`` with matching
    batched ``traj`` ``(B, 3)`` and ``K`` ``(B, 4)``.
    """
    pose = np.asarray(pose_rel, dtype=np.float64)
    single = pose.ndim == 2
    pose = pose[None] if single else pose
    tr = traj.as_array() if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    k = K.as_array() if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=np.float64)
    tr = np.broadcast_to(tr.reshape(-1, 3), (pose.shape[0], 3))
    k = np.broadcast_to(k.reshape(-1, 4), (pose.shape[0], 4))
    world = pose + tr[:, None, :]
    z = world[..., 2]
    if np.any(z <= 0):
        b, j = np.argwhere(z <= 0)[0]
        raise ValueError(f"non-positive depth {z[b, j]:.3f} mm at joint {j} (sample {b})")
    u = k[:, None, 0] * world[..., 0] / z + k[:, None, 2]
    v = k[:, None, 1] * world[..., 1] / z + k[:, None, 3]
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def inverse_project_init(p2d, K, traj) -> np.ndarray:
    """Place every joint on its camera ray at distance ``||traj||``, then root it."""
    p2d = np.asarray(p2d, dtype=np.float64)
    single = p2d.ndim == 2
    p2d = p2d[None] if single else p2d
    tr = traj.as_array() if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    k = K.as_array() if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=np.float64)
    tr = np.broadcast_to(tr.reshape(-1, 3), (p2d.shape[0], 3))
    k = np.broadcast_to(k.reshape(-1, 4), (p2d.shape[0], 4))
    dist = np.linalg.norm(tr, axis=-1)
    if np.any(dist == 0):
        raise ValueError("trajectory must be non-zero")
    rays = np.stack(
        [
            (p2d[..., 0] - k[:, None, 2]) / k[:, None, 0],
            (p2d[..., 1] - k[:, None, 3]) / k[:, None, 1],
            np.ones(p2d.shape[:-1]),
        ],
        axis=-1,
    )
    rays = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    out = root_center(rays * dist[:, None, None])
    return out[0] if single else out


def apply_noise(pose, kind: str, intensity: float, avg_bone_mm: float, rng) -> np.ndarray:
    """Perturb every coordinate with noise whose scale is ``intensity * avg_bone_mm``.

    Gaussian noise uses that value as the standard deviation, uniform noise as
    the half-width.
    """
    if intensity < 0:
        raise ValueError("noise intensity must be >= 0")
    pose = np.asarray(pose, dtype=np.float64)
    s = intensity * avg_bone_mm
    if kind == "gaussian":
        n = rng.normal(0.0, 1.0, size=pose.shape) * s
    elif kind == "uniform":
        n = rng.uniform(-1.0, 1.0, size=pose.shape) * s
    else:
        raise ValueError(f"noise kind must be gaussian or uniform, got {kind!r}")
    return pose + n


def apply_mask(pose, mask) -> Measurement:
    pose = np.asarray(pose, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    single = pose.ndim == 2
    pose_b = pose[None] if single else pose
    mask_b = np.broadcast_to(mask, pose_b.shape[:-1]).copy()
    if np.any(~mask_b.any(axis=-1)):
        raise ValueError("mask hides every joint; at least one must be observed")
    return Measurement(np.where(mask_b[..., None], pose_b, 0.0), mask_b)


def is_linear(op) -> bool:
    return op.kind in ("noise", "mask")


def forward_op(op, pose_mm) -> Measurement:
    """Noise-free measurement of rooted poses ``(B, 17, 3)``."""
    pose_mm = _as_batch(pose_mm, 2)
    if op.kind == "projection":
        return Measurement(project_perspective(pose_mm, op.trajectory, op.intrinsics))
    if op.kind == "mask":
        return apply_mask(pose_mm, op.mask)
    return Measurement(pose_mm.copy())


def _check_kind(op, y: Measurement):
    if (op.kind == "projection") != y.is_2d:
        raise OperatorMismatch(
            f"operator {op.kind!r} does not match a {'2D' if y.is_2d else '3D'} measurement"
        )
    if op.kind == "mask" and y.mask is None:
        raise OperatorMismatch("masking operator needs a measurement that carries its mask")


def residual_tensor(op, x0_mm: ad.Tensor, y: Measurement, unit_mm: float = 1.0) -> ad.Tensor:
    """Sum over the batch of ``||y - f(x0)||^2`` as a tape scalar.

    ``x0_mm`` has shape ``(B, 51)`` or ``(B, 17, 3)``.
    """
    _check_kind(op, y)
    tape = x0_mm.tape
    B = y.values.shape[0]
    J = y.values.shape[1]
    x = ad.reshape(x0_mm, (B, J, 3))
    if op.kind == "projection":
        world = x + ad.expand(tape.constant(op.trajectory), 1, J)
        X, Y, Z = ad.split(world, [1, 1, 1])
        k = op.intrinsics
        col = lambda v: tape.constant(np.broadcast_to(v[:, None, None], (B, J, 1)))
        u = ad.mul(col(k[:, 0]), ad.div(X, Z)) + col(k[:, 2])
        v = ad.mul(col(k[:, 1]), ad.div(Y, Z)) + col(k[:, 3])
        du = u - y.values[..., 0:1]
        dv = v - y.values[..., 1:2]
        return ad.sum_all(ad.mul(du, du)) + ad.sum_all(ad.mul(dv, dv))
    d = ad.scale(x - y.values, 1.0 / unit_mm)
    if op.kind == "mask":
        d = ad.mul(d, np.repeat(y.mask[..., None].astype(np.float64), 3, axis=-1))
    return ad.sum_all(ad.mul(d, d))


def residual(op, x0_mm, y: Measurement, unit_mm: float = 1.0) -> float:
    """``||y - f(x0)||^2`` summed over the batch, as a plain float."""
    tape = ad.Tape()
    x = tape.constant(_as_batch(x0_mm, 2))
    return float(residual_tensor(op, x, y, unit_mm).value)


def pinv_direction(op, x0_mm, y: Measurement) -> np.ndarray:
    """Signal-space correction ``f^+(y - f(x0))`` in millimeters.

    For the projection the pseudoinverse of the per-joint Jacobian at ``x0``
    is used.
    """
    _check_kind(op, y)
    x0 = _as_batch(x0_mm, 2)
    if op.kind == "noise":
        return y.values - x0
    if op.kind == "mask":
        return np.where(y.mask[..., None], y.values - x0, 0.0)
    world = x0 + op.trajectory[:, None, :]
    X, Y, Z = world[..., 0], world[..., 1], world[..., 2]
    k = op.intrinsics
    fx, fy = k[:, None, 0], k[:, None, 1]
    zeros = np.zeros_like(X)
    jac = np.stack(
        [
            np.stack([fx / Z, zeros, -fx * X / Z ** 2], axis=-1),
            np.stack([zeros, fy / Z, -fy * Y / Z ** 2], axis=-1),
        ],
        axis=-2,
    )  # (B, J, 2, 3)
    r = y.values - project_perspective(x0, op.trajectory, op.intrinsics)
    return np.einsum("bjck,bjk->bjc", np.linalg.pinv(jac), r)


def stack_operators(ops):
    kinds = {o.kind for o in ops}
    if len(kinds) != 1:
        raise OperatorMismatch(f"cannot stack operators of kinds {sorted(kinds)}")
    o0 = ops[0]
    if o0.kind == "projection":
        return Projection(
            np.concatenate([o.intrinsics for o in ops]), np.concatenate([o.trajectory for o in ops])
        )
    if o0.kind == "mask":
        return Masking(np.concatenate([o.mask for o in ops]))
    return AdditiveNoise(o0.noise_kind, o0.sigma_mm, sum(o.batch for o in ops))


def stack_measurements(ys):
    vals = np.concatenate([y.values for y in ys])
    masks = [y.mask for y in ys]
    if all(m is None for m in masks):
        return Measurement(vals)
    if any(m is None for m in masks):
        raise OperatorMismatch("cannot stack masked and unmasked measurements")
    return Measurement(vals, np.concatenate(masks))
