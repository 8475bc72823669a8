"""scikit-learn style front end.

``PosePrior`` learns the diffusion prior (``fit``) and samples from it.
``PoseLifter``, ``PoseDenoiser`` and ``PoseCompleter`` wrap a fitted prior
and the guided solvers as estimators/transformers, so they can sit in a
pipeline or be cloned with different hyperparameters.

Poses are rooted millimeter arrays of shape ``(n, 17, 3)``; flattened
``(n, 51)`` input is accepted too.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import data as dt
from .denoiser import (
    DenoiserConfig,
    PriorModel,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)
from .diffusion import build_linear_schedule, timestep_for_noise_level
from .operators import (
    AdditiveNoise,
    Masking,
    Measurement,
    Projection,
    apply_mask,
    inverse_project_init,
)
from .skeleton import CameraIntrinsics, root_center
from .solvers import ProblemSpec, SolverConfig, check_compatible, solve, unconditional_sample

__all__ = ["PosePrior", "PoseLifter", "PoseDenoiser", "PoseCompleter", "check_poses"]


def check_poses(X, n_joints: int = 17, dims: int = 3, name: str = "X") -> np.ndarray:
    """Validate and reshape pose input to ``(n, n_joints, dims)`` float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        if X.shape[1:] != (n_joints, dims):
            raise ValueError(f"{name} must have shape (n, {n_joints}, {dims}), got {X.shape}")
        X = X.reshape(len(X), -1)
    X = check_array(X, ensure_2d=True, dtype=np.float64, input_name=name)
    if X.shape[1] != n_joints * dims:
        raise ValueError(f"{name} must have {n_joints * dims} columns, got {X.shape[1]}")
    return X.reshape(len(X), n_joints, dims)


class PosePrior(BaseEstimator):
    """Diffusion prior over rooted 3D poses."""

    def __init__(
        self,
        dim=96,
        depth=4,
        heads=4,
        time_dim=128,
        epochs=30,
        batch_size=128,
        learning_rate=1e-4,
        lr_schedule="constant",
        weight_decay=0.01,
        ema_ratio=0.9999,
        T=1000,
        beta1=1e-4,
        betaT=0.02,
        random_state=0,
    ):
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.time_dim = time_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.ema_ratio = ema_ratio
        self.T = T
        self.beta1 = beta1
        self.betaT = betaT
        self.random_state = random_state

    def fit(self, X, y=None, progress=None):
        poses = root_center(check_poses(X))
        info = dt.compute_normalization(poses)
        sched = build_linear_schedule(self.T, self.beta1, self.betaT)
        mc = DenoiserConfig(dim=self.dim, depth=self.depth, heads=self.heads, time_dim=self.time_dim)
        tc = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_schedule=self.lr_schedule,
            weight_decay=self.weight_decay,
            ema_ratio=self.ema_ratio,
            seed=int(self.random_state),
        )
        res = train_loop(dt.normalize(poses, info), tc, sched, mc, progress=progress)
        self.model_ = PriorModel(
            ema=res.ema,
            scale_mm=info.scale_mm,
            beta1=self.beta1,
            betaT=self.betaT,
            T=self.T,
            params=res.params,
            mean_pose=poses.mean(axis=0),
        )
        self.loss_log_ = res.loss_log
        self.scale_mm_ = info.scale_mm
        self.n_features_in_ = 51
        return self

    @classmethod
    def from_model(cls, model: PriorModel) -> "PosePrior":
        c = model.config
        est = cls(dim=c.dim, depth=c.depth, heads=c.heads, time_dim=c.time_dim,
                  T=model.T, beta1=model.beta1, betaT=model.betaT)
        est.model_ = model
        est.scale_mm_ = model.scale_mm
        est.loss_log_ = []
        est.n_features_in_ = 51
        return est

    @classmethod
    def load(cls, path) -> "PosePrior":
        return cls.from_model(load_checkpoint(path))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path)

    def sample(self, n_samples=1, random_state=None, n_steps=None, sampler="ddpm"):
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        return unconditional_sample(self.model_, int(n_samples), seed=int(seed), n_steps=n_steps, sampler=sampler)

    def score(self, X, y=None) -> float:
        """Negative noise-prediction MSE on ``X`` (higher is better)."""
        from .denoiser import draw_training_noise, noise_loss, predict_noise
        from .diffusion import q_sample

        check_is_fitted(self, "model_")
        x0 = dt.normalize(root_center(check_poses(X)), dt.NormalizationInfo(self.scale_mm_))
        t, eps = draw_training_noise(int(self.random_state), 0, range(len(x0)), 51, self.T)
        sched = self.model_.schedule()
        return -noise_loss(predict_noise(self.model_.ema, q_sample(x0, t, eps, sched), t), eps)


def _prior_model(prior) -> PriorModel:
    if isinstance(prior, PriorModel):
        return prior
    if isinstance(prior, PosePrior):
        check_is_fitted(prior, "model_")
        return prior.model_
    if isinstance(prior, str):
        return load_checkpoint(prior)
    raise TypeError("prior must be a fitted PosePrior, a PriorModel or a checkpoint path")


class _GuidedBase(BaseEstimator):
    _task = ""

    def _solver_config(self) -> SolverConfig:
        return SolverConfig(
            solver=self.solver,
            truncation=self.truncation,
            n_steps=self.n_steps,
            rho=self.rho,
            seed=int(self.random_state),
        )

    def fit(self, X=None, y=None):
        """Bind the prior; the solvers have nothing to learn from ``X``."""
        self.model_ = _prior_model(self.prior)
        cfg = self._solver_config()
        if cfg.truncation > self.model_.T:
            raise ValueError(f"truncation {cfg.truncation} exceeds the prior's T={self.model_.T}")
        self.n_features_in_ = 51
        return self

    def _run(self, problems):
        check_is_fitted(self, "model_")
        return solve(self.model_, problems, self._solver_config())


class PoseLifter(_GuidedBase):
    """2D keypoints + camera + pelvis trajectory -> rooted 3D pose."""

    _task = "estimate"

    def __init__(self, prior=None, solver="dps", truncation=450, n_steps=450, rho=5e-6,
                 init="inverse-proj", random_state=0):
        self.prior = prior
        self.solver = solver
        self.truncation = truncation
        self.n_steps = n_steps
        self.rho = rho
        self.init = init
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_compatible(self.solver, "projection")
        if self.init not in ("inverse-proj", "random"):
            raise ValueError(f"init must be inverse-proj or random, got {self.init!r}")
        return super().fit(X, y)

    def predict(self, X, trajectory, intrinsics=None):
        """``X``: ``(n, 17, 2)`` pixels; ``trajectory``: ``(n, 3)`` or ``(3,)`` mm."""
        check_is_fitted(self, "model_")
        p2d = check_poses(X, dims=2)
        tr = np.broadcast_to(np.asarray(trajectory, dtype=np.float64), (len(p2d), 3))
        K = intrinsics if intrinsics is not None else CameraIntrinsics()
        k = K.as_array() if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=np.float64)
        k = np.broadcast_to(k, (len(p2d), 4))
        problems = []
        for i in range(len(p2d)):
            init = inverse_project_init(p2d[i], k[i], tr[i]) if self.init == "inverse-proj" else None
            problems.append(ProblemSpec(Projection(k[i:i + 1].copy(), tr[i:i + 1].copy()),
                                        Measurement(p2d[i:i + 1]), init))
        return self._run(problems)


class PoseDenoiser(_GuidedBase, TransformerMixin):
    """Noisy 3D poses -> cleaned poses.

    With ``truncation="auto"`` the chain starts where the diffusion noise level
    matches ``noise_sigma_mm`` (requires a fitted prior).
    """

    _task = "denoise"

    def __init__(self, prior=None, noise_sigma_mm=0.0, solver="dps", truncation=450,
                 n_steps=450, rho=0.003, random_state=0):
        self.prior = prior
        self.noise_sigma_mm = noise_sigma_mm
        self.solver = solver
        self.truncation = truncation
        self.n_steps = n_steps
        self.rho = rho
        self.random_state = random_state

    def _solver_config(self):
        if self.truncation != "auto":
            return super()._solver_config()
        m = getattr(self, "model_", None) or _prior_model(self.prior)
        t = timestep_for_noise_level(m.schedule(), self.noise_sigma_mm / m.scale_mm)
        return SolverConfig(solver=self.solver, truncation=t, n_steps=min(self.n_steps, t),
                            rho=self.rho, seed=int(self.random_state))

    def transform(self, X):
        X = root_center(check_poses(X))
        op = AdditiveNoise("gaussian", float(self.noise_sigma_mm))
        return self._run([ProblemSpec(op, Measurement(x[None]), x) for x in X])


class PoseCompleter(_GuidedBase, TransformerMixin):
    """Poses with hidden joints -> completed poses.

    ``mask``: ``(17,)`` or ``(n, 17)`` booleans, True for observed joints.
    Hidden joints start from the prior's mean pose.
    """

    _task = "complete"

    def __init__(self, prior=None, solver="dps", truncation=450, n_steps=450, rho=0.1,
                 random_state=0):
        self.prior = prior
        self.solver = solver
        self.truncation = truncation
        self.n_steps = n_steps
        self.rho = rho
        self.random_state = random_state

    def transform(self, X, mask=None):
        check_is_fitted(self, "model_")
        X = check_poses(X)
        if mask is None:
            raise ValueError("PoseCompleter.transform needs a mask of observed joints")
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), X.shape[:2])
        mean = self.model_.mean_pose
        if mean is None:
            raise ValueError("the prior carries no mean pose for filling hidden joints")
        problems = []
        for x, m in zip(X, mask):
            y = apply_mask(x, m)
            problems.append(ProblemSpec(Masking.create(m), y, np.where(m[:, None], x, mean)))
        return self._run(problems)
