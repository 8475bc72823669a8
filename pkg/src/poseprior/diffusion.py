"""Discrete-time noise schedule and DDPM / DDIM reverse kernels.

Timesteps are 1-based: ``t = 1..T``. Index 0 denotes clean data, with the
convention ``alpha_bar(0) = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "StepPlan",
    "build_linear_schedule",
    "q_sample",
    "predict_x0",
    "ddpm_coefficients",
    "ddpm_step",
    "ddim_coefficients",
    "ddim_step",
    "make_step_plan",
    "timestep_for_noise_level",
]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta1: float
    betaT: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check(self, t, allow_zero=False):
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t.astype(np.int64)

    def abar(self, t):
        """``alpha_bar`` at 1-based ``t``; ``t = 0`` gives 1."""
        t = self._check(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def beta_at(self, t):
        return self.beta[self._check(t) - 1]

    def alpha_at(self, t):
        return self.alpha[self._check(t) - 1]

    def posterior_variance(self, t):
        """``(1 - abar(t-1)) / (1 - abar(t)) * beta(t)``; zero at ``t = 1``."""
        t = self._check(t)
        return (1.0 - self.abar(t - 1)) / (1.0 - self.abar(t)) * self.beta_at(t)


def build_linear_schedule(T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ValueError(f"need 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={betaT}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = beta1 + (t - 1.0) / (T - 1.0) * (betaT - beta1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta1), float(betaT))


def _col(v, like):
    """Broadcast per-sample scalars over the trailing axes of ``like``."""
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} differs from data shape {x0.shape}")
    ab = _col(sched.abar(sched._check(t)), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule):
    ab = _col(sched.abar(sched._check(t)), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_coefficients(t, sched: NoiseSchedule):
    """Coefficients ``(c_xt, c_x0, sigma)`` of the ancestral step t -> t-1."""
    t = sched._check(t)
    ab = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    beta = sched.beta_at(t)
    c_xt = np.sqrt(sched.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    sigma = np.sqrt(sched.posterior_variance(t))
    return c_xt, c_x0, sigma


def ddpm_step(x_t, eps_hat, t, z, sched: NoiseSchedule, x0_hat=None):
    if x0_hat is None:
        x0_hat = predict_x0(x_t, eps_hat, t, sched)
    c_xt, c_x0, sigma = ddpm_coefficients(t, sched)
    out = _col(c_xt, x_t) * x_t + _col(c_x0, x_t) * x0_hat
    if z is not None:
        out = out + _col(sigma, x_t) * z
    return out


def ddim_coefficients(t, t_prev, eta, sched: NoiseSchedule):
    """DDIM step t -> t_prev written as ``c_xt*x_t + c_x0*x0_hat + sigma*z``.

    Also returns ``c_eps``, the weight on the noise prediction in the
    ``sqrt(abar_prev)*x0_hat + c_eps*eps_hat`` form.
    """
    t = sched._check(t)
    t_prev = np.asarray(t_prev)
    if np.any(t_prev >= t):
        raise ValueError(f"t_prev must be smaller than t (t={t}, t_prev={t_prev})")
    ab = sched.abar(t)
    ab_prev = sched.abar(t_prev)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    c_eps = np.sqrt(np.maximum(1.0 - ab_prev - sigma ** 2, 0.0))
    c_xt = c_eps / np.sqrt(1.0 - ab)
    c_x0 = np.sqrt(ab_prev) - c_xt * np.sqrt(ab)
    return c_xt, c_x0, sigma, c_eps


def ddim_step(x_t, eps_hat, t, t_prev, eta, sched: NoiseSchedule, z=None, x0_hat=None):
    """One DDIM update; ``x0_hat`` may be supplied to override the prediction."""
    _, _, sigma, c_eps = ddim_coefficients(t, t_prev, eta, sched)
    if x0_hat is None:
        x0_hat = predict_x0(x_t, eps_hat, t, sched)
    out = _col(np.sqrt(sched.abar(t_prev)), x_t) * x0_hat + _col(c_eps, x_t) * eps_hat
    if z is not None and eta > 0:
        out = out + _col(sigma, x_t) * z
    return out


@dataclass(frozen=True)
class StepPlan:
    timesteps: tuple
    eta: float = 0.0

    def __post_init__(self):
        ts = self.timesteps
        if not ts:
            raise ValueError("step plan must contain at least one timestep")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly decreasing")
        if ts[-1] < 1:
            raise ValueError("timesteps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    def pairs(self):
        """``(t, t_prev)`` transitions, the last one landing on 0."""
        ts = list(self.timesteps)
        return list(zip(ts, ts[1:] + [0]))

    @property
    def consecutive(self) -> bool:
        return all(a - b == 1 for a, b in self.pairs())


def make_step_plan(truncation: int, n_steps: int, eta: float = 0.0, T: int | None = None) -> StepPlan:
    if T is not None and truncation > T:
        raise ValueError(f"truncation {truncation} exceeds schedule length {T}")
    if not 1 <= n_steps <= truncation:
        raise ValueError(f"need 1 <= n_steps <= truncation, got n_steps={n_steps}, truncation={truncation}")
    if n_steps == 1:
        return StepPlan((int(truncation),), eta)
    grid = np.linspace(truncation, 1, n_steps)
    ts = tuple(int(v) for v in np.floor(grid + 0.5))
    return StepPlan(ts, eta)


def timestep_for_noise_level(sched: NoiseSchedule, sigma: float) -> int:
    """Smallest t whose signal-to-noise matches data noise of std ``sigma``.

    Data ``x + sigma*eps`` scaled by ``sqrt(abar)`` looks like ``x_t`` when
    ``(1 - abar) / abar = sigma**2``.
    """
    if sigma <= 0:
        return 1
    ratio = (1.0 - sched.alpha_bar) / sched.alpha_bar
    idx = int(np.searchsorted(ratio, sigma ** 2))
    return int(min(max(idx + 1, 1), sched.T))
