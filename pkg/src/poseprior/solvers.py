"""Guided reverse diffusion: DPS, MCG and PiGDM variants, plus unconditional
sampling.

All solvers share one loop. At every planned timestep the network predicts
the noise, the clean-pose estimate ``x0_hat`` follows in closed form, a DDIM
(or DDPM) step moves the state, and a solver-specific likelihood term pulls
the state toward measurement consistency:

* ``dps``: subtract ``rho_t * grad_{x_t} ||y - f(x0_hat)||^2``.
* ``mcg``: as ``dps``, but the measured entries of ``x0_hat`` are replaced by
  ``y`` before the step (linear operators only) and once more on the output.
* ``pigdm``: add ``rho_t * r_t^2 * (d x0_hat / d x_t)^T f^+(y - f(x0_hat))``
  with ``r_t^2 = (1 - abar_t) / (2 - abar_t)``.

A batch of problems is solved in lockstep. The network treats every sample
independently, so the gradient of the summed residual equals the per-sample
gradients; each sample draws its noise from its own stream
``default_rng([seed, index])``, so results do not depend on batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .denoiser import PriorModel, bind_params, forward
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    ddpm_step,
    make_step_plan,
)
from .operators import (
    Measurement,
    OperatorMismatch,
    is_linear,
    pinv_direction,
    residual_tensor,
    stack_measurements,
    stack_operators,
)
from .skeleton import root_center

__all__ = [
    "SolverConfig",
    "ProblemSpec",
    "SolverError",
    "UnsupportedOperator",
    "solve",
    "dps_sample",
    "dps_guidance",
    "mcg_sample",
    "pigdm_sample",
    "unconditional_sample",
    "check_compatible",
]

SOLVERS = ("dps", "mcg", "pigdm")


class SolverError(FloatingPointError):
    pass


class UnsupportedOperator(ValueError):
    pass


@dataclass
class SolverConfig:
    solver: str = "dps"
    truncation: int = 450
    n_steps: int = 450
    eta: float = 0.0
    rho: float = 0.003
    rho_schedule: list | None = None
    sampler: str = "ddim"
    freeze_eps: bool = False
    diffuse_init: bool = False
    seed: int = 0
    batch_size: int = 128

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"sampler must be ddim or ddpm, got {self.sampler!r}")
        if self.rho_schedule is not None:
            if len(self.rho_schedule) != self.n_steps:
                raise ValueError(
                    f"rho_schedule has {len(self.rho_schedule)} entries for {self.n_steps} steps"
                )
            if min(self.rho_schedule) < 0:
                raise ValueError("rho_schedule entries must be >= 0")

    def rho_at(self, k: int) -> float:
        """Guidance scale for the k-th planned step (0 = first, at the truncation)."""
        if self.rho_schedule is not None:
            return float(self.rho_schedule[k])
        return float(self.rho)


@dataclass
class ProblemSpec:
    """An operator, its measurement, and the starting pose (rooted, mm).

    ``init=None`` starts from standard Gaussian noise.
    """

    operator: object
    measurement: Measurement
    init: np.ndarray | None = None

    def __post_init__(self):
        op, y = self.operator, self.measurement
        if (op.kind == "projection") != y.is_2d:
            raise OperatorMismatch(f"operator {op.kind!r} does not match the measurement")
        if op.kind == "mask" and y.mask is None:
            raise OperatorMismatch("masking problem without a measurement mask")


def check_compatible(solver: str, operator_kind: str) -> None:
    if solver == "mcg" and operator_kind == "projection":
        raise UnsupportedOperator(
            "mcg needs a linear operator (mask or additive noise); "
            "perspective projection is nonlinear"
        )


def _replace_measured(op, x0_mm, y: Measurement):
    """Hard data consistency for linear operators: measured entries := y."""
    if op.kind == "mask":
        return np.where(y.mask[..., None], y.values, x0_mm)
    return y.values.copy()


def solve(
    model: PriorModel,
    problems: list[ProblemSpec] | None,
    cfg: SolverConfig,
    *,
    guided: bool = True,
    indices=None,
    n: int | None = None,
    sched: NoiseSchedule | None = None,
) -> np.ndarray:
    """Run the configured solver on ``problems``; returns rooted mm poses ``(B, 17, 3)``.

    With ``guided=False`` the likelihood terms are skipped (the measurements
    are ignored); ``problems=None`` with ``n`` samples from noise.
    ``indices`` key the per-sample noise streams (default ``0..B-1``).
    """
    if problems is not None:
        B = len(problems)
    elif n is not None:
        B = n
    else:
        raise ValueError("need problems or a sample count")
    if B == 0:
        return np.empty((0, 17, 3))
    indices = list(range(B)) if indices is None else list(indices)
    if len(indices) != B:
        raise ValueError("indices must match the number of problems")
    out = []
    for s in range(0, B, cfg.batch_size):
        chunk = None if problems is None else problems[s:s + cfg.batch_size]
        idx = indices[s:s + cfg.batch_size]
        out.append(_solve_chunk(model, chunk, cfg, guided, idx, sched or model.schedule()))
    return np.concatenate(out)


def _x0_graph(params, x, t, sched, requires_grad=True, freeze_eps=False):
    """Tape with ``x_t`` as leaf, the predicted noise and ``x0_hat(x_t)``."""
    tape = ad.Tape()
    xt = tape.leaf(x, requires_grad=requires_grad)
    eps_t = forward(tape, bind_params(tape, params), xt, np.full(len(x), t))
    if freeze_eps:
        eps_t = tape.constant(eps_t.value)
    ab = float(sched.abar(t))
    x0_t = ad.scale(ad.sub(xt, ad.scale(eps_t, np.sqrt(1 - ab))), 1.0 / np.sqrt(ab))
    return tape, xt, eps_t, x0_t


def dps_guidance(model: PriorModel, problem: ProblemSpec, x_t, t: int, freeze_eps: bool = False):
    """Residual ``||y - f(x0_hat(x_t))||^2`` and its gradient w.r.t. ``x_t``.

    ``x_t`` is a flat state in model units. This is the term the DPS step
    scales by ``rho``.
    """
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    sched = model.schedule()
    tape, xt, _, x0_t = _x0_graph(model.ema, x, int(t), sched, True, freeze_eps)
    op = stack_operators([problem.operator])
    y = stack_measurements([problem.measurement])
    r = residual_tensor(op, ad.scale(x0_t, model.scale_mm), y, unit_mm=model.scale_mm)
    (g,) = tape.backward(r, [xt])
    return float(r.value), g.reshape(-1)


def _solve_chunk(model, problems, cfg, guided, indices, sched):
    B = len(indices)
    scale = model.scale_mm
    n_coords = model.config.n_coords
    T = sched.T
    if cfg.truncation > T:
        raise ValueError(f"truncation {cfg.truncation} exceeds schedule length {T}")
    plan = make_step_plan(cfg.truncation, cfg.n_steps, cfg.eta, T)
    rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in indices]

    op = y = None
    if problems is not None:
        kinds = {p.operator.kind for p in problems}
        if guided:
            for k in kinds:
                check_compatible(cfg.solver, k)
        op = stack_operators([p.operator for p in problems])
        y = stack_measurements([p.measurement for p in problems])

    # starting state: init poses (model units) or per-sample Gaussian noise
    x = np.empty((B, n_coords))
    for b in range(B):
        init = None if problems is None else problems[b].init
        if init is None:
            x[b] = rngs[b].standard_normal(n_coords)
        else:
            x[b] = np.asarray(init, dtype=np.float64).reshape(-1) / scale
    if cfg.diffuse_init:
        ab0 = sched.abar(plan.timesteps[0])
        for b in range(B):
            if problems is not None and problems[b].init is not None:
                x[b] = np.sqrt(ab0) * x[b] + np.sqrt(1 - ab0) * rngs[b].standard_normal(n_coords)

    use_ddpm = cfg.sampler == "ddpm"
    eta = 1.0 if use_ddpm else plan.eta
    stochastic = eta > 0
    params = model.ema
    solver = cfg.solver if (guided and problems is not None) else None

    for k, (t, t_prev) in enumerate(plan.pairs()):
        rho_t = cfg.rho_at(k) if solver else 0.0
        need_grad = rho_t > 0
        tape, xt, eps_t, x0_t = _x0_graph(params, x, t, sched, need_grad, cfg.freeze_eps)
        ab = float(sched.abar(t))
        eps_hat = eps_t.value
        x0_hat = x0_t.value
        x0_used = x0_hat
        if solver == "mcg":
            replaced = _replace_measured(op, x0_hat.reshape(B, -1, 3) * scale, y)
            x0_used = replaced.reshape(B, -1) / scale

        z = None
        if stochastic:
            z = np.stack([r.standard_normal(n_coords) for r in rngs])
        if use_ddpm and t_prev == t - 1:
            x_new = ddpm_step(x, eps_hat, t, z, sched, x0_hat=x0_used)
        else:
            x_new = ddim_step(x, eps_hat, t, t_prev, eta, sched, z=z, x0_hat=x0_used)

        if need_grad and solver in ("dps", "mcg"):
            r = residual_tensor(op, ad.scale(x0_t, scale), y, unit_mm=scale)
            (g,) = tape.backward(r, [xt])
            x_new = x_new - rho_t * g
        elif need_grad and solver == "pigdm":
            v = pinv_direction(op, x0_hat.reshape(B, -1, 3) * scale, y).reshape(B, -1) / scale
            (g,) = tape.vjp(x0_t, v, [xt])
            r2 = (1.0 - ab) / (1.0 + (1.0 - ab))
            x_new = x_new + rho_t * r2 * g

        if not np.all(np.isfinite(x_new)):
            bad = np.where(~np.all(np.isfinite(x_new), axis=1))[0]
            raise SolverError(
                f"non-finite state after step {k} (t={t}) for samples {[indices[b] for b in bad]}"
            )
        x = x_new

    out = root_center(x.reshape(B, -1, 3) * scale)
    if solver == "mcg":
        out = _replace_measured(op, out, y)
    return out


def _single(model, problem, cfg, solver):
    c = SolverConfig(**{**cfg.__dict__, "solver": solver})
    return solve(model, [problem], c)[0]


def dps_sample(model: PriorModel, problem: ProblemSpec, cfg: SolverConfig) -> np.ndarray:
    return _single(model, problem, cfg, "dps")


def mcg_sample(model: PriorModel, problem: ProblemSpec, cfg: SolverConfig) -> np.ndarray:
    return _single(model, problem, cfg, "mcg")


def pigdm_sample(model: PriorModel, problem: ProblemSpec, cfg: SolverConfig) -> np.ndarray:
    return _single(model, problem, cfg, "pigdm")


def unconditional_sample(
    model: PriorModel,
    n: int,
    seed: int = 0,
    n_steps: int | None = None,
    sampler: str = "ddpm",
    eta: float = 0.0,
) -> np.ndarray:
    """``n`` poses sampled from pure noise over the full chain (rooted, mm)."""
    T = model.T
    cfg = SolverConfig(
        truncation=T,
        n_steps=T if n_steps is None else n_steps,
        sampler=sampler,
        eta=eta,
        rho=0.0,
        seed=seed,
    )
    if n == 0:
        return np.empty((0, 17, 3))
    return solve(model, None, cfg, guided=False, n=n)
