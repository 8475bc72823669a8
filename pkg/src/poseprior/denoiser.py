"""Transformer-encoder noise predictor over joint tokens, its training loop
and the checkpoint container.

Each pose is a flattened 51-vector (17 joints x 3, model units). The joints
become 17 tokens: a shared linear embedding of the 3 coordinates plus a
learned per-joint position embedding plus a timestep embedding. Tokens go
through ``depth`` pre-norm encoder blocks and a linear head back to 3
coordinates per joint.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, build_linear_schedule, q_sample

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "TrainConfig",
    "AdamWState",
    "PriorModel",
    "init_params",
    "timestep_encoding",
    "forward",
    "predict_noise",
    "noise_loss",
    "training_step",
    "ema_update",
    "draw_training_noise",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_SCHEMA",
]

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class DenoiserConfig:
    dim: int = 96
    depth: int = 4
    heads: int = 4
    time_dim: int = 128
    ff_mult: int = 4
    n_joints: int = 17

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def n_coords(self) -> int:
        return 3 * self.n_joints


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1024
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    ema_ratio: float = 0.9999
    ema_warmup: bool = True
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_size: int = 512
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the run

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.ema_ratio < 1.0:
            raise ValueError("ema_ratio must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")


def init_params(config: DenoiserConfig, seed: int = 0, zero_head: bool = True) -> DenoiserParams:
    """Random weights; with ``zero_head`` the network initially predicts zero noise."""
    rng = np.random.default_rng(seed)
    D, F = config.dim, config.dim * config.ff_mult

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    a = {
        "joint_embed.w": dense(3, D),
        "joint_embed.b": np.zeros(D),
        "pos_embed": rng.normal(0.0, 0.02, size=(config.n_joints, D)),
        "time.w1": dense(config.time_dim, D),
        "time.b1": np.zeros(D),
        "time.w2": dense(D, D),
        "time.b2": np.zeros(D),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        a[p + "ln1.g"] = np.ones(D)
        a[p + "ln1.b"] = np.zeros(D)
        a[p + "qkv.w"] = dense(D, 3 * D)
        a[p + "qkv.b"] = np.zeros(3 * D)
        a[p + "out.w"] = dense(D, D) / math.sqrt(2 * config.depth)
        a[p + "out.b"] = np.zeros(D)
        a[p + "ln2.g"] = np.ones(D)
        a[p + "ln2.b"] = np.zeros(D)
        a[p + "ff1.w"] = dense(D, F)
        a[p + "ff1.b"] = np.zeros(F)
        a[p + "ff2.w"] = dense(F, D) / math.sqrt(2 * config.depth)
        a[p + "ff2.b"] = np.zeros(D)
    a["ln_f.g"] = np.ones(D)
    a["ln_f.b"] = np.zeros(D)
    a["head.w"] = np.zeros((D, 3)) if zero_head else dense(D, 3)
    a["head.b"] = np.zeros(3)
    return DenoiserParams(config, a)


def timestep_encoding(t, dim: int = 128) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def forward(tape: ad.Tape, p: dict, x: ad.Tensor, t) -> ad.Tensor:
    """Build the network on ``tape``; ``p`` maps parameter names to tensors."""
    cfg_dim = p["pos_embed"].shape[1]
    n_joints = p["pos_embed"].shape[0]
    heads = p["_heads"]
    depth = p["_depth"]
    if x.value.ndim != 2 or x.shape[1] != 3 * n_joints:
        raise ad.ShapeError(f"predict_noise: expected (batch, {3 * n_joints}) input, got {x.shape}")
    B = x.shape[0]
    dh = cfg_dim // heads
    t = np.asarray(t).reshape(-1)
    if t.shape[0] != B:
        raise ad.ShapeError(f"predict_noise: {t.shape[0]} timesteps for batch of {B}")

    h = ad.reshape(x, (B, n_joints, 3)) @ p["joint_embed.w"] + p["joint_embed.b"]
    h = h + ad.embedding(p["pos_embed"], np.arange(n_joints))
    temb = tape.constant(timestep_encoding(t, p["time.w1"].shape[0]))
    temb = ad.gelu(temb @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
    h = h + ad.expand(temb, 1, n_joints)

    for i in range(depth):
        q_ = f"blocks.{i}."
        a = ad.layer_norm(h) * p[q_ + "ln1.g"] + p[q_ + "ln1.b"]
        qkv = a @ p[q_ + "qkv.w"] + p[q_ + "qkv.b"]
        q, k, v = ad.split(qkv, [cfg_dim] * 3)
        q = ad.transpose(ad.reshape(q, (B, n_joints, heads, dh)), (0, 2, 1, 3))
        kT = ad.transpose(ad.reshape(k, (B, n_joints, heads, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(v, (B, n_joints, heads, dh)), (0, 2, 1, 3))
        att = ad.softmax(ad.scale(q @ kT, 1.0 / math.sqrt(dh)))
        o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, n_joints, cfg_dim))
        h = h + (o @ p[q_ + "out.w"] + p[q_ + "out.b"])
        f = ad.layer_norm(h) * p[q_ + "ln2.g"] + p[q_ + "ln2.b"]
        f = ad.gelu(f @ p[q_ + "ff1.w"] + p[q_ + "ff1.b"]) @ p[q_ + "ff2.w"] + p[q_ + "ff2.b"]
        h = h + f

    h = ad.layer_norm(h) * p["ln_f.g"] + p["ln_f.b"]
    out = h @ p["head.w"] + p["head.b"]
    return ad.reshape(out, (B, 3 * n_joints))


def bind_params(tape: ad.Tape, params: DenoiserParams, requires_grad: bool = False) -> dict:
    p = {k: tape.leaf(v, requires_grad=requires_grad) for k, v in params.arrays.items()}
    p["_heads"] = params.config.heads
    p["_depth"] = params.config.depth
    return p


def predict_noise(params: DenoiserParams, x_t, t, T: int | None = None) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t), (x_t.shape[0],)) if x_t.ndim == 2 else t
    if T is not None and (np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > T)):
        raise ValueError(f"timestep outside [1, {T}]")
    tape = ad.Tape()
    p = bind_params(tape, params)
    return forward(tape, p, tape.constant(x_t), t).value


def noise_loss(eps_hat, eps) -> float:
    return float(np.mean((np.asarray(eps_hat) - np.asarray(eps)) ** 2))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _adamw(params: DenoiserParams, grads: dict, state: AdamWState, cfg: TrainConfig, lr=None):
    b1, b2 = cfg.adam_betas
    step = state.step + 1
    lr = cfg.learning_rate if lr is None else lr
    new_arrays = {}
    m_new, v_new = {}, {}
    for name, w in params.arrays.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g * g
        mh = m / (1 - b1 ** step)
        vh = v / (1 - b2 ** step)
        # decoupled decay on matrices only; vectors are biases / norm gains
        decay = cfg.weight_decay if w.ndim >= 2 else 0.0
        new_arrays[name] = w - lr * (mh / (np.sqrt(vh) + cfg.adam_eps) + decay * w)
        m_new[name] = m
        v_new[name] = v
    return DenoiserParams(params.config, new_arrays), AdamWState(step, m_new, v_new)


def training_step(
    params: DenoiserParams,
    opt_state: AdamWState,
    x0,
    sched: NoiseSchedule,
    t,
    eps,
    cfg: TrainConfig,
    lr: float | None = None,
):
    """One AdamW update on the noise-prediction MSE for the batch ``x0``.

    ``t`` and ``eps`` are the per-example timesteps and noise (see
    :func:`draw_training_noise`). ``lr`` overrides the configured rate for
    this step. Returns ``(loss, params, opt_state)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty training batch")
    x_t = q_sample(x0, t, eps, sched)
    tape = ad.Tape()
    p = bind_params(tape, params, requires_grad=True)
    pred = forward(tape, p, tape.constant(x_t), t)
    loss = ad.mean_square(ad.sub(pred, eps))
    lv = float(loss.value)
    if not math.isfinite(lv):
        raise FloatingPointError(
            f"non-finite training loss at optimizer step {opt_state.step + 1} "
            f"(t range {int(np.min(t))}..{int(np.max(t))})"
        )
    names = list(params.arrays)
    grads = tape.backward(loss, [p[n] for n in names])
    new_params, new_state = _adamw(params, dict(zip(names, grads)), opt_state, cfg, lr)
    return lv, new_params, new_state


def ema_update(shadow: DenoiserParams, params: DenoiserParams, ratio: float) -> DenoiserParams:
    return DenoiserParams(
        shadow.config,
        {k: ratio * shadow.arrays[k] + (1.0 - ratio) * params.arrays[k] for k in shadow.arrays},
    )


def draw_training_noise(seed: int, epoch: int, indices, n_coords: int, T: int):
    """Per-example ``(t, eps)`` keyed on (seed, epoch, example index).

    Draws do not depend on batch composition or order.
    """
    ts = np.empty(len(indices), dtype=np.int64)
    eps = np.empty((len(indices), n_coords))
    for row, idx in enumerate(indices):
        g = np.random.default_rng([seed, epoch, int(idx)])
        ts[row] = g.integers(1, T + 1)
        eps[row] = g.standard_normal(n_coords)
    return ts, eps


def learning_rate_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Rate for the update after ``step`` completed updates."""
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))


def _eval_loss(params, x0, t, eps, sched, batch=512):
    total = 0.0
    for s in range(0, len(x0), batch):
        xb = x0[s:s + batch]
        pred = predict_noise(params, q_sample(xb, t[s:s + batch], eps[s:s + batch], sched), t[s:s + batch])
        total += float(np.sum((pred - eps[s:s + batch]) ** 2))
    return total / x0.size


@dataclass
class TrainResult:
    params: DenoiserParams
    ema: DenoiserParams
    loss_log: list


def train_loop(
    data,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    model_config: DenoiserConfig | None = None,
    init: DenoiserParams | None = None,
    progress=None,
) -> TrainResult:
    """Train on normalized flattened poses ``data`` of shape ``(N, 51)``.

    The loss log holds one row per epoch plus an ``epoch 0`` row measured
    before the first update: ``{"epoch", "train_loss", "eval_loss", "seconds"}``.
    ``eval_loss`` is the noise MSE of the EMA weights on a fixed subset with
    fixed noise draws, so rows are comparable across epochs.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a non-empty (N, 51) array")
    model_config = model_config or DenoiserConfig()
    params = init.copy() if init is not None else init_params(model_config, seed=cfg.seed)
    ema = params.copy()
    opt = AdamWState()
    n = len(data)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    n_eval = min(cfg.eval_size, n)
    eval_t, eval_eps = draw_training_noise(cfg.seed, 0, range(n_eval), data.shape[1], sched.T)
    eval_x = data[:n_eval]
    log_rows = [{
        "epoch": 0,
        "train_loss": float("nan"),
        "eval_loss": _eval_loss(ema, eval_x, eval_t, eval_eps, sched),
        "seconds": 0.0,
    }]
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            t, eps = draw_training_noise(cfg.seed, epoch, idx, data.shape[1], sched.T)
            lr = learning_rate_at(cfg, opt.step, total_steps)
            loss, params, opt = training_step(params, opt, data[idx], sched, t, eps, cfg, lr)
            losses.append(loss * len(idx))
            ratio = cfg.ema_ratio
            if cfg.ema_warmup:
                ratio = min(ratio, (1.0 + opt.step) / (10.0 + opt.step))
            ema = ema_update(ema, params, ratio)
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / n),
            "eval_loss": _eval_loss(ema, eval_x, eval_t, eval_eps, sched),
            "seconds": time.perf_counter() - start,
        }
        log_rows.append(row)
        log.info("epoch %d train %.4f eval %.4f (%.1fs)", epoch, row["train_loss"], row["eval_loss"], row["seconds"])
        if progress is not None:
            progress(row)
    return TrainResult(params, ema, log_rows)


@dataclass
class PriorModel:
    """Everything needed for inference: EMA weights, schedule and normalization."""

    ema: DenoiserParams
    scale_mm: float
    beta1: float = 1e-4
    betaT: float = 0.02
    T: int = 1000
    topology: str = "h36m17"
    params: DenoiserParams | None = None
    mean_pose: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> DenoiserConfig:
        return self.ema.config

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta1, self.betaT)

    def eps(self, x_t, t) -> np.ndarray:
        return predict_noise(self.ema, x_t, t, self.T)


def save_checkpoint(model: PriorModel, path) -> None:
    """Write a single ``.npz`` container.

    ``__meta__`` holds a JSON document (schema version, topology id, network
    config, normalization scale, schedule parameters, parameter names); arrays
    are stored as ``ema/<name>``, ``params/<name>`` and ``mean_pose``.
    """
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "topology": model.topology,
        "config": asdict(model.config),
        "scale_mm": model.scale_mm,
        "schedule": {"T": model.T, "beta1": model.beta1, "betaT": model.betaT},
        "names": list(model.ema.arrays),
        "has_params": model.params is not None,
        "has_mean_pose": model.mean_pose is not None,
        "extra": model.extra,
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for k, v in model.ema.arrays.items():
        arrays["ema/" + k] = v
    if model.params is not None:
        for k, v in model.params.arrays.items():
            arrays["params/" + k] = v
    if model.mean_pose is not None:
        arrays["mean_pose"] = np.asarray(model.mean_pose, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> PriorModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        cfg = DenoiserConfig(**meta["config"])
        ema = DenoiserParams(cfg, {k: z["ema/" + k].copy() for k in meta["names"]})
        params = None
        if meta["has_params"]:
            params = DenoiserParams(cfg, {k: z["params/" + k].copy() for k in meta["names"]})
        mean_pose = z["mean_pose"].copy() if meta["has_mean_pose"] else None
    s = meta["schedule"]
    return PriorModel(
        ema=ema,
        scale_mm=float(meta["scale_mm"]),
        beta1=float(s["beta1"]),
        betaT=float(s["betaT"]),
        T=int(s["T"]),
        topology=meta["topology"],
        params=params,
        mean_pose=mean_pose,
        extra=meta.get("extra", {}),
    )
