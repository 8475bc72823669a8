"""Run configuration: one YAML file, one section per concern.

Every key has a default; a file only lists what it changes. Unknown keys and
bad values raise :class:`ConfigError` carrying the dotted field path, e.g.
``solver.rho: must be >= 0``.

Sections::

    model:     dim, depth, heads, time_dim, ff_mult
    schedule:  T, beta1, betaT
    train:     epochs, batch_size, learning_rate, lr_schedule, weight_decay,
               ema_ratio, ema_warmup, seed, eval_size
    data:      train_path | n_train + train_seed, test_path | n_test +
               test_seed, depth_range_mm
    task:      noise_kind, intensity, mask_group, init, depth_factor
    solver:    solver, truncation, n_steps, eta, rho, rho_schedule, sampler,
               freeze_eps, diffuse_init, batch_size
    overrides: per-task solver/task settings, keyed by task name
    eval:      metrics
    output_dir
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig, TrainConfig
from .diffusion import build_linear_schedule
from .solvers import SOLVERS, SolverConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULTS", "TASKS"]

TASKS = ("estimate", "denoise", "complete", "generate")
METRICS = ("mpjpe", "pa_mpjpe", "pck", "auc")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": {"dim": 96, "depth": 4, "heads": 4, "time_dim": 128, "ff_mult": 4},
    "schedule": {"T": 1000, "beta1": 1e-4, "betaT": 0.02},
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 1e-4,
        "lr_schedule": "constant",
        "weight_decay": 0.01,
        "ema_ratio": 0.9999,
        "ema_warmup": True,
        "seed": 0,
        "eval_size": 512,
    },
    "data": {
        "train_path": None,
        "n_train": 5000,
        "train_seed": 0,
        "test_path": None,
        "n_test": 100,
        "test_seed": 1,
        "depth_range_mm": [4000.0, 7000.0],
    },
    "task": {
        "noise_kind": "gaussian",
        "intensity": 0.5,
        "mask_group": "spine",
        "init": None,
        "depth_factor": 1.0,
        "n_generate": 256,
    },
    "solver": {
        "solver": "dps",
        "truncation": 450,
        "n_steps": 450,
        "eta": 0.0,
        "rho": 0.003,
        "rho_schedule": None,
        "sampler": "ddim",
        "freeze_eps": False,
        "diffuse_init": False,
        "batch_size": 128,
    },
    "overrides": {},
    "eval": {"metrics": list(METRICS)},
    "output_dir": "runs",
}

_OVERRIDABLE = {"solver", "task"}


def _merge(base: dict, upd: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        where = f"{path}.{k}" if path else str(k)
        if k not in base:
            raise ConfigError(f"{where}: unknown key (valid: {', '.join(sorted(base))})")
        if isinstance(base[k], dict) and k != "overrides":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def _check_overrides(ov, schema):
    if not isinstance(ov, dict):
        raise ConfigError("overrides: expected a mapping of task name to settings")
    for task, sections in ov.items():
        if task not in TASKS:
            raise ConfigError(f"overrides.{task}: unknown task (valid: {', '.join(TASKS)})")
        if not isinstance(sections, dict):
            raise ConfigError(f"overrides.{task}: expected a mapping")
        for sec, vals in sections.items():
            if sec not in _OVERRIDABLE:
                raise ConfigError(f"overrides.{task}.{sec}: only solver and task can be overridden")
            _merge(schema[sec], vals or {}, f"overrides.{task}.{sec}")


def _num(d, key, path, lo=None, hi=None, integer=False, lo_open=False):
    v = d[key]
    where = f"{path}.{key}"
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{where}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
    if hi is not None and v > hi:
        raise ConfigError(f"{where}: must be <= {hi}, got {v!r}")


def _validate(c: dict) -> None:
    m = c["model"]
    for k in ("dim", "depth", "heads", "time_dim", "ff_mult"):
        _num(m, k, "model", lo=1, integer=True)
    if m["dim"] % m["heads"]:
        raise ConfigError("model.dim: must be divisible by model.heads")
    if m["time_dim"] % 2:
        raise ConfigError("model.time_dim: must be even")
    s = c["schedule"]
    _num(s, "T", "schedule", lo=2, integer=True)
    _num(s, "beta1", "schedule", lo=0, lo_open=True)
    _num(s, "betaT", "schedule", lo=0, lo_open=True, hi=0.999)
    try:
        build_linear_schedule(int(s["T"]), float(s["beta1"]), float(s["betaT"]))
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    t = c["train"]
    _num(t, "epochs", "train", lo=1, integer=True)
    _num(t, "batch_size", "train", lo=1, integer=True)
    _num(t, "learning_rate", "train", lo=0, lo_open=True)
    if t["lr_schedule"] not in ("constant", "cosine"):
        raise ConfigError(f"train.lr_schedule: expected constant or cosine, got {t['lr_schedule']!r}")
    _num(t, "weight_decay", "train", lo=0)
    _num(t, "ema_ratio", "train", lo=0, hi=1)
    _num(t, "seed", "train", lo=0, integer=True)
    _num(t, "eval_size", "train", lo=1, integer=True)
    d = c["data"]
    for k in ("n_train", "n_test"):
        _num(d, k, "data", lo=1, integer=True)
    for k in ("train_seed", "test_seed"):
        _num(d, k, "data", lo=0, integer=True)
    lo_hi = d["depth_range_mm"]
    if not (isinstance(lo_hi, (list, tuple)) and len(lo_hi) == 2 and 0 < lo_hi[0] <= lo_hi[1]):
        raise ConfigError("data.depth_range_mm: expected [min, max] with 0 < min <= max")
    _validate_task(c["task"], "task")
    _validate_solver(c["solver"], "solver", int(s["T"]))
    _check_overrides(c["overrides"], DEFAULTS)
    for task, sections in c["overrides"].items():
        merged = _merge(c["solver"], sections.get("solver") or {}, f"overrides.{task}.solver")
        _validate_solver(merged, f"overrides.{task}.solver", int(s["T"]))
        merged = _merge(c["task"], sections.get("task") or {}, f"overrides.{task}.task")
        _validate_task(merged, f"overrides.{task}.task")
    metrics = c["eval"]["metrics"]
    if not isinstance(metrics, list) or any(mt not in METRICS for mt in metrics):
        raise ConfigError(f"eval.metrics: expected a subset of {list(METRICS)}")


def _validate_task(tk, path):
    if tk["noise_kind"] not in ("gaussian", "uniform"):
        raise ConfigError(f"{path}.noise_kind: expected gaussian or uniform, got {tk['noise_kind']!r}")
    _num(tk, "intensity", path, lo=0)
    _num(tk, "depth_factor", path, lo=0, lo_open=True)
    _num(tk, "n_generate", path, lo=0, integer=True)
    if tk["init"] not in (None, "inverse-proj", "measurement", "random"):
        raise ConfigError(f"{path}.init: expected inverse-proj, measurement or random")
    from .skeleton import H36M

    if tk["mask_group"] not in H36M.part_groups:
        raise ConfigError(
            f"{path}.mask_group: unknown group {tk['mask_group']!r} "
            f"(valid: {', '.join(sorted(H36M.part_groups))})"
        )


def _validate_solver(sv, path, T):
    if sv["solver"] not in SOLVERS:
        raise ConfigError(f"{path}.solver: expected one of {SOLVERS}, got {sv['solver']!r}")
    _num(sv, "truncation", path, lo=1, hi=T, integer=True)
    _num(sv, "n_steps", path, lo=1, hi=sv["truncation"], integer=True)
    _num(sv, "eta", path, lo=0, hi=1)
    _num(sv, "rho", path, lo=0)
    _num(sv, "batch_size", path, lo=1, integer=True)
    if sv["sampler"] not in ("ddim", "ddpm"):
        raise ConfigError(f"{path}.sampler: expected ddim or ddpm")
    rs = sv["rho_schedule"]
    if rs is not None:
        if not isinstance(rs, list) or len(rs) != sv["n_steps"]:
            raise ConfigError(f"{path}.rho_schedule: expected a list of n_steps={sv['n_steps']} values")
        if any(isinstance(r, bool) or not isinstance(r, (int, float)) or r < 0 for r in rs):
            raise ConfigError(f"{path}.rho_schedule: entries must be numbers >= 0")


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str | None = None

    @classmethod
    def from_dict(cls, d: dict | None, source: str | None = None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config root: expected a mapping")
        merged = _merge(DEFAULTS, d, "")
        _validate(merged)
        return cls(merged, source)

    def with_updates(self, updates: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` updates (CLI flags) and revalidate."""
        raw = copy.deepcopy(self.raw)
        for dotted, v in updates.items():
            if v is None:
                continue
            sec, key = dotted.split(".")
            if key not in raw[sec]:
                raise ConfigError(f"{dotted}: unknown key")
            raw[sec][key] = v
        _validate(raw)
        return RunConfig(raw, self.source)

    # -- typed views ---------------------------------------------------

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(**{k: int(v) for k, v in self.raw["model"].items()})

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            learning_rate=float(t["learning_rate"]),
            lr_schedule=str(t["lr_schedule"]),
            weight_decay=float(t["weight_decay"]),
            ema_ratio=float(t["ema_ratio"]),
            ema_warmup=bool(t["ema_warmup"]),
            seed=int(t["seed"]),
            eval_size=int(t["eval_size"]),
        )

    def schedule(self):
        s = self.raw["schedule"]
        return build_linear_schedule(int(s["T"]), float(s["beta1"]), float(s["betaT"]))

    def _for_task(self, section: str, task: str | None) -> dict:
        base = self.raw[section]
        if task is None:
            return dict(base)
        ov = (self.raw["overrides"].get(task) or {}).get(section) or {}
        return {**base, **ov}

    def task_settings(self, task: str | None = None) -> dict:
        return self._for_task("task", task)

    def solver_config(self, task: str | None = None, seed: int | None = None) -> SolverConfig:
        s = self._for_task("solver", task)
        names = {f.name for f in fields(SolverConfig)}
        kw = {k: v for k, v in s.items() if k in names}
        kw["seed"] = int(self.raw["train"]["seed"] if seed is None else seed)
        for k in ("truncation", "n_steps", "batch_size"):
            kw[k] = int(kw[k])
        kw["rho"] = float(kw["rho"])
        kw["eta"] = float(kw["eta"])
        return SolverConfig(**kw)

    def fingerprint(self, sections=("model", "schedule", "train", "data")) -> str:
        """Stable hash of the sections that determine a trained checkpoint."""
        sub = {k: self.raw[k] for k in sections}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    return RunConfig.from_dict(data, source=str(p))
