"""Command-line entry point.

    poseprior train     --config C --out DIR [--seed N]
    poseprior solve     --task {estimate,denoise,complete,generate} --checkpoint CK --out DIR ...
    poseprior eval      REPORT [REPORT ...] [--out DIR]
    poseprior gen-data  --config C --out DIR [--seed N]
    poseprior format-spec

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dt
from .config import ConfigError, RunConfig, load_config
from .denoiser import CHECKPOINT_SCHEMA, PriorModel, load_checkpoint, save_checkpoint, train_loop
from .diffusion import make_step_plan
from .operators import OperatorMismatch
from .reports import (
    ReportError,
    bone_length_deviation,
    build_rows,
    compare_reports,
    format_table,
    load_report,
    write_report,
)
from .skeleton import H36M, CameraIntrinsics, Trajectory, root_center
from .solvers import SolverError, UnsupportedOperator, check_compatible, solve, unconditional_sample

log = logging.getLogger("poseprior")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

TASK_INITS = {
    "estimate": ("inverse-proj", "random"),
    "denoise": ("measurement", "random"),
    "complete": ("measurement", "random"),
}

CHECKPOINT_FORMAT = f"""\
# checkpoint (.npz, schema {CHECKPOINT_SCHEMA})
__meta__        0-d unicode array holding JSON:
                  schema, topology, config (dim, depth, heads, time_dim,
                  ff_mult, n_joints), scale_mm, schedule (T, beta1, betaT),
                  names (parameter order), has_params, has_mean_pose, extra
ema/<name>      float64 EMA weights (used for inference)
params/<name>   float64 raw weights (optional)
mean_pose       float64 (17, 3) rooted mean of the training poses, mm (optional)
"""


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poseprior", description="Diffusion pose prior and guided solvers.")
    p.add_argument("--format-spec", action="store_true", help="print the pose-file and checkpoint layouts")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required)

    sp = sub.add_parser("train", help="train the prior")
    common(sp)

    sp = sub.add_parser("solve", help="run a guided solver on synthetic or file-backed problems")
    common(sp)
    sp.add_argument("--task", required=True, choices=["estimate", "denoise", "complete", "generate"])
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--noise-kind", choices=["gaussian", "uniform"])
    sp.add_argument("--intensity", type=float)
    sp.add_argument("--mask-group")
    sp.add_argument("--solver", choices=["dps", "mcg", "pigdm"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--truncation", type=int)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--init", choices=["inverse-proj", "measurement", "random"])
    sp.add_argument("--n", type=int, help="number of test problems (or samples for generate)")

    sp = sub.add_parser("eval", help="compare solve reports")
    sp.add_argument("reports", nargs="+", type=Path)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("gen-data", help="write synthetic train/test pose files")
    common(sp)

    sub.add_parser("format-spec", help="print the pose-file and checkpoint layouts")
    return p


def _seed(args, cfg: RunConfig) -> int:
    return int(cfg.raw["train"]["seed"] if args.seed is None else args.seed)


def _records(cfg: RunConfig, split: str, n_override=None):
    d = cfg.raw["data"]
    path = d[f"{split}_path"]
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"data.{split}_path: file not found: {p}")
        recs = dt.load_pose_file(p)
        return recs[:n_override] if n_override else recs
    n = n_override or int(d[f"n_{split}"])
    gen = dt.SyntheticGenConfig(
        n_poses=n,
        seed=int(d[f"{split}_seed"]),
        trajectory_depth_range_mm=tuple(float(v) for v in d["depth_range_mm"]),
    )
    return dt.generate_synthetic_dataset(gen)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    cfg = cfg.with_updates({"train.seed": seed})
    recs = _records(cfg, "train")
    poses = np.stack([r.rooted for r in recs])
    info = dt.compute_normalization(poses)
    start = time.perf_counter()
    res = train_loop(
        dt.normalize(poses, info),
        cfg.train_config(),
        cfg.schedule(),
        cfg.model_config(),
        progress=lambda r: log.info("epoch %(epoch)d train %(train_loss).4f eval %(eval_loss).4f", r),
    )
    s = cfg.raw["schedule"]
    model = PriorModel(
        ema=res.ema,
        scale_mm=info.scale_mm,
        beta1=float(s["beta1"]),
        betaT=float(s["betaT"]),
        T=int(s["T"]),
        params=res.params,
        mean_pose=poses.mean(axis=0),
        extra={"fingerprint": cfg.fingerprint(), "n_train": len(recs)},
    )
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "checkpoint.npz")
    with open(args.out / "loss_log.tsv", "w") as fh:
        fh.write("epoch\ttrain_loss\teval_loss\n")
        for r in res.loss_log:
            fh.write(f"{r['epoch']}\t{r['train_loss']!r}\t{r['eval_loss']!r}\n")
    _write_json(args.out / "train_summary.json", {
        "seed": seed,
        "n_train": len(recs),
        "scale_mm": info.scale_mm,
        "initial_eval_loss": res.loss_log[0]["eval_loss"],
        "final_eval_loss": res.loss_log[-1]["eval_loss"],
        "wall_clock_s": time.perf_counter() - start,
        "config": cfg.raw,
    })
    print(f"checkpoint: {args.out / 'checkpoint.npz'}")
    return EXIT_OK


def _resolve_solve(args, cfg: RunConfig, model: PriorModel):
    task = args.task
    seed = _seed(args, cfg)
    tk = cfg.task_settings(task)
    for flag, key in (("noise_kind", "noise_kind"), ("intensity", "intensity"),
                      ("mask_group", "mask_group"), ("init", "init")):
        v = getattr(args, flag)
        if v is not None:
            tk[key] = v
    if tk["intensity"] < 0:
        raise ConfigError("--intensity: must be >= 0")
    if tk["mask_group"] not in H36M.part_groups:
        raise ConfigError(f"--mask-group: unknown group {tk['mask_group']!r} "
                          f"(valid: {', '.join(sorted(H36M.part_groups))})")
    sc = cfg.solver_config(task, seed)
    upd = {k: v for k, v in (("solver", args.solver), ("n_steps", args.steps),
                             ("truncation", args.truncation), ("rho", args.rho)) if v is not None}
    if "truncation" in upd and "n_steps" not in upd:
        upd["n_steps"] = min(sc.n_steps, upd["truncation"])
    if "n_steps" in upd or "truncation" in upd or "rho" in upd:
        upd["rho_schedule"] = None if "rho" in upd or len(sc.rho_schedule or []) != upd.get("n_steps", sc.n_steps) else sc.rho_schedule
    try:
        sc = dataclasses.replace(sc, **upd)
        if task != "generate":
            make_step_plan(sc.truncation, sc.n_steps, sc.eta, model.T)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None
    if task != "generate":
        if tk["init"] is not None and tk["init"] not in TASK_INITS[task]:
            raise ConfigError(f"--init {tk['init']} does not apply to {task} "
                              f"(valid: {', '.join(TASK_INITS[task])})")
        kind = {"estimate": "projection", "denoise": "noise", "complete": "mask"}[task]
        try:
            check_compatible(sc.solver, kind)
        except UnsupportedOperator as exc:
            raise ConfigError(str(exc)) from None
    return task, seed, tk, sc


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    if not args.checkpoint.is_file():
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    try:
        model = load_checkpoint(args.checkpoint)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"--checkpoint: cannot read {args.checkpoint}: {exc}") from None
    if args.n is not None and args.n < 0:
        raise ConfigError("--n: must be >= 0")
    task, seed, tk, sc = _resolve_solve(args, cfg, model)
    start = time.perf_counter()
    meta = {
        "task": task,
        "seed": seed,
        "checkpoint": str(args.checkpoint),
        "solver": dataclasses.asdict(sc),
        "task_settings": tk,
        "config": cfg.raw,
    }
    args.out.mkdir(parents=True, exist_ok=True)
    if task == "generate":
        n = int(tk["n_generate"]) if args.n is None else args.n
        steps = args.steps
        poses = unconditional_sample(model, n, seed=seed, n_steps=steps,
                                     sampler="ddpm" if steps in (None, model.T) else "ddim")
        rows = [{"index": i, "bone_dev": bone_length_deviation(p, dt.SEGMENT_LENGTHS_MM)}
                for i, p in enumerate(poses)]
        traj = Trajectory(0.0, 0.0, 5000.0)
        K = CameraIntrinsics()
        recs = [dt.PoseRecord(f"gen{seed}-{i}", p + traj.as_array(), traj, K) for i, p in enumerate(poses)]
        dt.save_pose_file(recs, args.out / "poses.txt")
        meta["wall_clock_s"] = time.perf_counter() - start
        write_report(args.out, rows, meta)
        print(f"wrote {n} poses to {args.out / 'poses.txt'}")
        return EXIT_OK

    if task == "complete" and model.mean_pose is None:
        raise ConfigError("checkpoint has no mean pose; completion needs it for the init fill")
    recs = _records(cfg, "test", args.n)
    samples = dt.make_task_dataset(
        recs,
        task,
        noise_kind=tk["noise_kind"],
        intensity=float(tk["intensity"]),
        mask_group=tk["mask_group"],
        mean_pose=model.mean_pose,
        depth_factor=float(tk["depth_factor"]),
        init=tk["init"],
        seed=seed,
    )
    preds = solve(model, [s.problem for s in samples], sc, indices=[s.index for s in samples])
    rows = build_rows(task, samples, preds, metrics=cfg.raw["eval"]["metrics"])
    meta["wall_clock_s"] = time.perf_counter() - start
    rep = write_report(args.out, rows, meta)
    print(format_table(["metric", "value"], [[k, v] for k, v in sorted(rep.aggregates.items())]), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    for p in args.reports:
        if not p.exists():
            raise ConfigError(f"report not found: {p}")
    reports = [load_report(p) for p in args.reports]
    header, table = compare_reports(reports)
    text = format_table(header, table)
    print(text, end="")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "comparison.tsv", "w") as fh:
            fh.write("\t".join(header) + "\n")
            for row in table:
                fh.write("\t".join(c if isinstance(c, str) else repr(c) for c in row) + "\n")
        (args.out / "comparison.txt").write_text(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        d = cfg.raw["data"]
        cfg = RunConfig.from_dict({**cfg.raw, "data": {**d, "train_seed": args.seed,
                                                        "test_seed": args.seed + 1}})
    args.out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        recs = _records(cfg, split)
        dt.save_pose_file(recs, args.out / f"{split}.txt")
        print(f"{split}: {len(recs)} records -> {args.out / f'{split}.txt'}")
    return EXIT_OK


def cmd_format_spec(args=None) -> int:
    print(dt.format_spec())
    print(CHECKPOINT_FORMAT, end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "format-spec": cmd_format_spec,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.format_spec and args.command is None:
        return cmd_format_spec()
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, dt.PoseFileError, ReportError, OperatorMismatch, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"poseprior: error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError, ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        print(f"poseprior: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
