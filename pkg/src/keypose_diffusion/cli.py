"""Command-line interface: ``keypose-diffusion <command> ...``.

Exit codes: 0 success, 1 unexpected error, 2 invalid usage or config,
3 missing file, 4 version mismatch, 5 validation or format failure.
Errors are reported as one ``error[<code>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from .exceptions import (ConfigError, ContractError, KeyposeDiffusionError, DomainError, FormatError,
                         ValidationError, VersionMismatchError)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VERSION = 4
EXIT_INVALID = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _write_csv(rows: list[dict], out) -> None:
    if not rows:
        raise ContractError("nothing to write")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if out in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(out, "w", newline="") as fh:
            fh.write(buf.getvalue())


def _fmt(x) -> str:
    return repr(float(x))


def _require(path) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _config(args):
    from .config import load_config
    return load_config(_require(args.config) if args.config else None, args.set)


def _task(cfg):
    from .envs import OrderedStack, make_task
    if cfg["run.task"] == OrderedStack.name:
        return OrderedStack(cfg["run.k_objects"])
    return make_task(cfg["run.task"])


# -- commands --------------------------------------------------------------------
def cmd_generate(args) -> int:
    from .envs import generate
    from .formats import save_dataset
    cfg = _config(args)
    demos = generate(_task(cfg), cfg["run.seed"], cfg["run.n_demos"])
    out = args.out or cfg["run.dataset"]
    save_dataset(out, demos)
    print(f"wrote {len(demos)} demonstrations to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .estimator import DiffusionPolicy, RegressionPolicy
    from .formats import load_dataset
    cfg = _config(args)
    demos = load_dataset(_require(args.dataset or cfg["run.dataset"]))
    cls = RegressionPolicy if cfg["train.objective"] == "regression" else DiffusionPolicy
    est = cls(**cfg.estimator_params()).fit(demos)
    out_dir = args.out_dir or cfg["run.output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    est.save(os.path.join(out_dir, "checkpoint.dack"))
    _write_csv([{"step": s, "loss": _fmt(v)} for s, v in est.loss_curve_], os.path.join(out_dir, "loss.csv"))
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.to_text())
    print(f"wrote {out_dir}/checkpoint.dack and {out_dir}/loss.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .envs import evaluate_policy
    from .estimator import DiffusionPolicy
    cfg = _config(args)
    est = DiffusionPolicy.load(_require(args.checkpoint))
    task = _task(cfg)
    n = args.episodes or cfg["eval.n_episodes"]
    res = evaluate_policy(est, task, n, cfg["eval.seed"] if args.seed is None else args.seed)
    row = {"task": task.name, "n_episodes": n, "success_rate": _fmt(res.success_rate),
           "mean_final_error": _fmt(res.mean_final_error)}
    for mode in range(-1, task.n_modes()):
        row[f"mode_{mode}"] = res.mode_histogram.get(mode, 0)
    _write_csv([row], args.out)
    if args.episodes_out:
        _write_csv(res.rows(), args.episodes_out)
    return EXIT_OK


def cmd_sample(args) -> int:
    from .envs import observation
    from .estimator import DiffusionPolicy
    from .formats import load_dataset
    from .pointcloud import FeatureCloud
    cfg = _config(args)
    est = DiffusionPolicy.load(_require(args.checkpoint))
    task = _task(cfg)
    if args.dataset:
        from .envs import Observation, lift_frame
        from .training import history_window
        demos = load_dataset(_require(args.dataset))
        if not 0 <= args.demo < len(demos):
            raise DomainError(f"demo index {args.demo} outside [0, {len(demos)})")
        d = demos[args.demo]
        cloud: FeatureCloud = lift_frame(d.frame_at(0), d.scene)
        obs = Observation(cloud, d.task_id, history_window([d.raw.pos[0]], est.history_len), d.raw.action(0))
    else:
        episode = task.new_episode(np.random.default_rng(args.scene_seed))
        obs = observation(task, episode, est.history_len)
    traj = est.sample([obs] * args.n, np.random.default_rng(args.seed))
    rows = []
    for s in range(args.n):
        for i in range(len(traj)):
            row = {"sample": s, "step": i}
            row.update({k: _fmt(v) for k, v in zip(("x", "y", "z"), traj.pos[s, i])})
            row.update({f"r{j}": _fmt(v) for j, v in enumerate(traj.rot[s, i])})
            row["open"] = int(traj.open[s, i])
            rows.append(row)
    _write_csv(rows, args.out)
    return EXIT_OK


def cmd_keyposes(args) -> int:
    from .formats import load_dataset
    from .keypose import CALVIN_RULES, RLBENCH_RULES, extract_keyposes
    demos = load_dataset(_require(args.dataset))
    rules = CALVIN_RULES if args.rules == "calvin" else RLBENCH_RULES
    rows, counts = [], []
    for n, d in enumerate(demos):
        idx = extract_keyposes(d.raw, args.vel_eps, args.acc_eps, args.min_gap, rules)
        toggles = int(np.sum(d.raw.open[1:] != d.raw.open[:-1]))
        counts.append(len(idx))
        rows.append({"demo": n, "n_steps": len(d.raw), "n_keyposes": len(idx), "n_toggles": toggles,
                     "indices": " ".join(map(str, idx))})
    _write_csv(rows, args.out)
    if args.summary:
        c = np.array(counts)
        _write_csv([{"n_demos": len(c), "mean_keyposes": _fmt(c.mean()), "min_keyposes": int(c.min()),
                     "max_keyposes": int(c.max())}], args.summary)
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .diffusion import build_schedule
    s = build_schedule(args.kind, args.T, args.beta_min, args.beta_max)
    _write_csv([{"t": t, "beta": _fmt(s.beta_at(t)), "alpha": _fmt(s.alpha_at(t)),
                 "alpha_bar": _fmt(s.alpha_bar_at(t))} for t in range(1, s.T + 1)], args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    from .formats import DATASET_MAGIC, validate_dataset
    from .tensor import CHECKPOINT_MAGIC, load_checkpoint
    path = _require(args.path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == DATASET_MAGIC:
        problems = validate_dataset(path)
    elif head == CHECKPOINT_MAGIC:
        try:
            load_checkpoint(path)
            problems = []
        except FormatError as exc:
            if isinstance(exc, VersionMismatchError):
                raise
            problems = [str(exc)]
    else:
        from .config import load_config
        try:
            load_config(path)
            problems = []
        except ConfigError as exc:
            problems = [str(exc)]
    if problems:
        raise ValidationError(f"{path}: {problems[0]}" + (f" (+{len(problems) - 1} more)" if len(problems) > 1 else ""))
    print(f"PASS {path}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keypose-diffusion", description="Train and evaluate 3D diffusion policies on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run config file (INI with meta.config_version)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        return sp

    g = with_config(sub.add_parser("generate", help="generate a demonstration dataset"))
    g.add_argument("--out", help="dataset path (default: run.dataset)")
    g.set_defaults(fn=cmd_generate)

    t = with_config(sub.add_parser("train", help="train a policy and write checkpoint + loss CSV"))
    t.add_argument("--dataset")
    t.add_argument("--out-dir")
    t.set_defaults(fn=cmd_train)

    e = with_config(sub.add_parser("eval", help="roll out a checkpoint and write metrics CSV"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--episodes-out")
    e.set_defaults(fn=cmd_eval)

    s = with_config(sub.add_parser("sample", help="sample trajectories for one scene"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", help="take the scene from this dataset")
    s.add_argument("--demo", type=int, default=0)
    s.add_argument("--scene-seed", type=int, default=0, help="otherwise draw a fresh scene with this seed")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sample)

    k = sub.add_parser("keyposes", help="extract keyposes from a dataset")
    k.add_argument("dataset")
    k.add_argument("--vel-eps", type=float, default=1e-2)
    k.add_argument("--acc-eps", type=float)
    k.add_argument("--min-gap", type=int, default=2)
    k.add_argument("--rules", choices=("rlbench", "calvin"), default="rlbench")
    k.add_argument("--out")
    k.add_argument("--summary")
    k.set_defaults(fn=cmd_keyposes)

    c = sub.add_parser("schedule", help="tabulate a noise schedule")
    c.add_argument("--kind", default="scaled_linear")
    c.add_argument("--T", type=int, default=100)
    c.add_argument("--beta-min", type=float, default=1e-4)
    c.add_argument("--beta-max", type=float, default=0.02)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_schedule)

    v = sub.add_parser("validate", help="check a dataset, checkpoint or config file")
    v.add_argument("path")
    v.set_defaults(fn=cmd_validate)
    return p


def _fail(code: int, message: str) -> int:
    print(f"error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, f"missing file: {exc.filename or exc}")
    except VersionMismatchError as exc:
        return _fail(EXIT_VERSION, exc)
    except (ValidationError, FormatError) as exc:
        return _fail(EXIT_INVALID, exc)
    except (ConfigError, DomainError, ContractError) as exc:
        return _fail(EXIT_USAGE, exc)
    except KeyposeDiffusionError as exc:
        return _fail(EXIT_ERROR, exc)


if __name__ == "__main__":
    sys.exit(main())
