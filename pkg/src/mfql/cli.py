"""Command line front end.

    mfql <train-toy|train-rl|eval|variants-report> --config <path> [--set k=v]...

Configuration files are flat `key=value` lines; `#` starts a comment line.
Unknown keys fail before any computation.  The MFQL_OUT environment
variable overrides the output directory.  Exit codes: 0 success, 2
usage/config problems, 3 numeric failure.
"""

import argparse
import os
import sys
import time

import numpy as np

from .data_env import PointReachEnv, load_dataset
from .errors import ConfigError, MfqlError, NumericError
from .meanflow import VARIANTS, LossWeighting, TimeSampler
from .metrics import curve_summary
from .nets import load_checkpoint
from .qlearning import (
    TrainConfig,
    make_rl_eval_fn,
    rollout_stats,
    train,
    train_toy,
    write_metrics,
)

_REQUIRED = object()


def _int_tuple(text):
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad size list {text!r}") from exc


SCHEMAS = {
    "train-toy": {
        "variant": (str, _REQUIRED),
        "dist": (str, "checkerboard"),
        "steps": (int, 30000),
        "batch": (int, 256),
        "lr": (float, 1e-3),
        "hidden": (_int_tuple, (256, 256, 256)),
        "time_sampler": (str, "continuous"),
        "discrete_n": (int, 50),
        "p": (float, 0.2),
        "c": (float, 1e-4),
        "grad_clip": (float, 1.0),
        "eval_samples": (int, 512),
        "log_interval": (int, 100),
        "seed": (int, 0),
        "out": (str, "runs/train-toy"),
    },
    "train-rl": {
        "dataset": (str, _REQUIRED),
        "variant": (str, "residual_at"),
        "alpha0": (float, 10.0),
        "k": (int, 5),
        "gamma": (float, 0.99),
        "tau": (float, 0.005),
        "batch": (int, 256),
        "actor_lr": (float, 1e-4),
        "critic_lr": (float, 1e-4),
        "grad_clip": (float, 1.0),
        "time_sampler": (str, "continuous"),
        "discrete_n": (int, 50),
        "p": (float, 0.2),
        "c": (float, 1e-4),
        "steps": (int, 100000),
        "eval_interval": (int, 5000),
        "eval_episodes": (int, 50),
        "log_interval": (int, 100),
        "actor_hidden": (_int_tuple, (256, 256, 256)),
        "critic_hidden": (_int_tuple, (512, 512, 512, 512)),
        "seed": (int, 0),
        "out": (str, "runs/train-rl"),
    },
    "eval": {
        "checkpoint": (str, _REQUIRED),
        "episodes": (int, 50),
        "k": (int, 5),
        "seed": (int, 0),
    },
    "variants-report": {
        "dist": (str, "checkerboard"),
        "steps": (int, 30000),
        "batch": (int, 256),
        "lr": (float, 1e-3),
        "hidden": (_int_tuple, (256, 256, 256)),
        "time_sampler": (str, "continuous"),
        "discrete_n": (int, 50),
        "p": (float, 0.2),
        "c": (float, 1e-4),
        "grad_clip": (float, 1.0),
        "eval_samples": (int, 512),
        "log_interval": (int, 100),
        "seed": (int, 0),
        "out": (str, "runs/variants-report"),
    },
}


def parse_config(path):
    """Flat key=value file -> dict of raw strings."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    raw = {}
    for ln, text in enumerate(lines, start=1):
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {text!r}")
        key, value = text.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(command, path, overrides=()):
    schema = SCHEMAS[command]
    raw = parse_config(path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (coerce, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = coerce(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            cfg[key] = default
    return cfg


def _out_dir(cfg):
    return os.environ.get("MFQL_OUT") or cfg["out"]


def _sampler(cfg):
    return TimeSampler(cfg["time_sampler"], cfg["discrete_n"])


def cmd_train_toy(cfg):
    out = _out_dir(cfg)
    _, _, w2 = train_toy(
        cfg["variant"], cfg["dist"], cfg["steps"], batch=cfg["batch"],
        lr=cfg["lr"], seed=cfg["seed"], sampler=_sampler(cfg),
        weighting=LossWeighting(cfg["p"], cfg["c"]), hidden=cfg["hidden"],
        grad_clip=cfg["grad_clip"], eval_samples=cfg["eval_samples"],
        log_interval=cfg["log_interval"], out_dir=out)
    print(f"train-toy {cfg['variant']} done: final_w2={w2:.4f} ({out})")
    return 0


def cmd_train_rl(cfg):
    dataset = load_dataset(cfg["dataset"])
    env = PointReachEnv()
    config = TrainConfig(
        variant=cfg["variant"], alpha0=cfg["alpha0"], K=cfg["k"],
        gamma=cfg["gamma"], tau=cfg["tau"], batch=cfg["batch"],
        actor_lr=cfg["actor_lr"], critic_lr=cfg["critic_lr"],
        grad_clip=cfg["grad_clip"], sampler=_sampler(cfg),
        weighting=LossWeighting(cfg["p"], cfg["c"]),
        total_steps=cfg["steps"], eval_interval=cfg["eval_interval"],
        eval_episodes=cfg["eval_episodes"], log_interval=cfg["log_interval"],
        seed=cfg["seed"], actor_hidden=cfg["actor_hidden"],
        critic_hidden=cfg["critic_hidden"])
    out = _out_dir(cfg)
    eval_fn = make_rl_eval_fn(env, cfg["eval_episodes"], cfg["k"],
                              cfg["seed"])
    _, rows = train(config, dataset, out_dir=out, eval_fn=eval_fn)
    evals = [r["eval_success"] for r in rows if r.get("eval_success")
             not in (None, "")]
    final = evals[-1] if evals else float("nan")
    print(f"train-rl done: final eval_success={final} ({out})")
    return 0


def cmd_eval(cfg):
    if cfg["episodes"] < 1:
        raise ConfigError("nothing to evaluate: episodes must be >= 1")
    policy, critic, _, _ = load_checkpoint(cfg["checkpoint"])
    if critic is None:
        raise ConfigError(f"{cfg['checkpoint']}: checkpoint has no critic; "
                          "eval needs a value-guided policy")
    env = PointReachEnv()
    rng = np.random.default_rng([cfg["seed"], 11])
    success, bound = rollout_stats(policy, critic, env, cfg["episodes"],
                                   cfg["k"], rng)
    print(f"success_rate={success} bound_loss={bound}")
    return 0


def cmd_variants_report(cfg):
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    lines = ["variant,w2,wall_seconds"]
    for name in VARIANTS:
        t0 = time.perf_counter()
        _, _, w2 = train_toy(
            name, cfg["dist"], cfg["steps"], batch=cfg["batch"],
            lr=cfg["lr"], seed=cfg["seed"], sampler=_sampler(cfg),
            weighting=LossWeighting(cfg["p"], cfg["c"]), hidden=cfg["hidden"],
            grad_clip=cfg["grad_clip"], eval_samples=cfg["eval_samples"],
            log_interval=cfg["log_interval"],
            out_dir=os.path.join(out, name))
        wall = time.perf_counter() - t0
        lines.append(f"{name},{w2!r},{wall!r}")
        print(f"variants-report: {name} w2={w2:.4f} ({wall:.1f}s)")
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return 0


COMMANDS = {
    "train-toy": cmd_train_toy,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "variants-report": cmd_variants_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mfql",
        description="One-step MeanFlow policies with offline Q-learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE")
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (MfqlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
