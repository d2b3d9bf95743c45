"""Command line entry point: ``elden collect | train-dynamics | eval-deps | train-rl | ablate``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort. Outputs go to
``--out``, else ``$ELDEN_OUT/<command>/<env>_<method>``, else ``./runs/...``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from ..depgraph import metrics_row, write_report
from ..dynamics import DynamicsModel
from ..envs import load_dataset, save_dataset
from . import config as C
from .rl import RunAborted, run_seeds, train_rl
from .runs import collect, detection_run, eval_deps, train_dynamics

log = logging.getLogger("elden")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
OUT_ENV = "ELDEN_OUT"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--env", help="thawing, carwash, minecraft or synthetic")
    common.add_argument("--method", help="RL: elden, disagreement, curiosity, cai, vanilla; detection: elden, pcmi, attn")
    common.add_argument("--seed", type=int, action="append", help="master seed (repeat for several)")
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out", help="output directory")
    common.add_argument("--steps", type=int, help="RL env-step budget")
    common.add_argument("--grid", type=int, dest="grid_size", help="grid size of discrete environments")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="elden", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("collect", parents=[common], help="scripted dataset collection")
    c.add_argument("-n", type=int, help="number of transitions")
    t = sub.add_parser("train-dynamics", parents=[common], help="train a detector's dynamics model")
    t.add_argument("--data", required=True, help="dataset file from 'collect'")
    e = sub.add_parser("eval-deps", parents=[common], help="score dependency detection on fresh episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    sub.add_parser("train-rl", parents=[common], help="policy learning with an intrinsic reward")
    a = sub.add_parser("ablate", parents=[common], help="cartesian grid of runs over config keys")
    a.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="one grid axis (repeat for a product)")
    a.add_argument("--kind", choices=("rl", "deps"), default="rl",
                   help="run train-rl, or collect+train+eval detection, per grid point")
    return p


def _peek(path: str | None, key: str) -> str | None:
    if not path:
        return None
    try:
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if line.startswith(key) and "=" in line and line.split("=", 1)[0].strip() == key:
                return line.split("=", 1)[1].strip()
    except OSError as exc:
        raise C.ConfigError(f"cannot read config {path}: {exc}") from None
    return None


def build_config(args, default_method: str = "elden") -> C.RunConfig:
    """Defaults for (env, method), then the config file, then ``--set``, then explicit flags."""
    env = args.env or _peek(args.config, "env") or "thawing"
    method = args.method or _peek(args.config, "method") or default_method
    if env not in C.ENV_NAMES:
        raise C.ConfigError(f"env: unknown environment {env!r}; choose from {C.ENV_NAMES}")
    if method not in C.RL_METHODS + C.DETECTION_METHODS:
        raise C.ConfigError(f"method: unknown method {method!r}")
    cfg = C.env_defaults(env, method)
    if args.config:
        cfg = C.load(args.config, cfg)
    cfg = C.parse_lines(args.set, cfg)
    cfg.env, cfg.method = env, method
    if args.seed:
        cfg.seeds = tuple(args.seed)
    if args.steps is not None:
        cfg.steps = args.steps
    if args.grid_size is not None:
        cfg.env_cfg.grid_size = args.grid_size
    if args.out:
        cfg.out = args.out
    return cfg.validate()


def out_dir(cfg: C.RunConfig, command: str) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV) or "runs")
    return root / command / f"{cfg.env}_{cfg.method}"


def _require(method: str, allowed, command: str) -> None:
    if method not in allowed:
        raise C.ConfigError(f"method: {command} needs one of {allowed}, got {method!r}")


def cmd_collect(args) -> int:
    cfg = build_config(args)
    if args.n is not None:
        cfg.collect.n = args.n
    if cfg.collect.n < 1:
        raise C.ConfigError("collect.n: must be >= 1")
    out = out_dir(cfg, "collect")
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        path = out / f"{cfg.env}_seed{seed}.data"
        save_dataset(path, collect(cfg, seed))
        print(path)
    return EXIT_OK


def cmd_train_dynamics(args) -> int:
    cfg = build_config(args)
    _require(cfg.method, C.DETECTION_METHODS, "train-dynamics")
    try:
        data = load_dataset(args.data)
    except OSError as exc:
        raise C.ConfigError(f"cannot read dataset {args.data}: {exc}") from None
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from None
    out = out_dir(cfg, "train-dynamics")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.dump(cfg))
    for seed in cfg.seeds:
        model, _ = train_dynamics(cfg, data, seed, out / f"dynamics_{cfg.method}_seed{seed}.csv")
        ckpt = out / f"model_{cfg.method}_seed{seed}.ckpt"
        env_keys = {k: v for k, v in C.flatten(cfg).items() if k.startswith("env.")}
        model.save(ckpt, extra={"method": cfg.method, "env": cfg.env, "master_seed": seed, "env_cfg": env_keys})
        print(ckpt)
    return EXIT_OK


def cmd_eval_deps(args) -> int:
    try:
        model = DynamicsModel.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise C.ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    meta = model.extra
    if not args.seed and "master_seed" in meta:
        args.seed = [int(meta["master_seed"])]
    if args.env is None and "env" in meta:
        args.env = meta["env"]
        # the checkpoint remembers its environment settings; --set and flags still override
        args.set = [f"{k}={v}" for k, v in meta.get("env_cfg", {}).items()] + list(args.set)
    cfg = build_config(args, default_method=meta.get("method", "elden"))
    _require(cfg.method, C.DETECTION_METHODS, "eval-deps")
    if args.episodes is not None:
        cfg.eval.episodes = args.episodes
    out = out_dir(cfg, "eval-deps")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        m = eval_deps(cfg, model, cfg.method, seed)
        rows.append(metrics_row(cfg.method, cfg.env, seed, m))
        print(f"{cfg.method} {cfg.env} seed={seed} roc_auc={m.roc_auc:.4f} best_f1={m.best_f1:.4f} "
              f"positive_rate={m.positive_rate:.4f} forward_passes={m.forward_passes}")
    write_report(rows, out / "detection.csv", out / "detection.json")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    cfg = build_config(args)
    _require(cfg.method, C.RL_METHODS, "train-rl")
    agg = run_seeds(cfg, out_dir(cfg, "train-rl"))
    print(json.dumps(agg, sort_keys=True))
    return EXIT_OK


def parse_axes(specs: list[str], base: C.RunConfig) -> list[tuple[str, list[str]]]:
    """Validate every axis against ``base`` before anything runs."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise C.ConfigError(f"--axis expects KEY=V1,V2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        key = key.strip()
        # tuple-valued keys take ';' between grid values since ',' separates elements
        sep = ";" if ";" in values else ","
        vals = [v.strip() for v in values.split(sep) if v.strip()]
        if not vals:
            raise C.ConfigError(f"--axis {key}: no values")
        for v in vals:
            C.parse_lines([f"{key}={v}"], base)
        axes.append((key, vals))
    return axes


def grid_points(axes):
    keys = [k for k, _ in axes]
    for combo in itertools.product(*(v for _, v in axes)):
        yield dict(zip(keys, combo))


def cmd_ablate(args) -> int:
    base = build_config(args)
    if args.kind == "rl":
        _require(base.method, C.RL_METHODS, "ablate --kind rl")
    else:
        _require(base.method, C.DETECTION_METHODS, "ablate --kind deps")
    axes = parse_axes(args.axis, base)
    root = out_dir(base, "ablate")
    root.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    metric_fields = ("final_stage", "final_success_rate") if args.kind == "rl" else (
        "roc_auc", "best_f1", "positive_rate", "forward_passes")
    table = root / "ablation.csv"
    datasets = {}
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", *keys, "seed", *metric_fields])
        for k, point in enumerate(grid_points(axes)):
            cfg = C.parse_lines([f"{key}={v}" for key, v in point.items()], base)
            run_dir = root / f"point{k:03d}"
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.txt").write_text(C.dump(cfg))
            for seed in cfg.seeds:
                if args.kind == "rl":
                    res = train_rl(cfg, seed, run_dir)
                else:
                    # points that share the data settings share the dataset
                    dkey = (seed, C.dump(_data_part(cfg)))
                    if dkey not in datasets:
                        datasets[dkey] = collect(cfg, seed)
                    res = detection_run(cfg, seed, run_dir, datasets[dkey])
                w.writerow([k, *point.values(), seed, *(repr(float(res[f])) for f in metric_fields)])
                fh.flush()
    print(table)
    return EXIT_OK


def _data_part(cfg: C.RunConfig) -> C.RunConfig:
    # only the env and collection settings decide the dataset
    d = C.RunConfig(env=cfg.env)
    d.env_cfg, d.collect = cfg.env_cfg, cfg.collect
    return d


COMMANDS = {
    "collect": cmd_collect,
    "train-dynamics": cmd_train_dynamics,
    "eval-deps": cmd_eval_deps,
    "train-rl": cmd_train_rl,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
