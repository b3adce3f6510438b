"""Command-line front end.

Subcommands:
    synth     write a seeded synthetic panel (panel.csv, target.csv, manifest.json)
    mine      train the masked-PPO miner (pool.json, agent.ckpt, *.jsonl logs)
    eval      IC / Rank IC of a saved pool on a date split (eval.json)
    backtest  top-k/drop-n simulation of a saved pool (backtest.csv, summary)
    report    flatten run logs into plot-ready CSV series

All behavior is driven by a single JSON config; the handful of flags
(--seed, --out, --pool, --split, ...) override the matching config fields.
The effective merged config is copied into the output directory as
config_used.json, so every run is reproducible from its output directory
alone. A command exits 0 only if every artifact it is responsible for was
written; on failure its partial outputs are deleted.

Set ALPHAMINE_LOG=DEBUG|INFO|WARNING|ERROR to control log verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import dsl, synth
from .agent import PpoConfig, load_checkpoint, save_checkpoint, train
from .backtest import BacktestConfig, report_to_csv_rows, run_topk_dropn, summarize
from .env import MiningEnv
from .errors import AlphamineError, DataError
from .evaluator import evaluate
from .metrics import mean_ic, normalize_matrix
from .panel import PanelData, TargetSpec, compute_target, load_csv, write_csv
from .pool import AlphaPool, GdConfig
from .synth import SynthSpec, load_target_csv, synth_generate, write_target_csv

LOGGER = logging.getLogger("alphamine")
LOG_ENV_VAR = "ALPHAMINE_LOG"

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {
        "num_stocks": 50,
        "num_days": 750,
        "noise_to_signal": 1.0,
        "burn_in": 120,
        "start_date": "2015-01-05",
        "planted": [
            {"expression": text, "weight": weight} for text, weight in synth.DEFAULT_PLANTED
        ],
    },
    "data": {"panel": None, "target": None, "horizon": 20},
    "splits": {"train": [0, 499], "valid": [500, 619], "test": [620, 749]},
    "pool": {
        "capacity": 10,
        # Steeper steps than the GdConfig defaults: the quadratic's gradient
        # carries a 1/num_stocks factor, so cross-sections of ~50 names need
        # a larger rate to converge within the step budget.
        "gd": {"steps": 1000, "learning_rate": 1.0, "stop_tolerance": 1e-6},
    },
    "mining": {"max_tokens": 20, "min_valid_fraction": 0.8},
    "ppo": {
        "clip_epsilon": 0.2,
        "discount": 1.0,
        "gae_lambda": 0.95,
        "epochs_per_update": 4,
        "minibatch_size": 64,
        "value_coef": 0.5,
        "entropy_coef": 0.01,
        "learning_rate": 3e-4,
        "rollout_episodes": 64,
        "max_env_steps": 20000,
        "dropout": 0.1,
    },
    "backtest": {"top_k": 50, "drop_n": 5, "cost_bps": 0.0, "initial_worth": 1.0},
    "eval": {"split": "test"},
    "pool_path": None,
}


class OutputDir:
    """Tracks files a command writes so a failure can remove partial output."""

    def __init__(self, root: str):
        self.root = root
        self.created: list[str] = []
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        full = os.path.join(self.root, name)
        self.created.append(full)
        return full

    def write_json(self, name: str, payload) -> str:
        full = self.path(name)
        with open(full, "w") as fh:
            json.dump(_json_safe(payload), fh, sort_keys=True, indent=2)
            fh.write("\n")
        return full

    def cleanup(self) -> None:
        for full in self.created:
            if os.path.exists(full):
                os.remove(full)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    return obj


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise DataError(f"{path}: config must be a JSON object")
        config = _deep_merge(config, loaded)
    # Flags outrank config fields.
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "pool", None) is not None:
        config["pool_path"] = args.pool
    if getattr(args, "split", None) is not None:
        config["eval"]["split"] = args.split
    for flag, section, key in (
        ("top_k", "backtest", "top_k"),
        ("drop_n", "backtest", "drop_n"),
        ("cost_bps", "backtest", "cost_bps"),
        ("max_env_steps", "ppo", "max_env_steps"),
        ("capacity", "pool", "capacity"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config[section][key] = value
    return config


def _parse_splits(config: dict, num_days: int) -> dict[str, tuple[int, int]]:
    splits = {}
    for name in ("train", "valid", "test"):
        try:
            lo, hi = config["splits"][name]
        except (KeyError, TypeError, ValueError):
            raise DataError(f"splits.{name} must be a [first, last] day-index pair")
        lo, hi = int(lo), int(hi)
        if not (0 <= lo <= hi < num_days):
            raise DataError(
                f"splits.{name} [{lo}, {hi}] out of range for {num_days} panel days"
            )
        splits[name] = (lo, hi)
    if not (splits["train"][1] < splits["valid"][0] and splits["valid"][1] < splits["test"][0]):
        raise DataError("splits must be disjoint and ordered train < valid < test")
    return splits


def _load_panel_and_target(config: dict) -> tuple[PanelData, np.ndarray]:
    panel_path = config["data"]["panel"]
    if not panel_path:
        raise DataError("config data.panel is required for this command")
    panel = load_csv(panel_path)
    target_path = config["data"]["target"]
    if target_path:
        target = load_target_csv(target_path, panel)
    else:
        target = compute_target(panel, TargetSpec(horizon=int(config["data"]["horizon"])))
    return panel, target


def _parse_planted(config: dict) -> list[tuple[dsl.Expression, float]]:
    planted = []
    for item in config["synth"]["planted"]:
        planted.append((dsl.parse_infix(item["expression"]), float(item["weight"])))
    return planted


def _load_pool(pool_path: str, panel: PanelData, day_range: tuple[int, int],
               target_rows: np.ndarray, gd_config: GdConfig, seed: int) -> AlphaPool:
    """Rebuild a saved pool on a split, failing with every bad expression named."""
    with open(pool_path) as fh:
        text = fh.read()
    payload = json.loads(text)
    offenders = []
    for item in payload.get("alphas", []):
        source = item.get("expression", "<missing>")
        try:
            expr = dsl.parse_infix(source)
            values = evaluate(expr, panel, day_range).values
            if not np.isfinite(values).any():
                offenders.append(f"{source}: no finite value on the requested days")
        except (AlphamineError, ValueError) as exc:
            offenders.append(f"{source}: {exc}")
    if offenders:
        raise DataError(
            f"{pool_path}: {len(offenders)} alphas not evaluable on this data: "
            + "; ".join(offenders)
        )
    return AlphaPool.from_json(text, panel, day_range, target=target_rows,
                               gd_config=gd_config, seed=seed)


def _gd_config(config: dict) -> GdConfig:
    gd = config["pool"]["gd"]
    return GdConfig(steps=int(gd["steps"]), learning_rate=float(gd["learning_rate"]),
                    stop_tolerance=float(gd["stop_tolerance"]))


def _target_rows(target: np.ndarray, day_range: tuple[int, int]) -> np.ndarray:
    lo, hi = day_range
    return normalize_matrix(target[lo : hi + 1])


# -- commands -----------------------------------------------------------------


def cmd_synth(args, config: dict, out: OutputDir) -> None:
    planted = _parse_planted(config)
    section = config["synth"]
    spec = SynthSpec(
        seed=int(config["seed"]),
        num_stocks=int(section["num_stocks"]),
        num_days=int(section["num_days"]),
        planted=planted,
        noise_to_signal=float(section["noise_to_signal"]),
        burn_in=int(section["burn_in"]),
        start_date=section["start_date"],
    )
    out.write_json("config_used.json", config)
    panel = synth_generate(spec)
    write_csv(panel, out.path("panel.csv"))
    write_target_csv(panel, out.path("target.csv"))
    out.write_json("manifest.json", {
        "seed": spec.seed,
        "num_stocks": spec.num_stocks,
        "num_days": spec.num_days,
        "noise_to_signal": spec.noise_to_signal,
        "burn_in": spec.burn_in,
        "start_date": spec.start_date,
        "planted": [
            {"expression": expr.to_infix(), "weight": weight} for expr, weight in planted
        ],
    })
    print(f"wrote {panel.num_days}-day x {panel.num_stocks}-stock panel to {out.root}")


def cmd_mine(args, config: dict, out: OutputDir) -> None:
    panel, target = _load_panel_and_target(config)
    splits = _parse_splits(config, panel.num_days)
    train_range = splits["train"]
    seed = int(config["seed"])
    gd_config = _gd_config(config)
    target_rows = _target_rows(target, train_range)

    ppo_config = PpoConfig(seed=seed, **{k: v for k, v in config["ppo"].items()})
    mining = config["mining"]

    net = optimizer = None
    prior = {"env_steps": 0, "episodes": 0, "updates": 0}
    if getattr(args, "resume", None):
        net, optimizer, prior, _ = load_checkpoint(os.path.join(args.resume, "agent.ckpt"))
        for group in optimizer.param_groups:
            group["lr"] = ppo_config.learning_rate
        with open(os.path.join(args.resume, "pool.json")) as fh:
            pool = AlphaPool.from_json(fh.read(), panel, train_range, target=target_rows,
                                       gd_config=gd_config, seed=seed)
        LOGGER.info("resuming from %s at %d env steps", args.resume, prior["env_steps"])
    else:
        pool = AlphaPool(target=target_rows, capacity=int(config["pool"]["capacity"]),
                         gd_config=gd_config, seed=seed)

    env = MiningEnv(pool, panel, train_range,
                    max_tokens=int(mining["max_tokens"]),
                    min_valid_fraction=float(mining["min_valid_fraction"]))

    out.write_json("config_used.json", config)
    episodes_path = out.path("episodes.jsonl")
    training_log_path = out.path("training_log.jsonl")
    with open(episodes_path, "w") as episodes_fh, open(training_log_path, "w") as log_fh:
        def on_episode(record: dict) -> None:
            episodes_fh.write(json.dumps(_json_safe(record), sort_keys=True) + "\n")

        def on_update(record: dict) -> None:
            log_fh.write(json.dumps(_json_safe(record), sort_keys=True) + "\n")
            LOGGER.info("update %d: %d steps, objective %.4f",
                        record["update"], record["env_steps"], record["pool_objective"])

        result, net, optimizer = train(
            ppo_config, env, net=net, optimizer=optimizer,
            episode_callback=on_episode, update_callback=on_update,
            prior_env_steps=prior["env_steps"], prior_episodes=prior["episodes"],
            prior_updates=prior["updates"],
        )

    with open(out.path("pool.json"), "w") as fh:
        fh.write(pool.to_json())
        fh.write("\n")
    counters = {"env_steps": result.env_steps, "episodes": result.episodes,
                "updates": result.updates}
    save_checkpoint(out.path("agent.ckpt"), net, optimizer, counters, ppo_config)
    out.write_json("mine_summary.json", {
        **counters,
        "pool_objective": result.pool_objective,
        "pool_size": pool.size,
        "expressions": [expr.to_infix() for expr in pool.expressions],
    })
    print(f"mined pool of {pool.size} alphas, train objective "
          f"{result.pool_objective:.4f}, {result.env_steps} env steps")


def cmd_eval(args, config: dict, out: OutputDir) -> None:
    pool_path = config["pool_path"]
    if not pool_path:
        raise DataError("pass --pool or set pool_path in the config")
    panel, target = _load_panel_and_target(config)
    splits = _parse_splits(config, panel.num_days)
    split_name = config["eval"]["split"]
    if split_name not in splits:
        raise DataError(f"unknown split {split_name!r}")
    day_range = splits[split_name]
    target_rows = _target_rows(target, day_range)
    pool = _load_pool(pool_path, panel, day_range, target_rows,
                      _gd_config(config), int(config["seed"]))
    combined = pool.combined_values()
    record = {
        "split": split_name,
        "first_day": panel.dates[day_range[0]],
        "last_day": panel.dates[day_range[1]],
        "num_alphas": pool.size,
        "ic": mean_ic(combined, target_rows),
        "rank_ic": mean_ic(combined, target_rows, rank=True),
    }
    out.write_json("config_used.json", config)
    out.write_json("eval.json", record)
    print(f"{split_name}: IC {record['ic']:.4f}  RankIC {record['rank_ic']:.4f}  "
          f"({pool.size} alphas)")


def cmd_backtest(args, config: dict, out: OutputDir) -> None:
    pool_path = config["pool_path"]
    if not pool_path:
        raise DataError("pass --pool or set pool_path in the config")
    panel, target = _load_panel_and_target(config)
    splits = _parse_splits(config, panel.num_days)
    split_name = config["eval"]["split"]
    if split_name not in splits:
        raise DataError(f"unknown split {split_name!r}")
    day_range = splits[split_name]
    pool = _load_pool(pool_path, panel, day_range, _target_rows(target, day_range),
                      _gd_config(config), int(config["seed"]))
    signal = pool.combined_values()
    section = config["backtest"]
    bt_config = BacktestConfig(top_k=int(section["top_k"]), drop_n=int(section["drop_n"]),
                               cost_bps=float(section["cost_bps"]),
                               initial_worth=float(section["initial_worth"]))
    report = run_topk_dropn(panel, signal, day_range, bt_config)

    out.write_json("config_used.json", config)
    with open(out.path("backtest.csv"), "w") as fh:
        fh.write("date,net_worth,turnover\n")
        for date, worth, turnover in report_to_csv_rows(report):
            fh.write(f"{date},{worth!r},{turnover!r}\n")
    summary = summarize(report)
    summary["split"] = split_name
    out.write_json("backtest_summary.json", summary)
    print(f"{split_name}: final worth {report.final_worth:.4f} over {len(report.dates)} days, "
          f"max drawdown {summary['max_drawdown']:.4f}")


def cmd_report(args, config: dict, out: OutputDir) -> None:
    wrote_any = False
    if args.training_log:
        with open(args.training_log) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        with open(out.path("report_objective.csv"), "w") as fh:
            fh.write("env_steps,update,pool_objective,mean_reward\n")
            for rec in records:
                fh.write(f"{rec['env_steps']},{rec['update']},"
                         f"{rec['pool_objective']!r},{rec['mean_reward']!r}\n")
        wrote_any = True
    if args.backtest_csv:
        with open(args.backtest_csv) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "date,net_worth,turnover":
            raise DataError(f"{args.backtest_csv}: not a backtest series file")
        with open(out.path("report_net_worth.csv"), "w") as fh:
            fh.write("date,net_worth\n")
            for line in lines[1:]:
                date, worth, _ = line.split(",")
                fh.write(f"{date},{worth}\n")
        wrote_any = True
    if not wrote_any:
        raise DataError("pass --training-log and/or --backtest-csv")
    print(f"wrote report series to {out.root}")


# -- wiring -------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alphamine",
        description="Mine, evaluate, and backtest formulaic alphas. Flags override "
                    "the JSON config; the merged config is copied to the output dir.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override config seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic panel with a planted target")
    common(p_synth)
    p_synth.set_defaults(handler=cmd_synth)

    p_mine = sub.add_parser("mine", help="train the miner and save pool + agent")
    common(p_mine)
    p_mine.add_argument("--resume", help="directory of a previous mine run to continue")
    p_mine.add_argument("--max-env-steps", dest="max_env_steps", type=int)
    p_mine.add_argument("--capacity", type=int)
    p_mine.set_defaults(handler=cmd_mine)

    p_eval = sub.add_parser("eval", help="IC / Rank IC of a saved pool on a split")
    common(p_eval)
    p_eval.add_argument("--pool", help="pool.json path (overrides config pool_path)")
    p_eval.add_argument("--split", choices=["train", "valid", "test"])
    p_eval.set_defaults(handler=cmd_eval)

    p_bt = sub.add_parser("backtest", help="top-k/drop-n simulation of a saved pool")
    common(p_bt)
    p_bt.add_argument("--pool", help="pool.json path (overrides config pool_path)")
    p_bt.add_argument("--split", choices=["train", "valid", "test"])
    p_bt.add_argument("--top-k", dest="top_k", type=int)
    p_bt.add_argument("--drop-n", dest="drop_n", type=int)
    p_bt.add_argument("--cost-bps", dest="cost_bps", type=float)
    p_bt.set_defaults(handler=cmd_backtest)

    p_rep = sub.add_parser("report", help="flatten run logs into CSV series")
    common(p_rep)
    p_rep.add_argument("--training-log", dest="training_log", help="training_log.jsonl path")
    p_rep.add_argument("--backtest-csv", dest="backtest_csv", help="backtest.csv path")
    p_rep.set_defaults(handler=cmd_report)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get(LOG_ENV_VAR, "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_logging()
    try:
        config = _load_config(args)
        out = OutputDir(args.out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        args.handler(args, config, out)
    except Exception as exc:
        LOGGER.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        out.cleanup()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
