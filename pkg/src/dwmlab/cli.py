"""``dwmlab`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 missing artifact,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agents import load_policy, train_offline_agent
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetFormatError, load_dataset, make_dataset, save_dataset
from .dwm import DiffusionWorldModel, train_dwm
from .evalharness import evaluate_policy, horizon_sweep, read_table, rtg_deciles, rtg_sweep, wm_prediction_error, write_table
from .onestep import OneStepModel, train_onestep
from .substrate import CheckpointError

log = logging.getLogger("dwmlab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("gen-data", "train-wm", "eval-wm", "train-agent", "eval-agent", "sweep-horizon", "sweep-rtg", "report")


class MissingArtifact(FileNotFoundError):
    pass


def _path(cfg_value, out: Path, default: str) -> Path:
    return Path(cfg_value) if cfg_value else out / default


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _dataset(cfg: RunConfig, out: Path):
    return load_dataset(_require(_path(cfg.paths.dataset, out, "dataset.dwmt"), "dataset"))


def _dwm(cfg, out):
    return DiffusionWorldModel.load(_require(_path(cfg.paths.dwm, out, "dwm.ckpt"), "diffusion world model"))


def _onestep(cfg, out):
    return OneStepModel.load(_require(_path(cfg.paths.onestep, out, "onestep.ckpt"), "one-step model"))


def _world_model(cfg, out, source):
    if source == "dwm":
        return _dwm(cfg, out)
    if source == "onestep":
        return _onestep(cfg, out)
    return None


def cmd_gen_data(cfg: RunConfig, out: Path):
    d = cfg.data
    ds = make_dataset(d.env, d.tier, episodes=d.episodes, seed=d.seed, gamma=d.gamma, rtg_mode=d.rtg_mode)
    path = _path(cfg.paths.dataset, out, "dataset.dwmt")
    save_dataset(ds, path)
    rets = ds.episode_returns()
    print(f"wrote {path}: {len(ds.trajectories)} episodes, mean return {rets.mean():.3f}, "
          f"reward_scale {ds.reward_scale:.4f}")


def cmd_train_wm(cfg: RunConfig, out: Path, kind: str | None):
    kind = kind or cfg.model
    ds = _dataset(cfg, out)
    if kind == "dwm":
        model = DiffusionWorldModel.for_dataset(ds, cfg.dwm, seed=cfg.seed)
        losses = train_dwm(model, ds, seed=cfg.seed)
        path = _path(cfg.paths.dwm, out, "dwm.ckpt")
    else:
        model = OneStepModel.for_dataset(ds, cfg.onestep, seed=cfg.seed)
        losses = train_onestep(model, ds, seed=cfg.seed)
        path = _path(cfg.paths.onestep, out, "onestep.ckpt")
    model.save(path, {"dataset": ds.name, "dataset_seed": ds.seed})
    every = max(1, len(losses) // 100)
    rows = [{"iteration": i + 1, "loss": float(np.mean(losses[max(0, i + 1 - every) : i + 1]))}
            for i in range(every - 1, len(losses), every)]
    write_table(out / f"{kind}_train_log.csv", rows)
    print(f"wrote {path}: final loss {rows[-1]['loss']:.4f}" if rows else f"wrote {path}")


def cmd_eval_wm(cfg: RunConfig, out: Path):
    ds = _dataset(cfg, out)
    rows = []
    models = {}
    for kind, p, default in (("dwm", cfg.paths.dwm, "dwm.ckpt"), ("onestep", cfg.paths.onestep, "onestep.ckpt")):
        path = _path(p, out, default)
        if path.exists():
            models[kind] = DiffusionWorldModel.load(path) if kind == "dwm" else OneStepModel.load(path)
    if not models:
        raise MissingArtifact(f"no world model checkpoint found in {out}")
    T = models["dwm"].config.T if "dwm" in models else cfg.dwm.T
    for kind, model in models.items():
        ratios = cfg.eval.r_infer if kind == "dwm" else [None]
        for r in ratios:
            for seed in cfg.eval.seeds:
                rep = wm_prediction_error(model, ds, cfg.eval.g_eval if kind == "dwm" else None, T,
                                          cfg.eval.n_windows, seed, r_infer=r)
                rows.append(rep.as_row())
    write_table(out / "wm_error.csv", rows, {"command": "eval-wm", "config": cfg.to_dict()})
    for row in rows:
        print(f"{row['model']:8s} r_infer={row['r_infer']} seed={row['seed']} "
              f"eps_s={row['eps_s']:.5f} eps_r={row['eps_r']:.5f}")


def cmd_train_agent(cfg: RunConfig, out: Path, timing: bool = False):
    ds = _dataset(cfg, out)
    wm = _world_model(cfg, out, cfg.agent.source)
    agent_dir = out / "agent"
    _, rows = train_offline_agent(ds, cfg.agent, wm=wm, seed=cfg.seed, out_dir=agent_dir, timing=timing)
    last = rows[-1]
    print(f"wrote {agent_dir / 'policy.ckpt'}: normalised return {last.get('eval_norm_mean', float('nan')):.4f}")


def cmd_eval_agent(cfg: RunConfig, out: Path):
    ds_env = cfg.data.env
    path = _require(_path(cfg.paths.policy, out, "agent/policy.ckpt"), "policy checkpoint")
    agent = load_policy(path)
    rows = []
    for seed in cfg.eval.seeds:
        rep = evaluate_policy(ds_env, agent.policy(), cfg.eval.episodes, seed=1000 + seed)
        rows.append({"seed": seed, "return_mean": rep.mean_raw, "return_std": rep.std_raw,
                     "norm_mean": rep.mean_normalized, "norm_std": rep.std_normalized,
                     "r_random": rep.r_random, "r_expert": rep.r_expert})
        print(f"seed {seed}: return {rep.mean_raw:.3f} +- {rep.std_raw:.3f}, "
              f"normalised {rep.mean_normalized:.4f}")
    write_table(out / "agent_eval.csv", rows, {"command": "eval-agent", "config": cfg.to_dict()})


def cmd_sweep_horizon(cfg: RunConfig, out: Path):
    ds = _dataset(cfg, out)
    models = {tag: _world_model(cfg, out, tag) for tag in cfg.sweep.models}
    rows = horizon_sweep(ds, cfg.agent, cfg.sweep.H, models, cfg.sweep.seeds,
                         out_csv=out / "sweep_horizon.csv", cell_root=out / "cells")
    for r in rows:
        print(f"{r['model']:8s} H={r['H']} seed={r['seed']} norm={r.get('eval_norm_mean', float('nan')):.4f}")


def cmd_sweep_rtg(cfg: RunConfig, out: Path):
    ds = _dataset(cfg, out)
    rows = rtg_sweep(ds, cfg.agent, cfg.sweep.g_eval, _dwm(cfg, out), cfg.sweep.seeds,
                     out_csv=out / "sweep_rtg.csv", cell_root=out / "cells",
                     n_windows=cfg.eval.n_windows, train_agents=cfg.sweep.train_agents)
    print("dataset RTG deciles:", json.dumps(rtg_deciles(ds)))
    for r in rows:
        print(f"g={r['g_eval']} seed={r['seed']} eps_s={r['eps_s']:.5f} norm={r.get('eval_norm_mean', float('nan'))}")


def _markdown(rows: list[dict]) -> str:
    if not rows:
        return "(empty)\n"
    keys = list(rows[0])
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for r in rows:
        cells = []
        for k in keys:
            v = r.get(k, "")
            try:
                f = float(v)
                cells.append(v if float(int(f)) == f and "." not in str(v) else f"{f:.4g}")
            except (TypeError, ValueError):
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, out: Path):
    tables = sorted(p for p in out.glob("*.csv") if not p.name.endswith("train_log.csv"))
    if not tables:
        raise MissingArtifact(f"no result tables in {out}")
    parts = ["# dwmlab report\n"]
    for p in tables:
        rows = read_table(p)
        if p.name == "wm_error.csv":
            rows = [{k: r[k] for k in r if not k.startswith(("state_median", "reward_mse_"))} for r in rows]
        parts.append(f"\n## {p.stem}\n\n" + _markdown(rows))
    text = "".join(parts)
    (out / "report.md").write_text(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwmlab", description="Diffusion world model offline-RL lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "train-wm":
            sp.add_argument("kind", nargs="?", choices=("dwm", "onestep"), default=None)
        if name == "train-agent":
            sp.add_argument("--timing", action="store_true",
                            help="also write agent/timing.csv (wall-clock, not reproducible)")
        sp.add_argument("--config", default=None, help="JSON run configuration")
        sp.add_argument("--out-dir", default="runs/default", help="run directory for artifacts")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config's top-level seed")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. agent.H=7 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{args.command}.json").write_text(
        json.dumps({"command": args.command, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    handlers = {
        "gen-data": lambda: cmd_gen_data(cfg, out),
        "train-wm": lambda: cmd_train_wm(cfg, out, getattr(args, "kind", None)),
        "eval-wm": lambda: cmd_eval_wm(cfg, out),
        "train-agent": lambda: cmd_train_agent(cfg, out, getattr(args, "timing", False)),
        "eval-agent": lambda: cmd_eval_agent(cfg, out),
        "sweep-horizon": lambda: cmd_sweep_horizon(cfg, out),
        "sweep-rtg": lambda: cmd_sweep_rtg(cfg, out),
        "report": lambda: cmd_report(cfg, out),
    }
    try:
        handlers[args.command]()
    except (MissingArtifact, DatasetFormatError, CheckpointError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
