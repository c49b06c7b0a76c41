"""Shared plumbing for the experiment scripts: dataset and world-model caching."""

import argparse
import logging
from pathlib import Path

from dwmlab.dataset import load_dataset, make_dataset, save_dataset
from dwmlab.dwm import DiffusionWorldModel, DwmConfig, train_dwm
from dwmlab.onestep import OneStepConfig, OneStepModel, train_onestep


def base_parser(description: str, out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--env", default="pointmass", choices=("pointmass", "pendulum"))
    p.add_argument("--tier", default="medium")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--dwm-iters", type=int, default=20_000)
    p.add_argument("--onestep-iters", type=int, default=10_000)
    p.add_argument("--out", default=out)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = Path(args.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    return out


def dataset(args, out: Path):
    path = out / "models" / f"{args.env}-{args.tier}-{args.episodes}-s{args.data_seed}.dwmt"
    if path.exists():
        return load_dataset(path)
    ds = make_dataset(args.env, args.tier, episodes=args.episodes, seed=args.data_seed)
    save_dataset(ds, path)
    return ds


def dwm(ds, args, out: Path, seed: int, **overrides) -> DiffusionWorldModel:
    cfg = DwmConfig(iters=args.dwm_iters, **overrides)
    path = out / "models" / f"dwm-{ds.name}-it{cfg.iters}-s{seed}.ckpt"
    if path.exists():
        return DiffusionWorldModel.load(path)
    print(f"training DWM seed {seed} ({cfg.iters} iterations)", flush=True)
    model = DiffusionWorldModel.for_dataset(ds, cfg, seed=seed)
    train_dwm(model, ds, seed=seed)
    model.save(path)
    return model


def onestep(ds, args, out: Path, seed: int) -> OneStepModel:
    cfg = OneStepConfig(iters=args.onestep_iters)
    path = out / "models" / f"onestep-{ds.name}-it{cfg.iters}-s{seed}.ckpt"
    if path.exists():
        return OneStepModel.load(path)
    print(f"training one-step model seed {seed} ({cfg.iters} iterations)", flush=True)
    model = OneStepModel.for_dataset(ds, cfg, seed=seed)
    train_onestep(model, ds, seed=seed)
    model.save(path)
    return model
