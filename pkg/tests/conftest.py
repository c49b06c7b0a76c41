"""Shared, disk-cached training artifacts.

Trained models are pure functions of (source code, config, seed), so they are
cached under ``.artifact_cache/`` keyed by a hash of all three. Set
``DWMLAB_TEST_CACHE`` to relocate the cache, or delete it to force retraining.
"""

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest
from hypothesis import settings

import dwmlab
from dwmlab.dataset import load_dataset, make_dataset, save_dataset
from dwmlab.dwm import DiffusionWorldModel, DwmConfig, train_dwm
from dwmlab.onestep import OneStepConfig, OneStepModel, train_onestep

from .helpers import ACCEPTANCE

# wall-clock deadlines are meaningless on a shared single-core box
settings.register_profile("dwmlab", deadline=None)
settings.load_profile("dwmlab")

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DWMLAB_TEST_CACHE", ROOT / ".artifact_cache"))


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(dwmlab.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


SOURCE_HASH = _source_hash()


def cache_path(kind: str, payload: dict, suffix: str = ".ckpt") -> Path:
    key = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE / f"{kind}-{SOURCE_HASH}-{key}{suffix}"


def cached_dataset(env="pointmass", tier="medium", episodes=100, seed=0):
    p = cache_path("data", {"env": env, "tier": tier, "episodes": episodes, "seed": seed}, ".dwmt")
    if p.exists():
        return load_dataset(p)
    ds = make_dataset(env, tier, episodes=episodes, seed=seed)
    save_dataset(ds, p)
    return ds


def cached_dwm(dataset, config: DwmConfig, seed: int):
    p = cache_path("dwm", {"data": [dataset.name, dataset.seed, len(dataset.trajectories)],
                           "cfg": asdict(config), "seed": seed})
    if p.exists():
        return DiffusionWorldModel.load(p)
    model = DiffusionWorldModel.for_dataset(dataset, config, seed=seed)
    train_dwm(model, dataset, seed=seed, log_every=0)
    model.save(p)
    return DiffusionWorldModel.load(p)


def cached_onestep(dataset, config: OneStepConfig, seed: int):
    p = cache_path("onestep", {"data": [dataset.name, dataset.seed, len(dataset.trajectories)],
                               "cfg": asdict(config), "seed": seed})
    if p.exists():
        return OneStepModel.load(p)
    model = OneStepModel.for_dataset(dataset, config, seed=seed)
    train_onestep(model, dataset, seed=seed, log_every=0)
    model.save(p)
    return OneStepModel.load(p)


@pytest.fixture(scope="session")
def pm_medium():
    return cached_dataset()


QUICK_DWM = DwmConfig(iters=3000, ema_start=500, hidden=128)
QUICK_ONESTEP = OneStepConfig(iters=3000)


@pytest.fixture(scope="session")
def quick_dwm(pm_medium):
    return cached_dwm(pm_medium, QUICK_DWM, seed=0)


@pytest.fixture(scope="session")
def quick_onestep(pm_medium):
    return cached_onestep(pm_medium, QUICK_ONESTEP, seed=0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{status}] {title}: {detail}")
