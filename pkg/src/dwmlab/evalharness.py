"""Measurement surfaces: world-model prediction error, policy returns, sweeps.

Prediction errors are squared Euclidean distances in normalised units (state
vectors summed over dimensions), reported per step ahead and averaged.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import OfflineDataset, _valid_starts, window_arrays
from .dwm import DiffusionWorldModel, sample_dwm
from .envsim import get_env, make_scripted_policy, rollout
from .onestep import OneStepModel, recursive_rollout

log = logging.getLogger(__name__)

__all__ = [
    "PredErrorReport",
    "ReturnReport",
    "wm_prediction_error",
    "anchors",
    "evaluate_policy",
    "normalized_score",
    "horizon_sweep",
    "rtg_sweep",
    "write_table",
    "read_table",
    "max_workers",
]

ANCHOR_EPISODES = 100
ANCHOR_SEED = 20_240_601


@dataclass
class PredErrorReport:
    state_mse: np.ndarray  # (T-1,) steps 1..T-1
    reward_mse: np.ndarray  # (T,) steps 0..T-1
    state_median: np.ndarray
    reward_median: np.ndarray
    g_eval: float | None
    T: int
    model: str
    seed: int
    n_windows: int
    r_infer: float | None = None

    @property
    def eps_s(self) -> float:
        return float(np.mean(self.state_mse))

    @property
    def eps_r(self) -> float:
        return float(np.mean(self.reward_mse))

    def as_row(self) -> dict:
        row = {"model": self.model, "g_eval": self.g_eval, "T": self.T, "seed": self.seed,
               "r_infer": self.r_infer, "eps_s": self.eps_s, "eps_r": self.eps_r}
        for h, v in enumerate(self.state_mse, start=1):
            row[f"state_mse_{h}"] = float(v)
        for h, v in enumerate(self.state_median, start=1):
            row[f"state_median_{h}"] = float(v)
        for h, v in enumerate(self.reward_mse):
            row[f"reward_mse_{h}"] = float(v)
        return row


def _windows(dataset: OfflineDataset, T: int, n: int, rng):
    pairs = _valid_starts(dataset, T)
    pick = pairs[rng.integers(0, len(pairs), size=n)]
    idx, start = pick[:, 0], pick[:, 1]
    S, A, R = window_arrays(dataset, idx, start, T, normalized=False)
    acts = np.stack([dataset.trajectories[i].actions[t : t + T] for i, t in zip(idx, start)]).astype(np.float64)
    return S, A, R, acts


def wm_prediction_error(model, dataset: OfflineDataset, g_eval: float | None, T: int, n_windows: int,
                        seed: int, r_infer: float | None = None, tag: str | None = None) -> PredErrorReport:
    """Condition on true ``(s_t, a_t)`` of sampled windows and compare predictions.

    ``model`` is a :class:`DiffusionWorldModel`, a :class:`OneStepModel`
    (rolled out recursively with the logged actions) or any callable
    ``f(S, A, R, actions, rng) -> (rewards (B, T), states (B, T-1, d_s))``
    in raw units.
    """
    rng = np.random.default_rng(seed)
    S, A, R, acts = _windows(dataset, T, n_windows, rng)
    if isinstance(model, DiffusionWorldModel):
        if model.config.T != T:
            raise ValueError(f"model was trained with T={model.config.T}, asked for T={T}")
        smp = sample_dwm(model, S[:, 0], A, g_eval, rng, r_infer=r_infer)
        pr, ps = smp.rewards, smp.states
        tag = tag or "dwm"
    elif isinstance(model, OneStepModel):
        seq = recursive_rollout(model, None, S[:, 0], A, T, rng, actions=acts)
        pr, ps = seq.rewards, seq.states[:, : T - 1]
        tag = tag or "onestep"
    else:
        pr, ps = model(S, A, R, acts, rng)
        tag = tag or "custom"
    norm = dataset.normalizer
    se_s = np.sum((norm.apply_obs(ps) - norm.apply_obs(S[:, 1:])) ** 2, axis=-1)
    se_r = (norm.apply_reward(pr) - norm.apply_reward(R)) ** 2
    return PredErrorReport(
        state_mse=se_s.mean(axis=0),
        reward_mse=se_r.mean(axis=0),
        state_median=np.median(se_s, axis=0),
        reward_median=np.median(se_r, axis=0),
        g_eval=g_eval,
        T=T,
        model=tag,
        seed=seed,
        n_windows=n_windows,
        r_infer=r_infer,
    )


# --- returns -----------------------------------------------------------------


@dataclass
class ReturnReport:
    env: str
    raw: np.ndarray
    normalized: np.ndarray
    r_random: float
    r_expert: float

    @property
    def mean_raw(self) -> float:
        return float(np.mean(self.raw))

    @property
    def std_raw(self) -> float:
        return float(np.std(self.raw))

    @property
    def mean_normalized(self) -> float:
        return float(np.mean(self.normalized))

    @property
    def std_normalized(self) -> float:
        return float(np.std(self.normalized))


@lru_cache(maxsize=None)
def anchors(env: str) -> tuple[float, float]:
    """Mean undiscounted return of the scripted random and expert policies."""
    spec = get_env(env)
    out = []
    for level in ("random", "expert"):
        seeds = np.random.SeedSequence([ANCHOR_SEED, 0 if level == "random" else 1]).spawn(ANCHOR_EPISODES)
        rets = []
        for child in seeds:
            p_seed, e_seed = (int(x) for x in child.generate_state(2))
            rets.append(rollout(spec, make_scripted_policy(level, p_seed, env), seed=e_seed).rewards.sum())
        out.append(float(np.mean(rets)))
    r_random, r_expert = out
    if not r_expert > r_random:
        raise ValueError(f"degenerate anchors for {env}: expert {r_expert} <= random {r_random}")
    return r_random, r_expert


def normalized_score(env: str, returns):
    lo, hi = anchors(env)
    return (np.asarray(returns, dtype=np.float64) - lo) / (hi - lo)


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(episodes)]


def evaluate_policy(env: str, policy, episodes: int, seed: int) -> ReturnReport:
    """Roll out ``policy`` (raw state -> action) for ``episodes`` seeded episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    spec = get_env(env)
    raw = np.array([rollout(spec, policy, seed=s, policy_tag="eval").rewards.sum() for s in episode_seeds(seed, episodes)])
    lo, hi = anchors(env)
    return ReturnReport(env=env, raw=raw, normalized=(raw - lo) / (hi - lo), r_random=lo, r_expert=hi)


# --- tables ------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_table(path, rows: list[dict], sidecar: dict | None = None) -> None:
    """CSV with the union of row keys (first-seen order) plus an optional ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def max_workers(default: int = 1) -> int:
    raw = os.environ.get("DWMLAB_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DWMLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("DWMLAB_THREADS must be >= 1")
    return n


# --- sweeps ------------------------------------------------------------------


def _run_cell(args):
    from .agents import DwmBank, train_offline_agent

    dataset, cfg, wm, seed, cell_dir, bank = args
    cell_dir = Path(cell_dir) if cell_dir is not None else None
    if cell_dir is not None and (cell_dir / "policy.ckpt").exists() and (cell_dir / "train_log.csv").exists():
        rows = read_table(cell_dir / "train_log.csv")
        return {k: _parse(v) for k, v in rows[-1].items()}
    if isinstance(bank, (str, Path)):
        bank = DwmBank.load(bank)
    _, rows = train_offline_agent(dataset, cfg, wm=wm, seed=seed, out_dir=cell_dir, bank=bank)
    return rows[-1]


def _parse(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def _run_cells(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_cell, jobs))


def _shared_bank(dataset, cfg, wm, seed, cell_root):
    """The imagination bank a cell would build for itself, built once per seed.

    Banks do not depend on H, so cells that differ only in H share one. The
    result is identical to letting each cell build its own.
    """
    from .agents import build_dwm_bank, stream_seeds

    if cfg.source != "dwm" or cfg.imagination != "cached":
        return None
    path = None
    if cell_root is not None:
        g = "-".join(f"{x:g}" for x in cfg.g_eval)
        path = Path(cell_root) / f"bank_g{g}_n{cfg.bank_size}_s{seed}.ckpt"
        if path.exists():
            return path
    bank = build_dwm_bank(wm, dataset, cfg.g_eval, cfg.bank_size, seed=stream_seeds(seed)[1])
    if path is None:
        return bank
    path.parent.mkdir(parents=True, exist_ok=True)
    bank.save(path)
    return path


def horizon_sweep(dataset: OfflineDataset, base, H_list, models: dict, seeds, out_csv=None,
                  cell_root=None, workers: int | None = None) -> list[dict]:
    """Train one agent per ``(H, model tag, seed)``; ``models`` maps tag -> world model.

    Tags are ``"dwm"``, ``"onestep"`` or ``"data"`` (value ``None``). With
    ``cell_root`` each cell persists its checkpoint and log under
    ``cell_root/<tag>_H<H>_s<seed>`` and finished cells are reused.
    """
    workers = max_workers() if workers is None else workers
    jobs, keys, banks = [], [], {}
    for tag, wm in models.items():
        for H in H_list:
            cfg = replace(base, source=tag, H=H)
            for seed in seeds:
                cell = None if cell_root is None else Path(cell_root) / f"{tag}_{cfg.algo}_H{H}_s{seed}"
                if (tag, seed) not in banks:
                    banks[(tag, seed)] = _shared_bank(dataset, cfg, wm, seed, cell_root)
                jobs.append((dataset, cfg, wm, seed, cell, banks[(tag, seed)]))
                keys.append((tag, cfg.algo, H, seed))
    rows = []
    for (tag, algo, H, seed), res in zip(keys, _run_cells(jobs, workers)):
        rows.append({"model": tag, "algo": algo, "H": H, "seed": seed, **_final_metrics(res)})
    if out_csv is not None:
        write_table(out_csv, rows, {"sweep": "horizon", "base_config": asdict(base), "H": list(H_list),
                                    "models": list(models), "seeds": list(seeds), "dataset": dataset.name,
                                    "dataset_seed": dataset.seed})
    return rows


def _final_metrics(res: dict) -> dict:
    keep = ("iteration", "eval_return_mean", "eval_return_std", "eval_norm_mean", "eval_norm_std", "critic_loss")
    return {k: res[k] for k in keep if k in res}


def rtg_deciles(dataset: OfflineDataset) -> dict:
    g = dataset.all_rtg()
    qs = np.percentile(g, np.arange(0, 101, 10))
    return {f"p{10 * i}": float(q) for i, q in enumerate(qs)} | {"p99": float(np.percentile(g, 99))}


def rtg_sweep(dataset: OfflineDataset, base, g_list, wm: DiffusionWorldModel, seeds, out_csv=None,
              cell_root=None, workers: int | None = None, n_windows: int = 200,
              train_agents: bool = True) -> list[dict]:
    """Per evaluation RTG: world-model prediction error and (optionally) agent returns."""
    workers = max_workers() if workers is None else workers
    rows = []
    jobs, keys = [], []
    for g in g_list:
        for seed in seeds:
            rep = wm_prediction_error(wm, dataset, g, wm.config.T, n_windows, seed)
            rows.append({"g_eval": g, "seed": seed, "eps_s": rep.eps_s, "eps_r": rep.eps_r})
            if train_agents:
                cfg = replace(base, source="dwm", g_eval=[g])
                cell = None if cell_root is None else Path(cell_root) / f"rtg{g:g}_{cfg.algo}_s{seed}"
                jobs.append((dataset, cfg, wm, seed, cell, _shared_bank(dataset, cfg, wm, seed, cell_root)))
                keys.append(len(rows) - 1)
    for i, res in zip(keys, _run_cells(jobs, workers)):
        rows[i].update(_final_metrics(res))
    if out_csv is not None:
        write_table(out_csv, rows, {"sweep": "rtg", "base_config": asdict(base), "g_eval": list(g_list),
                                    "seeds": list(seeds), "dataset": dataset.name, "dataset_seed": dataset.seed,
                                    "dataset_rtg_deciles": rtg_deciles(dataset)})
    return rows
