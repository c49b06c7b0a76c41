"""Offline datasets: return-to-go labels, normalisation, windowing, persistence.

Windows are flattened as::

    [s_t | a_t | r_t | s_{t+1} | r_{t+1} | ... | s_{t+T-1} | r_{t+T-1}]

which has ``T * d_s + d_a + T`` coordinates.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envsim import get_env, make_scripted_policy, rollout

__all__ = [
    "Trajectory",
    "Normalizer",
    "OfflineDataset",
    "WindowLayout",
    "WindowBatch",
    "compute_rtg",
    "rtg_labels",
    "fit_normalizer",
    "sample_windows",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
    "DatasetVersionError",
    "DatasetSizeError",
    "DatasetChecksumError",
]

STD_FLOOR = 1e-6
TIERS = ("random", "medium", "expert", "medium-replay", "medium-expert")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    seed: int = 0
    policy: str = ""

    def __post_init__(self):
        n = len(self.rewards)
        if len(self.states) != n or len(self.actions) != n:
            raise ValueError("states, actions and rewards must have equal length")
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.rewards.ndim != 1:
            raise ValueError("expected states (L, d_s), actions (L, d_a), rewards (L,)")

    def __len__(self):
        return len(self.rewards)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.policy == other.policy
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )


# --- return-to-go ------------------------------------------------------------


def compute_rtg(rewards, t: int, gamma: float, reward_scale: float = 1.0) -> float:
    """Discounted return-to-go from ``t`` to the end of ``rewards``, over the scale."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if not 0 <= t < len(rewards):
        raise IndexError(f"t={t} outside [0, {len(rewards)})")
    tail = rewards[t:]
    return float(np.sum(gamma ** np.arange(len(tail)) * tail) / reward_scale)


def rtg_labels(rewards, gamma: float, reward_scale: float = 1.0, window: int | None = None) -> np.ndarray:
    """RTG label for every index. ``window`` truncates each sum to that many rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if window is None:
        out = np.empty_like(r)
        acc = 0.0
        for i in range(len(r) - 1, -1, -1):
            acc = r[i] + gamma * acc
            out[i] = acc
        return out / reward_scale
    disc = gamma ** np.arange(window)
    padded = np.concatenate([r, np.zeros(window)])
    out = np.array([padded[i : i + window] @ disc for i in range(len(r))])
    return out / reward_scale


# --- normalisation -----------------------------------------------------------


@dataclass
class Normalizer:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0
    normalize_obs: bool = True
    normalize_reward: bool = True

    def apply_obs(self, s):
        return (s - self.obs_mean) / self.obs_std if self.normalize_obs else np.asarray(s, dtype=np.float64)

    def invert_obs(self, z):
        return z * self.obs_std + self.obs_mean if self.normalize_obs else np.asarray(z, dtype=np.float64)

    def apply_reward(self, r):
        return (r - self.reward_mean) / self.reward_std if self.normalize_reward else np.asarray(r, dtype=np.float64)

    def invert_reward(self, z):
        return z * self.reward_std + self.reward_mean if self.normalize_reward else np.asarray(z, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "obs_mean": [float(v) for v in self.obs_mean],
            "obs_std": [float(v) for v in self.obs_std],
            "reward_mean": float(self.reward_mean),
            "reward_std": float(self.reward_std),
            "normalize_obs": self.normalize_obs,
            "normalize_reward": self.normalize_reward,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            obs_mean=np.array(d["obs_mean"], dtype=np.float64),
            obs_std=np.array(d["obs_std"], dtype=np.float64),
            reward_mean=float(d["reward_mean"]),
            reward_std=float(d["reward_std"]),
            normalize_obs=bool(d["normalize_obs"]),
            normalize_reward=bool(d["normalize_reward"]),
        )

    def __eq__(self, other):
        if not isinstance(other, Normalizer):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _floored_std(x: np.ndarray, what: str) -> np.ndarray:
    std = x.std(axis=0)
    low = std < STD_FLOOR
    if np.any(low):
        warnings.warn(f"{what}: {int(low.sum())} zero-variance dimension(s); std floored to {STD_FLOOR}")
    return np.maximum(std, STD_FLOOR)


def fit_normalizer(trajectories, normalize_obs: bool = True, normalize_reward: bool = True) -> Normalizer:
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    s = np.concatenate([np.asarray(t.states, dtype=np.float64) for t in trajectories])
    r = np.concatenate([np.asarray(t.rewards, dtype=np.float64) for t in trajectories])
    return Normalizer(
        obs_mean=s.mean(axis=0),
        obs_std=_floored_std(s, "observation"),
        reward_mean=float(r.mean()),
        reward_std=float(_floored_std(r[:, None], "reward")[0]),
        normalize_obs=normalize_obs,
        normalize_reward=normalize_reward,
    )


# --- dataset -----------------------------------------------------------------


@dataclass
class OfflineDataset:
    trajectories: list
    normalizer: Normalizer
    reward_scale: float
    gamma: float
    env: str
    tier: str
    seed: int = 0
    rtg_mode: str = "episode"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")
        if self.rtg_mode not in ("episode", "window"):
            raise ValueError(f"rtg_mode must be 'episode' or 'window', got {self.rtg_mode!r}")
        spec = get_env(self.env)
        for tr in self.trajectories:
            if tr.states.shape[1] != spec.state_dim or tr.actions.shape[1] != spec.action_dim:
                raise ValueError("trajectory dimensions do not match the environment")

    @property
    def name(self) -> str:
        return f"{self.env}-{self.tier}"

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            self.env == other.env
            and self.tier == other.tier
            and self.seed == other.seed
            and self.gamma == other.gamma
            and self.reward_scale == other.reward_scale
            and self.rtg_mode == other.rtg_mode
            and self.normalizer == other.normalizer
            and len(self.trajectories) == len(other.trajectories)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    def rtg(self, traj_index: int, window: int | None = None) -> np.ndarray:
        """Normalised RTG labels of one trajectory (``window`` only used in window mode)."""
        key = ("rtg", traj_index, window if self.rtg_mode == "window" else None)
        if key not in self._cache:
            tr = self.trajectories[traj_index]
            w = window if self.rtg_mode == "window" else None
            self._cache[key] = rtg_labels(tr.rewards, self.gamma, self.reward_scale, window=w)
        return self._cache[key]

    def transitions(self):
        """All ``(s, a, r, s')`` tuples with a recorded successor, as float64 arrays."""
        if "transitions" not in self._cache:
            s, a, r, s2 = [], [], [], []
            for tr in self.trajectories:
                s.append(tr.states[:-1])
                a.append(tr.actions[:-1])
                r.append(tr.rewards[:-1])
                s2.append(tr.states[1:])
            self._cache["transitions"] = tuple(
                np.concatenate(x).astype(np.float64) for x in (s, a, r, s2)
            )
        return self._cache["transitions"]

    def episode_returns(self, discounted: bool = False) -> np.ndarray:
        if discounted:
            return np.array([rtg_labels(t.rewards, self.gamma)[0] for t in self.trajectories])
        return np.array([float(np.sum(t.rewards, dtype=np.float64)) for t in self.trajectories])

    def all_rtg(self) -> np.ndarray:
        return np.concatenate([self.rtg(i) for i in range(len(self.trajectories))])


@dataclass(frozen=True)
class WindowLayout:
    state_dim: int
    action_dim: int
    horizon: int

    @property
    def dim(self) -> int:
        return self.horizon * self.state_dim + self.action_dim + self.horizon

    @property
    def cond_dim(self) -> int:
        return self.state_dim + self.action_dim

    def state_index(self, h: int) -> np.ndarray:
        """Coordinates of ``s_{t+h}``."""
        if h == 0:
            return np.arange(self.state_dim)
        start = self.cond_dim + 1 + (h - 1) * (self.state_dim + 1)
        return np.arange(start, start + self.state_dim)

    def reward_index(self, h: int) -> int:
        """Coordinate of ``r_{t+h}``."""
        if h == 0:
            return self.cond_dim
        return self.cond_dim + h * (self.state_dim + 1)

    def flatten(self, states, action, rewards) -> np.ndarray:
        """``states`` (..., T, d_s), ``action`` (..., d_a), ``rewards`` (..., T)."""
        states = np.asarray(states, dtype=np.float64)
        lead = states.shape[:-2]
        x = np.empty(lead + (self.dim,))
        x[..., : self.state_dim] = states[..., 0, :]
        x[..., self.state_dim : self.cond_dim] = action
        for h in range(self.horizon):
            x[..., self.reward_index(h)] = rewards[..., h]
            if h > 0:
                x[..., self.state_index(h)] = states[..., h, :]
        return x

    def unflatten(self, x):
        """Inverse of :meth:`flatten`: returns ``(states, action, rewards)``."""
        x = np.asarray(x)
        lead = x.shape[:-1]
        states = np.empty(lead + (self.horizon, self.state_dim))
        rewards = np.empty(lead + (self.horizon,))
        for h in range(self.horizon):
            states[..., h, :] = x[..., self.state_index(h)]
            rewards[..., h] = x[..., self.reward_index(h)]
        return states, x[..., self.state_dim : self.cond_dim].copy(), rewards


@dataclass
class WindowBatch:
    x0: np.ndarray
    rtg: np.ndarray
    traj_index: np.ndarray
    start: np.ndarray
    normalized: bool = True


def _valid_starts(dataset: OfflineDataset, T: int) -> np.ndarray:
    key = ("starts", T)
    if key not in dataset._cache:
        pairs = [
            (i, t)
            for i, tr in enumerate(dataset.trajectories)
            for t in range(len(tr) - T + 1)
        ]
        if not pairs:
            raise ValueError(f"window length T={T} exceeds every episode length")
        dataset._cache[key] = np.array(pairs, dtype=np.int64)
    return dataset._cache[key]


def window_arrays(dataset: OfflineDataset, traj_index, start, T: int, normalized: bool = True):
    """States (B, T, d_s), first action (B, d_a), rewards (B, T) for given windows."""
    traj_index = np.atleast_1d(traj_index)
    start = np.atleast_1d(start)
    B = len(traj_index)
    S = np.empty((B, T, dataset.state_dim))
    A = np.empty((B, dataset.action_dim))
    R = np.empty((B, T))
    for b, (i, t) in enumerate(zip(traj_index, start)):
        tr = dataset.trajectories[i]
        if t + T > len(tr):
            raise ValueError(f"window [{t}, {t + T}) crosses the end of episode {i}")
        S[b] = tr.states[t : t + T]
        A[b] = tr.actions[t]
        R[b] = tr.rewards[t : t + T]
    if normalized:
        S = dataset.normalizer.apply_obs(S)
        R = dataset.normalizer.apply_reward(R)
    return S, A, R


def sample_windows(dataset: OfflineDataset, T: int, batch: int, rng: np.random.Generator,
                   normalized: bool = True) -> WindowBatch:
    """Uniform over (trajectory, start) pairs whose window stays inside the episode."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if T > max(len(tr) for tr in dataset.trajectories):
        raise ValueError(f"window length T={T} exceeds the episode length")
    pairs = _valid_starts(dataset, T)
    pick = pairs[rng.integers(0, len(pairs), size=batch)]
    idx, start = pick[:, 0], pick[:, 1]
    S, A, R = window_arrays(dataset, idx, start, T, normalized=normalized)
    layout = WindowLayout(dataset.state_dim, dataset.action_dim, T)
    g = np.array([dataset.rtg(i, window=T)[t] for i, t in zip(idx, start)])
    return WindowBatch(x0=layout.flatten(S, A, R), rtg=g, traj_index=idx, start=start, normalized=normalized)


# --- construction ------------------------------------------------------------

_TIER_MIX = {
    "random": ("random",),
    "medium": ("medium",),
    "expert": ("expert",),
    "medium-replay": ("random", "medium"),
    "medium-expert": ("medium", "expert"),
}


def make_dataset(
    env: str = "pointmass",
    tier: str = "medium",
    episodes: int = 100,
    seed: int = 0,
    gamma: float = 0.99,
    rtg_mode: str = "episode",
    scale_percentile: float = 95.0,
) -> OfflineDataset:
    """Roll out scripted policies; mixed tiers alternate their two sources."""
    if tier not in _TIER_MIX:
        raise ValueError(f"unknown tier {tier!r}; choose from {TIERS}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    spec = get_env(env)
    sources = _TIER_MIX[tier]
    ss = np.random.SeedSequence(seed)
    trajs = []
    for ep, child in enumerate(ss.spawn(episodes)):
        level = sources[ep % len(sources)]
        pol_seed, env_seed = (int(x) for x in child.generate_state(2))
        pol = make_scripted_policy(level, seed=pol_seed, env=env)
        tr = rollout(spec, pol, seed=env_seed)
        # stored at payload precision so that save/load is an exact round trip
        trajs.append(
            Trajectory(
                states=tr.states.astype(np.float32),
                actions=tr.actions.astype(np.float32),
                rewards=tr.rewards.astype(np.float32),
                seed=env_seed,
                policy=level,
            )
        )
    disc = np.array([rtg_labels(t.rewards, gamma)[0] for t in trajs])
    scale = float(np.percentile(disc, scale_percentile))
    return OfflineDataset(
        trajectories=trajs,
        normalizer=fit_normalizer(trajs),
        reward_scale=scale,
        gamma=gamma,
        env=env,
        tier=tier,
        seed=seed,
        rtg_mode=rtg_mode,
    )


# --- persistence: DWMT1 -------------------------------------------------------

MAGIC = b"DWMT1"
FORMAT_VERSION = 1


class DatasetFormatError(Exception):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetSizeError(DatasetFormatError):
    pass


class DatasetChecksumError(DatasetFormatError):
    pass


def save_dataset(dataset: OfflineDataset, path) -> None:
    """``DWMT1 | u32 header_len | JSON header | u32 CRC32(payload) | f32 LE payload``."""
    payload = bytearray()
    lengths, policies, seeds = [], [], []
    for tr in dataset.trajectories:
        for arr in (tr.states, tr.actions, tr.rewards):
            payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        lengths.append(len(tr))
        policies.append(tr.policy)
        seeds.append(int(tr.seed))
    header = {
        "version": FORMAT_VERSION,
        "env": dataset.env,
        "tier": dataset.tier,
        "gamma": dataset.gamma,
        "reward_scale": dataset.reward_scale,
        "rtg_mode": dataset.rtg_mode,
        "normalizer": dataset.normalizer.to_dict(),
        "counts": {
            "trajectories": len(lengths),
            "lengths": lengths,
            "state_dim": dataset.state_dim,
            "action_dim": dataset.action_dim,
            "payload_bytes": len(payload),
        },
        "policies": policies,
        "traj_seeds": seeds,
        "seed": dataset.seed,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
        fh.write(payload)


def load_dataset(path) -> OfflineDataset:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a DWMT1 file")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise DatasetSizeError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    try:
        header = json.loads(data[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable header ({exc})") from exc
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{path}: format version {header.get('version')!r}, expected {FORMAT_VERSION}"
        )
    counts = header["counts"]
    d_s, d_a = counts["state_dim"], counts["action_dim"]
    lengths = counts["lengths"]
    expected = sum(4 * L * (d_s + d_a + 1) for L in lengths)
    if len(lengths) != counts["trajectories"] or expected != counts["payload_bytes"]:
        raise DatasetSizeError(f"{path}: header counts are inconsistent")
    (crc,) = struct.unpack("<I", data[pos : pos + 4]) if len(data) >= pos + 4 else (None,)
    pos += 4
    payload = data[pos:]
    if crc is None or len(payload) != expected:
        raise DatasetSizeError(
            f"{path}: header declares {expected} payload bytes, found {max(len(payload), 0)}"
        )
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DatasetChecksumError(f"{path}: payload CRC32 mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    trajs = []
    off = 0
    for L, pol, seed in zip(lengths, header["policies"], header["traj_seeds"]):
        parts = []
        for shape in ((L, d_s), (L, d_a), (L,)):
            n = int(np.prod(shape))
            parts.append(flat[off : off + n].reshape(shape).astype(np.float32))
            off += n
        trajs.append(Trajectory(states=parts[0], actions=parts[1], rewards=parts[2], seed=seed, policy=pol))
    return OfflineDataset(
        trajectories=trajs,
        normalizer=Normalizer.from_dict(header["normalizer"]),
        reward_scale=header["reward_scale"],
        gamma=header["gamma"],
        env=header["env"],
        tier=header["tier"],
        seed=header["seed"],
        rtg_mode=header.get("rtg_mode", "episode"),
    )
