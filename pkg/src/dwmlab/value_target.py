"""Critic targets built from imagined rollouts.

All functions are batched: an :class:`ImaginedSeq` holds ``B`` sequences of
length ``L``. ``rewards[:, h]`` is ``r_{t+h}`` and ``states[:, h]`` is
``s_{t+h+1}``, so the bootstrap state after ``H`` rewards is ``states[:, H-1]``.
Bootstrap functions map a ``(B, d_s)`` state batch to ``(B,)`` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ImaginedSeq",
    "TargetConfig",
    "value_expansion",
    "diff_mve_target",
    "mve_target",
    "lambda_return",
    "lambda_return_target",
    "pql_rewards",
    "rtg_relabel",
]


@dataclass(frozen=True)
class ImaginedSeq:
    rewards: np.ndarray  # (B, L)
    states: np.ndarray  # (B, L, d_s)
    source: str = "dwm"
    g_eval: float | None = None

    def __post_init__(self):
        if self.rewards.ndim != 2 or self.states.ndim != 3:
            raise ValueError("expected rewards (B, L) and states (B, L, d_s)")
        if self.rewards.shape != self.states.shape[:2]:
            raise ValueError(f"rewards {self.rewards.shape} and states {self.states.shape} disagree")
        if self.source not in ("dwm", "onestep", "data"):
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @classmethod
    def from_dwm(cls, sample, g_eval=None) -> "ImaginedSeq":
        """Drop the last reward of a length-T DWM sample, which has no successor state."""
        return cls(rewards=sample.rewards[:, :-1], states=sample.states, source="dwm", g_eval=g_eval)


@dataclass(frozen=True)
class TargetConfig:
    H: int = 5
    gamma: float = 0.99
    lam: float = 1.0
    kappa: float = 0.0
    m: int = 2
    mode: str = "diff_mve"
    T: int = 8

    def __post_init__(self):
        if self.mode not in ("diff_mve", "lambda", "mve", "pql"):
            raise ValueError(f"unknown target mode {self.mode!r}")
        if not 1 <= self.H <= self.T - 1:
            raise ValueError(f"H={self.H} outside [1, T-1={self.T - 1}]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.mode == "pql" and self.m < 2:
            raise ValueError("pql needs m >= 2 samples")


def _check_h(seq: ImaginedSeq, H: int):
    if not 1 <= H <= seq.horizon:
        raise ValueError(f"H={H} outside [1, {seq.horizon}]")


def value_expansion(rewards: np.ndarray, boot: np.ndarray, H: int, gamma: float) -> np.ndarray:
    """``sum_{h<H} gamma^h r_h + gamma^H boot``."""
    disc = gamma ** np.arange(H)
    return rewards[:, :H] @ disc + gamma**H * boot


def diff_mve_target(seq: ImaginedSeq, H: int, gamma: float, boot: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """H-step value expansion; ``boot(s)`` is e.g. ``Q_bar(s, pi_bar(s))``.

    Only ``states[:, H-1]`` is ever read; intermediate states do not enter.
    """
    _check_h(seq, H)
    return value_expansion(seq.rewards, boot(seq.states[:, H - 1]), H, gamma)


def mve_target(seq: ImaginedSeq, H: int, gamma: float, boot) -> np.ndarray:
    """Same estimator over a recursive one-step rollout."""
    return diff_mve_target(seq, H, gamma, boot)


def lambda_return(rewards: np.ndarray, boots: np.ndarray, H: int, gamma: float, lam: float) -> np.ndarray:
    """``boots[:, h]`` is the bootstrap value at ``s_{t+h+1}``, ``h < H``."""
    G = boots[:, H - 1]
    for h in range(H - 1, -1, -1):
        G = rewards[:, h] + gamma * ((1.0 - lam) * boots[:, h] + lam * G)
    return G


def lambda_return_target(seq: ImaginedSeq, H: int, gamma: float, lam: float, boot) -> np.ndarray:
    _check_h(seq, H)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    B, _, d = seq.states.shape
    if lam == 1.0:
        boots = np.zeros((B, H))
        boots[:, H - 1] = boot(seq.states[:, H - 1])
    else:
        boots = boot(seq.states[:, :H].reshape(B * H, d)).reshape(B, H)
    return lambda_return(seq.rewards, boots, H, gamma, lam)


def pql_rewards(seqs: Sequence[ImaginedSeq], kappa: float) -> ImaginedSeq:
    """Mean reward minus ``kappa`` times the largest pairwise disagreement.

    Disagreement at step ``h`` is ``(r^i_h - r^j_h)^2 + |s^i_{h+1} - s^j_{h+1}|^2``.
    The returned sequence carries the first sample's states.
    """
    if len(seqs) < 2:
        raise ValueError("pql_rewards needs at least two samples")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    R = np.stack([s.rewards for s in seqs])  # (m, B, L)
    S = np.stack([s.states for s in seqs])  # (m, B, L, d)
    dr = (R[:, None] - R[None, :]) ** 2
    ds = ((S[:, None] - S[None, :]) ** 2).sum(-1)
    penalty = (dr + ds).max(axis=(0, 1))
    first = seqs[0]
    return ImaginedSeq(R.mean(axis=0) - kappa * penalty, first.states, first.source, first.g_eval)


def rtg_relabel(g_t, r_t, g_next, v_next, gamma: float):
    """``r_t + gamma * max(g_{t+1}, V(s_{t+1}))``; ``r_t`` in RTG units."""
    vals = [np.asarray(x, dtype=np.float64) for x in (g_t, r_t, g_next, v_next)]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ValueError("rtg_relabel inputs must be finite")
    return vals[1] + gamma * np.maximum(vals[2], vals[3])
