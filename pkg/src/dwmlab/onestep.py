"""Gaussian one-step dynamics model ``(s, a) -> N(mu, diag var)`` over ``(s', r)``.

Inputs and targets live in normalised units. With ``residual=True`` the mean
head predicts ``s' - s`` (in normalised coordinates) rather than ``s'``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Normalizer, OfflineDataset
from .substrate import MLP, AdamState, adam_step, load_checkpoint, save_checkpoint, sigmoid, softplus
from .value_target import ImaginedSeq

log = logging.getLogger(__name__)

__all__ = [
    "OneStepConfig",
    "OneStepModel",
    "gaussian_nll",
    "onestep_nll_loss",
    "onestep_sample",
    "recursive_rollout",
    "train_onestep",
    "DivergenceError",
]

MIN_VAR = 1e-6


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OneStepConfig:
    hidden: int = 128
    layers: int = 2
    activation: str = "relu"
    lr: float = 1e-3
    batch: int = 256
    iters: int = 10000
    residual: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1 or self.batch < 1:
            raise ValueError("invalid one-step model size")


@dataclass
class OneStepModel:
    config: OneStepConfig
    state_dim: int
    action_dim: int
    normalizer: Normalizer
    state_norm: float = 1.0
    params: np.ndarray = None
    seed: int = 0
    iteration: int = 0
    adam: AdamState = field(default=None, repr=False)

    def __post_init__(self):
        c = self.config
        sizes = [self.state_dim + self.action_dim] + [c.hidden] * c.layers + [self.state_dim + 1]
        self.mean_net = MLP(sizes, c.activation)
        self.var_net = MLP(sizes, c.activation)
        self.n_mean = self.mean_net.n_params
        self.n_params = self.n_mean + self.var_net.n_params
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            self.params = np.concatenate([self.mean_net.init(rng), self.var_net.init(rng)])
        if self.adam is None:
            self.adam = AdamState(self.n_params, lr=c.lr)

    @classmethod
    def for_dataset(cls, dataset: OfflineDataset, config: OneStepConfig, seed: int = 0) -> "OneStepModel":
        s = dataset.transitions()[0]
        return cls(config, dataset.state_dim, dataset.action_dim, dataset.normalizer,
                   state_norm=float(np.linalg.norm(s, axis=1).max()), seed=seed)

    @property
    def out_dim(self) -> int:
        return self.state_dim + 1

    def _inputs(self, s_n, a):
        return np.concatenate([s_n, a], axis=1)

    def predict(self, params, s_n, a):
        """Normalised-space ``(mean, var)`` of ``(s', r)``; ``var`` is softplus-positive."""
        x = self._inputs(s_n, a)
        mu = self.mean_net(params[: self.n_mean], x)
        var = softplus(self.var_net(params[self.n_mean :], x)) + MIN_VAR
        if self.config.residual:
            mu = mu.copy()
            mu[:, : self.state_dim] += s_n
        return mu, var

    def targets(self, s, a, r, s2):
        n = self.normalizer
        return n.apply_obs(s), a, np.concatenate([n.apply_obs(s2), n.apply_reward(r)[:, None]], axis=1)

    def save(self, path, extra: dict | None = None):
        header = {
            "kind": "onestep",
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "normalizer": self.normalizer.to_dict(),
            "state_norm": self.state_norm,
            "arch": {"mean": self.mean_net.arch(), "var": self.var_net.arch()},
            "n_params": self.n_params,
            "seed": self.seed,
            "iteration": self.iteration,
        }
        header.update(extra or {})
        save_checkpoint(path, {"params": self.params}, header)

    @classmethod
    def load(cls, path) -> "OneStepModel":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "onestep":
            raise ValueError(f"{path} is not a one-step model checkpoint")
        return cls(
            OneStepConfig(**header["config"]),
            header["state_dim"],
            header["action_dim"],
            Normalizer.from_dict(header["normalizer"]),
            state_norm=header["state_norm"],
            params=arrays["params"],
            seed=header["seed"],
            iteration=header["iteration"],
        )


def gaussian_nll(mu, var, y) -> float:
    """Mean over rows of ``-log N(y; mu, diag var)``."""
    return float(np.mean(np.sum(0.5 * (np.log(2.0 * math.pi * var) + (y - mu) ** 2 / var), axis=1)))


def onestep_nll_loss(model: OneStepModel, params, s_n, a, y):
    """Returns ``(nll, grad)`` for normalised inputs ``s_n, a`` and targets ``y``."""
    B = s_n.shape[0]
    x = model._inputs(s_n, a)
    pm, pv = params[: model.n_mean], params[model.n_mean :]
    mu, c_m = model.mean_net.forward(pm, x)
    z, c_v = model.var_net.forward(pv, x)
    if model.config.residual:
        mu = mu.copy()
        mu[:, : model.state_dim] += s_n
    var = softplus(z) + MIN_VAR
    err = mu - y
    loss = float(np.mean(np.sum(0.5 * (np.log(2.0 * math.pi * var) + err**2 / var), axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite one-step NLL at iteration {model.iteration}: min var {var.min():.3g}, "
            f"max |err| {np.abs(err).max():.3g}"
        )
    d_mu = err / var / B
    d_var = 0.5 * (1.0 / var - err**2 / var**2) / B
    g_m, _ = model.mean_net.backward(pm, c_m, d_mu, need_dx=False)
    g_v, _ = model.var_net.backward(pv, c_v, d_var * sigmoid(z), need_dx=False)
    return loss, np.concatenate([g_m, g_v])


def onestep_sample(model: OneStepModel, s, a, rng: np.random.Generator, deterministic: bool = False):
    """Draw ``(s', r)`` in raw units for raw state batch ``s``."""
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    mu, var = model.predict(model.params, model.normalizer.apply_obs(s), a)
    y = mu if deterministic else mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    d = model.state_dim
    return model.normalizer.invert_obs(y[:, :d]), model.normalizer.invert_reward(y[:, d])


def recursive_rollout(model: OneStepModel, policy, s_t, a_t, H: int, rng: np.random.Generator,
                      actions=None, deterministic: bool = False) -> ImaginedSeq:
    """Imagine ``H`` steps: ``a_0 = a_t``, then ``a_h = policy(s_h)``.

    ``actions`` (B, H, d_a) replaces the policy by a fixed action sequence.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    s = np.atleast_2d(np.asarray(s_t, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    B = s.shape[0]
    limit = 1e3 * max(model.state_norm, 1e-6)
    R = np.empty((B, H))
    S = np.empty((B, H, model.state_dim))
    for h in range(H):
        if h > 0:
            a = actions[:, h] if actions is not None else np.clip(policy(s), -1.0, 1.0)
        s, R[:, h] = onestep_sample(model, s, a, rng, deterministic)
        norm = np.linalg.norm(s, axis=1).max()
        if not np.isfinite(norm) or norm > limit:
            raise DivergenceError(f"one-step rollout diverged at step {h + 1}: |s| = {norm:.3g} > {limit:.3g}")
        S[:, h] = s
    return ImaginedSeq(rewards=R, states=S, source="onestep")


def train_onestep(model: OneStepModel, dataset: OfflineDataset, iters: int | None = None,
                  seed: int = 0, log_every: int = 1000) -> list[float]:
    cfg = model.config
    iters = cfg.iters if iters is None else iters
    rng = np.random.default_rng(seed)
    s, a, r, s2 = dataset.transitions()
    S, A, Y = model.targets(s, a, r, s2)
    losses = []
    for it in range(iters):
        idx = rng.integers(0, len(S), size=cfg.batch)
        loss, grad = onestep_nll_loss(model, model.params, S[idx], A[idx], Y[idx])
        model.params = adam_step(model.adam, model.params, grad)
        model.iteration += 1
        losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("onestep iter %d nll %.4f", it + 1, float(np.mean(losses[-log_every:])))
    return losses
