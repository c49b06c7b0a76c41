"""Offline actor-critic learners with imagined value-expansion targets.

``algo`` picks the update rule (``td3bc``, ``iql``, ``pql``) and ``source``
picks where the H-step rollouts come from: ``dwm`` (diffusion world model),
``onestep`` (recursive Gaussian model, the O-* baselines) or ``data`` (the
logged ``(r, s')`` of the batch, H = 1).

All networks read normalised states; actions and rewards are used raw.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Normalizer, OfflineDataset
from .dwm import DiffusionWorldModel, sample_dwm
from .onestep import OneStepModel, recursive_rollout
from .substrate import MLP, AdamState, EmaTracker, adam_step, ema_update, load_checkpoint, save_checkpoint
from .value_target import ImaginedSeq, diff_mve_target, lambda_return_target, pql_rewards

log = logging.getLogger(__name__)

__all__ = [
    "AgentConfig",
    "ActorCriticState",
    "GaussianActor",
    "DwmBank",
    "build_dwm_bank",
    "expectile_loss",
    "critic_loss",
    "value_loss",
    "td3bc_actor_loss",
    "awr_actor_loss",
    "td3_target_value",
    "td3bc_update",
    "iql_update",
    "pql_update",
    "train_offline_agent",
    "stream_seeds",
    "load_policy",
]

ALGOS = ("td3bc", "iql", "pql")
SOURCES = ("dwm", "onestep", "data")


@dataclass
class AgentConfig:
    algo: str = "td3bc"
    source: str = "dwm"
    H: int = 5
    g_eval: list = field(default_factory=lambda: [1.0])
    gamma: float = 0.99
    target_every: int = 2
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    alpha: float = 2.5
    policy_delay: int = 2
    expectile: float = 0.7
    awr_beta: float = 3.0
    max_weight: float = 100.0
    kappa: float = 0.1
    m: int = 3
    lam: float | None = None
    hidden: int = 256
    layers: int = 2
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    batch: int = 256
    iters: int = 50000
    eval_every: int = 5000
    eval_episodes: int = 10
    imagination: str = "cached"
    bank_size: int = 8

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.imagination not in ("cached", "online"):
            raise ValueError("imagination must be 'cached' or 'online'")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.source == "data" and self.H != 1:
            raise ValueError("source 'data' only supports H = 1")
        if not self.g_eval or not all(math.isfinite(g) for g in self.g_eval):
            raise ValueError("g_eval must be a non-empty list of finite values")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.target_every < 1 or self.policy_delay < 1:
            raise ValueError("target_every and policy_delay must be >= 1")
        if not 0.5 <= self.expectile < 1.0:
            raise ValueError("expectile must lie in [0.5, 1)")
        if self.policy_noise < 0 or self.noise_clip < 0 or self.alpha < 0 or self.awr_beta < 0:
            raise ValueError("noise, alpha and beta must be >= 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.algo == "pql" and self.m < 2:
            raise ValueError("pql needs m >= 2")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.batch < 1 or self.iters < 0 or self.bank_size < 1:
            raise ValueError("batch, iters and bank_size must be positive")
        if self.algo == "pql" and self.bank_size < self.m:
            raise ValueError("bank_size must be >= m for pql")

    @property
    def lam_value(self) -> float:
        """lambda-return is on by default for the V-based learners only."""
        if self.lam is not None:
            return self.lam
        return 1.0 if self.algo == "td3bc" else 0.95


# --- policies ----------------------------------------------------------------


class GaussianActor:
    """``N(tanh(f(s)), diag exp(2 log_std))`` with state-independent ``log_std``."""

    LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0

    def __init__(self, sizes, activation: str = "relu"):
        self.mean_net = MLP(sizes, activation, output_activation="tanh")
        self.action_dim = sizes[-1]
        self.n_params = self.mean_net.n_params + self.action_dim

    def init(self, rng):
        return np.concatenate([self.mean_net.init(rng), np.zeros(self.action_dim)])

    def mean(self, params, s_n):
        return self.mean_net(params[: -self.action_dim], s_n)

    def log_std(self, params):
        return np.clip(params[-self.action_dim :], self.LOG_STD_MIN, self.LOG_STD_MAX)

    def log_prob(self, params, s_n, a):
        mu = self.mean(params, s_n)
        ls = self.log_std(params)
        z = (a - mu) / np.exp(ls)
        return np.sum(-0.5 * z * z - ls - 0.5 * math.log(2.0 * math.pi), axis=1)


def _dims(cfg: AgentConfig, d_s: int, d_a: int):
    return [d_s] + [cfg.hidden] * cfg.layers + [d_a], [d_s + d_a] + [cfg.hidden] * cfg.layers + [1]


@dataclass
class ActorCriticState:
    config: AgentConfig
    state_dim: int
    action_dim: int
    normalizer: Normalizer
    seed: int = 0
    iteration: int = 0

    def __post_init__(self):
        cfg = self.config
        a_sizes, q_sizes = _dims(cfg, self.state_dim, self.action_dim)
        rng = np.random.default_rng(self.seed)
        if cfg.algo == "td3bc":
            self.actor = MLP(a_sizes, "relu", output_activation="tanh")
        else:
            self.actor = GaussianActor(a_sizes)
        self.critic = MLP(q_sizes, "relu")
        self.value = MLP([self.state_dim] + [cfg.hidden] * cfg.layers + [1], "relu") if cfg.algo != "td3bc" else None
        self.pi = self.actor.init(rng)
        self.q1 = self.critic.init(rng)
        self.q2 = self.critic.init(rng)
        self.v = self.value.init(rng) if self.value is not None else None
        self.pi_t = EmaTracker(self.pi.copy(), cfg.tau)
        self.q1_t = EmaTracker(self.q1.copy(), cfg.tau)
        self.q2_t = EmaTracker(self.q2.copy(), cfg.tau)
        self.opt_pi = AdamState(self.actor.n_params, lr=cfg.lr_actor)
        self.opt_q1 = AdamState(self.critic.n_params, lr=cfg.lr_critic)
        self.opt_q2 = AdamState(self.critic.n_params, lr=cfg.lr_critic)
        self.opt_v = AdamState(self.value.n_params, lr=cfg.lr_critic) if self.value is not None else None

    # deterministic action for evaluation and for imagined rollouts
    def act_normalized(self, s_n, params=None):
        p = self.pi if params is None else params
        if isinstance(self.actor, GaussianActor):
            return self.actor.mean(p, s_n)
        return self.actor(p, s_n)

    def policy(self, target: bool = False):
        params = self.pi_t.shadow if target else self.pi

        def act(s):
            s = np.asarray(s, dtype=np.float64)
            out = self.act_normalized(self.normalizer.apply_obs(np.atleast_2d(s)), params)
            return out[0] if s.ndim == 1 else out

        return act

    def q(self, params, s_n, a):
        return self.critic(params, np.concatenate([s_n, a], axis=1))[:, 0]

    def update_targets(self):
        ema_update(self.pi_t, self.pi)
        ema_update(self.q1_t, self.q1)
        ema_update(self.q2_t, self.q2)

    def save(self, path, extra: dict | None = None):
        arrays = {"pi": self.pi, "q1": self.q1, "q2": self.q2,
                  "pi_t": self.pi_t.shadow, "q1_t": self.q1_t.shadow, "q2_t": self.q2_t.shadow}
        if self.v is not None:
            arrays["v"] = self.v
        header = {
            "kind": "agent",
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "normalizer": self.normalizer.to_dict(),
            "seed": self.seed,
            "iteration": self.iteration,
        }
        header.update(extra or {})
        save_checkpoint(path, arrays, header)


def load_policy(path) -> ActorCriticState:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "agent":
        raise ValueError(f"{path} is not an agent checkpoint")
    st = ActorCriticState(AgentConfig(**header["config"]), header["state_dim"], header["action_dim"],
                          Normalizer.from_dict(header["normalizer"]), seed=header["seed"],
                          iteration=header["iteration"])
    st.pi, st.q1, st.q2 = arrays["pi"], arrays["q1"], arrays["q2"]
    st.pi_t.shadow, st.q1_t.shadow, st.q2_t.shadow = arrays["pi_t"], arrays["q1_t"], arrays["q2_t"]
    if "v" in arrays:
        st.v = arrays["v"]
    return st


# --- losses (each returns (loss, grad)) --------------------------------------


def expectile_loss(u, tau: float):
    """``|tau - 1{u < 0}| u^2`` elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0.0)) * u * u


def critic_loss(critic: MLP, params, s_n, a, y):
    """``mean (Q(s, a) - y)^2``; ``y`` is a constant."""
    q, cache = critic.forward(params, np.concatenate([s_n, a], axis=1))
    d = q[:, 0] - y
    grad, _ = critic.backward(params, cache, (2.0 * d / len(d))[:, None], need_dx=False)
    return float(np.mean(d * d)), grad


def value_loss(value: MLP, params, s_n, target, tau: float | None):
    """Expectile regression of ``V(s)`` toward ``target`` (plain MSE when ``tau`` is None)."""
    v, cache = value.forward(params, s_n)
    u = target - v[:, 0]
    if tau is None:
        w = np.ones_like(u)
    else:
        w = np.abs(tau - (u < 0.0))
    loss = float(np.mean(w * u * u))
    grad, _ = value.backward(params, cache, (-2.0 * w * u / len(u))[:, None], need_dx=False)
    return loss, grad


def td3bc_actor_loss(actor: MLP, pi, critic: MLP, q1, s_n, a, alpha: float):
    """``-lam * mean Q1(s, pi(s)) + mean |a - pi(s)|^2`` with ``lam = alpha / mean|Q1|`` held fixed."""
    B = s_n.shape[0]
    act, c_a = actor.forward(pi, s_n)
    q, c_q = critic.forward(q1, np.concatenate([s_n, act], axis=1))
    q = q[:, 0]
    lam = alpha / max(float(np.mean(np.abs(q))), 1e-8)
    diff = act - a
    loss = -lam * float(np.mean(q)) + float(np.mean(np.sum(diff * diff, axis=1)))
    _, dx = critic.backward(q1, c_q, np.full((B, 1), -lam / B))
    d_act = dx[:, s_n.shape[1] :] + 2.0 * diff / B
    grad, _ = actor.backward(pi, c_a, d_act, need_dx=False)
    return loss, grad


def awr_actor_loss(actor: GaussianActor, params, s_n, a, weights):
    """``-mean w * log pi(a|s)``; ``weights`` are constants."""
    B = s_n.shape[0]
    n = actor.mean_net.n_params
    mu, cache = actor.mean_net.forward(params[:n], s_n)
    raw = params[n:]
    ls = actor.log_std(params)
    std = np.exp(ls)
    z = (a - mu) / std
    logp = np.sum(-0.5 * z * z - ls - 0.5 * math.log(2.0 * math.pi), axis=1)
    loss = -float(np.mean(weights * logp))
    wb = (weights / B)[:, None]
    d_mu = -wb * z / std
    g_mean, _ = actor.mean_net.backward(params[:n], cache, d_mu, need_dx=False)
    d_ls = -np.sum(wb * (z * z - 1.0), axis=0)
    d_ls = d_ls * ((raw > actor.LOG_STD_MIN) & (raw < actor.LOG_STD_MAX))
    return loss, np.concatenate([g_mean, d_ls])


# --- imagination -------------------------------------------------------------


@dataclass
class DwmBank:
    """Pre-drawn DWM samples for every dataset transition.

    DWM samples depend only on ``(s_t, a_t, g_eval)``, never on the policy being
    trained, so a fixed bank of ``S`` draws per transition is an unbiased
    stand-in for sampling afresh each batch.
    """

    g_eval: list
    rewards: np.ndarray  # (G, N, S, T-1)
    states: np.ndarray  # (G, N, S, T-1, d_s)

    def draw(self, idx, rng: np.random.Generator, m: int = 1) -> list[ImaginedSeq]:
        gi = int(rng.integers(0, len(self.g_eval)))
        S = self.rewards.shape[2]
        j0 = rng.integers(0, S, size=len(idx))
        out = []
        for i in range(m):
            j = (j0 + i) % S
            out.append(ImaginedSeq(self.rewards[gi, idx, j], self.states[gi, idx, j], "dwm", self.g_eval[gi]))
        return out

    def save(self, path):
        save_checkpoint(path, {"rewards": self.rewards, "states": self.states}, {"kind": "dwm_bank", "g_eval": self.g_eval})

    @classmethod
    def load(cls, path) -> "DwmBank":
        header, arrays = load_checkpoint(path)
        return cls(header["g_eval"], arrays["rewards"], arrays["states"])


def build_dwm_bank(model: DiffusionWorldModel, dataset: OfflineDataset, g_eval, size: int,
                   seed: int = 0, chunk: int = 4096) -> DwmBank:
    s, a, _, _ = dataset.transitions()
    N, T = len(s), model.config.T
    rng = np.random.default_rng(seed)
    R = np.empty((len(g_eval), N, size, T - 1))
    S = np.empty((len(g_eval), N, size, T - 1, dataset.state_dim))
    s_rep = np.repeat(s, size, axis=0)
    a_rep = np.repeat(a, size, axis=0)
    for gi, g in enumerate(g_eval):
        for lo in range(0, len(s_rep), chunk):
            hi = min(lo + chunk, len(s_rep))
            smp = sample_dwm(model, s_rep[lo:hi], a_rep[lo:hi], g, rng)
            R.reshape(len(g_eval), N * size, T - 1)[gi, lo:hi] = smp.rewards[:, :-1]
            S.reshape(len(g_eval), N * size, T - 1, -1)[gi, lo:hi] = smp.states
    return DwmBank(list(g_eval), R, S)


class Imagination:
    """Supplies ``m`` aligned imagined sequences for a batch of transitions."""

    def __init__(self, cfg: AgentConfig, dataset: OfflineDataset, wm=None, bank: DwmBank | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.dataset = dataset
        self.wm = wm
        self.bank = bank
        if cfg.source == "dwm":
            if not isinstance(wm, DiffusionWorldModel) and bank is None:
                raise ValueError("source 'dwm' needs a diffusion world model")
            if wm is not None and cfg.H > wm.config.T - 1:
                raise ValueError(f"H={cfg.H} exceeds T-1={wm.config.T - 1}")
            if cfg.imagination == "cached" and self.bank is None:
                self.bank = build_dwm_bank(wm, dataset, cfg.g_eval, cfg.bank_size, seed=seed)
            if self.bank is not None and cfg.H > self.bank.rewards.shape[-1]:
                raise ValueError(f"H={cfg.H} exceeds the bank horizon")
        elif cfg.source == "onestep" and not isinstance(wm, OneStepModel):
            raise ValueError("source 'onestep' needs a one-step model")

    def __call__(self, idx, s, a, r, s2, agent: ActorCriticState, rng, m: int = 1) -> list[ImaginedSeq]:
        cfg = self.cfg
        if cfg.source == "data":
            return [ImaginedSeq(r[:, None], s2[:, None, :], "data")] * m
        if cfg.source == "onestep":
            pol = agent.policy(target=True)
            return [recursive_rollout(self.wm, pol, s, a, cfg.H, rng) for _ in range(m)]
        if cfg.imagination == "cached":
            return self.bank.draw(idx, rng, m)
        g = cfg.g_eval[int(rng.integers(0, len(cfg.g_eval)))]
        return [ImaginedSeq.from_dwm(sample_dwm(self.wm, s, a, g, rng), g) for _ in range(m)]


# --- targets -----------------------------------------------------------------


def _smoothed_target_action(agent: ActorCriticState, s_n, rng):
    cfg = agent.config
    act = agent.act_normalized(s_n, agent.pi_t.shadow)
    if cfg.policy_noise > 0:
        noise = np.clip(cfg.policy_noise * rng.standard_normal(act.shape), -cfg.noise_clip, cfg.noise_clip)
        act = act + noise
    return np.clip(act, -1.0, 1.0)


def _twin_min_target(agent: ActorCriticState, s_n, a):
    return np.minimum(agent.q(agent.q1_t.shadow, s_n, a), agent.q(agent.q2_t.shadow, s_n, a))


def td3_target_value(agent: ActorCriticState, r, s2, rng) -> np.ndarray:
    """``r + gamma * min_i Q_bar_i(s', clip(pi_bar(s') + eps))``; ``s2`` raw."""
    s_n = agent.normalizer.apply_obs(s2)
    return r + agent.config.gamma * _twin_min_target(agent, s_n, _smoothed_target_action(agent, s_n, rng))


def bootstrap_fn(agent: ActorCriticState, rng):
    """Value of a raw state batch used at the end of an imagined rollout."""
    if agent.config.algo == "td3bc":

        def boot(s):
            s_n = agent.normalizer.apply_obs(s)
            return _twin_min_target(agent, s_n, _smoothed_target_action(agent, s_n, rng))

    else:

        def boot(s):
            return agent.value(agent.v, agent.normalizer.apply_obs(s))[:, 0]

    return boot


def imagined_target(agent: ActorCriticState, seq: ImaginedSeq, rng) -> np.ndarray:
    cfg = agent.config
    boot = bootstrap_fn(agent, rng)
    lam = cfg.lam_value if seq.source != "data" else 1.0
    if lam == 1.0:
        return diff_mve_target(seq, cfg.H, cfg.gamma, boot)
    return lambda_return_target(seq, cfg.H, cfg.gamma, lam, boot)


# --- updates -----------------------------------------------------------------


def _check(name, value, it):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {name} at iteration {it}")
    return value


def _critic_step(agent: ActorCriticState, s_n, a, y):
    l1, g1 = critic_loss(agent.critic, agent.q1, s_n, a, y)
    l2, g2 = critic_loss(agent.critic, agent.q2, s_n, a, y)
    _check("critic loss", l1 + l2, agent.iteration)
    agent.q1 = adam_step(agent.opt_q1, agent.q1, g1)
    agent.q2 = adam_step(agent.opt_q2, agent.q2, g2)
    return l1 + l2


def td3bc_update(agent: ActorCriticState, batch, seqs: list[ImaginedSeq], rng) -> dict:
    """One critic step, a delayed actor step, and the periodic target update."""
    cfg = agent.config
    s, a = batch[0], batch[1]
    s_n = agent.normalizer.apply_obs(s)
    y = imagined_target(agent, seqs[0], rng)
    agent.iteration += 1
    report = {"critic_loss": _critic_step(agent, s_n, a, y), "target_mean": float(np.mean(y))}
    if agent.iteration % cfg.policy_delay == 0:
        loss, grad = td3bc_actor_loss(agent.actor, agent.pi, agent.critic, agent.q1, s_n, a, cfg.alpha)
        report["actor_loss"] = _check("actor loss", loss, agent.iteration)
        agent.pi = adam_step(agent.opt_pi, agent.pi, grad)
    if agent.iteration % cfg.target_every == 0:
        agent.update_targets()
    return report


def _v_based_update(agent: ActorCriticState, batch, seq: ImaginedSeq, rng, tau) -> dict:
    cfg = agent.config
    s, a = batch[0], batch[1]
    s_n = agent.normalizer.apply_obs(s)
    q_min = _twin_min_target(agent, s_n, a)
    lv, gv = value_loss(agent.value, agent.v, s_n, q_min, tau)
    _check("value loss", lv, agent.iteration + 1)
    agent.v = adam_step(agent.opt_v, agent.v, gv)
    y = imagined_target(agent, seq, rng)
    agent.iteration += 1
    report = {"value_loss": lv, "critic_loss": _critic_step(agent, s_n, a, y), "target_mean": float(np.mean(y))}
    adv = q_min - agent.value(agent.v, s_n)[:, 0]
    w = np.minimum(np.exp(np.minimum(cfg.awr_beta * adv, 50.0)), cfg.max_weight)
    la, ga = awr_actor_loss(agent.actor, agent.pi, s_n, a, w)
    report["actor_loss"] = _check("actor loss", la, agent.iteration)
    agent.pi = adam_step(agent.opt_pi, agent.pi, ga)
    if agent.iteration % cfg.target_every == 0:
        agent.update_targets()
    return report


def iql_update(agent: ActorCriticState, batch, seqs: list[ImaginedSeq], rng) -> dict:
    return _v_based_update(agent, batch, seqs[0], rng, agent.config.expectile)


def pql_update(agent: ActorCriticState, batch, seqs: list[ImaginedSeq], rng) -> dict:
    """As IQL, with MSE value regression and disagreement-penalised imagined rewards."""
    seq = pql_rewards(seqs, agent.config.kappa) if len(seqs) > 1 else seqs[0]
    return _v_based_update(agent, batch, seq, rng, None)


_UPDATES = {"td3bc": td3bc_update, "iql": iql_update, "pql": pql_update}


# --- training loop -----------------------------------------------------------


def stream_seeds(seed: int) -> tuple[int, int, int, int]:
    """Independent seeds for initialisation, imagination bank, update loop and evaluation."""
    return tuple(int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(4))


def train_offline_agent(
    dataset: OfflineDataset,
    config: AgentConfig,
    wm=None,
    seed: int = 0,
    out_dir=None,
    bank: DwmBank | None = None,
    evaluate: bool = True,
    iters: int | None = None,
    timing: bool = False,
):
    """Run the offline loop; returns ``(agent, log_rows)``.

    With ``out_dir`` set, writes ``train_log.csv`` and ``policy.ckpt``, both
    pure functions of ``(dataset, config, wm, seed)``. Wall-clock times go to
    the log, and to a separate ``timing.csv`` only when ``timing`` is set.
    """
    from .evalharness import evaluate_policy

    cfg = config
    iters = cfg.iters if iters is None else iters
    init_seed, img_seed, loop_seed, eval_seed = stream_seeds(seed)
    agent = ActorCriticState(cfg, dataset.state_dim, dataset.action_dim, dataset.normalizer, seed=init_seed)
    imagine = Imagination(cfg, dataset, wm, bank=bank, seed=img_seed)
    rng = np.random.default_rng(loop_seed)
    s, a, r, s2 = dataset.transitions()
    update = _UPDATES[cfg.algo]
    m = cfg.m if cfg.algo == "pql" else 1
    rows, clock = [], []
    acc: dict[str, list] = {}
    t0 = time.perf_counter()
    for it in range(1, iters + 1):
        idx = rng.integers(0, len(s), size=cfg.batch)
        batch = (s[idx], a[idx], r[idx], s2[idx])
        seqs = imagine(idx, *batch, agent, rng, m=m)
        for k, v in update(agent, batch, seqs, rng).items():
            acc.setdefault(k, []).append(v)
        if (cfg.eval_every and it % cfg.eval_every == 0) or it == iters:
            row = {"iteration": it}
            row.update({k: float(np.mean(v)) for k, v in sorted(acc.items())})
            acc = {}
            if evaluate:
                rep = evaluate_policy(dataset.env, agent.policy(), cfg.eval_episodes, seed=eval_seed)
                row.update(eval_return_mean=rep.mean_raw, eval_return_std=rep.std_raw,
                           eval_norm_mean=rep.mean_normalized, eval_norm_std=rep.std_normalized)
            rows.append(row)
            clock.append({"iteration": it, "wall_clock_s": time.perf_counter() - t0})
            log.info("agent %s/%s iter %d (%.1fs) %s", cfg.algo, cfg.source, it, clock[-1]["wall_clock_s"], row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "train_log.csv", rows)
        if timing:
            _write_csv(out / "timing.csv", clock)
        agent.save(out / "policy.ckpt", {"train_seed": seed})
    return agent, rows


def _write_csv(path, rows):
    keys = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
