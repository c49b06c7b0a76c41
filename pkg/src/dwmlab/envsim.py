"""Deterministic toy environments and scripted behaviour policies.

Two tasks, both with fixed-length episodes and rewards in (0, 1]:

* ``pointmass`` -- 2-D double integrator steered toward the origin,
  state ``(px, py, vx, vy)``.
* ``pendulum`` -- torque-limited pendulum, ``theta = 0`` is upright,
  state ``(theta, theta_dot)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EnvSpec",
    "EnvState",
    "ScriptedPolicy",
    "POINTMASS",
    "PENDULUM",
    "get_env",
    "env_step",
    "reset",
    "make_scripted_policy",
    "rollout",
]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float = 0.1
    episode_length: int = 100
    reward_range: tuple[float, float] = (0.0, 1.0)
    v_max: float = 2.0
    # pendulum physics
    gravity: float = 10.0
    length: float = 1.0
    mass: float = 1.0
    max_torque: float = 2.0
    max_speed: float = 8.0

    def __post_init__(self):
        if self.episode_length < 1 or self.state_dim < 1 or self.action_dim < 1:
            raise ValueError(f"invalid EnvSpec {self}")


POINTMASS = EnvSpec("pointmass", state_dim=4, action_dim=2)
PENDULUM = EnvSpec("pendulum", state_dim=2, action_dim=1, dt=0.05, episode_length=100)

_ENVS = {"pointmass": POINTMASS, "pendulum": PENDULUM}


def get_env(name: str) -> EnvSpec:
    try:
        return _ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(_ENVS)}") from None


@dataclass
class EnvState:
    x: np.ndarray
    step: int = 0


def wrap_angle(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    if spec.name == "pointmass":
        x = np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])
    else:
        x = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
    return EnvState(x=x, step=0)


def env_step(spec: EnvSpec, state: EnvState, action) -> tuple[EnvState, float]:
    """Advance one step. Pure: neither ``state`` nor ``action`` is modified."""
    x = np.asarray(state.x, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
        raise ValueError(f"non-finite state {x} or action {a}")
    if state.step >= spec.episode_length:
        raise ValueError(f"episode already finished (step {state.step})")
    a = np.clip(a, -1.0, 1.0)
    dt = spec.dt
    if spec.name == "pointmass":
        p, v = x[:2], x[2:]
        p_next = p + v * dt
        v_next = v + a * dt
        speed = np.linalg.norm(v_next)
        if speed > spec.v_max:
            v_next = v_next * (spec.v_max / speed)
        reward = float(np.exp(-(p_next @ p_next)))
        x_next = np.concatenate([p_next, v_next])
    elif spec.name == "pendulum":
        theta, omega = x
        u = a[0] * spec.max_torque
        acc = (spec.gravity / spec.length) * np.sin(theta) + u / (spec.mass * spec.length**2)
        omega_next = np.clip(omega + acc * dt, -spec.max_speed, spec.max_speed)
        theta_next = wrap_angle(theta + omega_next * dt)
        reward = float(np.exp(-(theta_next**2 + 0.1 * omega_next**2)))
        x_next = np.array([theta_next, omega_next])
    else:
        raise ValueError(f"unknown environment {spec.name!r}")
    return EnvState(x=x_next, step=state.step + 1), reward


@dataclass
class ScriptedPolicy:
    env: str
    level: str
    kp: float = 0.0
    kd: float = 0.0
    noise: float = 0.0
    pump: float = 0.5
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.level == "random":
            dim = 2 if self.env == "pointmass" else 1
            return self.rng.uniform(-1.0, 1.0, size=dim)
        if self.env == "pointmass":
            a = -self.kp * x[:2] - self.kd * x[2:]
            if self.noise > 0:
                a = a + self.noise * self.rng.standard_normal(2)
            return np.clip(a, -1.0, 1.0)
        return self._pendulum(x)

    def _pendulum(self, x):
        theta, omega = wrap_angle(x[0]), x[1]
        # energy relative to resting upright (g = 10, m = l = 1)
        excess = 0.5 * omega**2 + 10.0 * (np.cos(theta) - 1.0)
        if np.cos(theta) > 0.8 and abs(excess) < 3.0:
            u = -self.kp * theta - self.kd * omega
        else:
            # dE/dt = omega * torque
            u = -self.pump * excess * (1.0 if omega >= 0 else -1.0)
        if self.noise > 0:
            u = u + self.noise * self.rng.standard_normal()
        return np.clip(np.array([u]), -1.0, 1.0)


# (kp, kd, noise, energy-pump gain)
_GAINS = {
    "pointmass": {"expert": (4.0, 3.0, 0.0, 0.0), "medium": (1.5, 1.0, 0.3, 0.0)},
    "pendulum": {"expert": (10.0, 3.0, 0.0, 1.0), "medium": (6.0, 1.0, 0.3, 0.3)},
}


def make_scripted_policy(level: str, seed: int = 0, env: str = "pointmass") -> ScriptedPolicy:
    if level not in ("random", "medium", "expert"):
        raise ValueError(f"unknown policy level {level!r}")
    get_env(env)
    if level == "random":
        return ScriptedPolicy(env=env, level=level, seed=seed)
    kp, kd, noise, pump = _GAINS[env][level]
    return ScriptedPolicy(env=env, level=level, kp=kp, kd=kd, noise=noise, pump=pump, seed=seed)


def rollout(
    spec: EnvSpec,
    policy,
    seed: int,
    length: int | None = None,
    policy_tag: str | None = None,
    start: np.ndarray | None = None,
):
    """Run one episode. ``policy`` maps a state vector to an action vector."""
    from .dataset import Trajectory

    length = spec.episode_length if length is None else length
    if not 1 <= length <= spec.episode_length:
        raise ValueError(f"rollout length {length} outside [1, {spec.episode_length}]")
    rng = np.random.default_rng(seed)
    state = reset(spec, rng)
    if start is not None:
        state = EnvState(x=np.array(start, dtype=np.float64), step=0)
    states = np.empty((length, spec.state_dim))
    actions = np.empty((length, spec.action_dim))
    rewards = np.empty(length)
    for t in range(length):
        a = np.clip(np.asarray(policy(state.x), dtype=np.float64).reshape(spec.action_dim), -1.0, 1.0)
        states[t] = state.x
        actions[t] = a
        state, rewards[t] = env_step(spec, state, a)
    tag = policy_tag if policy_tag is not None else getattr(policy, "level", "custom")
    return Trajectory(states=states, actions=actions, rewards=rewards, seed=seed, policy=tag)
