"""Return-conditioned diffusion world model over state/reward windows.

The model learns ``eps_theta(x^k, k, y)`` on flattened windows (see
:class:`~dwmlab.dataset.WindowLayout`) with classifier-free guidance, and is
sampled with the first ``d_s + d_a`` coordinates clamped to the observed
``(s_t, a_t)`` after every reverse step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Normalizer, OfflineDataset, WindowLayout, _valid_starts, sample_windows, window_arrays
from .substrate import MLP, AdamState, EmaTracker, adam_step, ema_update, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "DwmConfig",
    "NoisePredictor",
    "DiffusionWorldModel",
    "DwmSample",
    "cosine_schedule",
    "forward_noise",
    "stride_steps",
    "posterior_coefficients",
    "predict_x0",
    "posterior_step",
    "dwm_loss",
    "dwm_training_step",
    "train_dwm",
    "guided_epsilon",
    "sample_dwm",
    "sample_dwm_full",
]


# --- noise schedule ----------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is the clean data: ``alpha_bar[0] = 1``, ``betas[0] = 0``."""

    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def cosine_schedule(K: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    f = np.cos(((np.arange(K + 1) / K + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    betas = np.zeros(K + 1)
    betas[1:] = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    sigma = np.zeros(K + 1)
    sigma[1:] = np.sqrt(betas[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(K=K, betas=betas, alphas=alphas, alpha_bar=alpha_bar, sigma=sigma)


def forward_noise(x0: np.ndarray, k, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``x^k = sqrt(abar_k) x^0 + sqrt(1 - abar_k) eps``; ``k`` scalar or per-row."""
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"noise shape {np.shape(eps)} != data shape {np.shape(x0)}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.K):
        raise ValueError(f"diffusion step outside [1, {schedule.K}]")
    ab = schedule.alpha_bar[k]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def stride_steps(K: int, r_infer: float) -> list[int]:
    """``N = ceil(r K)`` rounded, equally spaced steps between 1 and K (ending at K)."""
    if not 0.0 < r_infer <= 1.0:
        raise ValueError(f"r_infer must lie in (0, 1], got {r_infer}")
    n = max(1, math.ceil(r_infer * K - 1e-9))
    if n == 1:
        return [K]
    steps = sorted({int(round(v)) for v in np.linspace(1, K, n)})
    if steps[-1] != K:
        steps.append(K)
    return steps


def posterior_coefficients(schedule: NoiseSchedule, k: int, k_prev: int):
    """Coefficients of ``q(x^{k_prev} | x^k, x^0)``: ``(c_x0, c_xk, std)``.

    Adjacent steps use the schedule's own ``beta_k``; strided pairs use
    ``alpha_bar_k / alpha_bar_{k_prev}`` in its place.
    """
    if not 0 <= k_prev < k <= schedule.K:
        raise ValueError(f"need 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}")
    ab_k = schedule.alpha_bar[k]
    ab_p = schedule.alpha_bar[k_prev]
    if k_prev == k - 1:
        a_t, b_t = schedule.alphas[k], schedule.betas[k]
    else:
        a_t = ab_k / ab_p
        b_t = 1.0 - a_t
    c_x0 = np.sqrt(ab_p) * b_t / (1.0 - ab_k)
    c_xk = np.sqrt(a_t) * (1.0 - ab_p) / (1.0 - ab_k)
    std = np.sqrt(b_t * (1.0 - ab_p) / (1.0 - ab_k))
    return c_x0, c_xk, std


def predict_x0(schedule: NoiseSchedule, xk: np.ndarray, eps_hat: np.ndarray, k: int) -> np.ndarray:
    ab = schedule.alpha_bar[k]
    return (xk - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_step(
    xk: np.ndarray,
    eps_hat: np.ndarray,
    k_prev: int,
    k: int,
    schedule: NoiseSchedule,
    temperature: float,
    rng: np.random.Generator,
    x0_bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """One reverse step ``x^k -> x^{k_prev}``; noise std is scaled by ``temperature``."""
    x0_hat = predict_x0(schedule, xk, eps_hat, k)
    if x0_bounds is not None:
        x0_hat = np.clip(x0_hat, x0_bounds[0], x0_bounds[1])
    c_x0, c_xk, std = posterior_coefficients(schedule, k, k_prev)
    mean = c_x0 * x0_hat + c_xk * xk
    if k_prev == 0:
        return mean
    return mean + temperature * std * rng.standard_normal(xk.shape)


# --- noise predictor ---------------------------------------------------------


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class NoisePredictor:
    """``eps_theta([x^k | emb(k) | emb(g) | null_flag])``.

    ``emb(k)`` is a sinusoidal code through a 2-layer MLP, ``emb(g)`` a 3-layer
    MLP on the scalar RTG. Null conditioning zeroes ``g`` and sets the flag.
    """

    def __init__(self, x_dim: int, hidden: int = 256, layers: int = 3, emb_dim: int = 32,
                 activation: str = "mish"):
        self.x_dim = x_dim
        self.emb_dim = emb_dim
        self.time_mlp = MLP([emb_dim, emb_dim * 2, emb_dim], activation, output_activation=activation)
        self.rtg_mlp = MLP([1, emb_dim, emb_dim, emb_dim], activation, output_activation=activation)
        self.main = MLP([x_dim + 2 * emb_dim + 1] + [hidden] * layers + [x_dim], activation)
        self.n_time = self.time_mlp.n_params
        self.n_rtg = self.rtg_mlp.n_params
        self.n_params = self.n_time + self.n_rtg + self.main.n_params

    def arch(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "emb_dim": self.emb_dim,
            "hidden": self.main.sizes[1],
            "layers": len(self.main.sizes) - 2,
            "activation": self.main.activation,
        }

    def split(self, params):
        a, b = self.n_time, self.n_time + self.n_rtg
        return params[:a], params[a:b], params[b:]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([
            self.time_mlp.init(rng),
            self.rtg_mlp.init(rng),
            self.main.init(rng),
        ])

    def _inputs(self, xk, k, g, null):
        B = xk.shape[0]
        k = np.broadcast_to(np.asarray(k), (B,))
        null = np.broadcast_to(np.asarray(null, dtype=np.float64), (B,)).reshape(B, 1)
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), (B,)).reshape(B, 1)
        return sinusoidal_embedding(k, self.emb_dim), g * (1.0 - null), null

    def __call__(self, params, xk, k, g, null):
        pt, pg, pm = self.split(params)
        temb, g_in, null = self._inputs(xk, k, g, null)
        h = np.concatenate([xk, self.time_mlp(pt, temb), self.rtg_mlp(pg, g_in), null], axis=1)
        return self.main(pm, h)

    def forward(self, params, xk, k, g, null):
        pt, pg, pm = self.split(params)
        temb, g_in, null = self._inputs(xk, k, g, null)
        te, c_t = self.time_mlp.forward(pt, temb)
        ge, c_g = self.rtg_mlp.forward(pg, g_in)
        h = np.concatenate([xk, te, ge, null], axis=1)
        out, c_m = self.main.forward(pm, h)
        return out, (c_t, c_g, c_m)

    def backward(self, params, cache, d_out):
        pt, pg, pm = self.split(params)
        c_t, c_g, c_m = cache
        g_main, dh = self.main.backward(pm, c_m, d_out)
        e, x = self.emb_dim, self.x_dim
        g_time, _ = self.time_mlp.backward(pt, c_t, dh[:, x : x + e], need_dx=False)
        g_rtg, _ = self.rtg_mlp.backward(pg, c_g, dh[:, x + e : x + 2 * e], need_dx=False)
        return np.concatenate([g_time, g_rtg, g_main])

    def flag_weight_index(self) -> np.ndarray:
        """Flat indices of the first-layer weights reading the null-flag channel."""
        n_in, n_out = self.main.sizes[0], self.main.sizes[1]
        row = n_in - 1
        return self.n_time + self.n_rtg + row * n_out + np.arange(n_out)


# --- model -------------------------------------------------------------------


@dataclass
class DwmConfig:
    T: int = 8
    K: int = 5
    p_uncond: float = 0.25
    omega: float = 1.0
    temperature: float = 0.5
    r_infer: float = 0.5
    gamma: float = 0.99
    hidden: int = 256
    layers: int = 3
    emb_dim: int = 32
    activation: str = "mish"
    lr: float = 1e-3
    batch: int = 64
    iters: int = 20000
    ema_decay: float = 0.995
    ema_every: int = 10
    ema_start: int = 1000
    grad_clip: float = 1.0
    clip_denoised: bool = True
    train_inpaint: bool = True

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if not self.temperature >= 0.0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 < self.r_infer <= 1.0:
            raise ValueError("r_infer must lie in (0, 1]")


@dataclass
class DiffusionWorldModel:
    config: DwmConfig
    layout: WindowLayout
    normalizer: Normalizer
    net: NoisePredictor = None
    params: np.ndarray = None
    ema: EmaTracker = None
    x0_bounds: tuple | None = None
    seed: int = 0
    iteration: int = 0
    adam: AdamState = field(default=None, repr=False)

    def __post_init__(self):
        self.schedule = cosine_schedule(self.config.K)
        if self.net is None:
            self.net = NoisePredictor(self.layout.dim, self.config.hidden, self.config.layers,
                                      self.config.emb_dim, self.config.activation)
        if self.params is None:
            self.params = self.net.init(np.random.default_rng(self.seed))
        if self.ema is None:
            self.ema = EmaTracker(self.params.copy(), rate=1.0 - self.config.ema_decay)
        if self.adam is None:
            self.adam = AdamState(self.net.n_params, lr=self.config.lr)

    @classmethod
    def for_dataset(cls, dataset: OfflineDataset, config: DwmConfig, seed: int = 0) -> "DiffusionWorldModel":
        layout = WindowLayout(dataset.state_dim, dataset.action_dim, config.T)
        model = cls(config=config, layout=layout, normalizer=dataset.normalizer, seed=seed)
        if config.clip_denoised:
            model.x0_bounds = window_bounds(dataset, config.T)
        return model

    @property
    def bounds(self):
        return self.x0_bounds if self.config.clip_denoised else None

    def eps(self, xk, k, g, null, params=None):
        return self.net(self.ema.shadow if params is None else params, xk, k, g, null)

    def save(self, path, extra: dict | None = None):
        header = {
            "kind": "dwm",
            "config": asdict(self.config),
            "layout": asdict(self.layout),
            "normalizer": self.normalizer.to_dict(),
            "arch": self.net.arch(),
            "n_params": self.net.n_params,
            "seed": self.seed,
            "iteration": self.iteration,
        }
        header.update(extra or {})
        arrays = {"params": self.params, "ema": self.ema.shadow}
        if self.x0_bounds is not None:
            arrays["x0_lo"], arrays["x0_hi"] = self.x0_bounds
        save_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path) -> "DiffusionWorldModel":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "dwm":
            raise ValueError(f"{path} is not a diffusion world model checkpoint")
        config = DwmConfig(**header["config"])
        model = cls(
            config=config,
            layout=WindowLayout(**header["layout"]),
            normalizer=Normalizer.from_dict(header["normalizer"]),
            params=arrays["params"],
            seed=header["seed"],
            iteration=header["iteration"],
        )
        model.ema = EmaTracker(arrays["ema"], rate=1.0 - config.ema_decay)
        if "x0_lo" in arrays:
            model.x0_bounds = (arrays["x0_lo"], arrays["x0_hi"])
        return model


def window_bounds(dataset: OfflineDataset, T: int, margin: float = 0.05):
    """Per-coordinate range of all normalised training windows, widened by ``margin``."""
    pairs = _valid_starts(dataset, T)
    S, A, R = window_arrays(dataset, pairs[:, 0], pairs[:, 1], T)
    x = WindowLayout(dataset.state_dim, dataset.action_dim, T).flatten(S, A, R)
    lo, hi = x.min(axis=0), x.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-6)
    return lo - pad, hi + pad


# --- training ----------------------------------------------------------------


def dwm_loss(model: DiffusionWorldModel, params, x0, g, k, eps, null):
    """Noise-prediction loss for fixed draws; returns ``(loss, grad)``.

    ``loss = mean_b sum_j (eps_theta - eps)^2`` over the free coordinates. With
    ``train_inpaint`` the conditioned coordinates of ``x^k`` are the clean
    ``(s_t, a_t)``, as they are at sampling time, and excluded from the loss.
    """
    B = x0.shape[0]
    xk = forward_noise(x0, k, eps, model.schedule)
    free = slice(0, None)
    if model.config.train_inpaint:
        c = model.layout.cond_dim
        xk[:, :c] = x0[:, :c]
        free = slice(c, None)
    out, cache = model.net.forward(params, xk, k, g, null)
    diff = np.zeros_like(out)
    diff[:, free] = out[:, free] - eps[:, free]
    loss = float(np.sum(diff * diff) / B)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite diffusion loss at iteration {model.iteration}: "
            f"|x0|max={np.abs(x0).max():.3g}, |out|max={np.abs(out).max():.3g}"
        )
    grad = model.net.backward(params, cache, 2.0 * diff / B)
    return loss, grad


def dwm_training_step(model: DiffusionWorldModel, x0: np.ndarray, g: np.ndarray, rng: np.random.Generator):
    """Draw ``k ~ U{1..K}``, ``eps ~ N(0, I)``, ``b ~ Bernoulli(p_uncond)`` and take one Adam step."""
    cfg = model.config
    B = x0.shape[0]
    k = rng.integers(1, cfg.K + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    null = (rng.random(B) < cfg.p_uncond).astype(np.float64)
    loss, grad = dwm_loss(model, model.params, x0, g, k, eps, null)
    if cfg.grad_clip:
        norm = np.linalg.norm(grad)
        if norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
    model.params = adam_step(model.adam, model.params, grad)
    model.iteration += 1
    if model.iteration % cfg.ema_every == 0:
        if model.iteration < cfg.ema_start:
            model.ema.shadow = model.params.copy()
        else:
            ema_update(model.ema, model.params)
    return loss, grad


def train_dwm(model: DiffusionWorldModel, dataset: OfflineDataset, iters: int | None = None,
              seed: int = 0, log_every: int = 1000, callback=None) -> list[float]:
    cfg = model.config
    iters = cfg.iters if iters is None else iters
    rng = np.random.default_rng(seed)
    losses = []
    for it in range(iters):
        batch = sample_windows(dataset, cfg.T, cfg.batch, rng)
        loss, _ = dwm_training_step(model, batch.x0, batch.rtg, rng)
        losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("dwm iter %d loss %.4f", it + 1, float(np.mean(losses[-log_every:])))
            if callback is not None:
                callback(it + 1, losses)
    # the final shadow always reflects at least the last live parameters
    if model.iteration < cfg.ema_start:
        model.ema.shadow = model.params.copy()
    return losses


# --- sampling ----------------------------------------------------------------


def guided_epsilon(model: DiffusionWorldModel, xk, k, g_eval, omega: float, params=None):
    """``omega * eps(x, k, g) + (1 - omega) * eps(x, k, null)``."""
    B = xk.shape[0]
    if omega == 1.0:
        return model.eps(xk, k, g_eval, np.zeros(B), params)
    if omega == 0.0:
        return model.eps(xk, k, np.zeros(B), np.ones(B), params)
    cond = model.eps(xk, k, g_eval, np.zeros(B), params)
    uncond = model.eps(xk, k, np.zeros(B), np.ones(B), params)
    return omega * cond + (1.0 - omega) * uncond


@dataclass
class DwmSample:
    rewards: np.ndarray  # (B, T): r_t .. r_{t+T-1}
    states: np.ndarray  # (B, T-1, d_s): s_{t+1} .. s_{t+T-1}
    x0: np.ndarray  # (B, dim), normalised


def _decode(model: DiffusionWorldModel, x0: np.ndarray) -> DwmSample:
    S, _, R = model.layout.unflatten(x0)
    return DwmSample(
        rewards=model.normalizer.invert_reward(R),
        states=model.normalizer.invert_obs(S[:, 1:]),
        x0=x0,
    )


def _prepare(model, s_t, a_t, g_eval):
    s = np.atleast_2d(np.asarray(s_t, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    if s.shape[0] != a.shape[0]:
        raise ValueError("s_t and a_t batch sizes differ")
    g = np.broadcast_to(np.asarray(g_eval, dtype=np.float64), (s.shape[0],))
    if not np.all(np.isfinite(g)):
        raise ValueError("g_eval must be finite")
    cond = np.concatenate([model.normalizer.apply_obs(s), a], axis=1)
    return cond, g


def sample_dwm(
    model: DiffusionWorldModel,
    s_t,
    a_t,
    g_eval,
    rng: np.random.Generator,
    r_infer: float | None = None,
    omega: float | None = None,
    temperature: float | None = None,
    params=None,
    callback=None,
) -> DwmSample:
    """Stride-accelerated conditioned sampling of ``(r_t, s_{t+1}, r_{t+1}, ...)``.

    ``s_t`` is in raw units; outputs are de-normalised. ``callback(k, x)`` is
    invoked with every intermediate ``x^k`` after conditioning is applied.
    """
    cfg = model.config
    r_infer = cfg.r_infer if r_infer is None else r_infer
    omega = cfg.omega if omega is None else omega
    temperature = cfg.temperature if temperature is None else temperature
    cond, g = _prepare(model, s_t, a_t, g_eval)
    c = model.layout.cond_dim
    steps = stride_steps(cfg.K, r_infer)
    x = rng.standard_normal((cond.shape[0], model.layout.dim))
    x[:, :c] = cond
    if callback is not None:
        callback(steps[-1], x)
    for i in range(len(steps) - 1, -1, -1):
        k = steps[i]
        k_prev = steps[i - 1] if i > 0 else 0
        eps_hat = guided_epsilon(model, x, k, g, omega, params)
        x = posterior_step(x, eps_hat, k_prev, k, model.schedule, temperature, rng, model.bounds)
        x[:, :c] = cond
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite DWM sample after step {k} -> {k_prev}")
        if callback is not None:
            callback(k_prev, x)
    return _decode(model, x)


def sample_dwm_full(model: DiffusionWorldModel, s_t, a_t, g_eval, rng: np.random.Generator,
                    omega: float | None = None, temperature: float | None = None, params=None) -> DwmSample:
    """Reference sampler: every step ``K, ..., 1`` with the adjacent-step posterior."""
    cfg = model.config
    omega = cfg.omega if omega is None else omega
    temperature = cfg.temperature if temperature is None else temperature
    sch = model.schedule
    cond, g = _prepare(model, s_t, a_t, g_eval)
    c = model.layout.cond_dim
    x = rng.standard_normal((cond.shape[0], model.layout.dim))
    x[:, :c] = cond
    for k in range(cfg.K, 0, -1):
        eps_hat = guided_epsilon(model, x, k, g, omega, params)
        x0_hat = (x - np.sqrt(1.0 - sch.alpha_bar[k]) * eps_hat) / np.sqrt(sch.alpha_bar[k])
        if model.bounds is not None:
            x0_hat = np.clip(x0_hat, model.bounds[0], model.bounds[1])
        mu = (np.sqrt(sch.alpha_bar[k - 1]) * sch.betas[k] / (1.0 - sch.alpha_bar[k])) * x0_hat + (
            np.sqrt(sch.alphas[k]) * (1.0 - sch.alpha_bar[k - 1]) / (1.0 - sch.alpha_bar[k])
        ) * x
        if k > 1:
            std = np.sqrt(sch.betas[k] * (1.0 - sch.alpha_bar[k - 1]) / (1.0 - sch.alpha_bar[k]))
            x = mu + temperature * std * rng.standard_normal(x.shape)
        else:
            x = mu
        x[:, :c] = cond
    return _decode(model, x)
