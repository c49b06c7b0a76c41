import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dwmlab.dataset import WindowLayout, sample_windows
from dwmlab.dwm import (
    DiffusionWorldModel,
    DwmConfig,
    cosine_schedule,
    dwm_loss,
    dwm_training_step,
    forward_noise,
    guided_epsilon,
    posterior_coefficients,
    posterior_step,
    predict_x0,
    sample_dwm,
    sample_dwm_full,
    stride_steps,
)
from dwmlab.evalharness import wm_prediction_error

from .helpers import check_grad

# closed-form cos^2 ratios for K = 5, s = 0.008 (k = 0..4); k = 5 is set by the beta clip
ALPHA_BAR_K5 = [1.0, 0.8987059205995089, 0.6474782111465038, 0.3408096397593241, 0.09404561267665379]


def tiny_model(T=3, d_s=2, d_a=1, **kw):
    from dwmlab.dataset import Normalizer

    cfg = DwmConfig(T=T, hidden=16, layers=2, emb_dim=8, clip_denoised=False, **kw)
    norm = Normalizer(np.zeros(d_s), np.ones(d_s), 0.0, 1.0)
    return DiffusionWorldModel(cfg, WindowLayout(d_s, d_a, T), norm, seed=1)


# --- schedule ----------------------------------------------------------------


def test_schedule_fixture():
    s = cosine_schedule(5)
    np.testing.assert_allclose(s.alpha_bar[:5], ALPHA_BAR_K5, rtol=0, atol=1e-14)
    assert s.betas[5] == 0.999
    assert s.alpha_bar[5] == pytest.approx(ALPHA_BAR_K5[4] * 0.001, rel=1e-12)


def closed_form_alpha_bar(K, s=0.008):
    f = lambda k: math.cos(((k / K + s) / (1 + s)) * math.pi / 2) ** 2
    return [f(k) / f(0) for k in range(K + 1)]


@pytest.mark.parametrize("K", [1, 2, 5, 10, 50, 200])
def test_schedule_shape(K):
    s = cosine_schedule(K)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.betas[1:] > 0) & (s.betas[1:] <= 0.999))
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.betas), rtol=1e-12)
    k = np.arange(1, K + 1)
    np.testing.assert_allclose(s.sigma[k] ** 2, s.betas[k] * (1 - s.alpha_bar[k - 1]) / (1 - s.alpha_bar[k]), rtol=1e-12)
    # unclipped steps follow the closed form exactly
    cf = closed_form_alpha_bar(K)
    unclipped = [i for i in range(K + 1) if i == 0 or s.betas[i] < 0.999]
    np.testing.assert_allclose(s.alpha_bar[unclipped], np.array(cf)[unclipped], rtol=1e-10)


# --- forward process ---------------------------------------------------------


def test_forward_noise_cases():
    s = cosine_schedule(5)
    x0 = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_allclose(forward_noise(x0, 3, np.zeros_like(x0), s), np.sqrt(s.alpha_bar[3]) * x0)
    eps = np.array([[0.3, 0.1, -0.7]])
    assert np.abs(forward_noise(x0, 5, eps, s) - eps).max() < 0.03
    with pytest.raises(ValueError):
        forward_noise(x0, 1, np.zeros((1, 2)), s)
    with pytest.raises(ValueError):
        forward_noise(x0, 0, eps, s)


def test_forward_noise_variance():
    s = cosine_schedule(5)
    rng = np.random.default_rng(0)
    x0 = np.array([0.7, -1.2, 2.0])
    for k in (1, 3):
        eps = rng.standard_normal((100_000, 3))
        xk = forward_noise(np.broadcast_to(x0, eps.shape), k, eps, s)
        np.testing.assert_allclose(xk.var(axis=0), 1 - s.alpha_bar[k], rtol=0.03)


# --- stride / posterior ------------------------------------------------------


def test_stride_steps():
    assert stride_steps(5, 0.5) == [1, 3, 5]
    assert stride_steps(5, 1.0) == [1, 2, 3, 4, 5]
    assert stride_steps(5, 0.2) == [5]
    assert stride_steps(1, 0.5) == [1]
    with pytest.raises(ValueError):
        stride_steps(5, 0.0)


@given(st.integers(1, 100), st.floats(0.01, 1.0))
def test_stride_steps_properties(K, r):
    steps = stride_steps(K, r)
    assert steps[-1] == K and steps == sorted(set(steps)) and steps[0] >= 1
    assert len(steps) <= max(1, math.ceil(r * K - 1e-9))


def test_x0_inversion_exact():
    s = cosine_schedule(5)
    rng = np.random.default_rng(0)
    for k in range(1, 6):
        x0 = rng.standard_normal((4, 7))
        eps = rng.standard_normal((4, 7))
        xk = forward_noise(x0, k, eps, s)
        tol = 1e-10 / math.sqrt(s.alpha_bar[k])
        np.testing.assert_allclose(predict_x0(s, xk, eps, k), x0, rtol=0, atol=tol)


def test_posterior_zero_temperature_deterministic():
    s = cosine_schedule(5)
    rng = np.random.default_rng(0)
    x, e = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    a = posterior_step(x, e, 3, 5, s, 0.0, np.random.default_rng(1))
    b = posterior_step(x, e, 3, 5, s, 0.0, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_single_step_returns_x0_hat():
    s = cosine_schedule(1)
    c_x0, c_xk, std = posterior_coefficients(s, 1, 0)
    assert c_x0 == pytest.approx(1.0, abs=1e-15) and c_xk == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(0)
    x, e = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(posterior_step(x, e, 0, 1, s, 0.5, rng), predict_x0(s, x, e, 1), atol=1e-14)


def test_stride_coefficients_reduce_to_adjacent():
    s = cosine_schedule(5)
    for k in range(1, 6):
        c_x0, c_xk, std = posterior_coefficients(s, k, k - 1)
        ab, abp = s.alpha_bar[k], s.alpha_bar[k - 1]
        at = ab / abp
        assert c_x0 == pytest.approx(math.sqrt(abp) * (1 - at) / (1 - ab), rel=1e-9)
        assert c_xk == pytest.approx(math.sqrt(at) * (1 - abp) / (1 - ab), rel=1e-9)
        assert std == pytest.approx(s.sigma[k], rel=1e-9)
    with pytest.raises(ValueError):
        posterior_coefficients(s, 3, 3)


def test_posterior_mean_is_exact_gaussian_posterior():
    """With the true noise, the stride posterior mean is E[x^j | x^k, x^0]."""
    s = cosine_schedule(5)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((1, 3))
    eps = rng.standard_normal((1, 3))
    k, j = 5, 3
    xk = forward_noise(x0, k, eps, s)
    c_x0, c_xk, std = posterior_coefficients(s, k, j)
    # joint Gaussian: x^j = sqrt(ab_j) x0 + sqrt(1-ab_j) u, x^k = sqrt(ab_k/ab_j) x^j + sqrt(1-ab_k/ab_j) v
    ab_j, ab_k = s.alpha_bar[j], s.alpha_bar[k]
    a = ab_k / ab_j
    cov_jk = math.sqrt(a) * (1 - ab_j)
    var_k = 1 - ab_k
    mean = math.sqrt(ab_j) * x0 + cov_jk / var_k * (xk - math.sqrt(ab_k) * x0)
    var = (1 - ab_j) - cov_jk**2 / var_k
    np.testing.assert_allclose(c_x0 * x0 + c_xk * xk, mean, atol=1e-12)
    assert std**2 == pytest.approx(var, rel=1e-9)


# --- noise predictor / training ----------------------------------------------


def test_zero_predictor_loss_is_window_dim():
    m = tiny_model(T=8, d_s=4, d_a=2, train_inpaint=False)
    rng = np.random.default_rng(0)
    B = 20_000
    x0 = rng.standard_normal((B, m.layout.dim))
    loss, _ = dwm_loss(m, np.zeros(m.net.n_params), x0, np.zeros(B), rng.integers(1, 6, B),
                       rng.standard_normal(x0.shape), np.zeros(B))
    assert loss == pytest.approx(m.layout.dim, rel=0.05)
    m2 = tiny_model(T=8, d_s=4, d_a=2, train_inpaint=True)
    loss2, _ = dwm_loss(m2, np.zeros(m2.net.n_params), x0, np.zeros(B), rng.integers(1, 6, B),
                        rng.standard_normal(x0.shape), np.zeros(B))
    assert loss2 == pytest.approx(m2.layout.dim - m2.layout.cond_dim, rel=0.05)


class _Oracle:
    """Stands in for the network and returns the injected noise."""

    def __init__(self, net, eps):
        self.net, self.eps, self.nulls = net, eps, []

    def forward(self, params, xk, k, g, null):
        self.nulls.append(np.array(null, dtype=float))
        return self.eps.copy(), None

    def backward(self, params, cache, d):
        return np.zeros(self.net.n_params)


def test_perfect_predictor_zero_loss():
    m = tiny_model(train_inpaint=False)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((8, m.layout.dim))
    eps = rng.standard_normal(x0.shape)
    m.net = _Oracle(m.net, eps)
    loss, _ = dwm_loss(m, m.params, x0, np.zeros(8), np.full(8, 2), eps, np.zeros(8))
    assert loss == 0.0


def test_p_uncond_one_always_null():
    m = tiny_model(p_uncond=1.0)
    spy = _Oracle(m.net, np.zeros((16, m.layout.dim)))
    real = m.net
    m.net = spy
    spy.n_params = real.n_params
    rng = np.random.default_rng(0)
    dwm_training_step(m, rng.standard_normal((16, m.layout.dim)), rng.random(16), rng)
    assert np.all(spy.nulls[0] == 1.0)


def test_diffusion_loss_gradient():
    for inpaint in (True, False):
        m = tiny_model(train_inpaint=inpaint)
        rng = np.random.default_rng(4)
        B = 6
        x0 = rng.standard_normal((B, m.layout.dim))
        k = rng.integers(1, 6, B)
        eps = rng.standard_normal(x0.shape)
        null = (rng.random(B) < 0.5).astype(float)
        g = rng.random(B)
        check_grad(lambda p: dwm_loss(m, p, x0, g, k, eps, null), m.params, rng)


def test_null_flag_gets_no_gradient_when_conditioned():
    m = tiny_model()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((32, m.layout.dim))
    _, grad = dwm_loss(m, m.params, x0, rng.random(32), rng.integers(1, 6, 32),
                       rng.standard_normal(x0.shape), np.zeros(32))
    idx = m.net.flag_weight_index()
    assert np.all(grad[idx] == 0.0)
    _, grad = dwm_loss(m, m.params, x0, rng.random(32), rng.integers(1, 6, 32),
                       rng.standard_normal(x0.shape), np.ones(32))
    assert np.any(grad[idx] != 0.0)


def test_null_condition_ignores_g():
    m = tiny_model()
    x = np.random.default_rng(0).standard_normal((3, m.layout.dim))
    a = m.eps(x, 2, np.array([0.1, 5.0, -3.0]), np.ones(3))
    b = m.eps(x, 2, np.zeros(3), np.ones(3))
    assert np.array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    m = tiny_model()
    x0 = np.full((2, m.layout.dim), np.nan)
    with pytest.raises(FloatingPointError):
        dwm_loss(m, m.params, x0, np.zeros(2), np.ones(2, dtype=int), np.zeros_like(x0), np.zeros(2))


def test_frozen_batch_loss_decreases(pm_medium):
    cfg = DwmConfig(hidden=64, layers=2, emb_dim=16)
    m = DiffusionWorldModel.for_dataset(pm_medium, cfg, seed=0)
    rng = np.random.default_rng(0)
    b = sample_windows(pm_medium, 8, 64, rng)
    losses = [dwm_training_step(m, b.x0, b.rtg, rng)[0] for _ in range(500)]
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")[::50]
    assert np.all(np.diff(smooth) < 0), smooth


def test_ema_cadence():
    m = tiny_model(ema_every=10, ema_start=20, ema_decay=0.9)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, m.layout.dim))
    g = rng.random(4)
    for it in range(1, 41):
        before = m.ema.shadow.copy()
        dwm_training_step(m, x0, g, rng)
        if it % 10:
            assert np.array_equal(m.ema.shadow, before)
        elif it < 20:
            assert np.array_equal(m.ema.shadow, m.params)
        else:
            assert np.array_equal(m.ema.shadow, before + m.ema.rate * (m.params - before))


def test_training_determinism():
    def run():
        m = tiny_model()
        rng = np.random.default_rng(7)
        for _ in range(20):
            dwm_training_step(m, rng.standard_normal((4, m.layout.dim)), rng.random(4), rng)
        return m.params

    assert run().tobytes() == run().tobytes()


def test_checkpoint_round_trip(tmp_path, quick_dwm):
    quick_dwm.save(tmp_path / "m.ckpt")
    back = DiffusionWorldModel.load(tmp_path / "m.ckpt")
    s = np.zeros((2, 4))
    a = np.zeros((2, 2))
    x = sample_dwm(quick_dwm, s, a, 0.8, np.random.default_rng(0)).x0
    y = sample_dwm(back, s, a, 0.8, np.random.default_rng(0)).x0
    assert np.array_equal(x, y)


# --- guidance and sampling ---------------------------------------------------


def test_guided_epsilon_branches():
    m = tiny_model()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, m.layout.dim))
    g = rng.random(5)
    cond = m.eps(x, 3, g, np.zeros(5))
    unc = m.eps(x, 3, np.zeros(5), np.ones(5))
    assert np.array_equal(guided_epsilon(m, x, 3, g, 1.0), cond)
    assert np.array_equal(guided_epsilon(m, x, 3, g, 0.0), unc)
    np.testing.assert_allclose(guided_epsilon(m, x, 3, g, 2.0), 2 * cond - unc, atol=1e-14)


def test_inpainting_fixed_at_every_step():
    m = tiny_model(T=4, d_s=2, d_a=1)
    rng = np.random.default_rng(0)
    s = rng.standard_normal((50, 2))
    a = rng.uniform(-1, 1, (50, 1))
    want = np.concatenate([m.normalizer.apply_obs(s), a], axis=1)
    seen = []

    def cb(k, x):
        seen.append(k)
        assert np.array_equal(x[:, :3], want)

    sample_dwm(m, s, a, 0.5, rng, r_infer=1.0, callback=cb)
    assert seen == [5, 4, 3, 2, 1, 0]


def test_full_ratio_matches_reference_sampler():
    for clip in (False, True):
        m = tiny_model(T=4)
        if clip:
            m.config.clip_denoised = True
            m.x0_bounds = (-np.ones(m.layout.dim), np.ones(m.layout.dim))
        s = np.random.default_rng(1).standard_normal((6, 2))
        a = np.zeros((6, 1))
        x = sample_dwm(m, s, a, 0.7, np.random.default_rng(5), r_infer=1.0, omega=1.5).x0
        y = sample_dwm_full(m, s, a, 0.7, np.random.default_rng(5), omega=1.5).x0
        assert x.tobytes() == y.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sample_output_shapes_and_errors():
    m = tiny_model(T=4, d_s=2, d_a=1)
    out = sample_dwm(m, np.zeros((3, 2)), np.zeros((3, 1)), 0.5, np.random.default_rng(0))
    assert out.rewards.shape == (3, 4) and out.states.shape == (3, 3, 2)
    with pytest.raises(ValueError):
        sample_dwm(m, np.zeros((3, 2)), np.zeros((3, 1)), np.nan, np.random.default_rng(0))
    m.params[:] = np.nan
    m.ema.shadow[:] = np.nan
    with pytest.raises(FloatingPointError):
        sample_dwm(m, np.zeros((3, 2)), np.zeros((3, 1)), 0.5, np.random.default_rng(0))


def test_config_validation():
    for bad in (dict(T=1), dict(K=0), dict(p_uncond=1.5), dict(r_infer=0.0), dict(temperature=-1.0)):
        with pytest.raises(ValueError):
            DwmConfig(**bad)


def test_trained_model_beats_untrained(pm_medium, quick_dwm):
    untrained = DiffusionWorldModel.for_dataset(pm_medium, quick_dwm.config, seed=0)
    e_trained = wm_prediction_error(quick_dwm, pm_medium, 0.8, 8, 200, seed=0).eps_s
    e_untrained = wm_prediction_error(untrained, pm_medium, 0.8, 8, 200, seed=0).eps_s
    assert e_trained * 10 <= e_untrained, (e_trained, e_untrained)
