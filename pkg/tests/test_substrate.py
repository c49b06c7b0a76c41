import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dwmlab.substrate import (
    MLP,
    AdamState,
    CheckpointError,
    EmaTracker,
    adam_step,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)

from .helpers import check_grad


def scalar_adam(p, grads_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grads_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out


def test_adam_zero_grad_keeps_params():
    st_ = AdamState(3, lr=0.1)
    st_.m[:] = [0.5, -0.2, 0.1]
    st_.v[:] = [0.3, 0.3, 0.3]
    p = np.array([1.0, 2.0, 3.0])
    m0, v0 = st_.m.copy(), st_.v.copy()
    # nonzero moments still move params; with fresh state and g=0 nothing moves
    fresh = AdamState(3, lr=0.1)
    assert np.array_equal(adam_step(fresh, p, np.zeros(3)), p)
    adam_step(st_, p, np.zeros(3))
    assert np.all(np.abs(st_.m) < np.abs(m0))
    assert np.all(st_.v < v0)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.01, 1e4])
    p = np.zeros(3)
    new = adam_step(AdamState(3, lr=0.01), p, g)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-5)


def test_adam_quadratic_matches_scalar_oracle():
    state = AdamState(1, lr=0.1)
    p = np.array([1.0])
    got = []
    for _ in range(3):
        p = adam_step(state, p, 2.0 * p)
        got.append(p[0])
    want = scalar_adam(1.0, lambda x: 2.0 * x, 3, 0.1)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
    assert got[0] > got[1] > got[2]
    assert state.step == 3


def test_adam_rejects_bad_inputs():
    with pytest.raises(ValueError):
        adam_step(AdamState(2), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        adam_step(AdamState(2, lr=0.0), np.zeros(2), np.zeros(2))


def test_ema_edge_rates():
    live = np.array([1.0, -2.0])
    t = EmaTracker(np.zeros(2), rate=0.0)
    ema_update(t, live)
    assert np.array_equal(t.shadow, np.zeros(2))
    t = EmaTracker(np.zeros(2), rate=1.0)
    ema_update(t, live)
    assert np.array_equal(t.shadow, live)


def test_ema_two_steps():
    t = EmaTracker(np.zeros(1), rate=0.005)
    ema_update(t, np.ones(1))
    ema_update(t, np.ones(1))
    assert abs(t.shadow[0] - 0.009975) < 1e-15


def test_ema_rate_validated():
    with pytest.raises(ValueError):
        EmaTracker(np.zeros(1), rate=1.5)
    t = EmaTracker(np.zeros(1), rate=0.5)
    t.rate = -0.1
    with pytest.raises(ValueError):
        ema_update(t, np.ones(1))
    with pytest.raises(ValueError):
        ema_update(EmaTracker(np.zeros(2)), np.ones(3))


@given(st.floats(0.0, 1.0), st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_ema_is_convex_combination(rate, vals):
    live = np.array(vals)
    t = EmaTracker(np.zeros(len(vals)), rate=rate)
    ema_update(t, live)
    np.testing.assert_allclose(t.shadow, rate * live, atol=1e-12)


def test_mlp_param_count():
    net = MLP([3, 16, 8, 2])
    assert net.n_params == 3 * 16 + 16 + 16 * 8 + 8 + 8 * 2 + 2
    with pytest.raises(ValueError):
        net(np.zeros(net.n_params - 1), np.zeros((1, 3)))


@pytest.mark.parametrize("act", ["relu", "tanh", "silu", "mish", "softplus"])
def test_mlp_gradient_check(act):
    rng = np.random.default_rng(0)
    net = MLP([4, 12, 12, 3], act, output_activation="tanh" if act == "tanh" else "identity")
    params = net.init(rng)
    x = rng.standard_normal((6, 4))
    w = rng.standard_normal((6, 3))

    def loss(p):
        y, cache = net.forward(p, x)
        g, _ = net.backward(p, cache, w)
        return float(np.sum(w * y)), g

    check_grad(loss, params, rng)


def test_mlp_input_gradient():
    rng = np.random.default_rng(1)
    net = MLP([3, 10, 1], "mish")
    p = net.init(rng)
    x = rng.standard_normal((1, 3))
    _, cache = net.forward(p, x)
    _, dx = net.backward(p, cache, np.ones((1, 1)))
    for i in range(3):
        e = np.zeros_like(x)
        e[0, i] = 1e-6
        fd = (net(p, x + e)[0, 0] - net(p, x - e)[0, 0]) / 2e-6
        assert abs(fd - dx[0, i]) < 1e-7


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = MLP([2, 8, 1])
        p = net.init(rng)
        st_ = AdamState(net.n_params)
        for _ in range(50):
            x = rng.standard_normal((16, 2))
            y, c = net.forward(p, x)
            g, _ = net.backward(p, c, 2 * (y - x[:, :1]) / 16)
            p = adam_step(st_, p, g)
        return p

    assert run().tobytes() == run().tobytes()


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"seed": 3})
    header, back = load_checkpoint(tmp_path / "x.ckpt")
    assert header["seed"] == 3
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": np.ones(4)})
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
