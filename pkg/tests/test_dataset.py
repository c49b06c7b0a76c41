import json
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dwmlab.dataset import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetSizeError,
    DatasetVersionError,
    OfflineDataset,
    Trajectory,
    WindowLayout,
    compute_rtg,
    fit_normalizer,
    load_dataset,
    make_dataset,
    rtg_labels,
    sample_windows,
    save_dataset,
)


def loop_rtg(rewards, t, gamma, scale):
    total, disc = 0.0, 1.0
    for r in rewards[t:]:
        total += disc * r
        disc *= gamma
    return total / scale


@pytest.fixture(scope="module")
def small():
    return make_dataset("pointmass", "medium", episodes=10, seed=3)


def test_rtg_three_ones():
    assert compute_rtg([1, 1, 1], 0, 0.99, 1.0) == pytest.approx(2.9701, abs=1e-12)


def test_rtg_zero_gamma():
    assert compute_rtg([0.2, 0.7, 0.1], 1, 0.0, 2.0) == pytest.approx(0.35)


def test_rtg_against_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = rng.random(10)
        g, scale = rng.uniform(0.5, 0.999), rng.uniform(0.5, 5)
        assert abs(compute_rtg(r, 3, g, scale) - loop_rtg(r, 3, g, scale)) < 1e-12
    with pytest.raises(IndexError):
        compute_rtg([1.0], 1, 0.9)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.floats(0.1, 0.999), st.floats(0.1, 100))
def test_rtg_bellman_consistency(rewards, gamma, scale):
    g = rtg_labels(rewards, gamma, scale)
    for t in range(len(rewards) - 1):
        assert abs(g[t] * scale - (rewards[t] + gamma * g[t + 1] * scale)) < 1e-10


def test_window_rtg_mode():
    r = np.arange(1.0, 6.0)
    g = rtg_labels(r, 0.5, 1.0, window=2)
    np.testing.assert_allclose(g, [2.0, 3.5, 5.0, 6.5, 5.0])


def test_normalizer_constant_feature_warns():
    tr = Trajectory(np.column_stack([np.ones(50), np.arange(50.0)]), np.zeros((50, 1)), np.ones(50))
    with pytest.warns(UserWarning):
        n = fit_normalizer([tr])
    z = n.apply_obs(tr.states)
    assert np.all(z[:, 0] == 0.0) and n.obs_std[0] == 1e-6


def test_normalizer_standard_data():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((100_000, 3))
    x = (x - x.mean(0)) / x.std(0)
    tr = Trajectory(x, np.zeros((len(x), 1)), rng.standard_normal(len(x)))
    n = fit_normalizer([tr])
    assert np.all(np.abs(n.obs_mean) < 1e-9) and np.all(np.abs(n.obs_std - 1) < 1e-9)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_normalizer_round_trip(vals):
    rng = np.random.default_rng(2)
    tr = Trajectory(rng.standard_normal((20, 4)) * 3 + 1, np.zeros((20, 1)), rng.random(20))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        n = fit_normalizer([tr])
    x = np.array(vals)
    assert np.allclose(n.invert_obs(n.apply_obs(x)), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))
    assert n.invert_reward(n.apply_reward(0.3)) == pytest.approx(0.3, abs=1e-12)


def test_layout_dim_and_round_trip():
    lay = WindowLayout(4, 2, 8)
    assert lay.dim == 8 * 4 + 2 + 8 and lay.cond_dim == 6
    rng = np.random.default_rng(0)
    S, A, R = rng.random((3, 8, 4)), rng.random((3, 2)), rng.random((3, 8))
    x = lay.flatten(S, A, R)
    S2, A2, R2 = lay.unflatten(x)
    assert np.array_equal(S, S2) and np.array_equal(A, A2) and np.array_equal(R, R2)
    # [s_t | a_t | r_t | s_{t+1} | r_{t+1} | ...]
    assert lay.reward_index(0) == 6 and list(lay.state_index(1)) == [7, 8, 9, 10]


def test_windows_full_length_only_start_zero(small):
    b = sample_windows(small, 100, 64, np.random.default_rng(0))
    assert np.all(b.start == 0)
    with pytest.raises(ValueError):
        sample_windows(small, 101, 4, np.random.default_rng(0))


def test_windows_match_source_and_rtg(small):
    b = sample_windows(small, 8, 32, np.random.default_rng(4), normalized=False)
    lay = WindowLayout(small.state_dim, small.action_dim, 8)
    S, A, R = lay.unflatten(b.x0)
    for k, (i, t) in enumerate(zip(b.traj_index, b.start)):
        tr = small.trajectories[i]
        assert t + 8 <= len(tr)
        assert np.array_equal(S[k], tr.states[t : t + 8]) and np.array_equal(R[k], tr.rewards[t : t + 8])
        assert b.rtg[k] == pytest.approx(compute_rtg(tr.rewards, t, small.gamma, small.reward_scale), abs=1e-12)


def test_window_start_uniformity(small):
    b = sample_windows(small, 8, 100_000, np.random.default_rng(11))
    counts = np.bincount(b.start, minlength=93)
    assert len(counts) == 93
    assert stats.chisquare(counts).pvalue > 0.01


def test_reward_scale_and_rtg_range(small):
    disc = small.episode_returns(discounted=True)
    assert small.reward_scale == pytest.approx(np.percentile(disc, 95))
    g = small.all_rtg()
    assert g.min() > 0 and g.max() < 1.1


def test_tier_mixture_composition():
    ds = make_dataset("pointmass", "medium-expert", episodes=6, seed=0)
    assert [t.policy for t in ds.trajectories] == ["medium", "expert"] * 3
    with pytest.raises(ValueError):
        make_dataset("pointmass", "novice")


def test_dataset_determinism():
    assert make_dataset(episodes=3, seed=9) == make_dataset(episodes=3, seed=9)
    assert make_dataset(episodes=3, seed=9) != make_dataset(episodes=3, seed=10)


def test_round_trip(tmp_path, small):
    p = tmp_path / "d.dwmt"
    save_dataset(small, p)
    back = load_dataset(p)
    assert back == small
    save_dataset(back, tmp_path / "e.dwmt")
    assert p.read_bytes() == (tmp_path / "e.dwmt").read_bytes()


def _split(path):
    data = path.read_bytes()
    (hlen,) = struct.unpack("<I", data[5:9])
    return data, hlen


def test_corrupted_payload_byte(tmp_path, small):
    p = tmp_path / "d.dwmt"
    save_dataset(small, p)
    data = bytearray(p.read_bytes())
    data[-7] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetChecksumError):
        load_dataset(p)


def test_truncated_payload(tmp_path, small):
    p = tmp_path / "d.dwmt"
    save_dataset(small, p)
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(DatasetSizeError):
        load_dataset(p)


def _rewrite_header(path, mutate):
    data, hlen = _split(path)
    header = json.loads(data[9 : 9 + hlen])
    mutate(header)
    raw = json.dumps(header).encode()
    path.write_bytes(data[:5] + struct.pack("<I", len(raw)) + raw + data[9 + hlen :])


def test_header_counts_mismatch(tmp_path, small):
    p = tmp_path / "d.dwmt"
    save_dataset(small, p)
    _rewrite_header(p, lambda h: h["counts"]["lengths"].__setitem__(0, 99))
    with pytest.raises(DatasetSizeError):
        load_dataset(p)


def test_version_mismatch(tmp_path, small):
    p = tmp_path / "d.dwmt"
    save_dataset(small, p)
    _rewrite_header(p, lambda h: h.__setitem__("version", 2))
    with pytest.raises(DatasetVersionError):
        load_dataset(p)


def test_errors_are_distinct():
    kinds = {DatasetChecksumError, DatasetSizeError, DatasetVersionError}
    assert len(kinds) == 3 and all(issubclass(k, DatasetFormatError) for k in kinds)
    assert not issubclass(DatasetChecksumError, DatasetSizeError)


def test_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"HELLO")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_dataset_validation(small):
    with pytest.raises(ValueError):
        OfflineDataset(small.trajectories, small.normalizer, 0.0, 0.99, "pointmass", "medium")
    with pytest.raises(ValueError):
        OfflineDataset(small.trajectories, small.normalizer, 1.0, 0.99, "pendulum", "medium")
