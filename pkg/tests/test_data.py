import numpy as np
import pytest

from pidtune.data import (NARXConfig, block_mean, build_narx_dataset, downsample,
                          select_history_lengths, zero_phase_lowpass)
from pidtune.plant import PlantConfig, RolloutLog, random_rollout


def make_log(x, phi, u, rate=100.0):
    n = len(x)
    return RolloutLog(np.arange(n) / rate, np.asarray(x, float), np.asarray(phi, float),
                      np.asarray(u, float), np.zeros(n), np.zeros(n), rate, "duration reached")


def test_downsample_constant_signal():
    log = make_log(np.full(40, 0.3), np.full(40, -0.1), np.full(40, 2.0))
    d = downsample(log, 25.0)
    np.testing.assert_allclose(d.x, 0.3, atol=1e-12)
    np.testing.assert_allclose(d.phi, -0.1, atol=1e-12)
    np.testing.assert_allclose(d.u, 2.0)


def test_input_block_mean():
    assert block_mean(np.array([1.0, 2.0, 3.0, 4.0]), 4)[0] == 2.5
    log = make_log(np.zeros(8), np.zeros(8), [1, 2, 3, 4, 5, 6, 7, 8])
    np.testing.assert_allclose(downsample(log, 25.0).u, [2.5, 6.5])


def test_downsample_rate_and_count():
    log = make_log(np.zeros(400), np.zeros(400), np.zeros(400))
    d = downsample(log, 25.0)
    assert len(d) == 100 and d.rate == 25.0
    np.testing.assert_allclose(np.diff(d.t), 0.04)
    with pytest.raises(ValueError):
        downsample(log, 30.0)


def test_lowpass_keeps_dc():
    np.testing.assert_allclose(zero_phase_lowpass(np.full(300, 1.7), 12.5, 100.0), 1.7)


def test_lowpass_half_power_at_cutoff_twice():
    rate, fc = 100.0, 12.5
    t = np.arange(4000) / rate
    y = zero_phase_lowpass(np.sin(2 * np.pi * fc * t), fc, rate)
    mid = y[1000:3000]
    amp = np.sqrt(2 * np.mean(mid**2))
    assert amp == pytest.approx(0.5, rel=0.02)


def test_lowpass_zero_phase_symmetry():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    a = zero_phase_lowpass(x, 10.0, 100.0)[::-1]
    b = zero_phase_lowpass(x[::-1], 10.0, 100.0)
    np.testing.assert_allclose(a[50:-50], b[50:-50], atol=1e-9)


def test_lowpass_rejects_bad_cutoff():
    with pytest.raises(ValueError):
        zero_phase_lowpass(np.zeros(10), 60.0, 100.0)


def test_default_history_dimension():
    assert NARXConfig(4, 3, 7).input_dim == 14
    assert NARXConfig(1, 1, 1).input_dim == 3
    with pytest.raises(ValueError):
        NARXConfig(0, 1, 1)


def test_memoryless_config_gives_difference_model():
    x = np.arange(10.0)
    phi = np.arange(10.0) ** 2
    log = make_log(x, phi, -np.arange(10.0), rate=25.0)
    ds = build_narx_dataset([log], NARXConfig(1, 1, 1))
    assert len(ds) == 9
    np.testing.assert_array_equal(ds.inputs[3], [3.0, 9.0, -3.0])
    np.testing.assert_array_equal(ds.targets[3], [1.0, 7.0])


def test_tuple_count():
    log = make_log(np.zeros(20), np.zeros(20), np.zeros(20), rate=25.0)
    ds = build_narx_dataset([log], NARXConfig(4, 3, 7))
    assert len(ds) == 13


def test_history_order_newest_first():
    x = np.arange(10.0)
    log = make_log(x, 10 + x, 20 + x, rate=25.0)
    ds = build_narx_dataset([log], NARXConfig(2, 3, 2))
    t = ds.time_index[0]
    assert t == 2
    np.testing.assert_array_equal(ds.inputs[0], [2, 1, 12, 11, 10, 22, 21])


def test_tuples_never_cross_logs():
    a = make_log(np.zeros(6), np.zeros(6), np.zeros(6), rate=25.0)
    b = make_log(np.ones(6), np.ones(6), np.ones(6), rate=25.0)
    ds = build_narx_dataset([a, b], NARXConfig(2, 2, 2))
    assert len(ds) == 8
    np.testing.assert_array_equal(ds.targets, 0.0)


def test_short_log_skipped():
    short = make_log(np.zeros(3), np.zeros(3), np.zeros(3), rate=25.0)
    with pytest.warns(UserWarning):
        ds = build_narx_dataset([short], NARXConfig(4, 3, 7))
    assert len(ds) == 0 and ds.skipped == [0]


def synthetic_logs(lag_steps, n_logs=3, n=250, seed=0):
    """Outputs driven by the input ``lag_steps`` model steps back."""
    rng = np.random.default_rng(seed)
    logs = []
    for _ in range(n_logs):
        u = rng.normal(size=n)
        x = np.zeros(n)
        phi = np.zeros(n)
        for t in range(1, n):
            src = u[t - 1 - lag_steps] if t - 1 - lag_steps >= 0 else 0.0
            x[t] = 0.1 * src + 0.01 * rng.normal()
            phi[t] = -0.2 * src + 0.01 * rng.normal()
        logs.append(make_log(x, phi, u, rate=25.0))
    return logs


def test_selection_memoryless_plant():
    grid = [(1, 1, 1), (2, 2, 2), (2, 2, 3)]
    sel = select_history_lengths(synthetic_logs(0), grid)
    assert (sel.best.n_x, sel.best.n_phi, sel.best.n_u) == (1, 1, 1)
    assert len(sel.scores) == 3


def test_selection_picks_long_input_history_for_lagged_plant():
    cfg = PlantConfig()
    logs = [downsample(random_rollout(1.0, 20.0, cfg, seed=s), 25.0, 12.5) for s in range(4)]
    sel = select_history_lengths(logs, [(1, 1, 1), (2, 2, 3), (3, 3, 4)])
    assert sel.best.n_u >= 3


def test_selection_single_candidate():
    sel = select_history_lengths([], [(2, 2, 3)])
    assert sel.best == NARXConfig(2, 2, 3)
