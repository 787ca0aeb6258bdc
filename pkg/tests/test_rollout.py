import numpy as np
import pytest

from pidtune.checks import random_rollout_problem, rollout_gradient_report
from pidtune.gaussian import Gaussian
from pidtune.gp import GPHyperparams, TrainingSet, fit_sparse
from pidtune.pid import ErrorSelector, PIDStructure, augment, initial_state
from pidtune.rollout import (CostConfig, PIDPolicy, difference_state_space,
                             expected_saturated_cost, narx_initial_state, narx_state_space,
                             rollout, saturated_cost)


def test_cost_zero_at_target():
    c, dm, dS = expected_saturated_cost(Gaussian.point([0.0, 0.0]), np.eye(2))
    assert c == 0.0
    np.testing.assert_array_equal(dm, 0.0)


def test_cost_saturates_far_away():
    c, _, _ = expected_saturated_cost(Gaussian.point([1e3]), np.eye(1))
    assert c == pytest.approx(1.0)


def test_cost_scalar_monte_carlo_and_derivatives():
    W = np.array([[1 / 0.2**2]])
    g = Gaussian([0.2], [[0.01]])
    c, dm, dS = expected_saturated_cost(g, W)
    rng = np.random.default_rng(0)
    vals = saturated_cost(g.sample(rng, 1_000_000), W)
    assert abs(c - vals.mean()) <= 3 * vals.std() / 1000
    h = 1e-6
    fm = (expected_saturated_cost(Gaussian([0.2 + h], [[0.01]]), W)[0]
          - expected_saturated_cost(Gaussian([0.2 - h], [[0.01]]), W)[0]) / (2 * h)
    fs = (expected_saturated_cost(Gaussian([0.2], [[0.01 + h]]), W)[0]
          - expected_saturated_cost(Gaussian([0.2], [[0.01 - h]]), W)[0]) / (2 * h)
    assert dm[0] == pytest.approx(fm, rel=1e-6)
    assert dS[0, 0] == pytest.approx(fs, rel=1e-6)


def test_cost_config_validation():
    with pytest.raises(ValueError):
        CostConfig([[1.0, 2.0], [0.0, 1.0]], [[1.0]], [0.0, 0.0], 10, 0.04)
    with pytest.raises(ValueError):
        CostConfig(np.eye(2), [[1.0]], [0.0], 10, 0.04)
    with pytest.raises(ValueError):
        CostConfig(np.eye(1), [[1.0]], [0.0], -1, 0.04)


def narx_problem(H=10, seed=0):
    z0, policy, model, cost, theta = random_rollout_problem(np.random.default_rng(seed), H=H)
    return z0, policy, model, cost, theta


def test_horizon_zero_costs_initial_state_only():
    z0, policy, model, cost, theta = narx_problem()
    cost0 = CostConfig(cost.Q, cost.R, cost.target, 0, cost.dt)
    p = rollout(z0, policy, model, cost0, theta)
    assert p.per_step_cost.shape == (1,) and len(p.states) == 1
    np.testing.assert_array_equal(p.grad, 0.0)


def test_per_step_costs_in_unit_interval():
    p = rollout(*narx_problem(H=20, seed=1))
    assert np.all((p.per_step_cost >= 0) & (p.per_step_cost <= 1))
    assert p.horizon == 20


def test_rollout_is_deterministic():
    args = narx_problem(H=15, seed=2)
    a, b = rollout(*args), rollout(*args)
    assert a.total_cost == b.total_cost
    np.testing.assert_array_equal(a.grad, b.grad)


def test_zero_gains_gradient_finite():
    z0, policy, model, cost, theta = narx_problem(H=15, seed=3)
    p = rollout(z0, policy, model, cost, np.zeros_like(theta))
    assert np.all(np.isfinite(p.grad))


def test_gradient_matches_finite_differences_20_steps():
    rng = np.random.default_rng(4)
    while True:
        z0, policy, model, cost, theta = random_rollout_problem(rng, H=20)
        if policy.structure.n_gains == 5:
            break
    rep = rollout_gradient_report(z0, policy, model, cost, theta)
    assert rep.max_rel_error <= 1e-4


def test_gradient_only_for_active_gains():
    z0, policy, model, cost, theta = narx_problem(seed=5)
    p = rollout(z0, policy, model, cost, theta)
    assert p.grad.shape == (policy.structure.n_gains,)


def motionless_model(n_s=1, n_u=1):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(60, n_s + n_u))
    hp = [GPHyperparams(np.ones(n_s + n_u), 1e-3, 1e-4)] * n_s
    gp = fit_sparse(TrainingSet(X, np.zeros((60, n_s))), hp, 20, rng=rng, mean="zero",
                    include_noise=False)
    return difference_state_space(gp, n_s, n_u)


def test_zero_gains_on_motionless_plant():
    model = motionless_model()
    sel = ErrorSelector([[1.0]])
    s = PIDStructure.from_triples(1, 1, [[0, 0, "P"], [0, 0, "I"], [0, 0, "D"]])
    policy = PIDPolicy(s, sel, 0.04)
    cost = CostConfig([[1.0]], [[0.0]], [0.3], 5, 0.04)
    z0 = initial_state(Gaussian.point([0.1]), cost.target, sel)
    p = rollout(z0, policy, model, cost, np.zeros(3))
    for t, z in enumerate(p.states):
        assert z.mean[0] == pytest.approx(0.1, abs=1e-6)
        assert z.mean[1] == pytest.approx(0.2, abs=1e-6)
        # running integral dt * sum e
        assert z.mean[2] == pytest.approx(0.04 * 0.2 * t, abs=1e-6)


def test_error_blocks_copied_from_augmented_state():
    z0, policy, model, cost, theta = narx_problem(H=3, seed=7)
    p = rollout(z0, policy, model, cost, theta)
    sel, E = policy.selector, policy.selector.n_channels
    n_s = model.n_state
    nz = n_s + 2 * E
    za = augment(p.states[0], Gaussian.point(cost.target), sel, policy.dt)
    z1 = p.states[1]
    np.testing.assert_allclose(z1.mean[n_s:], za.mean[nz + E:nz + 3 * E], atol=1e-14)
    np.testing.assert_allclose(z1.cov[n_s:, n_s:],
                               za.cov[nz + E:nz + 3 * E, nz + E:nz + 3 * E], atol=1e-14)


def test_single_step_monte_carlo():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(80, 2)) * 0.5
    Y = 0.2 * np.sin(X[:, :1] + X[:, 1:]) + 0.02 * rng.normal(size=(80, 1))
    gp = fit_sparse(TrainingSet(X, Y), [GPHyperparams([0.8, 1.0], 0.3, 0.02)], 20, rng=rng)
    model = difference_state_space(gp, 1, 1)
    sel = ErrorSelector([[1.0]])
    s = PIDStructure.from_triples(1, 1, [[0, 0, "P"], [0, 0, "D"]])
    theta = np.array([1.5, 0.02])
    policy = PIDPolicy(s, sel, 0.04)
    cost = CostConfig([[1.0]], [[0.0]], [0.0], 1, 0.04)
    z0 = initial_state(Gaussian([0.3], [[0.04]]), cost.target, sel)
    z1 = rollout(z0, policy, model, cost, theta, with_gradient=False).states[1]
    # sample state -> augment -> PID -> sample GP
    n = 1_000_000
    zs = z0.sample(rng, n)
    x, e_prev = zs[:, 0], zs[:, 1]
    e = -x
    u = theta[0] * e + theta[1] * (e - e_prev) / 0.04
    mu, var = gp.predict(np.column_stack([x, u]))
    x1 = x + mu[:, 0] + np.sqrt(var[:, 0]) * rng.standard_normal(n)
    samples = np.column_stack([x1, e, 0.04 * e])
    se = samples.std(0) / np.sqrt(n)
    assert np.all(np.abs(z1.mean - samples.mean(0)) <= 4 * se + 1e-12)
    C = np.cov(samples.T)
    np.testing.assert_allclose(z1.cov, C, rtol=0.01, atol=1e-5)


def test_narx_state_space_layout():
    model = narx_state_space(None, (2, 2), 3)
    # state: x_t, x_{t-1}, phi_t, phi_{t-1}, u_{t-1}, u_{t-2}
    assert model.n_state == 6
    np.testing.assert_array_equal(model.input_index, [0, 1, 2, 3, 6, 4, 5])
    np.testing.assert_array_equal(model.measured_index, [0, 2])
    np.testing.assert_array_equal(model.prev_input_index, [4])
    s = np.arange(1.0, 7.0)
    u, delta = 10.0, np.array([0.5, -0.5])
    nxt = model.next_state @ np.concatenate([s, [u], delta])
    np.testing.assert_allclose(nxt, [1.5, 1.0, 2.5, 3.0, 10.0, 5.0])


def test_narx_initial_state_correlated_histories():
    g = narx_initial_state((2, 3), 2, [0.0, 0.1], [0.01, 0.02])
    assert g.dim == 6
    np.testing.assert_allclose(g.cov[2:5, 2:5], 0.02**2)
    assert g.cov[5, 5] == 0.0


def test_truncation_fills_with_ones():
    z0, policy, model, cost, theta = narx_problem(H=20, seed=9)
    p = rollout(z0, policy, model, cost, theta * 1e6, cov_bound=1e-6)
    assert p.truncated
    np.testing.assert_array_equal(p.per_step_cost[p.truncated_at:], 1.0)


def test_prediction_csv(tmp_path):
    p = rollout(*narx_problem(H=4, seed=10))
    p.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 6
    assert lines[0].startswith("t,z0_mean,z0_std")
