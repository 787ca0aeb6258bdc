import numpy as np
import pytest

from pidtune.optimize import OptimizerConfig, gradient_check, line_search, minimize


def quadratic(theta0):
    def fun(th):
        d = th - theta0
        return d @ d, 2 * d
    return fun


def rosenbrock(x):
    a, b = x
    f = (1 - a)**2 + 100 * (b - a * a)**2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


@pytest.mark.parametrize("method", ["BFGS", "CG"])
def test_quadratic_converges(method):
    theta0 = np.array([1.0, -2.0, 0.5])
    cfg = OptimizerConfig(method=method, max_linesearches=20, gradient_tolerance=1e-10)
    res = minimize(quadratic(theta0), cfg, np.zeros(3))
    np.testing.assert_allclose(res.theta, theta0, atol=1e-8)
    assert max(e.linesearch for e in res.trace) <= 20


def test_rosenbrock():
    cfg = OptimizerConfig(max_linesearches=200, gradient_tolerance=1e-10)
    res = minimize(rosenbrock, cfg, np.array([-1.2, 1.0]))
    assert res.value < 1e-6


@pytest.mark.parametrize("method", ["BFGS", "CG"])
def test_trace_is_monotone(method):
    cfg = OptimizerConfig(method=method, max_linesearches=60)
    res = minimize(rosenbrock, cfg, np.array([-1.2, 1.0]))
    vals = res.trace_values(0)
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_restarts_recorded_and_best_returned():
    cfg = OptimizerConfig(max_linesearches=30, restarts=2, restart_scale=0.5, seed=3)
    res = minimize(rosenbrock, cfg, np.array([-1.2, 1.0]))
    assert len(res.restart_values) == 3
    assert res.value == min(res.restart_values)
    assert {e.restart for e in res.trace} == {0, 1, 2}


def test_non_finite_start_raises():
    cfg = OptimizerConfig()
    with pytest.raises(FloatingPointError):
        minimize(lambda th: (np.nan, np.zeros(1)), cfg, np.zeros(1))


def test_failing_objective_region_is_avoided():
    # the objective is undefined beyond 2; the line search must back off
    def fun(th):
        if th[0] > 2.0:
            raise ValueError("outside the domain")
        return (th[0] - 1.5)**2, np.array([2 * (th[0] - 1.5)])
    res = minimize(fun, OptimizerConfig(max_linesearches=30), np.array([-10.0]))
    assert res.theta[0] == pytest.approx(1.5, abs=1e-6)


def test_line_search_wolfe():
    x = np.array([-1.2, 1.0])
    f0, g0 = rosenbrock(x)
    a, f, g, n = line_search(rosenbrock, x, f0, g0, -g0, 1e-3, 20)
    assert a > 0 and f <= f0 + 1e-4 * a * (g0 @ -g0)
    assert abs(g @ -g0) <= 0.9 * abs(g0 @ -g0)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(method="newton")
    with pytest.raises(ValueError):
        OptimizerConfig(max_linesearches=0)
    with pytest.raises(ValueError):
        OptimizerConfig(restarts=-1)
    assert OptimizerConfig(method="cg").method == "CG"


def test_gradient_check_quadratic():
    rep = gradient_check(quadratic(np.array([0.3, -0.7])), np.array([1.0, 2.0]))
    assert rep.max_rel_error <= 1e-8
    rep5 = gradient_check(quadratic(np.array([0.3, -0.7])), np.array([1.0, 2.0]), 1e-2, 5)
    assert rep5.max_rel_error <= 1e-10


def test_gradient_check_empty():
    rep = gradient_check(lambda th: (0.0, np.zeros(0)), np.zeros(0))
    assert rep.rel_error.size == 0 and rep.max_rel_error == 0.0


def test_gradient_check_detects_wrong_gradient():
    rep = gradient_check(lambda th: (th @ th, th), np.array([1.0, -1.0]))
    assert rep.max_rel_error > 0.1


def test_trace_csv(tmp_path):
    res = minimize(quadratic(np.ones(2)), OptimizerConfig(), np.zeros(2))
    res.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "restart,linesearch,J,grad_norm,evaluations,step"
    assert len(lines) == len(res.trace) + 1
