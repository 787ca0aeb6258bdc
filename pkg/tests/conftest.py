import pytest

from pidtune.config import config_from_dict, default_config


def small_config_dict(**overrides):
    """A quick experiment: short rollouts and horizon, small model, few line searches."""
    d = default_config().to_dict()
    d.update(n_random_rollouts=2, rollout_duration=4.0, max_iterations=2,
             post_success_iterations=1)
    d["cost"]["horizon_s"] = 1.0
    d["gp"].update(n_inducing=40, max_points=150, restarts=1)
    d["optimizer"].update(max_linesearches=4)
    d["success"]["window_s"] = 1.0
    d.update(overrides)
    return d


@pytest.fixture
def small_config():
    return config_from_dict(small_config_dict())


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Store ``(passed, detail)`` for an acceptance criterion."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
