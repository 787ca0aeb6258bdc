import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidtune.checks import pid_equivalence_error, random_structure
from pidtune.gaussian import Gaussian
from pidtune.pid import (ErrorSelector, PIDStructure, augment, build_gain_matrix, control,
                         control_derivs, initial_state, pid_reference_sequence)


def scalar_pid():
    return PIDStructure.from_triples(1, 1, [[0, 0, "P"], [0, 0, "I"], [0, 0, "D"]])


def test_initial_state_zero_mean_error_block():
    S = np.diag([0.1, 0.2])
    sel = ErrorSelector(np.eye(2))
    z0 = initial_state(Gaussian(np.zeros(2), S), np.zeros(2), sel)
    np.testing.assert_array_equal(z0.mean, np.zeros(6))
    # e_{-1} = -x0 is fully (negatively) correlated with x0
    np.testing.assert_allclose(z0.cov[:2, 2:4], -S)
    np.testing.assert_allclose(z0.cov[2:4, 2:4], S)
    np.testing.assert_array_equal(z0.cov[4:, :], 0.0)


def test_initial_state_deterministic():
    sel = ErrorSelector(np.eye(2))
    z0 = initial_state(Gaussian.point([0.3, -0.1]), [1.0, 0.0], sel)
    np.testing.assert_allclose(z0.mean, [0.3, -0.1, 0.7, 0.1, 0.0, 0.0])
    np.testing.assert_array_equal(z0.cov, 0.0)


def test_initial_state_error_cov_equals_state_cov():
    mu, S = np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 2.0]])
    z0 = initial_state(Gaussian(mu, S), mu, ErrorSelector(np.eye(2)))
    np.testing.assert_allclose(z0.mean[2:4], 0.0)
    np.testing.assert_allclose(z0.cov[2:4, 2:4], S)


def tracked(x, e_prev, integral):
    return Gaussian.point(np.concatenate([[x], [e_prev], [integral]]))


def test_augment_constant_error_has_zero_derivative():
    sel = ErrorSelector([[1.0]])
    za = augment(tracked(-0.2, 0.2, 0.0), Gaussian.point([0.0]), sel, 0.04)
    assert za.mean[-1] == 0.0


def test_augment_hand_example():
    sel = ErrorSelector([[1.0]])
    # e_t = 0 - x = 0.2, e_{t-1} = 0.1, running integral 0.5
    za = augment(tracked(-0.2, 0.1, 0.5), Gaussian.point([0.0]), sel, 0.04)
    e, ie, de = za.mean[-3:]
    assert e == pytest.approx(0.2)
    assert ie == pytest.approx(0.508, abs=1e-12)
    assert de == pytest.approx(2.5, abs=1e-12)


def test_augment_desired_variance_adds_to_error():
    sel = ErrorSelector(np.eye(2))
    z = Gaussian(np.zeros(6), np.diag([0.1, 0.2, 0.0, 0.0, 0.0, 0.0]))
    a = augment(z, Gaussian.point([0.0, 0.0]), sel, 0.04)
    b = augment(z, Gaussian(np.zeros(2), 0.01 * np.eye(2)), sel, 0.04)
    e_idx = slice(8, 10)
    np.testing.assert_allclose(np.diag(b.cov[e_idx, e_idx]) - np.diag(a.cov[e_idx, e_idx]),
                               [0.01, 0.01], atol=1e-15)


def test_gain_matrix_decentralized_layout():
    mask = np.zeros((2, 2, 3), dtype=bool)
    for f in range(2):
        mask[f, f, :] = True
    A = build_gain_matrix(PIDStructure.from_mask(mask), np.arange(1.0, 7.0))
    np.testing.assert_array_equal(A, [[1, 0, 3, 0, 5, 0], [0, 2, 0, 4, 0, 6]])


def test_gain_matrix_single_input_full_layout():
    s = PIDStructure.from_mask(np.ones((1, 2, 3), dtype=bool))
    np.testing.assert_array_equal(build_gain_matrix(s, np.arange(1.0, 7.0)),
                                  [[1, 2, 3, 4, 5, 6]])


def test_gain_matrix_zero_and_wrong_size():
    s = scalar_pid()
    np.testing.assert_array_equal(build_gain_matrix(s, np.zeros(3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        build_gain_matrix(s, np.zeros(4))


def test_structure_validation():
    with pytest.raises(ValueError):
        PIDStructure(1, 1, ((0, 0, 0), (0, 0, 0)))
    with pytest.raises(ValueError):
        PIDStructure(2, 1, ((0, 0, 0),))
    with pytest.raises(ValueError):
        ErrorSelector([[0.0, 0.0]])


def test_control_zero_gains():
    za = Gaussian(np.ones(6), np.eye(6))
    u = control(za, scalar_pid(), np.zeros(3))
    assert u.mean[-1] == 0.0 and u.cov[-1, -1] == 0.0


def test_control_hand_example():
    za = Gaussian.point([0.0, 0.0, 0.0, 0.0, 0.2, 0.508, 2.5])
    u = control(za, scalar_pid(), [1.0, 0.5, 0.01])
    assert u.mean[-1] == pytest.approx(0.479, abs=1e-12)


def test_control_variance_p_only():
    s = PIDStructure.from_triples(1, 1, [[0, 0, "P"]])
    za = Gaussian(np.zeros(4), np.diag([0.0, 0.3, 0.0, 0.0]))
    u = control(za, s, [2.5])
    assert u.cov[-1, -1] == pytest.approx(2.5**2 * 0.3)


def test_control_derivs_p_only_mean():
    s = PIDStructure.from_triples(1, 1, [[0, 0, "P"]])
    za = Gaussian([0.0, 0.7, 0.0, 0.0], np.eye(4))
    d = control_derivs(za, s, [3.0])
    assert d.dmean_dtheta[0, 0] == pytest.approx(0.7)


def test_control_derivs_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = random_structure(rng)
        n = 3 * s.n_channels + 3
        B = rng.normal(size=(n, n))
        za = Gaussian(rng.normal(size=n), B @ B.T)
        theta = rng.normal(size=s.n_gains)
        d = control_derivs(za, s, theta)
        F = s.n_inputs
        h = 1e-6
        for k in range(s.n_gains):
            e = np.zeros_like(theta)
            e[k] = h
            up, dn = control(za, s, theta + e), control(za, s, theta - e)
            dmu = (up.mean[-F:] - dn.mean[-F:]) / (2 * h)
            dS = (up.cov[-F:, -F:] - dn.cov[-F:, -F:]) / (2 * h)
            dC = (up.cov[:n, -F:] - dn.cov[:n, -F:]) / (2 * h)
            for a, b in ((d.dmean_dtheta[:, k], dmu), (d.dcov_dtheta[:, k], dS.T.ravel()),
                         (d.dcross_dtheta[:, k], dC.T.ravel())):
                np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6 * np.abs(b).max())


def test_control_derivs_only_active_gains():
    s = PIDStructure.from_triples(1, 2, [[0, 1, "P"], [0, 0, "D"]])
    za = Gaussian(np.arange(1.0, 9.0), np.eye(8))
    d = control_derivs(za, s, [1.0, 2.0])
    assert d.dmean_dtheta.shape == (1, 2)
    # only e_1 (P of channel 1) and de_0 (D of channel 0) are read
    np.testing.assert_allclose(d.dmean_dtheta[0], [za.mean[3], za.mean[6]])


def test_reference_constant_error_p_only():
    s = PIDStructure.from_triples(1, 1, [[0, 0, "P"]])
    u = pid_reference_sequence(np.full((10, 1), 0.3), [2.0], s, 0.01)
    np.testing.assert_allclose(u, 0.6)


def test_reference_constant_error_i_only():
    s = PIDStructure.from_triples(1, 1, [[0, 0, "I"]])
    dt, e, ki = 0.04, 0.25, 1.5
    u = pid_reference_sequence(np.full((20, 1), e), [ki], s, dt)
    np.testing.assert_allclose(u[:, 0], ki * dt * (np.arange(20) + 1) * e, rtol=1e-12)


def test_augmented_feedback_equals_textbook_pid():
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert pid_equivalence_error(rng, steps=100) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_equivalence_property(seed):
    assert pid_equivalence_error(np.random.default_rng(seed), steps=30) <= 1e-11


def test_triples_round_trip():
    s = PIDStructure.from_triples(2, 2, [[0, 0, "P"], [1, 1, "I"], [0, 1, 2]])
    assert PIDStructure.from_triples(2, 2, s.to_triples()) == s
