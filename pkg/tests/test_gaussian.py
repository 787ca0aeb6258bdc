import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidtune.checks import appendix_errors
from pidtune.gaussian import (DimensionError, Gaussian, LinearMap, commutation,
                              independent_concat, joint_transform, linear_transform,
                              linear_transform_jvp, transform_derivs, unvec, vec)


def random_gaussian(rng, D):
    A = rng.normal(size=(D, D))
    return Gaussian(rng.normal(size=D), A @ A.T)


def test_identity_map_leaves_gaussian_unchanged():
    g = random_gaussian(np.random.default_rng(0), 3)
    y = linear_transform(g, LinearMap(np.eye(3)))
    np.testing.assert_allclose(y.mean, g.mean)
    np.testing.assert_allclose(y.cov, g.cov)


def test_linear_transform_hand_example():
    g = Gaussian([1.0, 2.0], np.diag([1.0, 4.0]))
    y = linear_transform(g, LinearMap([[2.0, 0.0], [0.0, 1.0]], [0.0, 1.0]))
    np.testing.assert_allclose(y.mean, [2.0, 3.0])
    np.testing.assert_allclose(y.cov, np.diag([4.0, 4.0]))


def test_zero_map_gives_point_mass():
    g = random_gaussian(np.random.default_rng(1), 2)
    y = linear_transform(g, LinearMap(np.zeros((3, 2)), [1.0, -2.0, 0.5]))
    np.testing.assert_allclose(y.mean, [1.0, -2.0, 0.5])
    np.testing.assert_array_equal(y.cov, np.zeros((3, 3)))


def test_joint_transform_identity_copy():
    g = random_gaussian(np.random.default_rng(2), 2)
    j = joint_transform(g, LinearMap(np.eye(2)))
    np.testing.assert_allclose(j.cov, np.block([[g.cov, g.cov], [g.cov, g.cov]]))


def test_joint_transform_cross_covariance():
    g = Gaussian([1.0, 2.0], np.diag([1.0, 4.0]))
    j = joint_transform(g, LinearMap([[2.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(j.cov[:2, 2:], [[2.0, 0.0], [0.0, 4.0]])
    j0 = joint_transform(g, LinearMap(np.zeros((3, 2))))
    np.testing.assert_array_equal(j0.cov[:2, 2:], np.zeros((2, 3)))


def test_independent_concat():
    z = independent_concat(Gaussian([0.0], [[1.0]]), Gaussian([0.0], [[1.0]]))
    np.testing.assert_array_equal(z.cov, np.eye(2))
    z = independent_concat(Gaussian([1.0], [[2.0]]), Gaussian([3.0], [[4.0]]))
    np.testing.assert_array_equal(z.mean, [1.0, 3.0])
    np.testing.assert_array_equal(z.cov, np.diag([2.0, 4.0]))


def test_dimension_errors():
    with pytest.raises(DimensionError):
        Gaussian([0.0, 1.0], np.eye(3))
    with pytest.raises(DimensionError):
        linear_transform(Gaussian([0.0], [[1.0]]), LinearMap(np.eye(2)))
    with pytest.raises(DimensionError):
        LinearMap(np.eye(2), [1.0, 2.0, 3.0])


def test_check_rejects_non_psd():
    with pytest.raises(ValueError):
        Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]).check()
    Gaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]).check()


def test_vec_is_column_major():
    A = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(vec(A), A.T.ravel())
    np.testing.assert_array_equal(unvec(vec(A), 2, 3), A)
    np.testing.assert_array_equal(commutation(2, 3) @ vec(A), vec(A.T))


def test_kron_identity_under_vec():
    rng = np.random.default_rng(3)
    A, S = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    np.testing.assert_allclose(vec(A @ S @ A.T), np.kron(A, A) @ vec(S))


def test_derivs_identity_map():
    g = random_gaussian(np.random.default_rng(4), 3)
    d = transform_derivs(g, LinearMap(np.eye(3)))
    np.testing.assert_array_equal(d.dmean_dmean, np.eye(3))
    np.testing.assert_array_equal(d.dcov_dcov, np.eye(9))


def test_derivs_offset_is_identity():
    rng = np.random.default_rng(5)
    d = transform_derivs(random_gaussian(rng, 2), LinearMap(rng.normal(size=(4, 2))))
    np.testing.assert_array_equal(d.dmean_db, np.eye(4))


def test_derivs_match_finite_differences_3x2():
    rng = np.random.default_rng(6)
    errs = appendix_errors(rng, 2, 3)
    assert max(errs.values()) <= 1e-6, errs


def test_jvp_matches_derivative_blocks():
    rng = np.random.default_rng(7)
    g, m = random_gaussian(rng, 3), LinearMap(rng.normal(size=(2, 3)), rng.normal(size=2))
    d = transform_derivs(g, m)
    dmean, dA = rng.normal(size=(1, 3)), rng.normal(size=(1, 2, 3))
    B = rng.normal(size=(3, 3))
    dcov = (B + B.T)[None]
    mu, S, C = linear_transform_jvp(g, m, dmean=dmean, dcov=dcov, dA=dA)
    np.testing.assert_allclose(mu[0], d.dmean_dmean @ dmean[0] + d.dmean_dA @ vec(dA[0]))
    np.testing.assert_allclose(vec(S[0]), d.dcov_dcov @ vec(dcov[0]) + d.dcov_dA @ vec(dA[0]))
    np.testing.assert_allclose(vec(C[0]),
                               d.dcross_dcov @ vec(dcov[0]) + d.dcross_dA @ vec(dA[0]))


def test_sample_moments_of_singular_gaussian():
    g = Gaussian([1.0, -1.0], [[1.0, 1.0], [1.0, 1.0]])
    x = g.sample(np.random.default_rng(8), 200_000)
    np.testing.assert_allclose(x.mean(0), g.mean, atol=0.01)
    np.testing.assert_allclose(np.cov(x.T), g.cov, atol=0.02)


dims = st.integers(1, 4)


@settings(max_examples=40, deadline=None)
@given(D=dims, P=dims, Q=dims, seed=st.integers(0, 2**31 - 1))
def test_composition_property(D, P, Q, seed):
    rng = np.random.default_rng(seed)
    g = random_gaussian(rng, D)
    m1 = LinearMap(rng.normal(size=(P, D)), rng.normal(size=P))
    m2 = LinearMap(rng.normal(size=(Q, P)), rng.normal(size=Q))
    a = linear_transform(linear_transform(g, m1), m2)
    b = linear_transform(g, m2.compose(m1))
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-9)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-8 * (1 + np.abs(b.cov).max()))


@settings(max_examples=40, deadline=None)
@given(D=dims, P=dims, seed=st.integers(0, 2**31 - 1))
def test_transform_preserves_psd(D, P, seed):
    rng = np.random.default_rng(seed)
    g = random_gaussian(rng, D)
    y = joint_transform(g, LinearMap(rng.normal(size=(P, D))))
    y.check(tol=1e-8)
    np.testing.assert_array_equal(y.cov, y.cov.T)
