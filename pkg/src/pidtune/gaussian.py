"""Algebra of Gaussian random vectors under affine maps.

Matrix-valued derivatives use column-major (Fortran order) vectorization
throughout: ``vec(A)`` stacks the columns of ``A``, so entry ``A[i, j]`` of a
``P x D`` matrix sits at position ``i + j * P``. With this convention the
familiar identities hold: ``vec(A S A^T) = (A kron A) vec(S)`` and
``A mu = (mu^T kron I) vec(A)``.
"""

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes of Gaussians and maps do not line up."""


def symmetrize(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def vec(a):
    """Column-major vectorization of the trailing two axes."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (-1,))


def unvec(v, rows, cols):
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal ``N(mean, cov)``.

    Covariances may be rank deficient; state augmentation produces singular
    joint covariances by construction.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"mean of shape {mean.shape} incompatible with cov {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    @classmethod
    def point(cls, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(value, np.zeros((value.size, value.size)))

    def check(self, tol=1e-8):
        """Raise ``ValueError`` unless ``cov`` is symmetric and PSD."""
        cov = self.cov
        scale = 1.0 + np.max(np.abs(cov), initial=0.0)
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * scale:
            raise ValueError("covariance is not symmetric")
        if self.dim:
            lam = np.linalg.eigvalsh(symmetrize(cov))[0]
            if lam < -tol * max(np.trace(cov) / self.dim, 1e-300):
                raise ValueError(f"covariance is not PSD (min eigenvalue {lam:g})")
        return self

    def marginal(self, idx):
        idx = np.asarray(idx)
        return Gaussian(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def sample(self, rng, n):
        # eigh tolerates singular covariances where cholesky would not
        lam, vecs = np.linalg.eigh(symmetrize(self.cov))
        root = vecs * np.sqrt(np.clip(lam, 0.0, None))
        return self.mean + rng.standard_normal((n, self.dim)) @ root.T


@dataclass(frozen=True)
class LinearMap:
    """Affine map ``y = A x + b``."""

    A: np.ndarray
    b: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.zeros(A.shape[0]) if self.b is None else np.atleast_1d(
            np.asarray(self.b, dtype=float))
        if b.shape != (A.shape[0],):
            raise DimensionError(f"offset of shape {b.shape} for map {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return self.A.shape

    def compose(self, inner):
        """The map ``x -> self(inner(x))``."""
        return LinearMap(self.A @ inner.A, self.A @ inner.b + self.b)


def _check(g, m):
    if m.A.shape[1] != g.dim:
        raise DimensionError(
            f"map with {m.A.shape[1]} columns applied to a {g.dim}-dim Gaussian"
        )


def linear_transform(g, m):
    """Distribution of ``A X + b`` for ``X ~ g``."""
    _check(g, m)
    return Gaussian(m.A @ g.mean + m.b, symmetrize(m.A @ g.cov @ m.A.T))


def joint_transform(g, m):
    """Joint distribution of ``(X, A X + b)``.

    The cross-covariance block is ``cov(X, Y) = Sigma_X A^T``.
    """
    y = linear_transform(g, m)
    cross = g.cov @ m.A.T
    cov = np.block([[g.cov, cross], [cross.T, y.cov]])
    return Gaussian(np.concatenate([g.mean, y.mean]), cov)


def independent_concat(*gs):
    """Stack independent Gaussians; off-diagonal blocks are exactly zero."""
    mean = np.concatenate([g.mean for g in gs])
    cov = np.zeros((mean.size, mean.size))
    k = 0
    for g in gs:
        cov[k:k + g.dim, k:k + g.dim] = g.cov
        k += g.dim
    return Gaussian(mean, cov)


@dataclass(frozen=True)
class GaussianDerivs:
    """Partial derivatives of ``Y = A X + b`` statistics (column-major vec).

    Shapes for ``X`` in R^D and ``Y`` in R^P:

    - ``dmean_dmean``: (P, D), equals ``A``
    - ``dcov_dcov``: (P*P, D*D), equals ``kron(A, A)``
    - ``dmean_dA``: (P, P*D), equals ``kron(mu_X^T, I_P)``
    - ``dmean_db``: (P, P), identity
    - ``dcov_dA``: (P*P, P*D)
    - ``dcross_dA``: (D*P, P*D), derivative of ``cov(X, Y) = Sigma_X A^T``
    - ``dcross_dcov``: (D*P, D*D)
    - ``dC_dA``: (D*P, P*D), the commutation matrix mapping ``vec(A)`` to
      ``vec(A^T)``
    """

    dmean_dmean: np.ndarray
    dcov_dcov: np.ndarray
    dmean_dA: np.ndarray
    dmean_db: np.ndarray
    dcov_dA: np.ndarray
    dcross_dA: np.ndarray
    dcross_dcov: np.ndarray
    dC_dA: np.ndarray


def commutation(rows, cols):
    """``K`` with ``K @ vec(A) == vec(A.T)`` for ``A`` of shape (rows, cols)."""
    K = np.zeros((rows * cols, rows * cols))
    for i in range(rows):
        for j in range(cols):
            K[j + i * cols, i + j * rows] = 1.0
    return K


def transform_derivs(g, m):
    _check(g, m)
    A, S, mu = m.A, g.cov, g.mean
    P, D = A.shape
    IP, ID = np.eye(P), np.eye(D)

    # d(Sigma_Y)_{kl} / dA_{ij} = delta_{ki} (S A^T)_{jl} + delta_{li} (A S)_{kj}
    SAt = S @ A.T
    AS = A @ S
    t = (np.einsum("ki,jl->klij", IP, SAt) + np.einsum("li,kj->klij", IP, AS))
    # rows vec over (k, l) column-major -> index k + l*P; cols (i, j) -> i + j*P
    dcov_dA = t.transpose(1, 0, 3, 2).reshape(P * P, P * D)

    Kpd = commutation(P, D)
    return GaussianDerivs(
        dmean_dmean=A.copy(),
        dcov_dcov=np.kron(A, A),
        dmean_dA=np.kron(mu[None, :], IP),
        dmean_db=IP,
        dcov_dA=dcov_dA,
        dcross_dA=np.kron(IP, S) @ Kpd,
        dcross_dcov=np.kron(A, ID),
        dC_dA=Kpd,
    )


def linear_transform_jvp(g, m, dmean=None, dcov=None, dA=None, db=None):
    """Push a batch of tangents through ``Y = A X + b``.

    Tangents carry a leading batch axis ``K``: ``dmean`` (K, D), ``dcov``
    (K, D, D), ``dA`` (K, P, D), ``db`` (K, P); any may be None (zero).
    This is the contraction of the blocks of :func:`transform_derivs` with the
    tangents, without materializing the Kronecker-sized matrices.

    Returns ``(dmean_Y, dcov_Y, dcross)`` where ``dcross`` is the tangent of
    ``cov(X, Y) = Sigma_X A^T`` with shape (K, D, P).
    """
    _check(g, m)
    A, S, mu = m.A, g.cov, g.mean
    P, D = A.shape
    K = next((t.shape[0] for t in (dmean, dcov, dA, db) if t is not None), 0)
    dmu = np.zeros((K, P))
    dS = np.zeros((K, P, P))
    dC = np.zeros((K, D, P))
    if dmean is not None:
        dmu += dmean @ A.T
    if db is not None:
        dmu += db
    if dcov is not None:
        dS += A @ dcov @ A.T
        dC += dcov @ A.T
    if dA is not None:
        dmu += dA @ mu
        ASdA = A @ S @ np.swapaxes(dA, 1, 2)
        dS += ASdA + np.swapaxes(ASdA, 1, 2)
        dC += S @ np.swapaxes(dA, 1, 2)
    return dmu, dS, dC
