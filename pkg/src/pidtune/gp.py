"""Sparse Gaussian-process dynamics models with moment matching.

One GP per output dimension, squared-exponential ARD kernel

    k(x, x') = sf^2 exp(-1/2 (x - x')^T diag(ls)^-2 (x - x'))

and the FITC (pseudo-input) sparse approximation. A fitted model is reduced to
the form shared by full and sparse GPs::

    mean(x) = W x + c + k(x, Z) @ beta
    var(x)  = sf^2 - k(x, Z) @ iK @ k(Z, x)  (+ sn^2)

which is what moment matching needs. The prior mean ``W x + c`` is either
zero, the target mean (``W = 0``), or a least-squares linear fit; in the last
case the kernel only has to explain the residual, which makes the model
extrapolate linearly instead of reverting to a constant away from the data.
"""

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.cluster.vq import kmeans2

from .gaussian import symmetrize

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def se_kernel(X1, X2, lengthscales, signal_std):
    A = X1 / lengthscales
    B = X2 / lengthscales
    d2 = (np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2 * A @ B.T)
    return signal_std**2 * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass
class GPHyperparams:
    lengthscales: np.ndarray
    signal_std: float
    noise_std: float

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(self.lengthscales <= 0) or self.signal_std <= 0 or self.noise_std <= 0:
            raise ValueError("GP hyperparameters must be strictly positive")

    def to_log(self):
        return np.concatenate([np.log(self.lengthscales),
                               [np.log(self.signal_std), np.log(self.noise_std)]])

    @classmethod
    def from_log(cls, p):
        p = np.asarray(p, dtype=float)
        return cls(np.exp(p[:-2]), float(np.exp(p[-2])), float(np.exp(p[-1])))

    def to_dict(self):
        return {"lengthscales": self.lengthscales.tolist(),
                "signal_std": self.signal_std, "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["lengthscales"]), d["signal_std"], d["noise_std"])


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        t = np.asarray(self.targets, dtype=float)
        self.targets = t[:, None] if t.ndim == 1 else t
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in length")
        if self.inputs.shape[0] < 2:
            raise ValueError("need at least two training points")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training data contains non-finite values")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def target_mean(self):
        return self.targets.mean(0)

    @property
    def target_std(self):
        return self.targets.std(0)


class Standardizer:
    """Column-wise z-scoring; zero-variance columns are left unscaled."""

    def __init__(self, data):
        data = np.atleast_2d(np.asarray(data, dtype=float))
        self.mean = data.mean(0)
        self.std = data.std(0)
        self.scale = self.std.copy()
        flat = ~(self.std > 1e-12 * np.maximum(1.0, np.abs(self.mean)))
        if np.any(flat):
            warnings.warn(f"columns {np.flatnonzero(flat).tolist()} have zero "
                          "variance and are left unscaled", stacklevel=2)
            self.scale[flat] = 1.0
            self.mean = np.where(flat, 0.0, self.mean)

    def transform(self, data):
        return (data - self.mean) / self.scale

    def inverse(self, data):
        return data * self.scale + self.mean


# --------------------------------------------------------------------------
# Hyperparameters by maximum marginal likelihood


def log_marginal_likelihood(log_params, X, y):
    """Full-GP log marginal likelihood and its gradient in log-parameters."""
    hp = GPHyperparams.from_log(log_params)
    n, D = X.shape
    Kf = se_kernel(X, X, hp.lengthscales, hp.signal_std)
    K = Kf + hp.noise_std**2 * np.eye(n)
    L = linalg.cholesky(K, lower=True)
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    WK = W * Kf
    grad = np.empty(D + 2)
    Xs = X / hp.lengthscales
    for d in range(D):
        diff2 = (Xs[:, d, None] - Xs[None, :, d]) ** 2
        grad[d] = 0.5 * np.sum(WK * diff2)
    grad[D] = np.sum(WK)
    grad[D + 1] = hp.noise_std**2 * np.trace(W)
    return lml, grad


_LOG_BOUNDS_NORMALIZED = {"ls": (np.log(1e-2), np.log(1e3)),
                          "sf": (np.log(1e-3), np.log(1e2)),
                          "sn": (np.log(1e-3), np.log(1e1))}


def _fit_one(X, y, restarts, rng):
    D = X.shape[1]
    bounds = [_LOG_BOUNDS_NORMALIZED["ls"]] * D + [
        _LOG_BOUNDS_NORMALIZED["sf"], _LOG_BOUNDS_NORMALIZED["sn"]]
    init = np.concatenate([np.log(np.full(D, np.sqrt(D))), [0.0, np.log(0.1)]])

    def neg(p):
        try:
            v, g = log_marginal_likelihood(p, X, y)
        except linalg.LinAlgError:
            return 1e10, np.zeros_like(p)
        return -v, -g

    f0 = neg(init)[0]
    best_p, best_f = init, f0
    for r in range(max(restarts, 1)):
        start = init if r == 0 else init + rng.normal(0.0, 0.7, size=init.size)
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        res = optimize.minimize(neg, start, jac=True, method="L-BFGS-B",
                                bounds=bounds, options={"maxiter": 300})
        if np.isfinite(res.fun) and res.fun < best_f:
            best_p, best_f = res.x, res.fun
    if not best_f < f0:
        logger.warning("hyperparameter optimization did not improve on the "
                       "heuristic initialization; keeping it")
    return best_p


MEAN_FUNCTIONS = ("zero", "constant", "linear")


def fit_prior_mean(X, Y, kind="linear"):
    """Prior mean ``W x + c`` fitted to the targets.

    ``linear`` is plain least squares. No ridge: consecutive history samples
    are nearly collinear, and shrinkage would remove exactly the difference
    (velocity) directions the dynamics depend on. Returns ``W`` (E, D) and
    ``c`` (E,) in data units.
    """
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    E, D = Y.shape[1], X.shape[1]
    if kind == "zero":
        return np.zeros((E, D)), np.zeros(E)
    if kind == "constant":
        return np.zeros((E, D)), Y.mean(0)
    if kind != "linear":
        raise ValueError(f"unknown mean function {kind!r}; choose from {MEAN_FUNCTIONS}")
    xm, ym = X.mean(0), Y.mean(0)
    W = np.linalg.lstsq(X - xm, Y - ym, rcond=None)[0].T
    return W, ym - W @ xm


def fit_hyperparameters(data, restarts=3, max_points=800, rng=None, mean="linear"):
    """Per-output maximum-likelihood hyperparameters, in data units.

    The kernel is fitted to the residual of the prior mean (see
    :func:`fit_prior_mean`). The optimization runs on z-scored inputs and
    targets (a random subset of at most ``max_points`` rows) and the result is
    mapped back to data units.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    X, Y = data.inputs, data.targets
    W, c = fit_prior_mean(X, Y, mean)
    Y = Y - X @ W.T - c
    if X.shape[0] < X.shape[1] + 2:
        raise ValueError(f"need at least D+2={X.shape[1] + 2} points, got {X.shape[0]}")
    if X.shape[0] > max_points:
        idx = np.sort(rng.choice(X.shape[0], max_points, replace=False))
        X, Y = X[idx], Y[idx]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        xs, ys = Standardizer(X), Standardizer(Y)
    Xn, Yn = xs.transform(X), ys.transform(Y)
    out = []
    for e in range(Y.shape[1]):
        p = _fit_one(Xn, Yn[:, e], restarts, rng)
        hp = GPHyperparams.from_log(p)
        out.append(GPHyperparams(hp.lengthscales * xs.scale,
                                 hp.signal_std * ys.scale[e],
                                 hp.noise_std * ys.scale[e]))
    return out


# --------------------------------------------------------------------------
# FITC sparse approximation


def fitc_nlml(Z, X, y, hp, return_grad=True):
    """FITC negative log marginal likelihood and its gradient w.r.t. ``Z``."""
    n, M = X.shape[0], Z.shape[0]
    ls2 = hp.lengthscales**2
    sf2, sn2 = hp.signal_std**2, hp.noise_std**2
    Kmm = se_kernel(Z, Z, hp.lengthscales, hp.signal_std)
    Kmn = se_kernel(Z, X, hp.lengthscales, hp.signal_std)
    L = linalg.cholesky(Kmm + 1e-8 * sf2 * np.eye(M), lower=True)
    V = linalg.solve_triangular(L, Kmn, lower=True)
    lam = np.maximum(sf2 - np.sum(V**2, 0), 0.0) + sn2
    Vl = V / np.sqrt(lam)
    A = np.eye(M) + Vl @ Vl.T
    La = linalg.cholesky(A, lower=True)
    w = linalg.solve_triangular(La, Vl @ (y / np.sqrt(lam)), lower=True)
    quad = np.sum(y**2 / lam) - w @ w
    logdet = 2 * np.sum(np.log(np.diag(La))) + np.sum(np.log(lam))
    val = 0.5 * (quad + logdet + n * np.log(2 * np.pi))
    if not return_grad:
        return val
    # C^{-1} = Lam^{-1} - Lam^{-1} V^T A^{-1} V Lam^{-1}
    B = linalg.solve_triangular(La, Vl, lower=True) / np.sqrt(lam)
    Cinv = np.diag(1.0 / lam) - B.T @ B
    alpha = Cinv @ y
    W = Cinv - np.outer(alpha, alpha)
    W[np.diag_indices(n)] = 0.0
    Pm = linalg.cho_solve((L, True), Kmn)
    Gmn = Pm @ W
    Gmm = -0.5 * Gmn @ Pm.T
    H = Gmn * Kmn
    Hm = Gmm * Kmm
    gZ = (H @ X - H.sum(1)[:, None] * Z) / ls2
    gZ += 2 * (Hm @ Z - Hm.sum(1)[:, None] * Z) / ls2
    return val, gZ


def _kmeans_inducing(X, M, rng):
    if M >= X.shape[0]:
        return X.copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        xs = Standardizer(X)
        centers, _ = kmeans2(xs.transform(X), M, minit="++", seed=rng)
    return xs.inverse(centers)


def _fitc_factors(Z, X, y, hp):
    M = Z.shape[0]
    sf2, sn2 = hp.signal_std**2, hp.noise_std**2
    Kmm = se_kernel(Z, Z, hp.lengthscales, hp.signal_std)
    try:
        L = linalg.cholesky(Kmm, lower=True)
    except linalg.LinAlgError:
        warnings.warn("inducing covariance is rank deficient; adding jitter "
                      "1e-6 * sf^2", stacklevel=3)
        L = linalg.cholesky(Kmm + 1e-6 * sf2 * np.eye(M), lower=True)
    Kmn = se_kernel(Z, X, hp.lengthscales, hp.signal_std)
    V = linalg.solve_triangular(L, Kmn, lower=True)
    lam = np.maximum(sf2 - np.sum(V**2, 0), 0.0) + sn2
    Vl = V / np.sqrt(lam)
    A = np.eye(M) + Vl @ Vl.T
    La = linalg.cholesky(A, lower=True)
    Linv = linalg.solve_triangular(L, np.eye(M), lower=True)
    LaInvLinv = linalg.solve_triangular(La, Linv, lower=True)
    # Sigma = (Kmm + Kmn Lam^-1 Knm)^-1 = Linv^T A^-1 Linv
    Sigma = LaInvLinv.T @ LaInvLinv
    beta = Sigma @ (Kmn @ (y / lam))
    iK = symmetrize(Linv.T @ Linv - Sigma)
    return beta, iK


def _full_factors(X, y, hp):
    """Exact GP: ``beta = (K + sn^2 I)^-1 y`` and ``iK = (K + sn^2 I)^-1``."""
    K = se_kernel(X, X, hp.lengthscales, hp.signal_std)
    C = linalg.cho_factor(K + hp.noise_std**2 * np.eye(len(X)), lower=True)
    iK = linalg.cho_solve(C, np.eye(len(X)))
    return iK @ y, symmetrize(iK)


def _keep(bound, budget):
    """Indices to keep so that the dropped entries of ``bound`` sum below ``budget``."""
    order = np.argsort(bound)
    dropped = np.cumsum(bound[order]) <= budget
    keep = np.ones(bound.size, dtype=bool)
    keep[order[dropped]] = False
    return np.flatnonzero(keep)


class SparseGP:
    """Fitted per-output sparse GPs predicting state differences."""

    target_convention = "difference"

    def __init__(self, inducing, beta, iK, lengthscales, signal_std, noise_std,
                 target_mean, include_noise=True, mean_weights=None):
        self.inducing = np.asarray(inducing, dtype=float)        # (E, M, D)
        self.beta = np.asarray(beta, dtype=float)                # (E, M)
        self.iK = np.asarray(iK, dtype=float)                    # (E, M, M)
        self.lengthscales = np.asarray(lengthscales, dtype=float)  # (E, D)
        self.signal_std = np.asarray(signal_std, dtype=float)    # (E,)
        self.noise_std = np.asarray(noise_std, dtype=float)      # (E,)
        self.target_mean = np.asarray(target_mean, dtype=float)  # (E,)
        self.include_noise = include_noise
        E, D = self.beta.shape[0], self.inducing.shape[2]
        self.mean_weights = (np.zeros((E, D)) if mean_weights is None
                             else np.asarray(mean_weights, dtype=float))  # (E, D)
        if self.mean_weights.shape != (E, D):
            raise ValueError(f"mean weights of shape {self.mean_weights.shape}, "
                             f"expected {(E, D)}")
        # beta beta^T - iK, the weight of exp-kernel products in the variance
        self._var_weight = np.einsum("ei,ej->eij", self.beta, self.beta) - self.iK
        self._abs_cache = {}

    prune_tol = 1e-13

    def _abs_weight(self, a, b):
        if (a, b) not in self._abs_cache:
            w = (self._var_weight[a] if a == b
                 else np.outer(self.beta[a], self.beta[b]))
            self._abs_cache[a, b] = np.abs(w)
        return self._abs_cache[a, b]

    @property
    def n_outputs(self):
        return self.beta.shape[0]

    @property
    def input_dim(self):
        return self.inducing.shape[2]

    @property
    def hyperparams(self):
        return [GPHyperparams(self.lengthscales[e], float(self.signal_std[e]),
                              float(self.noise_std[e])) for e in range(self.n_outputs)]

    # ---------------------------------------------------------------- points

    def predict(self, X):
        """Predictive means and variances, both (N, E), at rows of ``X``."""
        X = np.atleast_2d(X)
        E = self.n_outputs
        mean = np.empty((X.shape[0], E))
        var = np.empty((X.shape[0], E))
        for e in range(E):
            k = se_kernel(X, self.inducing[e], self.lengthscales[e], self.signal_std[e])
            mean[:, e] = k @ self.beta[e] + X @ self.mean_weights[e] + self.target_mean[e]
            var[:, e] = self.signal_std[e]**2 - np.sum((k @ self.iK[e]) * k, 1)
            if self.include_noise:
                var[:, e] += self.noise_std[e]**2
        return mean, np.maximum(var, 0.0)

    def predict_point(self, x):
        from .gaussian import Gaussian
        mean, var = self.predict(np.atleast_1d(x)[None, :])
        return Gaussian(mean[0], np.diag(var[0]))

    # ------------------------------------------------------- moment matching

    def moment_match(self, m, S, derivs=True):
        """Output moments for an input ``N(m, S)``; see :class:`MomentMatch`."""
        m = np.asarray(m, dtype=float)
        S = np.asarray(S, dtype=float)
        E, D = self.n_outputs, self.input_dim
        if m.shape != (D,) or S.shape != (D, D):
            raise ValueError(f"input moments of shapes {m.shape}, {S.shape} for a "
                             f"{D}-dim model")
        S = symmetrize(S)
        ls2 = self.lengthscales**2
        sf2 = self.signal_std**2
        mu0 = np.empty(E)
        G = np.empty((D, E))
        cov = np.empty((E, E))
        nus, zetas, bqs, Ts, Bs = [], [], [], [], []
        dmu_dm = np.empty((E, D))
        dmu_dS = np.empty((E, D, D))
        dG_dm = np.empty((D, E, D))
        dG_dS = np.empty((D, E, D, D))
        for a in range(E):
            nu = self.inducing[a] - m
            SL = S + np.diag(ls2[a])
            B = symmetrize(linalg.inv(SL))
            T = nu @ B
            sign, logdet = np.linalg.slogdet(SL)
            logc = np.log(sf2[a]) + 0.5 * np.sum(np.log(ls2[a])) - 0.5 * logdet
            logq = logc - 0.5 * np.sum(T * nu, 1)
            # q_i <= sf^2 holds for any PSD input covariance
            if sign <= 0 or logq.max() > np.log(sf2[a]) + 1e-6:
                raise np.linalg.LinAlgError("input covariance is not positive semidefinite")
            # terms below e^-700 are zero in double precision; dropping them
            # changes nothing and skips most of the work for short lengthscales
            bq = np.where(logq > -700.0, self.beta[a] * np.exp(np.maximum(logq, -700.0)), 0.0)
            mu0[a] = bq.sum()
            G[:, a] = T.T @ bq
            nus.append(nu)
            zetas.append(nu / ls2[a])
            bqs.append(bq)
            Ts.append(T)
            Bs.append(B)
            if derivs:
                TbT = T.T @ (bq[:, None] * T)
                dmu_dm[a] = G[:, a]
                dmu_dS[a] = -0.5 * mu0[a] * B + 0.5 * TbT
                dG_dm[:, a, :] = TbT - mu0[a] * B
                Tk, bk = T[bq != 0], bq[bq != 0]
                t3 = (Tk.T @ ((bk[:, None] * Tk)[:, :, None] * Tk[:, None, :])
                      .reshape(len(bk), D * D)).reshape(D, D, D)
                g = G[:, a]
                dG_dS[:, a] = (-0.5 * g[:, None, None] * B[None] + 0.5 * t3
                               - B[:, :, None] * g[None, None, :])
        if derivs:
            dG_dS = symmetrize(dG_dS)
            dcov_dm = np.empty((E, E, D))
            dcov_dS = np.empty((E, E, D, D))
        I = np.eye(D)
        for a in range(E):
            for b in range(a, E):
                Psi = 1.0 / ls2[a] + 1.0 / ls2[b]
                R = S * Psi[None, :] + I
                Rinv = linalg.inv(R)
                logdetR = np.linalg.slogdet(R)[1]
                P = symmetrize(Rinv @ S)
                za, zb = zetas[a], zetas[b]
                zaP = za @ P
                qa = np.sum(zaP * za, 1)
                qb = qa if a == b else np.sum((zb @ P) * zb, 1)
                ra = np.log(sf2[a]) - 0.5 * np.sum(nus[a] * za, 1) + 0.5 * qa - 0.5 * logdetR
                rb = np.log(sf2[b]) - 0.5 * np.sum(nus[b] * zb, 1) + 0.5 * qb
                # P is PSD, so za P zb <= (qa + qb) / 2, which bounds every term:
                # Q_ij <= exp(ua_i) exp(ub_j). Rows and columns whose total
                # bounded contribution is below prune_tol * sf_a * sf_b are dropped.
                # Bounds are shifted by their maxima so that wide inputs cannot overflow.
                absw = self._abs_weight(a, b)
                la, lb = ra + 0.5 * qa, rb + 0.5 * qb
                sa, sb = la.max(), lb.max()
                ea, eb = np.exp(la - sa), np.exp(lb - sb)
                budget = (np.exp(min(np.log(self.prune_tol) + 0.5 * np.log(sf2[a] * sf2[b])
                                     - sa - sb, 700.0)) if self.prune_tol > 0 else 0.0)
                ka = _keep(ea * (absw @ eb), budget)
                kb = _keep(eb * (ea[ka] @ absw[ka]), budget)
                za, zb, zaP = za[ka], zb[kb], zaP[ka]
                # log Q as one gemm: [zaP, rowterm, 1] @ [zb, 1, colterm]^T
                left = np.column_stack([zaP, ra[ka], np.ones(len(ka))])
                right = np.column_stack([zb, np.ones(len(kb)), rb[kb]])
                Q = left @ right.T
                # exp underflow takes a slow path; anything below e^-700 is zero anyway
                # Q_ij <= sf_a^2 sf_b^2 exactly; the clip only removes rounding excess
                np.clip(Q, -700.0, np.log(sf2[a] * sf2[b]), out=Q)
                np.exp(Q, out=Q)
                if a == b:
                    Wq = Q
                    Wq *= self._var_weight[a][np.ix_(ka, kb)]
                    Eab = Wq.sum() + sf2[a]
                    if self.include_noise:
                        Eab += self.noise_std[a]**2
                else:
                    Eab = self.beta[a][ka] @ (Q @ self.beta[b][kb])
                    if derivs:
                        Wq = Q
                        Wq *= self.beta[a][ka][:, None]
                        Wq *= self.beta[b][kb][None, :]
                cov[a, b] = cov[b, a] = Eab - mu0[a] * mu0[b]
                if not derivs:
                    continue
                U = za @ Rinv
                V = zb @ Rinv
                r, c = Wq.sum(1), Wq.sum(0)
                dE_dm = U.T @ r + V.T @ c
                dE_dS = (-0.5 * r.sum() * (Rinv.T * Psi[None, :])
                         + 0.5 * U.T @ (r[:, None] * U) + 0.5 * V.T @ (c[:, None] * V)
                         + U.T @ (Wq @ V))
                dE_dS = symmetrize(dE_dS)
                dcm = dE_dm - mu0[a] * dmu_dm[b] - mu0[b] * dmu_dm[a]
                dcS = dE_dS - mu0[a] * dmu_dS[b] - mu0[b] * dmu_dS[a]
                dcov_dm[a, b] = dcov_dm[b, a] = dcm
                dcov_dS[a, b] = dcov_dS[b, a] = dcS
        W = self.mean_weights
        mean = mu0 + W @ m + self.target_mean
        if np.any(W):
            # f = W x + g(x): cov gains W S W^T and the two cross terms W S G
            WS = W @ S
            H = WS @ G
            cov = cov + WS @ W.T + H + H.T
            if derivs:
                dmu_dm = dmu_dm + W
                dH_dm = np.einsum("ij,jbd->ibd", WS, dG_dm)
                dcov_dm = dcov_dm + dH_dm + dH_dm.transpose(1, 0, 2)
                dH_dS = (np.einsum("ap,qb->abpq", W, G)
                         + np.einsum("ij,jbpq->ibpq", WS, dG_dS))
                dcov_dS = dcov_dS + symmetrize(np.einsum("ap,bq->abpq", W, W)
                                               + dH_dS + dH_dS.transpose(1, 0, 2, 3))
            G = G + W.T
        res = MomentMatch(mean=mean, cov=symmetrize(cov), io_gain=G, input_cov=S)
        if derivs:
            res.dmean_dm, res.dmean_dS = dmu_dm, symmetrize(dmu_dS)
            res.dcov_dm, res.dcov_dS = dcov_dm, dcov_dS
            res.dgain_dm, res.dgain_dS = dG_dm, dG_dS
        return res

    # ----------------------------------------------------------- persistence

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "kind": "sparse_gp_se_ard",
            "target_convention": self.target_convention,
            "include_noise": self.include_noise,
            "inducing": self.inducing.tolist(),
            "beta": self.beta.tolist(),
            "iK": self.iK.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "signal_std": self.signal_std.tolist(),
            "noise_std": self.noise_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "mean_weights": self.mean_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported model checkpoint version {d.get('version')}")
        return cls(np.array(d["inducing"]), np.array(d["beta"]), np.array(d["iK"]),
                   np.array(d["lengthscales"]), np.array(d["signal_std"]),
                   np.array(d["noise_std"]), np.array(d["target_mean"]),
                   include_noise=d["include_noise"],
                   mean_weights=np.array(d["mean_weights"]) if "mean_weights" in d else None)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class MomentMatch:
    """Gaussian approximation of ``f(x)`` for ``x ~ N(m, S)``.

    ``io_gain`` is ``E[df/dx]`` (D, E): the input-output cross-covariance is
    ``S @ io_gain``, and for any ``w`` jointly Gaussian with ``x``,
    ``cov(w, f(x)) = cov(w, x) @ io_gain``.

    Derivative arrays (present when requested) index the differentiated
    quantity first and the input statistic last; ``*_dS`` entries are
    symmetric in the final two axes and are contracted with symmetric tangents.
    """

    mean: np.ndarray
    cov: np.ndarray
    io_gain: np.ndarray
    input_cov: np.ndarray
    dmean_dm: np.ndarray = None
    dmean_dS: np.ndarray = None
    dcov_dm: np.ndarray = None
    dcov_dS: np.ndarray = None
    dgain_dm: np.ndarray = None
    dgain_dS: np.ndarray = None

    @property
    def crosscov(self):
        return self.input_cov @ self.io_gain

    def jvp(self, dm, dS):
        """Tangents of (mean, cov, io_gain) for input tangents (K, D), (K, D, D)."""
        dmean = dm @ self.dmean_dm.T + np.einsum("epq,kpq->ke", self.dmean_dS, dS)
        dcov = (np.einsum("abd,kd->kab", self.dcov_dm, dm)
                + np.einsum("abpq,kpq->kab", self.dcov_dS, dS))
        dgain = (np.einsum("dep,kp->kde", self.dgain_dm, dm)
                 + np.einsum("depq,kpq->kde", self.dgain_dS, dS))
        return dmean, dcov, dgain


def fit_sparse(data, hyperparams, n_inducing, rng=None, optimize_inducing=False,
               include_noise=True, max_opt_iter=100, init="kmeans", mean="linear"):
    """Fit FITC posteriors for every output dimension.

    Inducing inputs start from k-means centres (or a random subset of the
    training inputs with ``init="subset"``) and are kept fixed unless
    ``optimize_inducing`` is set, in which case each output dimension
    optimizes its own set by minimizing the FITC negative log likelihood.
    When ``n_inducing >= N`` the training inputs themselves are used, which
    makes the model an exact full GP. ``mean`` selects the prior mean.
    """
    if n_inducing < 1:
        raise ValueError("need at least one inducing input")
    rng = np.random.default_rng(0) if rng is None else rng
    X, Y = data.inputs, data.targets
    N, D = X.shape
    E = Y.shape[1]
    if n_inducing >= N:
        Z0 = X.copy()
    elif init == "subset":
        Z0 = X[np.sort(rng.choice(N, n_inducing, replace=False))]
    else:
        Z0 = _kmeans_inducing(X, n_inducing, rng)
    M = Z0.shape[0]
    W, tmean = fit_prior_mean(X, Y, mean)
    Y = Y - X @ W.T
    inducing = np.empty((E, M, D))
    beta = np.empty((E, M))
    iK = np.empty((E, M, M))
    for e in range(E):
        hp = hyperparams[e]
        y = Y[:, e] - tmean[e]
        Z = Z0.copy()
        if optimize_inducing and M < N:
            def f(z):
                try:
                    v, g = fitc_nlml(z.reshape(M, D), X, y, hp)
                except linalg.LinAlgError:
                    return 1e10, np.zeros_like(z)
                return v, g.ravel()
            res = optimize.minimize(f, Z.ravel(), jac=True, method="L-BFGS-B",
                                    options={"maxiter": max_opt_iter})
            Z = res.x.reshape(M, D)
        inducing[e] = Z
        if M == N:
            beta[e], iK[e] = _full_factors(X, y, hp)
        else:
            beta[e], iK[e] = _fitc_factors(Z, X, y, hp)
    hps = hyperparams
    return SparseGP(inducing, beta, iK,
                    np.array([h.lengthscales for h in hps]),
                    np.array([h.signal_std for h in hps]),
                    np.array([h.noise_std for h in hps]),
                    tmean, include_noise=include_noise, mean_weights=W)
