"""Randomized verification suites shared by the CLI and the test suite.

Each suite draws its instances from a seeded generator, compares an
analytic result with an independent oracle (finite differences, Monte
Carlo, or a direct textbook implementation) and returns a
:class:`SuiteResult`.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .gaussian import (Gaussian, LinearMap, transform_derivs, unvec, vec)
from .gp import MEAN_FUNCTIONS, GPHyperparams, TrainingSet, fit_sparse
from .optimize import gradient_check
from .pid import (ErrorSelector, PIDStructure, augment, control, initial_state,
                  pid_reference_sequence)
from .rollout import (CostConfig, PIDPolicy, expected_saturated_cost, narx_initial_state,
                      narx_state_space, rollout, saturated_cost)

SUITES = ("appendix", "pid-oracle", "moments", "gradients", "cost")


@dataclass
class SuiteResult:
    name: str
    metrics: dict
    passed: bool
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def lines(self):
        out = [f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.1f} s)"]
        for k, v in self.metrics.items():
            out.append(f"    {k}: {v:.3g}" if isinstance(v, float) else f"    {k}: {v}")
        out += [f"    {n}" for n in self.notes]
        return out


def rel_err(a, b, floor=1e-300):
    """Norm-wise relative error between two arrays."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _random_gaussian(rng, D):
    A = rng.normal(size=(D, D))
    return Gaussian(rng.normal(size=D), A @ A.T / D)


# ------------------------------------------------------------------ appendix


def appendix_errors(rng, D, P, h=1e-6):
    """Relative FD error of every block of :func:`transform_derivs`."""
    g = _random_gaussian(rng, D)
    m = LinearMap(rng.normal(size=(P, D)), rng.normal(size=P))
    d = transform_derivs(g, m)

    # the defining formulas, differentiated for unsymmetric perturbations of S
    def stats(mean, cov, A, b):
        return A @ mean + b, vec(A @ cov @ A.T), vec(cov @ A.T), vec(A.T)

    def fd(which, n):
        cols = []
        for k in range(n):
            args = [g.mean.copy(), g.cov.copy(), m.A.copy(), m.b.copy()]
            plus = [a.copy() for a in args]
            minus = [a.copy() for a in args]
            if which == 1:
                dv = unvec(np.eye(D * D)[k], D, D)
                plus[1] += h * dv
                minus[1] -= h * dv
            elif which == 2:
                dv = unvec(np.eye(P * D)[k], P, D)
                plus[2] += h * dv
                minus[2] -= h * dv
            else:
                plus[which][k] += h
                minus[which][k] -= h
            sp, sm = stats(*plus), stats(*minus)
            cols.append([(a - b) / (2 * h) for a, b in zip(sp, sm)])
        return [np.column_stack([c[i] for c in cols]) for i in range(4)]

    f_mu, f_S, f_A, f_b = fd(0, D), fd(1, D * D), fd(2, P * D), fd(3, P)
    return {
        "dmean_dmean": rel_err(d.dmean_dmean, f_mu[0]),
        "dcov_dcov": rel_err(d.dcov_dcov, f_S[1]),
        "dmean_dA": rel_err(d.dmean_dA, f_A[0]),
        "dmean_db": rel_err(d.dmean_db, f_b[0]),
        "dcov_dA": rel_err(d.dcov_dA, f_A[1]),
        "dcross_dA": rel_err(d.dcross_dA, f_A[2]),
        "dcross_dcov": rel_err(d.dcross_dcov, f_S[2]),
        "dC_dA": rel_err(d.dC_dA, f_A[3]),
    }


def suite_appendix(n=100, seed=0, max_tol=1e-5, median_tol=1e-7):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        D, P = rng.integers(1, 6, size=2)
        errs += list(appendix_errors(rng, int(D), int(P)).values())
    errs = np.array(errs)
    mx, med = float(errs.max()), float(np.median(errs))
    return SuiteResult("appendix", {"instances": n, "max_rel_error": mx,
                                    "median_rel_error": med},
                       mx <= max_tol and med <= median_tol, time.perf_counter() - t0)


# ---------------------------------------------------------------- pid oracle


def random_structure(rng, F=None, E=None):
    F = int(rng.integers(1, 4)) if F is None else F
    E = int(rng.integers(1, 4)) if E is None else E
    while True:
        mask = rng.random((F, E, 3)) < 0.5
        if mask.any(axis=(1, 2)).all():
            return PIDStructure.from_mask(mask)


def pid_equivalence_error(rng, steps=100, dt=None):
    """Max |u_aug - u_ref| over a random deterministic error sequence."""
    s = random_structure(rng)
    E = s.n_channels
    # |u| stays O(100), where an absolute 1e-12 bound is still above the ULP
    dt = float(rng.uniform(0.01, 0.1)) if dt is None else dt
    theta = rng.normal(size=s.n_gains) * rng.uniform(0.1, 2.0)
    D = E + int(rng.integers(0, 3))
    sel = ErrorSelector(rng.normal(size=(E, D)))
    xs = np.cumsum(rng.normal(size=(steps, D)) * 0.1, axis=0)
    targets = rng.normal(size=(steps, E)) * 0.1
    errors = targets - xs @ sel.S.T
    u_ref = pid_reference_sequence(errors, theta, s, dt)
    z = initial_state(Gaussian.point(xs[0]), targets[0], sel)
    worst = 0.0
    for t in range(steps):
        # overwrite the state block with the next deterministic measurement
        mean = z.mean.copy()
        mean[:D] = xs[t]
        z = Gaussian(mean, np.zeros_like(z.cov))
        za = augment(z, Gaussian.point(targets[t]), sel, dt)
        u = control(za, s, theta).mean[-s.n_inputs:]
        worst = max(worst, float(np.max(np.abs(u - u_ref[t]))))
        n_z = D + 2 * E
        e_t = za.mean[n_z + E:n_z + 2 * E]
        ie_t = za.mean[n_z + 2 * E:n_z + 3 * E]
        z = Gaussian(np.concatenate([xs[t], e_t, ie_t]), np.zeros((n_z, n_z)))
    return worst


def suite_pid_oracle(n=50, steps=100, seed=0, tol=1e-12):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    errs = [pid_equivalence_error(rng, steps) for _ in range(n)]
    mx = float(max(errs))
    return SuiteResult("pid-oracle", {"instances": n, "steps": steps, "max_abs_du": mx},
                       mx <= tol, time.perf_counter() - t0)


# ------------------------------------------------------------------- moments


def random_sparse_gp(rng, D, E, M, include_noise=True, mean=None):
    """Well-conditioned random sparse GP with ``M`` inducing inputs; the prior
    mean kind is drawn at random unless given."""
    mean = MEAN_FUNCTIONS[int(rng.integers(len(MEAN_FUNCTIONS)))] if mean is None else mean
    N = max(M, 3 * M)
    X = rng.normal(size=(N, D))
    W = rng.normal(size=(D, E))
    Y = np.sin(X @ W) + 0.1 * rng.normal(size=(N, E))
    hps = [GPHyperparams(rng.uniform(0.8, 2.0, size=D), float(rng.uniform(0.5, 1.5)),
                         float(rng.uniform(0.1, 0.3))) for _ in range(E)]
    return fit_sparse(TrainingSet(X, Y), hps, M, rng=rng, include_noise=include_noise,
                      mean=mean)


def mc_gp_moments(gp, m, S, n, rng, chunk=200_000):
    """Sample ``x ~ N(m, S)`` and ``y ~ GP(x)``; returns samples of y."""
    ys = []
    L = np.linalg.cholesky(S + 1e-12 * np.eye(len(m)))
    for k in range(0, n, chunk):
        c = min(chunk, n - k)
        x = m + rng.standard_normal((c, len(m))) @ L.T
        mu, var = gp.predict(x)
        ys.append(mu + np.sqrt(var) * rng.standard_normal(mu.shape))
    return np.concatenate(ys)


def suite_moments(n=20, samples=1_000_000, seed=0, n_se=4.0, var_tol=0.02):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_se, worst_var = 0.0, 0.0
    for _ in range(n):
        D = int(rng.integers(1, 6))
        E = int(rng.integers(1, 3))
        M = int(rng.integers(5, 21))
        gp = random_sparse_gp(rng, D, E, M)
        m = rng.normal(size=D) * 0.5
        A = rng.normal(size=(D, D)) * rng.uniform(0.2, 0.6)
        S = A @ A.T
        mm = gp.moment_match(m, S, derivs=False)
        y = mc_gp_moments(gp, m, S, samples, rng)
        se = y.std(0) / np.sqrt(samples)
        worst_se = max(worst_se, float(np.max(np.abs(mm.mean - y.mean(0)) / se)))
        worst_var = max(worst_var, float(np.max(np.abs(np.diag(mm.cov) - y.var(0))
                                                 / y.var(0))))
    ok = worst_se <= n_se and worst_var <= var_tol
    return SuiteResult("moments", {"instances": n, "samples": samples,
                                   "max_mean_error_in_se": worst_se,
                                   "max_var_rel_error": worst_var},
                       ok, time.perf_counter() - t0)


# ----------------------------------------------------------------- gradients


def random_rollout_problem(rng, H=None):
    """Small NARX closed-loop prediction problem with a random PID."""
    hist = tuple(int(v) for v in rng.integers(1, 3, size=2))
    n_u = int(rng.integers(1, 4))
    D = sum(hist) + n_u
    N = 150
    X = rng.normal(size=(N, D)) * 0.3
    W = rng.normal(size=(D, 2))
    Y = 0.1 * np.tanh(X @ W)
    hps = [GPHyperparams(rng.uniform(0.8, 1.5, size=D), 0.1, 0.01) for _ in range(2)]
    gp = fit_sparse(TrainingSet(X, Y), hps, int(rng.integers(10, 31)), rng=rng)
    model = narx_state_space(gp, hist, n_u)
    sel = ErrorSelector.pick(model.n_state, list(model.measured_index))
    while True:
        s = random_structure(rng, F=1, E=2)
        if s.n_gains <= 6:
            break
    policy = PIDPolicy(s, sel, 0.04)
    H = int(rng.integers(5, 26)) if H is None else H
    # with n_u = 1 the state holds no previous input to charge
    r = rng.uniform(0.5, 6) if n_u > 1 else 0.0
    cost = CostConfig(np.diag(rng.uniform(1, 25, size=2)), [[r]], [0.0, 0.0], H, 0.04)
    x0 = narx_initial_state(hist, n_u, rng.normal(size=2) * 0.05, [0.05, 0.05])
    z0 = initial_state(x0, cost.target, sel)
    theta = rng.normal(size=s.n_gains) * 0.3
    return z0, policy, model, cost, theta


def rollout_gradient_report(z0, policy, model, cost, theta, step=3e-3):
    """Analytic dJ/dtheta against a 5-point central stencil.

    J carries rounding noise near 1e-10 (cancellation in the predictive
    variances), which swamps 3-point differences at small steps.
    """
    def fun(th):
        p = rollout(z0, policy, model, cost, th)
        return p.total_cost, p.grad
    return gradient_check(fun, theta, step, points=5)


def suite_gradients(n=10, seed=0, tol=1e-4):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        rep = rollout_gradient_report(*random_rollout_problem(rng))
        errs.append(rep.rel_error)
    errs = np.concatenate(errs)
    mx = float(errs.max())
    return SuiteResult("gradients", {"instances": n, "max_rel_error": mx,
                                     "median_rel_error": float(np.median(errs))},
                       mx <= tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------- cost


def cost_errors(rng, samples, h=1e-6):
    k = int(rng.integers(1, 4))
    A = rng.normal(size=(k, k)) * 0.3
    g = Gaussian(rng.normal(size=k) * 0.3, A @ A.T)
    B = rng.normal(size=(k, k))
    W = B @ B.T / k + 0.1 * np.eye(k)
    c, dm, dS = expected_saturated_cost(g, W)
    d = g.sample(rng, samples)
    vals = saturated_cost(d, W)
    z = abs(c - vals.mean()) / (vals.std() / np.sqrt(samples))
    fd_m = np.array([(expected_saturated_cost(Gaussian(g.mean + h * e, g.cov), W)[0]
                      - expected_saturated_cost(Gaussian(g.mean - h * e, g.cov), W)[0])
                     / (2 * h) for e in np.eye(k)])
    fd_S = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            E = np.zeros((k, k))
            E[i, j] = h
            # perturb the entry only, the analytic gradient is the symmetric one
            fp = expected_saturated_cost(Gaussian(g.mean, g.cov + E), W)[0]
            fm = expected_saturated_cost(Gaussian(g.mean, g.cov - E), W)[0]
            fd_S[i, j] = (fp - fm) / (2 * h)
    return z, rel_err(dm, fd_m), rel_err(dS, 0.5 * (fd_S + fd_S.T))


def suite_cost(n=50, samples=200_000, seed=0, n_se=3.0, fd_tol=1e-6):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    zs, em, eS = zip(*(cost_errors(rng, samples) for _ in range(n)))
    metrics = {"instances": n, "samples": samples, "max_mc_error_in_se": float(max(zs)),
               "max_mean_grad_rel_error": float(max(em)),
               "max_cov_grad_rel_error": float(max(eS))}
    ok = max(zs) <= n_se and max(em) <= fd_tol and max(eS) <= fd_tol
    return SuiteResult("cost", metrics, ok, time.perf_counter() - t0)


def run_suite(name, seed=0):
    fns = {"appendix": suite_appendix, "pid-oracle": suite_pid_oracle,
           "moments": suite_moments, "gradients": suite_gradients, "cost": suite_cost}
    if name not in fns:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return fns[name](seed=seed)
