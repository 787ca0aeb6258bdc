"""Gradient-based minimization of the predicted cost over PID gains.

BFGS (default) or Polak-Ribiere conjugate gradients, both driven by a
line search that brackets and then zooms with safeguarded cubic
interpolation until the strong Wolfe conditions hold. The budget is
counted in line searches, which is also the x-axis of the recorded trace.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

METHODS = ("BFGS", "CG")


@dataclass
class OptimizerConfig:
    method: str = "BFGS"
    max_linesearches: int = 40
    gradient_tolerance: float = 1e-5
    restarts: int = 0
    restart_scale: float = 0.1
    theta_init: np.ndarray = None
    max_evals_per_linesearch: int = 15
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown optimizer method {self.method!r}; use one of {METHODS}")
        if self.max_linesearches < 1 or self.max_evals_per_linesearch < 1:
            raise ValueError("line-search budgets must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient tolerance must be positive")
        if self.theta_init is not None:
            self.theta_init = np.asarray(self.theta_init, dtype=float).ravel()


@dataclass
class TraceEntry:
    restart: int
    linesearch: int
    value: float
    grad_norm: float
    evaluations: int
    step: float


@dataclass
class OptimizationResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    trace: list
    restart_values: list
    restart_thetas: list
    message: str

    def trace_values(self, restart=None):
        return [e.value for e in self.trace if restart is None or e.restart == restart]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["restart", "linesearch", "J", "grad_norm", "evaluations", "step"])
            for e in self.trace:
                w.writerow([e.restart, e.linesearch, repr(e.value), repr(e.grad_norm),
                            e.evaluations, repr(e.step)])


class _Counter:
    """Wraps the objective: counts calls, maps failures to +inf."""

    def __init__(self, fun):
        self.fun = fun
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        try:
            f, g = self.fun(x)
            f = float(f)
            g = np.asarray(g, dtype=float).ravel()
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            logger.info("objective failed at %s: %s", x, exc)
            return np.inf, np.full(x.size, np.nan)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return np.inf, np.full(x.size, np.nan)
        return f, g


def _cubic_min(a, fa, ga, b, fb, gb, lo, hi):
    """Minimizer of the cubic through two (point, value, slope) triples,
    clipped to ``[lo, hi]``; bisection when the cubic has no minimum."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc >= 0 and np.isfinite(disc):
        d2 = np.sqrt(disc) * np.sign(b - a)
        denom = gb - ga + 2.0 * d2
        if denom != 0:
            t = b - (b - a) * (gb + d2 - d1) / denom
            if np.isfinite(t):
                return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def line_search(fun, x, f0, g0, d, step, max_evals, c1=1e-4, c2=0.9):
    """Strong-Wolfe line search along ``d``.

    Returns ``(step, f, g, evals)`` for the best point found; ``step`` is 0
    when no decrease was achieved. Non-finite trial values shrink the step.
    """
    slope0 = g0 @ d
    if slope0 >= 0:
        return 0.0, f0, g0, 0
    a_prev, f_prev, s_prev = 0.0, f0, slope0
    best = (0.0, f0, g0)
    evals = 0
    a = step
    lo = hi = None
    while evals < max_evals:
        f, g = fun(x + a * d)
        evals += 1
        if not np.isfinite(f):
            a = 0.5 * (a_prev + a) if lo is None else 0.5 * (lo[0] + a)
            if a - a_prev < 1e-16 * max(1.0, a_prev):
                break
            continue
        slope = g @ d
        if f < best[1]:
            best = (a, f, g)
        if lo is None:
            if f > f0 + c1 * a * slope0 or (evals > 1 and f >= f_prev):
                lo, hi = (a_prev, f_prev, s_prev), (a, f, slope)
            elif abs(slope) <= -c2 * slope0:
                return a, f, g, evals
            elif slope >= 0:
                lo, hi = (a, f, slope), (a_prev, f_prev, s_prev)
            else:
                # expand by extrapolation, at least doubling
                a_new = _cubic_min(a_prev, f_prev, s_prev, a, f, slope, 2 * a, 10 * a)
                a_prev, f_prev, s_prev = a, f, slope
                a = a_new
                continue
        else:
            if f > f0 + c1 * a * slope0 or f >= lo[1]:
                hi = (a, f, slope)
            else:
                if abs(slope) <= -c2 * slope0:
                    return a, f, g, evals
                if slope * (hi[0] - lo[0]) >= 0:
                    hi = lo
                lo = (a, f, slope)
        # zoom: cubic step kept away from the bracket ends
        a0, a1 = sorted((lo[0], hi[0]))
        width = a1 - a0
        if width < 1e-12 * max(1.0, a1):
            break
        a = _cubic_min(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2],
                       a0 + 0.1 * width, a1 - 0.1 * width)
    a, f, g = best
    return a, f, g, evals


def _run(fun, x0, cfg, restart, trace):
    """One optimization from ``x0``; appends to ``trace``."""
    counter = _Counter(fun)
    x = np.array(x0, dtype=float)
    f, g = counter(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    trace.append(TraceEntry(restart, 0, f, float(np.linalg.norm(g)), 1, 0.0))
    n = x.size
    Hinv = np.eye(n)
    d = -g
    first = True
    message = "line-search budget exhausted"
    c2 = 0.9 if cfg.method == "BFGS" else 0.1
    for ls in range(1, cfg.max_linesearches + 1):
        gnorm = np.linalg.norm(g)
        if gnorm < cfg.gradient_tolerance:
            message = "gradient tolerance reached"
            break
        step = 1.0 / max(gnorm, 1.0) if first else 1.0
        if cfg.method == "CG" and not first:
            step = min(1.0, 2.0 * abs(trace[-1].step)) or 1.0
        a, f_new, g_new, evals = line_search(counter, x, f, g, d, step,
                                             cfg.max_evals_per_linesearch, c2=c2)
        if a == 0.0:
            if first:
                message = "no decrease along the steepest-descent direction"
                break
            # reset curvature information and retry along -g
            Hinv = np.eye(n)
            d = -g
            first = True
            trace.append(TraceEntry(restart, ls, f, float(gnorm), evals, 0.0))
            continue
        s = a * d
        y = g_new - g
        x = x + s
        f, g_old, g = f_new, g, g_new
        trace.append(TraceEntry(restart, ls, f, float(np.linalg.norm(g)), evals, a))
        sy = s @ y
        if cfg.method == "BFGS":
            if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
                if first:
                    Hinv = (sy / (y @ y)) * np.eye(n)
                rho = 1.0 / sy
                Hy = Hinv @ y
                Hinv = (Hinv - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                        + (rho * rho * (y @ Hy) + rho) * np.outer(s, s))
            d = -Hinv @ g
        else:
            beta = max(0.0, g @ (g - g_old) / (g_old @ g_old))
            d = -g + beta * d
        if g @ d >= 0:
            d = -g
            Hinv = np.eye(n)
        first = False
    else:
        if np.linalg.norm(g) < cfg.gradient_tolerance:
            message = "gradient tolerance reached"
    return x, f, g, message


def minimize(objective, cfg, theta0=None):
    """Minimize ``objective(theta) -> (J, dJ/dtheta)``.

    Starts from ``theta0`` (else ``cfg.theta_init``, else zeros), then runs
    ``cfg.restarts`` further starts from Gaussian perturbations of the initial
    point. Returns the best result over all starts.
    """
    if theta0 is None:
        theta0 = cfg.theta_init
    if theta0 is None:
        raise ValueError("no initial gains given")
    theta0 = np.asarray(theta0, dtype=float).ravel()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    finals, thetas = [], []
    best = None
    for r in range(cfg.restarts + 1):
        start = theta0 if r == 0 else theta0 + cfg.restart_scale * rng.standard_normal(theta0.size)
        try:
            x, f, g, msg = _run(objective, start, cfg, r, trace)
        except FloatingPointError as exc:
            logger.warning("restart %d aborted: %s", r, exc)
            finals.append(np.inf)
            thetas.append(start)
            continue
        finals.append(f)
        thetas.append(x)
        if best is None or f < best[1]:
            best = (x, f, g, msg)
    if best is None:
        raise FloatingPointError("objective was not finite at any starting point")
    return OptimizationResult(theta=best[0], value=best[1], grad=best[2], trace=trace,
                              restart_values=finals, restart_thetas=thetas,
                              message=best[3])


@dataclass
class GradientReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rel_error is None:
            scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-10)
            self.rel_error = np.abs(self.analytic - self.numeric) / scale

    @property
    def max_rel_error(self):
        return float(self.rel_error.max(initial=0.0))

    @property
    def median_rel_error(self):
        return float(np.median(self.rel_error)) if self.rel_error.size else 0.0


def gradient_check(objective, theta, step=1e-5, points=3):
    """Compare the analytic gradient with central differences per coordinate.

    ``points`` is the stencil size, 3 or 5. The 5-point stencil has O(h^4)
    truncation error, so it tolerates a larger step and is less sensitive to
    rounding noise in the objective.
    """
    if points not in (3, 5):
        raise ValueError("stencil must have 3 or 5 points")
    theta = np.asarray(theta, dtype=float).ravel()
    _, grad = objective(theta)
    grad = np.asarray(grad, dtype=float).ravel()
    num = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        d1 = objective(theta + e)[0] - objective(theta - e)[0]
        if points == 3:
            num[i] = d1 / (2 * step)
        else:
            d2 = objective(theta + 2 * e)[0] - objective(theta - 2 * e)[0]
            num[i] = (8 * d1 - d2) / (12 * step)
    return GradientReport(grad, num)
