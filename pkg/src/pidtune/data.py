"""From control-rate logs to model-rate NARX training sets.

Positions are low-pass filtered forwards and backwards (no phase shift) and
then decimated; inputs are averaged over each model-rate interval, since the
plant integrates the command over the whole interval.
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .gp import TrainingSet, fit_hyperparameters, fit_sparse

logger = logging.getLogger(__name__)


def butter2(cutoff, rate):
    """2nd-order Butterworth coefficients (bilinear transform, prewarped)."""
    if not 0 < cutoff < rate / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, {rate / 2}) for rate {rate} Hz")
    return signal.butter(2, cutoff, fs=rate)


def settling_length(b, a, tol=1e-3):
    """Samples until the impulse response envelope decays below ``tol``."""
    r = np.max(np.abs(np.roots(a)))
    return int(np.ceil(np.log(tol) / np.log(r))) if 0 < r < 1 else len(a)


def zero_phase_lowpass(x, cutoff, rate):
    """Forward-backward 2nd-order Butterworth with odd reflection padding of
    one settling length at both ends. Filters along axis 0."""
    b, a = butter2(cutoff, rate)
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        return x.copy()
    pad = min(settling_length(b, a), n - 1)
    return signal.filtfilt(b, a, x, axis=0, padtype="odd", padlen=pad)


def block_mean(x, factor):
    n = len(x) // factor
    return np.asarray(x[:n * factor], dtype=float).reshape(n, factor, *np.shape(x)[1:]).mean(1)


def downsample(log, to_rate, cutoff=None):
    """Model-rate copy of ``log``.

    Positions are filtered at ``cutoff`` (default: the new Nyquist
    frequency) then taken at the start of each interval; commands are
    averaged over the interval. An incomplete final interval is dropped.
    """
    ratio = log.rate / to_rate
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"log rate {log.rate} Hz is not a multiple of {to_rate} Hz")
    cutoff = to_rate / 2 if cutoff is None else cutoff
    n = len(log) // factor
    if factor == 1:
        x, phi = log.x.copy(), log.phi.copy()
    else:
        x = zero_phase_lowpass(log.x, cutoff, log.rate)
        phi = zero_phase_lowpass(log.phi, cutoff, log.rate)
    idx = np.arange(n) * factor
    meta = dict(log.meta, source_rate=log.rate)
    return replace(log, t=log.t[idx], x=x[idx], phi=phi[idx],
                   u=block_mean(log.u, factor), u_raw=block_mean(log.u_raw, factor),
                   u_applied=log.u_applied[idx], rate=float(to_rate), meta=meta)


@dataclass(frozen=True)
class NARXConfig:
    """History lengths of effector position, pendulum angle and input."""

    n_x: int = 4
    n_phi: int = 3
    n_u: int = 7
    rate: float = 25.0

    def __post_init__(self):
        if min(self.n_x, self.n_phi, self.n_u) < 1:
            raise ValueError("history lengths must be >= 1")
        if self.rate <= 0:
            raise ValueError("model rate must be positive")

    @property
    def input_dim(self):
        return self.n_x + self.n_phi + self.n_u

    @property
    def output_history(self):
        return (self.n_x, self.n_phi)

    @property
    def max_history(self):
        return max(self.n_x, self.n_phi, self.n_u)


def narx_inputs(y, u, t, cfg):
    """Model input at time ``t``: newest-first histories of x, phi, u."""
    return np.concatenate([y[t - np.arange(cfg.n_x), 0], y[t - np.arange(cfg.n_phi), 1],
                           u[t - np.arange(cfg.n_u)]])


@dataclass
class Dataset:
    """Training tuples plus ``(rollout, t)`` provenance for each row."""

    cfg: NARXConfig
    inputs: np.ndarray
    targets: np.ndarray
    rollout: np.ndarray
    time_index: np.ndarray
    n_rollouts: int = 0
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    @property
    def training_set(self):
        return TrainingSet(self.inputs, self.targets)

    def to_csv(self, path):
        names = ([f"x_{k}" for k in range(self.cfg.n_x)]
                 + [f"phi_{k}" for k in range(self.cfg.n_phi)]
                 + [f"u_{k}" for k in range(self.cfg.n_u)])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rollout", "t"] + names + ["dx", "dphi"])
            for r, t, a, b in zip(self.rollout, self.time_index, self.inputs, self.targets):
                w.writerow([int(r), int(t)] + [repr(float(v)) for v in np.concatenate([a, b])])


def build_narx_dataset(logs, cfg):
    """Tuples for every ``t`` with a full history and a successor sample.

    Logs are expected at the model rate. Tuples never cross log boundaries.
    """
    X, Y, R, T = [], [], [], []
    skipped = []
    h = cfg.max_history
    for r, log in enumerate(logs):
        y = log.outputs
        u = np.asarray(log.u, dtype=float)
        n = len(log)
        if n < h + 1:
            warnings.warn(f"rollout {r} has {n} samples, fewer than history {h} + 1; "
                          "skipped", stacklevel=2)
            skipped.append(r)
            continue
        for t in range(h - 1, n - 1):
            X.append(narx_inputs(y, u, t, cfg))
            Y.append(y[t + 1] - y[t])
            R.append(r)
            T.append(t)
    D = cfg.input_dim
    return Dataset(cfg, np.array(X).reshape(-1, D), np.array(Y).reshape(-1, 2),
                   np.array(R, dtype=int), np.array(T, dtype=int), len(logs), skipped)


def simulate_narx(gp, cfg, log, start, steps):
    """Open-loop mean prediction of ``steps`` samples from time ``start``,
    driven by the recorded inputs; returns predicted outputs (steps, 2)."""
    y = log.outputs.copy()
    u = np.asarray(log.u, dtype=float)
    out = np.empty((steps, 2))
    for k in range(steps):
        t = start + k
        mean, _ = gp.predict(narx_inputs(y, u, t, cfg)[None, :])
        y[t + 1] = y[t] + mean[0]
        out[k] = y[t + 1]
    return out


@dataclass
class HistoryScore:
    cfg: NARXConfig
    k_step_rmse: float
    one_step_rmse: float


@dataclass
class HistorySelection:
    best: NARXConfig
    scores: list


def _validation_split(logs, min_len):
    usable = [lg for lg in logs if len(lg) > min_len]
    if len(usable) >= 2:
        return usable[:-1], usable[-1:]
    if not usable:
        raise ValueError("no log is long enough for history selection")
    lg = usable[0]
    half = len(lg) // 2
    first = replace(lg, **{c: getattr(lg, c)[:half] for c in lg.COLUMNS})
    second = replace(lg, **{c: getattr(lg, c)[half:] for c in lg.COLUMNS})
    return [first], [second]


def score_history(train, valid, cfg, k=10, n_inducing=100, rng=None):
    """Normalized one-step and ``k``-step open-loop RMSE on validation logs."""
    rng = np.random.default_rng(0) if rng is None else rng
    ds = build_narx_dataset(train, cfg)
    hps = fit_hyperparameters(ds.training_set, restarts=1, max_points=300, rng=rng)
    gp = fit_sparse(ds.training_set, hps, min(n_inducing, len(ds)), rng=rng)
    scale = np.concatenate([lg.outputs for lg in valid]).std(0)
    scale[scale == 0] = 1.0
    dscale = np.concatenate([np.diff(lg.outputs, axis=0) for lg in valid]).std(0)
    dscale[dscale == 0] = 1.0
    err_k, err_1 = [], []
    for lg in valid:
        h = cfg.max_history
        for start in range(h - 1, len(lg) - k - 1, max(1, k // 2)):
            pred = simulate_narx(gp, cfg, lg, start, k)
            err_k.append(((pred - lg.outputs[start + 1:start + 1 + k]) / scale) ** 2)
        vd = build_narx_dataset([lg], cfg)
        if len(vd):
            mean, _ = gp.predict(vd.inputs)
            err_1.append(((mean - vd.targets) / dscale) ** 2)
    if not err_k:
        raise ValueError(f"validation logs too short for {k}-step scoring")
    return (float(np.sqrt(np.mean(np.concatenate(err_k)))),
            float(np.sqrt(np.mean(np.concatenate(err_1)))) if err_1 else float("nan"))


def select_history_lengths(logs, grid, k=10, slack=0.05, rate=25.0, seed=0):
    """Grid search over ``(n_x, n_phi, n_u)`` triples.

    Each candidate is scored by ``k``-step-ahead validation RMSE of a quickly
    fitted GP; the smallest state (ties: lower score) within ``slack`` of the
    best score wins.
    """
    grid = [NARXConfig(*c, rate=rate) if not isinstance(c, NARXConfig) else c for c in grid]
    if not grid:
        raise ValueError("empty history grid")
    if len(grid) == 1:
        return HistorySelection(grid[0], [])
    h = max(c.max_history for c in grid)
    train, valid = _validation_split(logs, h + k + 1)
    scores = []
    for c in grid:
        ks, os_ = score_history(train, valid, c, k=k, rng=np.random.default_rng(seed))
        logger.info("history %s: %d-step rmse %.4f, one-step %.4f",
                    (c.n_x, c.n_phi, c.n_u), k, ks, os_)
        scores.append(HistoryScore(c, ks, os_))
    best = min(s.k_step_rmse for s in scores)
    ok = [s for s in scores if s.k_step_rmse <= (1 + slack) * best]
    pick = min(ok, key=lambda s: (s.cfg.input_dim, s.k_step_rmse))
    return HistorySelection(pick.cfg, scores)
