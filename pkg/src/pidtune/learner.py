"""The iterative loop: excite, model, optimize in prediction, execute, repeat.

Everything an iteration produces (plant log, model checkpoint, optimizer
trace, predicted trajectory, record) is written to the run directory, so a
run can be audited or re-reported without recomputation.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import build_narx_dataset, downsample, select_history_lengths
from .gp import fit_hyperparameters, fit_sparse
from .optimize import OptimizerConfig, minimize
from .pid import ErrorSelector, build_gain_matrix, initial_state
from .plant import execute_policy, random_rollout
from .rollout import (PIDPolicy, narx_initial_state, narx_state_space, rollout,
                      saturated_cost)

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("iteration", "predicted_J", "observed_J", "gap_per_step",
                   "interaction_s", "termination", "success", "theta")


@dataclass
class IterationRecord:
    iteration: int
    theta: list
    predicted_cost: float
    observed_cost: float
    horizon: int
    interaction_s: float
    termination: str
    success: bool
    model_path: str
    trace_path: str
    log_path: str
    prediction_path: str
    start: str

    @property
    def gap_per_step(self):
        return abs(self.predicted_cost - self.observed_cost) / self.horizon

    def summary_row(self):
        return [self.iteration, repr(self.predicted_cost), repr(self.observed_cost),
                repr(self.gap_per_step), repr(self.interaction_s), self.termination,
                int(self.success), " ".join(repr(float(v)) for v in self.theta)]


@dataclass
class RunResult:
    records: list
    success_iteration: int
    interaction_at_success: float
    out_dir: Path

    @property
    def succeeded(self):
        return self.success_iteration is not None


def evaluate_observed_cost(log, cost, narx_rate=25.0, cutoff=None):
    """Saturated cost summed over ``t = 0..H`` of the model-rate trajectory.

    ``d_t = (target - (x_t, phi_t), u_{t-1})`` with ``u_{-1} = 0``; steps
    past the end of a terminated run cost 1.0.
    """
    if log.rate != narx_rate:
        log = downsample(log, narx_rate, cutoff)
    H = cost.horizon
    n = min(len(log), H + 1)
    y = log.outputs[:n]
    e = cost.target - y
    u_prev = np.concatenate([[0.0], log.u[:max(n - 1, 0)]])[:n]
    if cost.R.shape[0] == 1:
        d = np.column_stack([e, u_prev])
        W = np.block([[cost.Q, np.zeros((cost.Q.shape[0], 1))],
                      [np.zeros((1, cost.Q.shape[0])), cost.R]])
    else:
        d, W = e, cost.Q
    c = saturated_cost(d, W) if n else np.zeros(0)
    return float(c.sum() + (H + 1 - n))


def is_success(log, spec, duration):
    """Full-length run with measured ``|phi|`` below the bound in the final window."""
    if log.termination != "duration reached" or log.t[-1] < duration - 0.5 / log.rate:
        return False
    window = log.t >= log.t[-1] - spec.window_s
    return bool(np.all(np.abs(log.phi[window]) < np.deg2rad(spec.angle_deg)))


def _state_names(narx):
    return ([f"x_{k}" for k in range(narx.n_x)] + [f"phi_{k}" for k in range(narx.n_phi)]
            + [f"u_{k}" for k in range(1, narx.n_u)]
            + ["e_x_prev", "e_phi_prev", "ie_x", "ie_phi"])


class Learner:
    """Holds the data and model between iterations of one run."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.structure, self.selector = cfg.structure.build()
        self.seeds = np.random.SeedSequence(cfg.seed)
        self.rng = np.random.default_rng(self.seeds.spawn(1)[0])
        self.raw_logs = []
        self.logs = []
        self.narx = cfg.narx.build()
        self.hyperparams = None
        self.gp = None
        self.interaction_s = 0.0

    # -------------------------------------------------------------- data

    def _plant_seed(self, k):
        return int(self.seeds.generate_state(64)[k % 64] % (2**31))

    def _add_log(self, log):
        self.raw_logs.append(log)
        self.logs.append(downsample(log, self.narx.rate, self.cfg.narx.filter_cutoff))
        self.interaction_s += float(log.t[-1] - log.t[0]) if len(log) else 0.0

    def random_phase(self):
        cfg = self.cfg
        rdir = self.out / "random"
        rdir.mkdir(parents=True, exist_ok=True)
        for k in range(cfg.n_random_rollouts):
            log = random_rollout(cfg.random_noise_std, cfg.rollout_duration, cfg.plant,
                                 seed=self._plant_seed(k))
            log.save(rdir / f"rollout_{k:02d}.csv")
            self._add_log(log)
        if cfg.narx.auto:
            sel = select_history_lengths(self.logs, cfg.narx.grid, rate=cfg.narx.rate,
                                         seed=cfg.seed)
            self.narx = sel.best
            with open(self.out / "narx_selection.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["n_x", "n_phi", "n_u", "k_step_rmse", "one_step_rmse", "selected"])
                for s in sel.scores:
                    w.writerow([s.cfg.n_x, s.cfg.n_phi, s.cfg.n_u, repr(s.k_step_rmse),
                                repr(s.one_step_rmse), int(s.cfg == sel.best)])

    def dataset(self):
        return build_narx_dataset(self.logs, self.narx)

    def fit_model(self):
        ds = self.dataset()
        if len(ds) < self.narx.input_dim + 2:
            raise RuntimeError(f"only {len(ds)} training tuples; need more data")
        data = ds.training_set
        if self.hyperparams is None or self.cfg.gp.refit_hyperparameters:
            self.hyperparams = fit_hyperparameters(data, restarts=self.cfg.gp.restarts,
                                                   max_points=self.cfg.gp.max_points,
                                                   rng=self.rng,
                                                   mean=self.cfg.gp.mean_function)
            (self.out / "hyperparams.json").write_text(
                json.dumps([h.to_dict() for h in self.hyperparams], indent=2),
                encoding="utf-8")
        self.gp = fit_sparse(data, self.hyperparams, min(self.cfg.gp.n_inducing, len(ds)),
                             rng=self.rng, optimize_inducing=self.cfg.gp.optimize_inducing,
                             mean=self.cfg.gp.mean_function,
                             include_noise=self.cfg.gp.propagate_noise)
        return self.gp

    # -------------------------------------------------------- prediction

    def prediction_setup(self):
        narx = self.narx
        model = narx_state_space(self.gp, narx.output_history, narx.n_u)
        cost = self.cfg.cost.build(narx.rate)
        S = np.zeros((self.selector.n_channels, model.n_state))
        starts = model.measured_index
        S[:, starts] = self.selector.S
        sel = ErrorSelector(S)
        policy = PIDPolicy(self.structure, sel, 1.0 / narx.rate)
        x0 = narx_initial_state(narx.output_history, narx.n_u, [0.0, 0.0],
                                self.cfg.initial_std, noise_std=self.cfg.plant.noise_std)
        z0 = initial_state(x0, cost.target, sel)
        return z0, policy, model, cost

    def objective(self):
        z0, policy, model, cost = self.prediction_setup()

        def fun(theta):
            pred = rollout(z0, policy, model, cost, theta)
            return pred.total_cost, pred.grad

        return fun

    def predict(self, theta, with_gradient=False):
        z0, policy, model, cost = self.prediction_setup()
        return rollout(z0, policy, model, cost, theta, with_gradient=with_gradient)

    # -------------------------------------------------------- iterations

    def optimize(self, theta_prev, iteration):
        cfg = self.cfg
        fun = self.objective()
        n = self.structure.n_gains
        starts = []
        if cfg.optimizer.theta_init is not None:
            base = np.asarray(cfg.optimizer.theta_init, dtype=float)
        else:
            base = np.zeros(n)
        if cfg.warm_start and theta_prev is not None:
            starts.append(("warm", theta_prev))
            if cfg.zero_restart:
                starts.append(("zero", base))
        else:
            starts.append(("zero", base))
        best = None
        traces = []
        for k, (label, th0) in enumerate(starts):
            oc = OptimizerConfig(**{**asdict(cfg.optimizer), "theta_init": None,
                                    "seed": cfg.optimizer.seed + 1000 * iteration + k})
            res = minimize(fun, oc, th0)
            traces.append((label, res))
            logger.info("iteration %d, %s start: J = %.3f after %d line searches (%s)",
                        iteration, label, res.value, len(res.trace) - 1, res.message)
            if best is None or res.value < best.value:
                best = res
        return best, traces

    def execute(self, theta, iteration):
        A = build_gain_matrix(self.structure, theta)
        log = execute_policy(A, self.selector.S, self.cfg.rollout_duration, self.cfg.plant,
                             seed=self._plant_seed(self.cfg.n_random_rollouts + iteration))
        self._add_log(log)
        return log


def _write_traces(path, traces):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "restart", "linesearch", "J", "grad_norm", "evaluations", "step"])
        for label, res in traces:
            for e in res.trace:
                w.writerow([label, e.restart, e.linesearch, repr(e.value), repr(e.grad_norm),
                            e.evaluations, repr(e.step)])


def write_summary(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in records:
            w.writerow(r.summary_row())


def run(cfg, out_dir, progress=None):
    """Run the full experiment; returns a :class:`RunResult`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    learner = Learner(cfg, out)
    learner.random_phase()
    learner.fit_model()
    records = []
    theta = None
    success_at = None
    interaction_at_success = None
    for it in range(1, cfg.max_iterations + 1):
        idir = out / f"iter_{it:02d}"
        idir.mkdir(exist_ok=True)
        learner.gp.save(idir / "model.json")
        best, traces = learner.optimize(theta, it)
        _write_traces(idir / "trace.csv", traces)
        start = min(traces, key=lambda lt: lt[1].value)[0]
        theta = best.theta
        pred = learner.predict(theta)
        pred.to_csv(idir / "prediction.csv", _state_names(learner.narx))
        log = learner.execute(theta, it)
        log.save(idir / "rollout.csv")
        cost = cfg.cost.build(learner.narx.rate)
        observed = evaluate_observed_cost(log, cost, learner.narx.rate, cfg.narx.filter_cutoff)
        ok = is_success(log, cfg.success, cfg.rollout_duration)
        rec = IterationRecord(
            iteration=it, theta=[float(v) for v in theta], predicted_cost=pred.total_cost,
            observed_cost=observed, horizon=cost.horizon,
            interaction_s=learner.interaction_s, termination=log.termination, success=ok,
            model_path=f"iter_{it:02d}/model.json", trace_path=f"iter_{it:02d}/trace.csv",
            log_path=f"iter_{it:02d}/rollout.csv",
            prediction_path=f"iter_{it:02d}/prediction.csv", start=start)
        (idir / "record.json").write_text(json.dumps(asdict(rec), indent=2), encoding="utf-8")
        records.append(rec)
        write_summary(out / "summary.csv", records)
        if progress:
            progress(rec)
        if ok and success_at is None:
            success_at = it
            interaction_at_success = learner.interaction_s
        if success_at is not None and it - success_at >= cfg.post_success_iterations:
            break
        learner.fit_model()
    write_summary(out / "summary.csv", records)
    return RunResult(records, success_at, interaction_at_success, out)
