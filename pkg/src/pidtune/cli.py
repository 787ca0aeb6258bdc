"""Command line: ``pidtune learn | simulate | check | report``.

Exit codes: 0 success, 2 learning budget exhausted (or a check failed its
tolerance), 1 any error.
"""

import csv
import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, default_config, load_config
from .data import downsample
from .learner import SUMMARY_COLUMNS, evaluate_observed_cost, run, write_summary
from .pid import build_gain_matrix
from .plant import RolloutLog, execute_policy

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2


@dataclass
class RunManifest:
    version: str
    config_hash: str
    seed: int
    started: str
    finished: str = None
    modules: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg):
        mods = {"python": platform.python_version()}
        for name in ("numpy", "scipy", "click"):
            try:
                mods[name] = metadata.version(name)
            except metadata.PackageNotFoundError:
                mods[name] = "unknown"
        return cls(__version__, cfg.hash(), cfg.seed, _now(), modules=mods)

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load(config_path, seed):
    cfg = load_config(config_path) if config_path else default_config()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_ERROR)


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                     default=None, help="JSON experiment config (default: bundled).")(f)
    f = click.option("--seed", type=int, default=None, help="Override the config seed.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None,
                     help="Output directory.")(f)
    return f


def _merged(ctx, config_path, seed, out):
    g = ctx.obj or {}
    return (config_path or g.get("config_path"),
            seed if seed is not None else g.get("seed"),
            out or g.get("out"))


@click.group()
@common_options
@click.version_option(__version__, prog_name="pidtune")
@click.pass_context
def main(ctx, config_path, seed, out):
    """Learn PID gains for a simulated cart-pole with probabilistic
    model-based policy search."""
    ctx.obj = {"config_path": config_path, "seed": seed, "out": out}


# ------------------------------------------------------------------ learn


def _table_line(rec):
    return (f"{rec.iteration:>4d} {rec.predicted_cost:>10.2f} {rec.observed_cost:>10.2f} "
            f"{rec.gap_per_step:>8.3f} {rec.interaction_s:>9.1f}  "
            f"{'yes' if rec.success else 'no':<4s} {rec.termination}")


@main.command()
@common_options
@click.pass_context
def learn(ctx, config_path, seed, out):
    """Run a full learning experiment."""
    config_path, seed, out = _merged(ctx, config_path, seed, out)
    try:
        cfg = _load(config_path, seed)
    except ConfigError as exc:
        _fail(str(exc))
    out = Path(out or f"runs/seed_{cfg.seed}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.create(cfg)
        manifest.save(out / "manifest.json")
    except OSError as exc:
        _fail(f"cannot write to {out}: {exc}")
    click.echo(f"{'iter':>4s} {'pred J':>10s} {'obs J':>10s} {'gap/H':>8s} "
               f"{'interact':>9s}  {'ok':<4s} termination")
    try:
        result = run(cfg, out, progress=lambda r: click.echo(_table_line(r)))
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 1
        _fail(f"{type(exc).__name__}: {exc}")
    manifest.finished = _now()
    manifest.save(out / "manifest.json")
    if result.succeeded:
        click.echo(f"stabilized at iteration {result.success_iteration} after "
                   f"{result.interaction_at_success:.1f} s of interaction")
        sys.exit(EXIT_OK)
    click.echo("no stabilizing policy within the iteration budget")
    sys.exit(EXIT_BUDGET)


# --------------------------------------------------------------- simulate


@main.command()
@common_options
@click.option("--gains", required=True, help='Comma-separated gains, e.g. "-1,0,-2,-27,-6".')
@click.option("--duration", type=float, default=None, help="Seconds (default: config).")
@click.pass_context
def simulate(ctx, config_path, seed, out, gains, duration):
    """Execute one policy on the plant and write its log."""
    config_path, seed, out = _merged(ctx, config_path, seed, out)
    try:
        cfg = _load(config_path, seed)
        theta = np.array([float(v) for v in gains.split(",") if v.strip()])
    except ConfigError as exc:
        _fail(str(exc))
    except ValueError:
        _fail(f"cannot parse gains {gains!r}")
    structure, selector = cfg.structure.build()
    if theta.size != structure.n_gains:
        _fail(f"structure has {structure.n_gains} gains, got {theta.size}")
    duration = cfg.rollout_duration if duration is None else duration
    if duration < 0:
        _fail("duration must be >= 0")
    A = build_gain_matrix(structure, theta)
    log = execute_policy(A, selector.S, duration, cfg.plant, seed=cfg.seed)
    out = Path(out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "simulation.csv"
    log.save(path)
    cost = cfg.cost.build(cfg.narx.rate)
    observed = evaluate_observed_cost(log, cost, cfg.narx.rate, cfg.narx.filter_cutoff)
    click.echo(f"termination: {log.termination}")
    click.echo(f"duration: {log.t[-1]:.2f} s")
    click.echo(f"observed cost: {observed:.3f}")
    click.echo(f"log: {path}")
    sys.exit(EXIT_OK)


# ------------------------------------------------------------------ check


@main.command()
@click.option("--suite", required=True, help="appendix, moments, gradients, pid-oracle or cost.")
@click.option("--seed", type=int, default=0, help="Seed for the random instances.")
def check(suite, seed):
    """Run a numerical verification suite."""
    from .checks import SUITES, run_suite
    if suite not in SUITES:
        _fail(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    res = run_suite(suite, seed)
    for line in res.lines():
        click.echo(line)
    sys.exit(EXIT_OK if res.passed else EXIT_BUDGET)


# ----------------------------------------------------------------- report


def _records(run_dir):
    paths = sorted(run_dir.glob("iter_*/record.json"))
    return [json.loads(p.read_text(encoding="utf-8")) for p in paths]


class _Rec:
    """Minimal record view for :func:`write_summary`."""

    def __init__(self, d):
        self.__dict__.update(d)
        self.gap_per_step = abs(d["predicted_cost"] - d["observed_cost"]) / d["horizon"]

    def summary_row(self):
        return [self.iteration, repr(self.predicted_cost), repr(self.observed_cost),
                repr(self.gap_per_step), repr(self.interaction_s), self.termination,
                int(self.success), " ".join(repr(float(v)) for v in self.theta)]


def missing_artifacts(run_dir):
    run_dir = Path(run_dir)
    missing = [n for n in ("config.json",) if not (run_dir / n).is_file()]
    iters = sorted(p for p in run_dir.glob("iter_*") if p.is_dir())
    if not iters:
        missing.append("iter_*/")
    for d in iters:
        for n in ("record.json", "prediction.csv", "rollout.csv", "rollout.json"):
            if not (d / n).is_file():
                missing.append(f"{d.name}/{n}")
    return missing


def _read_prediction(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def trajectory_comparison(pred, log, path):
    """Predicted mean with a 95% band next to the executed model-rate trajectory."""
    n = len(pred["t"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["t"]
        for ch in ("x", "phi"):
            head += [f"{ch}_pred_mean", f"{ch}_pred_lo", f"{ch}_pred_hi", f"{ch}_executed"]
        w.writerow(head)
        for k in range(n):
            row = [repr(float(pred["t"][k]))]
            for ch, obs in (("x", log.x), ("phi", log.phi)):
                m, s = pred[f"{ch}_0_mean"][k], pred[f"{ch}_0_std"][k]
                o = float(obs[k]) if k < len(obs) else float("nan")
                row += [repr(float(m)), repr(float(m - 1.96 * s)), repr(float(m + 1.96 * s)),
                        repr(o)]
            w.writerow(row)


def write_report(run_dir):
    """Regenerate tables and plot-ready CSVs from the run directory only."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    records = [_Rec(d) for d in _records(run_dir)]
    report = run_dir / "report"
    report.mkdir(exist_ok=True)
    write_summary(report / "summary.csv", records)
    with open(report / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "predicted_J", "observed_J", "gap_per_step"])
        for r in records:
            w.writerow([r.iteration, repr(r.predicted_cost), repr(r.observed_cost),
                        repr(r.gap_per_step)])
    written = [report / "summary.csv", report / "loss.csv"]
    for r in records:
        d = run_dir / f"iter_{r.iteration:02d}"
        log = RolloutLog.load(d / "rollout.csv")
        if log.rate != cfg.narx.rate:
            log = downsample(log, cfg.narx.rate, cfg.narx.filter_cutoff)
        path = report / f"trajectory_{r.iteration:02d}.csv"
        trajectory_comparison(_read_prediction(d / "prediction.csv"), log, path)
        written.append(path)
    return records, written


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
def report(run_dir):
    """Rebuild summary and comparison CSVs of a finished run."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        _fail(f"no such run directory: {run_dir}")
    missing = missing_artifacts(run_dir)
    if missing:
        _fail("missing run artifacts: " + ", ".join(missing))
    try:
        records, written = write_report(run_dir)
    except (OSError, ValueError, KeyError, ConfigError) as exc:
        _fail(f"corrupt run artifacts: {exc}")
    click.echo(" ".join(f"{c:>12s}" for c in SUMMARY_COLUMNS[:5]))
    for r in records:
        click.echo(f"{r.iteration:>12d} {r.predicted_cost:>12.2f} {r.observed_cost:>12.2f} "
                   f"{r.gap_per_step:>12.4f} {r.interaction_s:>12.1f}")
    click.echo(f"wrote {len(written)} files to {run_dir / 'report'}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
