"""Experiment configuration: dataclasses plus a validating JSON loader.

Every section maps onto a dataclass; unknown keys, wrong types and bad
shapes are reported with the dotted path of the offending field (and line
and column for JSON syntax errors).
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import NARXConfig
from .gp import MEAN_FUNCTIONS
from .optimize import OptimizerConfig
from .pid import ErrorSelector, PIDStructure
from .plant import ActuatorModel, CartPoleParams, PlantConfig
from .rollout import CostConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class StructureSpec:
    """PID structure over the measured channels ``(x, phi)``.

    ``gains`` lists ``[input, error_channel, term]`` triples in the order of
    the gain vector; ``selector`` is the ``S`` matrix of the error channels.
    """

    n_inputs: int = 1
    gains: list = field(default_factory=lambda: [[0, 0, "P"], [0, 0, "I"], [0, 0, "D"],
                                                 [0, 1, "P"], [0, 1, "D"]])
    selector: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])

    def build(self):
        S = ErrorSelector(np.array(self.selector, dtype=float))
        return PIDStructure.from_triples(self.n_inputs, S.n_channels, self.gains), S


@dataclass
class CostSpec:
    Q: list = field(default_factory=lambda: [[1 / 0.2**2, 0.0], [0.0, 1 / 0.02**2]])
    R: list = field(default_factory=lambda: [[1 / 0.4**2]])
    target: list = field(default_factory=lambda: [0.0, 0.0])
    horizon_s: float = 10.0

    def build(self, rate):
        H = int(round(self.horizon_s * rate))
        return CostConfig(np.array(self.Q), np.array(self.R), np.array(self.target), H,
                          1.0 / rate)


@dataclass
class NARXSpec:
    """Fixed history lengths, or ``auto`` to grid-search them on the random
    rollouts.

    ``filter_cutoff`` (Hz) is the zero-phase low-pass applied to positions
    before downsampling. The plant dynamics sit below 2 Hz, so 5 Hz keeps
    them while removing most sensor noise, which the autoregressive model
    would otherwise learn and propagate as process noise.
    """

    n_x: int = 2
    n_phi: int = 2
    n_u: int = 3
    rate: float = 25.0
    auto: bool = False
    grid: list = field(default_factory=lambda: [[1, 1, 1], [2, 2, 2], [2, 2, 3], [3, 3, 4],
                                                [4, 3, 7]])
    filter_cutoff: float = 5.0

    def build(self):
        return NARXConfig(self.n_x, self.n_phi, self.n_u, self.rate)


@dataclass
class GPSpec:
    """``mean_function`` is the prior mean: zero, constant or linear.
    ``propagate_noise`` adds the fitted noise variance to every predicted
    step; off, the rollout propagates the latent (noise-free) prediction."""

    mean_function: str = "linear"
    propagate_noise: bool = True
    n_inducing: int = 400
    optimize_inducing: bool = False
    refit_hyperparameters: bool = False
    restarts: int = 3
    max_points: int = 800


@dataclass
class SuccessSpec:
    window_s: float = 5.0
    angle_deg: float = 2.0


@dataclass
class ExperimentConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    structure: StructureSpec = field(default_factory=StructureSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    narx: NARXSpec = field(default_factory=NARXSpec)
    gp: GPSpec = field(default_factory=GPSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    success: SuccessSpec = field(default_factory=SuccessSpec)
    n_random_rollouts: int = 4
    random_noise_std: float = 1.0
    rollout_duration: float = 20.0
    max_iterations: int = 10
    post_success_iterations: int = 2
    warm_start: bool = True
    zero_restart: bool = True
    initial_std: list = field(default_factory=lambda: [0.01, float(np.deg2rad(1.0))])
    seed: int = 0

    def validate(self):
        try:
            structure, selector = self.structure.build()
            if selector.n_state != 2:
                raise ConfigError("structure.selector: must have 2 columns (x, phi)")
            cost = self.cost.build(self.narx.rate)
            if cost.target.size != selector.n_channels:
                raise ConfigError("cost.target: length must equal the number of error channels")
            if structure.n_inputs != 1:
                raise ConfigError("structure.n_inputs: the cart-pole has a single input")
            self.narx.build()
            ratio = self.plant.control_rate / self.narx.rate
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError("narx.rate: must divide plant.control_rate")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("n_random_rollouts", "max_iterations", "post_success_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.rollout_duration <= 0:
            raise ConfigError("rollout_duration: must be positive")
        if self.gp.mean_function not in MEAN_FUNCTIONS:
            raise ConfigError(f"gp.mean_function: must be one of {', '.join(MEAN_FUNCTIONS)}")
        if self.gp.n_inducing < 1:
            raise ConfigError("gp.n_inducing: must be >= 1")
        return self

    def to_dict(self):
        return _to_plain(self)

    def hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_NESTED = {
    ExperimentConfig: {"plant": PlantConfig, "structure": StructureSpec, "cost": CostSpec,
                       "narx": NARXSpec, "gp": GPSpec, "optimizer": OptimizerConfig,
                       "success": SuccessSpec},
    PlantConfig: {"params": CartPoleParams, "actuator": ActuatorModel},
}


def _check_type(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key (allowed: {', '.join(known)})")
    defaults = cls()
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in nested:
            kwargs[name] = _build(nested[name], value, sub)
        elif value is None:
            kwargs[name] = None
        else:
            kwargs[name] = _check_type(value, getattr(defaults, name), sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data):
    return _build(ExperimentConfig, data, "").validate()


def load_config(path):
    """Read and validate a JSON experiment config."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def default_config_path():
    return resources.files("pidtune") / "default_config.json"


def default_config():
    return load_config(default_config_path())
