"""Cart-pole stand-in for the robot: an acceleration-commanded cart carrying
an inverted pendulum, with a lagging actuator and noisy, biased sensors.

Commands pass through the actuator chain at the 1 kHz integration rate:
2nd-order Butterworth low-pass, dead time, first-order lag, clamp to
``+-u_max``. The realized acceleration is turned into the cart force
``(m_c + m_p) a``, so the pendulum reaction shows up as tracking error.
"""

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, signal

TERMINATIONS = ("duration reached", "position limit", "angle limit", "non-finite state")


@dataclass
class CartPoleParams:
    length: float = 0.5
    pole_mass: float = 0.1
    cart_mass: float = 1.0
    cart_friction: float = 0.05       # N s / m
    pole_friction: float = 0.0005     # N m s
    gravity: float = 9.81
    angle_bias: float = float(np.deg2rad(0.5))

    def __post_init__(self):
        if min(self.length, self.pole_mass, self.cart_mass, self.gravity) <= 0:
            raise ValueError("length, masses and gravity must be positive")
        if min(self.cart_friction, self.pole_friction) < 0:
            raise ValueError("friction coefficients must be nonnegative")


@dataclass
class ActuatorModel:
    lag: float = 0.08
    dead_time: float = 0.01
    filter_cutoff: float = 20.0
    u_max: float = 3.0

    def __post_init__(self):
        if self.lag < 0 or self.dead_time < 0:
            raise ValueError("lag and dead time must be nonnegative")
        if self.u_max <= 0 or self.filter_cutoff <= 0:
            raise ValueError("u_max and filter cutoff must be positive")


@dataclass
class PlantConfig:
    params: CartPoleParams = field(default_factory=CartPoleParams)
    actuator: ActuatorModel = field(default_factory=ActuatorModel)
    control_rate: float = 100.0
    sim_rate: float = 1000.0
    noise_std: tuple = (0.001, float(np.deg2rad(0.1)))
    init_std: tuple = (0.01, float(np.deg2rad(1.0)), 0.005, 0.01)
    x_limit: float = 0.3
    angle_limit: float = float(np.deg2rad(30.0))

    def __post_init__(self):
        if isinstance(self.params, dict):
            self.params = CartPoleParams(**self.params)
        if isinstance(self.actuator, dict):
            self.actuator = ActuatorModel(**self.actuator)
        self.noise_std = tuple(float(s) for s in self.noise_std)
        self.init_std = tuple(float(s) for s in self.init_std)
        ratio = self.sim_rate / self.control_rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("sim rate must be an integer multiple of the control rate")
        if self.actuator.filter_cutoff >= self.sim_rate / 2:
            raise ValueError("actuator filter cutoff must be below the sim Nyquist rate")
        if len(self.noise_std) != 2 or len(self.init_std) != 4:
            raise ValueError("noise_std needs 2 entries and init_std 4")

    @property
    def substeps(self):
        return int(round(self.sim_rate / self.control_rate))

    def to_dict(self):
        return asdict(self)


def dynamics(state, force, p):
    """Time derivative of ``(x, phi, xdot, phidot)``; ``phi = 0`` is upright."""
    _, phi, xd, phid = state
    s, c = np.sin(phi), np.cos(phi)
    mc, mp, l, g = p.cart_mass, p.pole_mass, p.length, p.gravity
    # mass matrix of the point-mass pendulum on a cart
    M11, M12, M22 = mc + mp, mp * l * c, mp * l * l
    r1 = force - p.cart_friction * xd + mp * l * s * phid**2
    r2 = mp * g * l * s - p.pole_friction * phid
    det = M11 * M22 - M12 * M12
    xdd = (M22 * r1 - M12 * r2) / det
    phidd = (M11 * r2 - M12 * r1) / det
    return np.array([xd, phid, xdd, phidd])


def rk4_step(state, force, h, p):
    k1 = dynamics(state, force, p)
    k2 = dynamics(state + 0.5 * h * k1, force, p)
    k3 = dynamics(state + 0.5 * h * k2, force, p)
    k4 = dynamics(state + h * k3, force, p)
    return state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def energy(state, p):
    _, phi, xd, phid = state
    vx = xd + p.length * np.cos(phi) * phid
    vy = -p.length * np.sin(phi) * phid
    kin = 0.5 * p.cart_mass * xd**2 + 0.5 * p.pole_mass * (vx**2 + vy**2)
    return kin + p.pole_mass * p.gravity * p.length * np.cos(phi)


class CartPole:
    """Stateful simulator: mechanical state plus actuator filter, delay and lag."""

    def __init__(self, cfg=None, state=None):
        self.cfg = cfg or PlantConfig()
        h = 1.0 / self.cfg.sim_rate
        a = self.cfg.actuator
        self._b, self._a = signal.butter(2, a.filter_cutoff, fs=self.cfg.sim_rate)
        self._delay_steps = int(round(a.dead_time * self.cfg.sim_rate))
        self._lag_alpha = 1.0 if a.lag == 0 else 1.0 - np.exp(-h / a.lag)
        self.reset(state)

    def reset(self, state=None):
        self.state = np.zeros(4) if state is None else np.array(state, dtype=float)
        self._zf = np.zeros(2)
        self._delay = deque([0.0] * self._delay_steps)
        self.accel = 0.0
        self.filtered = 0.0
        self.filtered_mean = 0.0
        self.applied = 0.0

    def _actuate(self, u):
        # direct form II transposed biquad
        y = self._b[0] * u + self._zf[0]
        self._zf[0] = self._b[1] * u - self._a[1] * y + self._zf[1]
        self._zf[1] = self._b[2] * u - self._a[2] * y
        self.filtered = y
        if self._delay_steps:
            self._delay.append(y)
            y = self._delay.popleft()
        self.accel += self._lag_alpha * (y - self.accel)
        u_max = self.cfg.actuator.u_max
        self.applied = min(max(self.accel, -u_max), u_max)
        return self.applied

    def step(self, u_cmd):
        """Advance one control period holding the command ``u_cmd``."""
        cfg = self.cfg
        p = cfg.params
        u = float(u_cmd)
        h = 1.0 / cfg.sim_rate
        total = 0.0
        for _ in range(cfg.substeps):
            a = self._actuate(u)
            total += self.filtered
            self.state = rk4_step(self.state, (p.cart_mass + p.pole_mass) * a, h, p)
        self.filtered_mean = total / cfg.substeps
        if not np.all(np.isfinite(self.state)):
            raise FloatingPointError("simulator state became non-finite")
        return self.state


@dataclass
class RolloutLog:
    """Control-rate record of one plant run.

    ``u_raw`` is the controller output held from ``t[k]`` to ``t[k+1]``;
    ``u`` is the command after the actuator filter and before the clamp,
    averaged over that period, and is what the learner models. ``u_applied``
    is the realized, clamped acceleration at ``t[k]``.
    """

    t: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    u: np.ndarray
    u_raw: np.ndarray
    u_applied: np.ndarray
    rate: float
    termination: str
    noise_std: tuple = (0.0, 0.0)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("t", "x", "phi", "u", "u_raw", "u_applied")

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    @property
    def outputs(self):
        return np.column_stack([self.x, self.phi])

    def save(self, path):
        """Write ``path`` (CSV) and a JSON sidecar next to it."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([repr(float(v)) for v in row])
        side = dict(rate=self.rate, termination=self.termination,
                    noise_std=list(self.noise_std), meta=self.meta)
        path.with_suffix(".json").write_text(json.dumps(side, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        side = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        cols = {c: data[:, i] for i, c in enumerate(cls.COLUMNS)}
        return cls(rate=side["rate"], termination=side["termination"],
                   noise_std=tuple(side["noise_std"]), meta=side["meta"], **cols)


class DiscretePID:
    """Runtime PID on measured outputs, same discretization as the model."""

    def __init__(self, gain_matrix, selector, dt):
        self.A = np.asarray(gain_matrix, dtype=float)
        self.S = np.asarray(selector, dtype=float)
        self.dt = dt
        E = self.S.shape[0]
        self.Kp, self.Ki, self.Kd = self.A[:, :E], self.A[:, E:2 * E], self.A[:, 2 * E:]
        self.prev = None
        self.acc = np.zeros(E)

    def __call__(self, y, target):
        e = target - self.S @ y
        if self.prev is None:
            self.prev = e
        self.acc = self.acc + self.dt * e
        u = self.Kp @ e + self.Ki @ self.acc + self.Kd @ ((e - self.prev) / self.dt)
        self.prev = e
        return u


def _initial_state(cfg, rng):
    return rng.standard_normal(4) * np.asarray(cfg.init_std)


def _run(cfg, controller, duration, rng, seed, kind):
    sim = CartPole(cfg, _initial_state(cfg, rng))
    dt = 1.0 / cfg.control_rate
    n_steps = int(round(duration * cfg.control_rate))
    bias = cfg.params.angle_bias
    sx, sphi = cfg.noise_std
    rows = []
    reason = "duration reached"
    for k in range(n_steps + 1):
        x, phi = sim.state[0], sim.state[1]
        y = np.array([x + sx * rng.standard_normal(), phi + bias + sphi * rng.standard_normal()])
        if abs(y[0]) > cfg.x_limit:
            reason = "position limit"
        elif abs(y[1]) > cfg.angle_limit:
            reason = "angle limit"
        if reason != "duration reached" or k == n_steps:
            rows.append((k * dt, y[0], y[1], 0.0, 0.0, sim.applied))
            break
        u = float(controller(y, k))
        if not np.isfinite(u):
            reason = "non-finite state"
            break
        applied = sim.applied
        try:
            sim.step(u)
        except FloatingPointError:
            rows.append((k * dt, y[0], y[1], 0.0, u, applied))
            reason = "non-finite state"
            break
        rows.append((k * dt, y[0], y[1], sim.filtered_mean, u, applied))
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    meta = dict(seed=seed, kind=kind, plant=cfg.to_dict())
    return RolloutLog(*arr.T, rate=cfg.control_rate, termination=reason,
                      noise_std=cfg.noise_std, meta=meta)


def execute_policy(gain_matrix, selector, duration, cfg=None, seed=0, target=None):
    """Run the PID law ``u = A_pid (e, int e, de)`` at the control rate.

    ``selector`` maps the measured ``(x, phi)`` to the error channels.
    """
    cfg = cfg or PlantConfig()
    rng = np.random.default_rng(seed)
    S = np.atleast_2d(selector)
    pid = DiscretePID(gain_matrix, S, 1.0 / cfg.control_rate)
    target = np.zeros(S.shape[0]) if target is None else np.asarray(target, dtype=float)
    return _run(cfg, lambda y, k: pid(y, target)[0], duration, rng, seed, "policy")


def random_rollout(noise_std, duration, cfg=None, seed=0):
    """White-noise excitation ``u_k ~ N(0, noise_std^2)`` at the control rate."""
    cfg = cfg or PlantConfig()
    rng = np.random.default_rng(seed)
    cmd_rng = np.random.default_rng([seed, 1])
    return _run(cfg, lambda y, k: noise_std * cmd_rng.standard_normal(), duration, rng,
                seed, "random")


def linearized_model(params):
    """Continuous ``(A, B)`` about the upright equilibrium with the
    acceleration command as input (actuator dynamics ignored)."""
    p = params
    M = p.cart_mass + p.pole_mass
    Mm = np.array([[M, p.pole_mass * p.length],
                   [p.pole_mass * p.length, p.pole_mass * p.length**2]])
    Mi = np.linalg.inv(Mm)
    stiff = np.array([[0.0, 0.0], [0.0, p.pole_mass * p.gravity * p.length]])
    damp = np.diag([p.cart_friction, p.pole_friction])
    A = np.block([[np.zeros((2, 2)), np.eye(2)], [Mi @ stiff, -Mi @ damp]])
    B = np.concatenate([np.zeros(2), Mi @ np.array([M, 0.0])])[:, None]
    return A, B


def lqr_fixture_gains(params=None, q=(10.0, 1.0, 1.0, 1.0), r=10.0):
    """PD gains ``(Kp_x, Kd_x, Kp_phi, Kd_phi)`` from continuous LQR on the
    linearized plant, in the error convention ``e = 0 - y``."""
    A, B = linearized_model(params or CartPoleParams())
    P = linalg.solve_continuous_are(A, B, np.diag(q), np.atleast_2d(r))
    K = (B.T @ P / r).ravel()
    # u = -K s, and e = -y, so the error gains equal K
    return K[0], K[2], K[1], K[3]
