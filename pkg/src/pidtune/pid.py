"""Multivariable PID control written as static feedback on an augmented state.

The tracked state ``z_t = (x_t, e_{t-1}, dt * sum_{tau<t} e_tau)`` is augmented
each step to

    z~_t = (z_t, x_des_t, e_t, dt * sum_{tau<=t} e_tau, (e_t - e_{t-1}) / dt)

with ``e_t = x_des_t - S x_t``. The control ``u_t = A_pid @ z~_t[-3E:]`` is then
a linear (hence Gaussian-preserving) function of the augmented state.
"""

from dataclasses import dataclass

import numpy as np

from .gaussian import (DimensionError, LinearMap, independent_concat,
                       joint_transform, linear_transform, linear_transform_jvp,
                       vec)

TERMS = ("P", "I", "D")


@dataclass(frozen=True)
class PIDStructure:
    """Which (input, error channel, term) gains exist.

    ``entries[k]`` is the ``(input, channel, term)`` triple that gain
    ``theta[k]`` multiplies; ``term`` is an index into ``TERMS``.
    """

    n_inputs: int
    n_channels: int
    entries: tuple

    def __post_init__(self):
        entries = tuple((int(f), int(e), int(t)) for f, e, t in self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for f, e, t in entries:
            if not (0 <= f < self.n_inputs and 0 <= e < self.n_channels
                    and 0 <= t < 3):
                raise ValueError(f"gain entry {(f, e, t)} out of range")
            if (f, e, t) in seen:
                raise ValueError(f"duplicate gain entry {(f, e, t)}")
            seen.add((f, e, t))
        controlled = {f for f, _, _ in entries}
        missing = set(range(self.n_inputs)) - controlled
        if missing:
            raise ValueError(f"inputs {sorted(missing)} have no active gain")

    @classmethod
    def from_mask(cls, mask):
        """Build from a boolean ``[F, E, 3]`` mask.

        Gains are ordered like a column-major walk over ``A_pid``: all P
        columns first, then I, then D; within a term by error channel, then
        by input.
        """
        mask = np.asarray(mask, dtype=bool)
        F, E, _ = mask.shape
        entries = [(f, e, t) for t in range(3) for e in range(E) for f in range(F)
                   if mask[f, e, t]]
        return cls(F, E, tuple(entries))

    @classmethod
    def from_triples(cls, n_inputs, n_channels, triples):
        """Triples may name the term as ``"P"``/``"I"``/``"D"`` or 0/1/2."""
        entries = []
        for f, e, t in triples:
            entries.append((f, e, TERMS.index(t.upper()) if isinstance(t, str) else t))
        return cls(n_inputs, n_channels, tuple(entries))

    def to_triples(self):
        return [[f, e, TERMS[t]] for f, e, t in self.entries]

    @property
    def n_gains(self):
        return len(self.entries)

    @property
    def mask(self):
        m = np.zeros((self.n_inputs, self.n_channels, 3), dtype=bool)
        for f, e, t in self.entries:
            m[f, e, t] = True
        return m

    def _flat_index(self):
        E = self.n_channels
        rows = np.array([f for f, _, _ in self.entries], dtype=int)
        cols = np.array([t * E + e for _, e, t in self.entries], dtype=int)
        return rows, cols

    def gain_matrix(self, theta):
        return build_gain_matrix(self, theta)

    def gain_matrix_tangents(self):
        """``dA_pid / dtheta_k`` stacked as (n_gains, F, 3E)."""
        rows, cols = self._flat_index()
        dA = np.zeros((self.n_gains, self.n_inputs, 3 * self.n_channels))
        dA[np.arange(self.n_gains), rows, cols] = 1.0
        return dA


def build_gain_matrix(structure, theta):
    """Scatter ``theta`` into ``A_pid`` with columns ``(P..., I..., D...)``."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != structure.n_gains:
        raise DimensionError(
            f"{theta.size} gains given for a structure with {structure.n_gains}")
    A = np.zeros((structure.n_inputs, 3 * structure.n_channels))
    rows, cols = structure._flat_index()
    A[rows, cols] = theta
    return A


@dataclass(frozen=True)
class ErrorSelector:
    """Rows of ``S`` pick (or combine) state entries compared with the target."""

    S: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if np.any(~np.any(S != 0, axis=1)):
            raise ValueError("every error channel must read at least one state entry")
        object.__setattr__(self, "S", S)

    @classmethod
    def pick(cls, n_state, indices):
        S = np.zeros((len(indices), n_state))
        S[np.arange(len(indices)), indices] = 1.0
        return cls(S)

    @property
    def n_channels(self):
        return self.S.shape[0]

    @property
    def n_state(self):
        return self.S.shape[1]


def initial_state(x0, x_des0, selector):
    """``z_0 = (x_0, x_des_0 - S x_0, 0)``."""
    S = selector.S
    E, D = S.shape
    if x0.dim != D:
        raise DimensionError(f"x0 has dim {x0.dim}, selector expects {D}")
    x_des0 = np.atleast_1d(np.asarray(x_des0, dtype=float))
    if x_des0.shape != (E,):
        raise DimensionError(f"desired state of shape {x_des0.shape}, expected ({E},)")
    A = np.vstack([np.eye(D), -S, np.zeros((E, D))])
    b = np.concatenate([np.zeros(D), x_des0, np.zeros(E)])
    return linear_transform(x0, LinearMap(A, b))


def augmentation_map(selector, dt):
    """Linear map ``(z_t, x_des_t) -> z~_t``."""
    if dt <= 0:
        raise ValueError(f"sampling time must be positive, got {dt}")
    S = selector.S
    E, D = S.shape
    nz = D + 2 * E
    I, O = np.eye(E), np.zeros((E, E))
    rows = [
        np.hstack([np.eye(nz), np.zeros((nz, E))]),
        np.hstack([np.zeros((E, nz)), I]),
        np.hstack([-S, O, O, I]),                        # e_t
        np.hstack([-dt * S, O, I, dt * I]),              # dt * sum_{tau<=t} e
        np.hstack([-S / dt, -I / dt, O, I / dt]),        # (e_t - e_{t-1}) / dt
    ]
    return LinearMap(np.vstack(rows))


def augment(z, desired, selector, dt):
    """Augmented state from tracked state ``z`` and independent target."""
    E = selector.n_channels
    if z.dim != selector.n_state + 2 * E:
        raise DimensionError(f"tracked state of dim {z.dim} does not fit selector")
    if desired.dim != E:
        raise DimensionError(f"desired state of dim {desired.dim}, expected {E}")
    return linear_transform(independent_concat(z, desired), augmentation_map(selector, dt))


def control_map(structure, theta, n_aug):
    """``u = K z~`` with ``K = [0 | A_pid]``."""
    A = build_gain_matrix(structure, theta)
    K = np.zeros((structure.n_inputs, n_aug))
    K[:, n_aug - A.shape[1]:] = A
    return LinearMap(K)


def control(z_aug, structure, theta):
    """Joint Gaussian of ``(z~, u)``; the control is its last ``F`` entries."""
    if 3 * structure.n_channels > z_aug.dim:
        raise DimensionError("augmented state too small for the PID structure")
    return joint_transform(z_aug, control_map(structure, theta, z_aug.dim))


@dataclass(frozen=True)
class ControlDerivs:
    """Derivatives of ``p(u)`` (column-major vec for covariances).

    ``dmean_dmean`` (F, n), ``dmean_dcov`` (F, n*n), ``dcov_dmean`` (F*F, n),
    ``dcov_dcov`` (F*F, n*n), ``dmean_dtheta`` (F, G), ``dcov_dtheta`` (F*F, G),
    ``dcross_dtheta`` (n*F, G) for the cross-covariance ``cov(z~, u)``.
    """

    dmean_dmean: np.ndarray
    dmean_dcov: np.ndarray
    dcov_dmean: np.ndarray
    dcov_dcov: np.ndarray
    dmean_dtheta: np.ndarray
    dcov_dtheta: np.ndarray
    dcross_dtheta: np.ndarray


def control_derivs(z_aug, structure, theta):
    m = control_map(structure, theta, z_aug.dim)
    n, F = z_aug.dim, structure.n_inputs
    dA = np.zeros((structure.n_gains, F, n))
    dA[:, :, n - 3 * structure.n_channels:] = structure.gain_matrix_tangents()
    dmu, dS, dC = linear_transform_jvp(z_aug, m, dA=dA)
    return ControlDerivs(
        dmean_dmean=m.A.copy(),
        dmean_dcov=np.zeros((F, n * n)),
        dcov_dmean=np.zeros((F * F, n)),
        dcov_dcov=np.kron(m.A, m.A),
        dmean_dtheta=dmu.T,
        dcov_dtheta=vec(dS).T,
        dcross_dtheta=vec(dC).T,
    )


def pid_reference_sequence(errors, theta, structure, dt, e_prev=None):
    """Textbook discrete PID on a deterministic error sequence.

    Rectangle-rule integral ``dt * sum_{tau<=t} e_tau`` and backward
    difference ``(e_t - e_{t-1}) / dt``. ``e_prev`` defaults to the first error,
    which matches the initial tracked state.
    """
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    A = build_gain_matrix(structure, theta)
    E = structure.n_channels
    Kp, Ki, Kd = A[:, :E], A[:, E:2 * E], A[:, 2 * E:]
    prev = errors[0] if e_prev is None else np.asarray(e_prev, dtype=float)
    acc = np.zeros(E)
    out = []
    for e in errors:
        acc = acc + dt * e
        out.append(Kp @ e + Ki @ acc + Kd @ ((e - prev) / dt))
        prev = e
    return np.array(out)
