"""Closed-loop long-term prediction with a PID policy and its analytic gradient.

One prediction step maps the tracked state ``z_t`` to ``z_{t+1}``:

1. append the (independent) target and form the augmented state ``z~_t``;
2. apply the PID law ``u_t = A_pid z~_t[-3E:]`` (steps 1-2 form one affine
   map ``v = L(theta) w`` of ``w = (z_t, x_des_t)``);
3. moment-match the GP on the model input picked from ``(x_t, u_t)``;
4. assemble ``z_{t+1} = (x_{t+1}, e_t, dt sum_{tau<=t} e_tau)`` with a fixed
   selection map.

The gradient ``dJ/dtheta`` is accumulated in forward mode: tangents of the
mean and covariance of ``z_t`` with respect to every gain are pushed through
the same four steps, starting from zero at ``z_0``.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .gaussian import Gaussian, LinearMap, linear_transform_jvp, symmetrize
from .pid import ErrorSelector, augmentation_map, build_gain_matrix

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Saturated cost


def saturated_cost(d, W):
    """Pointwise ``1 - exp(-d^T W d / 2)``; ``d`` may be (N, k)."""
    d = np.atleast_2d(d)
    return 1.0 - np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, W, d))


def expected_saturated_cost(g, W):
    """``E[1 - exp(-d^T W d / 2)]`` for ``d ~ g`` and its derivatives.

    Returns ``(cost, dcost_dmean, dcost_dcov)``; the covariance gradient is
    symmetric.
    """
    mu, S = g.mean, g.cov
    k = mu.size
    A = np.eye(k) + W @ S
    # W (I + S W)^{-1} == (I + W S)^{-1} W, symmetric for symmetric S, W
    What = symmetrize(np.linalg.solve(A, W))
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise np.linalg.LinAlgError(
            f"I + W Sigma is singular (det sign {sign}); cost weights or "
            "covariance are not PSD")
    Wm = What @ mu
    lik = np.exp(-0.5 * logdet - 0.5 * mu @ Wm)
    dmean = lik * Wm
    dcov = -lik * (0.5 * np.outer(Wm, Wm) - 0.5 * What)
    return 1.0 - lik, dmean, symmetrize(dcov)


@dataclass
class CostConfig:
    """Saturated quadratic cost on tracking error and the previous input."""

    Q: np.ndarray
    R: np.ndarray
    target: np.ndarray
    horizon: int
    dt: float

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.target = np.atleast_1d(np.asarray(self.target, dtype=float))
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(symmetrize(M))[0] < -1e-12:
                raise ValueError(f"cost weight {name} must be symmetric PSD")
        if self.Q.shape != (self.target.size, self.target.size):
            raise ValueError("Q does not match the target dimension")
        if int(self.horizon) < 0 or self.dt <= 0:
            raise ValueError("horizon must be >= 0 and dt > 0")
        self.horizon = int(self.horizon)


# --------------------------------------------------------------------------
# Linear plumbing around the GP


@dataclass
class StateSpace:
    """How a difference-target GP drives a state vector.

    ``input_index`` picks, from ``(x_state, u)``, the GP input in its training
    column order. ``next_state`` maps ``(x_state, u, delta)`` to the next
    state. ``prev_input_index`` locates ``u_{t-1}`` inside ``x_state`` (None
    when no input history is kept).
    """

    gp: object
    n_state: int
    n_inputs: int
    input_index: np.ndarray
    next_state: np.ndarray
    prev_input_index: np.ndarray = None
    measured_index: np.ndarray = None

    def __post_init__(self):
        self.input_index = np.asarray(self.input_index, dtype=int)
        self.next_state = np.asarray(self.next_state, dtype=float)
        if self.gp is not None and self.input_index.size != self.gp.input_dim:
            raise ValueError("input_index does not match the GP input dimension")
        n_out = self.next_state.shape[1] - self.n_state - self.n_inputs
        if self.next_state.shape[0] != self.n_state or n_out < 1:
            raise ValueError("next_state map has the wrong shape")

    @property
    def n_outputs(self):
        return self.next_state.shape[1] - self.n_state - self.n_inputs


def difference_state_space(gp, n_state, n_inputs):
    """Plain ``x_{t+1} = x_t + f(x_t, u_t)`` over a fully modelled state."""
    N = np.hstack([np.eye(n_state), np.zeros((n_state, n_inputs)), np.eye(n_state)])
    return StateSpace(gp, n_state, n_inputs, np.arange(n_state + n_inputs), N,
                      measured_index=np.arange(n_state))


def narx_state_space(gp, output_history, input_history, n_inputs=1):
    """State of stacked output histories plus ``input_history - 1`` past inputs.

    Layout: for each measured channel ``c`` its values ``y_t .. y_{t-n_c+1}``,
    then ``u_{t-1} .. u_{t-n_u+1}`` (each ``n_inputs`` wide). The GP input is
    the output blocks, then ``u_t``, then the input history, matching
    :func:`pidtune.data.build_narx_dataset`.
    """
    hist = [int(n) for n in output_history]
    n_u = int(input_history)
    if min(hist + [n_u]) < 1:
        raise ValueError("history lengths must be >= 1")
    F = n_inputs
    n_y = sum(hist)
    n_s = n_y + (n_u - 1) * F
    starts = np.cumsum([0] + hist[:-1])
    input_index = np.concatenate([np.arange(n_y), n_s + np.arange(F),
                                  n_y + np.arange((n_u - 1) * F)])
    E = len(hist)
    N = np.zeros((n_s, n_s + F + E))
    for c, (s, n) in enumerate(zip(starts, hist)):
        N[s, s] = 1.0
        N[s, n_s + F + c] = 1.0
        for j in range(1, n):
            N[s + j, s + j - 1] = 1.0
    if n_u > 1:
        N[n_y:n_y + F, n_s:n_s + F] = np.eye(F)
        for j in range(1, n_u - 1):
            N[n_y + j * F:n_y + (j + 1) * F, n_y + (j - 1) * F:n_y + j * F] = np.eye(F)
    prev = n_y + np.arange(F) if n_u > 1 else None
    return StateSpace(gp, n_s, F, input_index, N, prev_input_index=prev,
                      measured_index=starts.astype(int))


def narx_initial_state(output_history, input_history, channel_mean, channel_std,
                       n_inputs=1, noise_std=None):
    """Gaussian over the NARX state for a system at rest before ``t = 0``.

    All history slots of a channel are fully correlated copies of its initial
    value; past inputs are zero. ``noise_std`` adds independent measurement
    noise per slot.
    """
    blocks_m, blocks_s = [], []
    for n, mu, sd in zip(output_history, channel_mean, channel_std):
        blocks_m.append(np.full(n, mu))
        blocks_s.append(np.full((n, n), sd**2))
    n_prev = (int(input_history) - 1) * n_inputs
    mean = np.concatenate(blocks_m + [np.zeros(n_prev)])
    cov = linalg.block_diag(*blocks_s, np.zeros((n_prev, n_prev)))
    if noise_std is not None:
        nd = np.concatenate([np.full(n, s**2) for n, s in zip(output_history, noise_std)])
        cov[np.arange(nd.size), np.arange(nd.size)] += nd
    return Gaussian(mean, cov)


@dataclass(frozen=True)
class PIDPolicy:
    structure: object
    selector: ErrorSelector
    dt: float


# --------------------------------------------------------------------------
# Rollout


@dataclass
class _StepCache:
    m_w: np.ndarray
    V_w: np.ndarray
    L: np.ndarray
    V_v: np.ndarray
    mm: object


@dataclass
class RolloutPrediction:
    """Predicted Gaussian tracked states ``z_0 .. z_H`` and expected costs.

    ``per_step_cost[t]`` is the expected cost of ``z_t`` (H + 1 entries, the
    first of which does not depend on the gains). After truncation the
    remaining entries hold the worst-case value 1.0.
    """

    states: list
    per_step_cost: np.ndarray
    truncated_at: int = None
    theta: np.ndarray = None
    grad: np.ndarray = None
    controls: list = field(default_factory=list)
    _cache: list = field(default=None, repr=False)
    _cost_derivs: list = field(default=None, repr=False)
    _setup: dict = field(default=None, repr=False)

    @property
    def total_cost(self):
        return float(np.sum(self.per_step_cost))

    @property
    def horizon(self):
        return self.per_step_cost.size - 1

    @property
    def truncated(self):
        return self.truncated_at is not None

    def to_csv(self, path, state_names=None):
        """Columns: ``t`` then mean/std per state entry, then expected cost."""
        dim = self.states[0].dim
        names = state_names or [f"z{i}" for i in range(dim)]
        dt = self._setup["dt"] if self._setup else 1.0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"{n}_{s}" for n in names for s in ("mean", "std")]
                       + ["expected_cost"])
            for t, c in enumerate(self.per_step_cost):
                row = [repr(t * dt)]
                if t < len(self.states):
                    g = self.states[t]
                    sd = np.sqrt(np.clip(np.diag(g.cov), 0.0, None))
                    for i in range(dim):
                        row += [repr(float(g.mean[i])), repr(float(sd[i]))]
                else:
                    row += ["nan"] * (2 * dim)
                row.append(repr(float(c)))
                w.writerow(row)


def _cost_projection(model, selector, cost):
    """``d = Pc z + bc`` with ``d = (target - S x, u_{t-1})``."""
    n_s, E = model.n_state, selector.n_channels
    nz = n_s + 2 * E
    rows = [np.hstack([-selector.S, np.zeros((E, 2 * E))])]
    blocks = [cost.Q]
    b = [cost.target]
    if model.prev_input_index is not None:
        P = np.zeros((model.n_inputs, nz))
        P[np.arange(model.n_inputs), model.prev_input_index] = 1.0
        rows.append(P)
        blocks.append(cost.R)
        b.append(np.zeros(model.n_inputs))
    elif np.any(cost.R != 0):
        logger.warning("state keeps no input history; the input cost weight R is ignored")
    return np.vstack(rows), np.concatenate(b), linalg.block_diag(*blocks)


def _as_desired(desired, E, H):
    if desired is None:
        return [Gaussian.point(np.zeros(E))] * (H + 1)
    if isinstance(desired, Gaussian):
        return [desired] * (H + 1)
    desired = list(desired)
    if len(desired) < H:
        raise ValueError(f"desired trajectory has {len(desired)} steps, need {H}")
    return desired


def rollout(z0, policy, model, cost, theta, desired=None, cov_bound=1e8,
            with_gradient=True):
    """Predict ``H = cost.horizon`` steps from tracked state ``z0``.

    ``desired`` is None (target fixed at ``cost.target``), one Gaussian, or a
    per-step list of Gaussians. When ``with_gradient`` is set, ``dJ/dtheta``
    is computed as well (see :func:`cost_gradient`).
    """
    structure, selector, dt = policy.structure, policy.selector, policy.dt
    theta = np.asarray(theta, dtype=float).ravel()
    E, F, n_s = selector.n_channels, structure.n_inputs, model.n_state
    if selector.n_state != n_s or model.n_inputs != F:
        raise ValueError("policy, selector and model dimensions disagree")
    nz = n_s + 2 * E
    if z0.dim != nz:
        raise ValueError(f"initial tracked state has dim {z0.dim}, expected {nz}")
    H = cost.horizon
    if desired is None:
        desired = Gaussian.point(cost.target)
    desired = _as_desired(desired, E, H)

    A_aug = augmentation_map(selector, dt).A
    n_aug = A_aug.shape[0]
    A_pid = build_gain_matrix(structure, theta)
    L = np.vstack([A_aug, A_pid @ A_aug[n_aug - 3 * E:]])
    nv = n_aug + F
    u_idx = n_aug + np.arange(F)
    xu_idx = np.concatenate([np.arange(n_s), u_idx])
    in_idx = xu_idx[model.input_index]
    e_idx = nz + E + np.arange(E)
    i_idx = nz + 2 * E + np.arange(E)
    n_out = model.n_outputs
    # z_{t+1} = N y with y = (v, delta)
    N = np.zeros((nz, nv + n_out))
    Ns = model.next_state
    N[:n_s, :n_s] = Ns[:, :n_s]
    N[:n_s, u_idx] = Ns[:, n_s:n_s + F]
    N[:n_s, nv:] = Ns[:, n_s + F:]
    N[n_s + np.arange(E), e_idx] = 1.0
    N[n_s + E + np.arange(E), i_idx] = 1.0

    Pc, bc, W = _cost_projection(model, selector, cost)

    states = [z0]
    costs = np.ones(H + 1)
    cost_derivs = []
    cache = []
    controls = []
    truncated = None
    z = z0
    for t in range(H + 1):
        try:
            d_mean = Pc @ z.mean + bc
            d_cov = symmetrize(Pc @ z.cov @ Pc.T)
            c, dcm, dcS = expected_saturated_cost(Gaussian(d_mean, d_cov), W)
        except np.linalg.LinAlgError as exc:
            truncated = t
            logger.info("rollout truncated at step %d: %s", t, exc)
            break
        costs[t] = c
        cost_derivs.append((Pc.T @ dcm, Pc.T @ dcS @ Pc))
        if t == H:
            break
        x_des = desired[t]
        m_w = np.concatenate([z.mean, x_des.mean])
        V_w = linalg.block_diag(z.cov, x_des.cov)
        m_v = L @ m_w
        V_v = symmetrize(L @ V_w @ L.T)
        controls.append(Gaussian(m_v[u_idx], V_v[np.ix_(u_idx, u_idx)]))
        try:
            mm = model.gp.moment_match(m_v[in_idx], V_v[np.ix_(in_idx, in_idx)],
                                       derivs=with_gradient)
        except np.linalg.LinAlgError as exc:
            truncated = t + 1
            logger.info("rollout truncated at step %d: %s", t + 1, exc)
            break
        C = V_v[:, in_idx] @ mm.io_gain
        m_y = np.concatenate([m_v, mm.mean])
        V_y = np.block([[V_v, C], [C.T, mm.cov]])
        z = Gaussian(N @ m_y, symmetrize(N @ V_y @ N.T))
        if with_gradient:
            cache.append(_StepCache(m_w, V_w, L, V_v, mm))
        tr = np.trace(z.cov)
        if not (np.all(np.isfinite(z.mean)) and np.isfinite(tr)) or tr > cov_bound:
            truncated = t + 1
            logger.info("rollout truncated at step %d: covariance trace %g", t + 1, tr)
            break
        states.append(z)

    pred = RolloutPrediction(states=states, per_step_cost=costs, truncated_at=truncated,
                             theta=theta, controls=controls)
    pred._setup = dict(dt=dt, structure=structure, n_aug=n_aug, E=E, F=F, nz=nz,
                       in_idx=in_idx, N=N, A_aug=A_aug)
    if with_gradient:
        pred._cache = cache
        pred._cost_derivs = cost_derivs
        pred.grad = cost_gradient(pred)
    return pred


def cost_gradient(pred):
    """``dJ/dtheta`` for a rollout computed with ``with_gradient=True``.

    Tangents ``d mean(z_t)/dtheta_k`` and ``d cov(z_t)/dtheta_k`` start at zero
    for ``z_0`` and are pushed through augmentation and policy (one affine map
    whose matrix depends on theta), moment matching (GP Jacobians) and the
    fixed concatenation map. Each step contributes
    ``dE_t/dmean . dmean_t + dE_t/dcov : dcov_t``.
    """
    if pred._cache is None or pred._cost_derivs is None:
        raise ValueError("rollout was computed without gradient intermediates")
    s = pred._setup
    structure = s["structure"]
    K = structure.n_gains
    nz, E, F, n_aug = s["nz"], s["E"], s["F"], s["n_aug"]
    in_idx, N, A_aug = s["in_idx"], s["N"], s["A_aug"]
    nw = nz + E
    nv = n_aug + F
    # dL/dtheta_k: only the control rows depend on the gains
    dL = np.zeros((K, nv, nw))
    dL[:, n_aug:, :] = structure.gain_matrix_tangents() @ A_aug[n_aug - 3 * E:]

    dm_z = np.zeros((K, nz))
    dV_z = np.zeros((K, nz, nz))
    grad = np.zeros(K)
    for t, step in enumerate(pred._cache):
        dm_w = np.zeros((K, nw))
        dm_w[:, :nz] = dm_z
        dV_w = np.zeros((K, nw, nw))
        dV_w[:, :nz, :nz] = dV_z
        g_w = Gaussian(step.m_w, step.V_w)
        dm_v, dV_v, _ = linear_transform_jvp(g_w, LinearMap(step.L), dm_w, dV_w, dL)
        dm_in = dm_v[:, in_idx]
        dS_in = dV_v[:, in_idx][:, :, in_idx]
        dmu, dcov, dgain = step.mm.jvp(dm_in, dS_in)
        G = step.mm.io_gain
        dC = dV_v[:, :, in_idx] @ G + step.V_v[:, in_idx] @ dgain
        dm_y = np.concatenate([dm_v, dmu], axis=1)
        dV_y = np.block([[dV_v, dC], [np.swapaxes(dC, 1, 2), dcov]])
        dm_z = dm_y @ N.T
        dV_z = N @ dV_y @ N.T
        if t + 1 < len(pred._cost_derivs):
            gm, gS = pred._cost_derivs[t + 1]
            grad += dm_z @ gm + np.einsum("kij,ij->k", dV_z, gS)
    return grad
