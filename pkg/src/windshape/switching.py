"""Discrete controllers, the mode-selection rule and bumpless state initialization."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import equilibrium as eq
from .errors import ConfigurationError, DiscretizationError
from .linearize import StateSpaceModel
from .model import InputVec, clamp_input

log = logging.getLogger(__name__)

RIDGE = 1e-10
SETTLE_TIME = 1.0  # s, horizon over which the free state component is chosen


def discretize(K, dt):
    """Bilinear (Tustin) discretization of a continuous realization.

    Integrators map to ``z = 1`` and the DC gain of systems without poles
    at the origin is preserved exactly.

    Raises
    ------
    DiscretizationError
        If ``K`` has a pole at ``2 / dt`` where the transform is singular.
    """
    if not dt > 0:
        raise DiscretizationError("sample time must be positive")
    if K.dt is not None:
        raise DiscretizationError("model is already discrete")
    n = K.nstates
    if n == 0:
        return StateSpaceModel(K.A, K.B, K.C, K.D, dt)
    E = np.eye(n) - 0.5 * dt * K.A
    if np.linalg.cond(E) > 1e12:
        raise DiscretizationError(f"pole at the bilinear singularity 2/dt = {2.0 / dt:g}")
    Ei = np.linalg.inv(E)
    Ad = Ei @ (np.eye(n) + 0.5 * dt * K.A)
    Bd = Ei @ K.B * dt
    Cd = K.C @ Ei
    Dd = K.D + 0.5 * dt * K.C @ Ei @ K.B
    return StateSpaceModel(Ad, Bd, Cd, Dd, dt)


@dataclass
class DiscreteController:
    """A discrete realization running around an operating point.

    ``mu = C xi + D nu`` with ``nu = y - y0``; the plant input is ``u0 + mu``.
    """

    sys: StateSpaceModel
    op: Optional[eq.OperatingPoint] = None
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sys.dt is None:
            raise ConfigurationError("DiscreteController needs a discrete realization")
        if self.xi is None:
            self.xi = np.zeros(self.sys.nstates)

    @property
    def dt(self):
        return self.sys.dt

    @property
    def A(self):
        return self.sys.A

    @property
    def B(self):
        return self.sys.B

    @property
    def C(self):
        return self.sys.C

    @property
    def D(self):
        return self.sys.D

    def reset(self):
        self.xi = np.zeros(self.sys.nstates)

    def step(self, nu):
        """Output for deviation ``nu`` and advance the state by one sample."""
        nu = np.asarray(nu, dtype=float)
        mu = self.sys.C @ self.xi + self.sys.D @ nu
        self.xi = self.sys.A @ self.xi + self.sys.B @ nu
        return mu


@dataclass(frozen=True)
class SwitchConfig:
    """Margin on available power and minimum dwell between mode changes."""

    beta_rel: float = 1.05
    hysteresis_hold: float = 1.0

    def __post_init__(self):
        if not self.beta_rel > 1:
            raise ConfigurationError("beta_rel must exceed 1")
        if not self.hysteresis_hold >= 0:
            raise ConfigurationError("hysteresis_hold must be non-negative")


def select_mode(v, p_ref, cfg, params, cp_star=None):
    """Instantaneous mode rule: 3 if available power exceeds ``beta_rel * p_ref``.

    Available power is the electrical power at the aerodynamic optimum,
    ``eta * rho * pi * r^2 / 2 * v^3 * Cp*``.
    """
    if cp_star is None:
        cp_star = eq.cp_star(params)
    available = 0.5 * params.rho * params.area * params.eta * v ** 3 * cp_star
    return 3 if available > cfg.beta_rel * p_ref else 2


class ModeSelector:
    """Mode rule with dwell-time hysteresis.

    A requested change is held back until ``hysteresis_hold`` seconds have
    passed since the previous change, unless the power reference itself has
    changed since the last evaluation.
    """

    def __init__(self, cfg, params, initial_mode=None, t0=0.0):
        self.cfg = cfg
        self.params = params
        self.cp_star = eq.cp_star(params)
        self.mode = initial_mode
        self.last_switch = -np.inf
        self.last_p_ref = None
        self.t0 = t0

    def update(self, t, v, p_ref):
        wanted = select_mode(v, p_ref, self.cfg, self.params, self.cp_star)
        ref_stepped = self.last_p_ref is not None and p_ref != self.last_p_ref
        self.last_p_ref = p_ref
        if self.mode is None:
            self.mode = wanted
            return self.mode
        if wanted != self.mode:
            if ref_stepped or t - self.last_switch >= self.cfg.hysteresis_hold:
                self.mode = wanted
                self.last_switch = t
        return self.mode


@dataclass(frozen=True)
class BumplessResult:
    """Solution of the state-initialization least-squares problem."""

    xi: np.ndarray
    xi_prev: np.ndarray
    nu_prev: np.ndarray
    cost: float
    zero_state_cost: float
    gradient_norm: float
    fallback: bool = False


def bumpless_lsq(C, D, target_u, target_y, ridge=RIDGE, A=None, B=None, horizon=1):
    """Minimize ``|C xi + D nu - du|^2 + |nu - dy|^2`` over ``(xi, nu)``.

    Normal equations with a ridge relative to their scale, followed by two
    refinement sweeps against the unregularized residual.  When the state
    matrices ``A`` and ``B`` are given, the minimizer is not unique as soon
    as ``C`` has a null space; the free component is then chosen so that,
    with ``nu`` held, the controller output over the next ``horizon`` steps
    stays closest to ``du``.  Returns
    ``(xi, nu, cost, relative_gradient_norm)``.
    """
    C = np.atleast_2d(C)
    D = np.atleast_2d(D)
    n, p = C.shape[1], D.shape[1]
    F = np.block([[C, D], [np.zeros((p, n)), np.eye(p)]])
    g = np.concatenate([target_u, target_y])
    FtF = F.T @ F
    scale = max(np.linalg.norm(FtF, 2), 1.0)
    Nm = FtF + ridge * scale * np.eye(n + p)
    z = np.linalg.solve(Nm, F.T @ g)
    for _ in range(2):
        z = z + np.linalg.solve(Nm, F.T @ (g - F @ z))
    if A is not None and n > 0 and horizon > 0:
        # null space of F is {(xi, 0) : C xi = 0}
        _, s, Vt = np.linalg.svd(C)
        rank = int(np.sum(s > 1e-12 * max(s[0], np.finfo(float).tiny))) if s.size else 0
        Nc = Vt[rank:].T
        if Nc.shape[1]:
            xi, nu = z[:n].copy(), z[n:]
            drive = B @ nu
            base = C @ xi  # equals the matched output minus D nu
            M = Nc
            rows, rhs = [], []
            for _ in range(int(horizon)):
                xi = A @ xi + drive
                M = A @ M
                rows.append(C @ M)
                rhs.append(base - C @ xi)
            w = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
            z[:n] = z[:n] + Nc @ w
    r = F @ z - g
    grad = F.T @ r
    denom = np.linalg.norm(F, 2) * max(np.linalg.norm(g), np.finfo(float).tiny)
    return z[:n], z[n:], float(r @ r), float(np.linalg.norm(grad) / denom)


def bumpless_init(K_to, u_prev, y_prev, ridge=RIDGE, settle_time=SETTLE_TIME):
    """Controller state that reproduces the last applied input and output.

    The incoming controller's previous state and input deviation are chosen
    so that its output would have equalled ``u_prev`` while seeing
    ``y_prev``; its state is then propagated one step.  Falls back to a
    zero state (logged) if the least-squares problem cannot be solved.
    """
    op = K_to.op
    du = np.asarray(u_prev, dtype=float) - np.asarray(op.u0, dtype=float)
    dy = np.asarray(y_prev, dtype=float) - np.asarray(op.y0, dtype=float)
    zero_cost = float(np.sum((K_to.D @ dy - du) ** 2))
    try:
        horizon = max(1, int(round(settle_time / K_to.dt))) if K_to.dt else 1
        xi_prev, nu_prev, cost, grad = bumpless_lsq(K_to.C, K_to.D, du, dy, ridge,
                                                    K_to.A, K_to.B, horizon)
        if not (np.all(np.isfinite(xi_prev)) and np.isfinite(cost)):
            raise np.linalg.LinAlgError("non-finite least-squares solution")
    except np.linalg.LinAlgError as exc:
        log.warning("bumpless initialization failed (%s); using zero state", exc)
        n = K_to.sys.nstates
        return BumplessResult(xi=np.zeros(n), xi_prev=np.zeros(n), nu_prev=dy,
                              cost=zero_cost, zero_state_cost=zero_cost,
                              gradient_norm=float("nan"), fallback=True)
    xi = K_to.A @ xi_prev + K_to.B @ nu_prev
    return BumplessResult(xi=xi, xi_prev=xi_prev, nu_prev=nu_prev, cost=cost,
                          zero_state_cost=zero_cost, gradient_norm=grad)


@dataclass(frozen=True)
class SwitchEvent:
    t: float
    from_mode: int
    to_mode: int
    u_before: tuple
    u_after: tuple
    u_command: tuple
    cost: float
    gradient_norm: float


def step_switched(controllers, mode, y, u_prev, params, dt):
    """One sample of the switched controller.

    Only the active controller is stepped.  Returns ``(u, u_command)``: the
    clamped input applied to the plant and the unclamped command.
    """
    K = controllers[mode]
    nu = np.asarray(y, dtype=float) - np.asarray(K.op.y0, dtype=float)
    mu = K.step(nu)
    command = InputVec(K.op.u0.theta + mu[0], K.op.u0.mg + mu[1])
    return InputVec(*clamp_input(params, command, u_prev, dt)), command


def input_jump(params, u_before, u_after):
    """Largest input change normalized by each channel's saturation span."""
    spans = (params.theta_range[1] - params.theta_range[0],
             params.mg_range[1] - params.mg_range[0])
    return max(abs(a - b) / s for a, b, s in zip(u_after, u_before, spans))
