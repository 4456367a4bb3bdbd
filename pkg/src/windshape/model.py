"""Nonlinear turbine model: rotor/generator speed plus fore-aft tower top.

States are ``[omega, xt, vt]`` (generator speed, tower-top position and
velocity), inputs ``[theta, mg]`` (blade pitch in degrees, generator torque)
and outputs ``[omega, lambda, p, xt]``.  Wind speed enters as an exogenous
scalar.
"""

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError, DomainError, IntegrationFault

BETZ_LIMIT = 16.0 / 27.0
CT_UPPER = 2.0
OMEGA_FLOOR = 0.1  # rad/s, below this the 1/omega term is not trusted
WIND_FLOOR = 0.5  # m/s, reflecting barrier of the wind surrogate

CP_DEFAULT = (0.5176, 116.0, 0.4, 5.0, 21.0, 0.0068)
CT_DEFAULT = (0.3, 60.0, 0.3, 2.0, 12.0, 0.04)


@dataclass(frozen=True)
class TurbineParams:
    """Physical constants of a ~3.4 MW class machine.

    ``jt`` is the lumped drivetrain inertia as it appears in the speed
    equation ``domega/dt = Ng^2/Jt * (P_aero/omega - Mg)``.  Pitch is in
    degrees everywhere.
    """

    rho: float = 1.225
    r: float = 65.0
    ng: float = 97.0
    jt: float = 4.0e7
    mt: float = 2.5e5
    dt: float = 2.0e4
    kt: float = 1.0e6
    eta: float = 0.95
    cp_coeffs: tuple = CP_DEFAULT
    ct_coeffs: tuple = CT_DEFAULT
    theta_range: tuple = (0.0, 45.0)
    mg_range: tuple = (0.0, 4.5e4)
    theta_rate: float = 10.0
    mg_rate: float = 2.0e4
    p_rated: float = 3.4e6
    omega_max: float = 120.0
    tower_lever: float = 110.0

    def __post_init__(self):
        for name in ("rho", "r", "ng", "jt", "mt", "dt", "kt", "theta_rate",
                     "mg_rate", "p_rated", "omega_max", "tower_lever"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be positive, got {value!r}")
        if not 0 < self.eta <= 1:
            raise ConfigurationError(f"eta must lie in (0, 1], got {self.eta!r}")
        for name in ("cp_coeffs", "ct_coeffs"):
            coeffs = tuple(float(c) for c in getattr(self, name))
            if len(coeffs) != 6:
                raise ConfigurationError(f"{name} needs 6 coefficients")
            object.__setattr__(self, name, coeffs)
        for name in ("theta_range", "mg_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ConfigurationError(f"{name} must be a nonempty interval")
            object.__setattr__(self, name, (lo, hi))
        if self.theta_range[0] <= -1.0:
            raise ConfigurationError("theta_range must stay above -1 deg "
                                     "(surrogate singularity)")

    @property
    def area(self):
        return math.pi * self.r ** 2

    @property
    def speed_ratio(self):
        """Factor r/Ng mapping generator speed over wind speed to lambda."""
        return self.r / self.ng

    def replace(self, **changes):
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs.update(changes)
        return TurbineParams(**kwargs)


class StateVec(NamedTuple):
    omega: float
    xt: float
    vt: float


class InputVec(NamedTuple):
    theta: float
    mg: float


class OutputVec(NamedTuple):
    omega: float
    lam: float
    p: float
    xt: float


@dataclass(frozen=True)
class WindScenario:
    mean_speed: float = 10.0
    turbulence_intensity: float = 0.0
    correlation_time: float = 10.0
    seed: int = 0
    duration: float = 600.0

    def __post_init__(self):
        if not self.mean_speed > 0:
            raise ConfigurationError("mean_speed must be positive")
        if not self.turbulence_intensity >= 0:
            raise ConfigurationError("turbulence_intensity must be >= 0")
        if not self.correlation_time > 0:
            raise ConfigurationError("correlation_time must be positive")


# ---------------------------------------------------------------------------
# aerodynamic surrogates

def _inv_lambda_i(lam, theta):
    return 1.0 / (lam + 0.08 * theta) - 0.035 / (theta ** 3 + 1.0)


def _surrogate_scalar(c, lam, theta, upper):
    g = 1.0 / (lam + 0.08 * theta) - 0.035 / (theta * theta * theta + 1.0)
    raw = c[0] * (c[1] * g - c[2] * theta - c[3]) * math.exp(-c[4] * g) + c[5] * lam
    if raw < 0.0:
        return 0.0
    return upper if raw > upper else raw


def _surrogate_array(c, lam, theta, upper):
    g = _inv_lambda_i(lam, theta)
    raw = c[0] * (c[1] * g - c[2] * theta - c[3]) * np.exp(-c[4] * g) + c[5] * lam
    return np.clip(raw, 0.0, upper)


def _surrogate_partials(c, lam, theta, upper):
    """Value and partials (d/dlambda, d/dtheta) of a clamped surrogate."""
    s = lam + 0.08 * theta
    den = theta ** 3 + 1.0
    g = 1.0 / s - 0.035 / den
    e = math.exp(-c[4] * g)
    inner = c[1] * g - c[2] * theta - c[3]
    raw = c[0] * inner * e + c[5] * lam
    if raw <= 0.0 or raw >= upper:
        return min(max(raw, 0.0), upper), 0.0, 0.0
    d_g = c[0] * e * (c[1] - c[4] * inner)
    dg_dlam = -1.0 / s ** 2
    dg_dtheta = -0.08 / s ** 2 + 0.105 * theta ** 2 / den ** 2
    return raw, d_g * dg_dlam + c[5], d_g * dg_dtheta - c[0] * c[2] * e


def _check_args(lam, theta):
    lam_a = np.asarray(lam, dtype=float)
    theta_a = np.asarray(theta, dtype=float)
    if np.any(lam_a <= 0):
        raise DomainError("tip-speed ratio must be positive")
    if np.any(theta_a <= -1.0):
        raise DomainError("pitch must exceed -1 deg")
    return lam_a, theta_a


def cp_eval(params, lam, theta):
    """Power coefficient, clamped to ``[0, Betz]``.  Pitch in degrees."""
    if np.ndim(lam) == 0 and np.ndim(theta) == 0:
        lam, theta = float(lam), float(theta)
        if lam <= 0:
            raise DomainError(f"tip-speed ratio must be positive, got {lam}")
        if theta <= -1.0:
            raise DomainError("pitch must exceed -1 deg")
        return _surrogate_scalar(params.cp_coeffs, lam, theta, BETZ_LIMIT)
    lam_a, theta_a = _check_args(lam, theta)
    return _surrogate_array(params.cp_coeffs, lam_a, theta_a, BETZ_LIMIT)


def cp_unchecked(params, lam, theta):
    """Scalar Cp without argument validation, for inner solver loops."""
    return _surrogate_scalar(params.cp_coeffs, lam, theta, BETZ_LIMIT)


def ct_eval(params, lam, theta):
    """Thrust coefficient, clamped to ``[0, 2]``."""
    if np.ndim(lam) == 0 and np.ndim(theta) == 0:
        lam, theta = float(lam), float(theta)
        if lam <= 0:
            raise DomainError(f"tip-speed ratio must be positive, got {lam}")
        if theta <= -1.0:
            raise DomainError("pitch must exceed -1 deg")
        return _surrogate_scalar(params.ct_coeffs, lam, theta, CT_UPPER)
    lam_a, theta_a = _check_args(lam, theta)
    return _surrogate_array(params.ct_coeffs, lam_a, theta_a, CT_UPPER)


def cp_partials(params, lam, theta):
    """Return ``(Cp, dCp/dlambda, dCp/dtheta)`` at a scalar point."""
    _check_args(lam, theta)
    return _surrogate_partials(params.cp_coeffs, float(lam), float(theta), BETZ_LIMIT)


def ct_partials(params, lam, theta):
    """Return ``(Ct, dCt/dlambda, dCt/dtheta)`` at a scalar point."""
    _check_args(lam, theta)
    return _surrogate_partials(params.ct_coeffs, float(lam), float(theta), CT_UPPER)


# ---------------------------------------------------------------------------
# dynamics

def dynamics(params, x, u, v):
    """State derivative ``[domega, dxt, dvt]``."""
    omega, xt, vt = float(x[0]), float(x[1]), float(x[2])
    theta, mg = float(u[0]), float(u[1])
    v = float(v)
    if omega <= 0:
        raise DomainError(f"generator speed must be positive, got {omega}")
    if v <= 0:
        raise DomainError(f"wind speed must be positive, got {v}")
    return np.array(_rhs(params, omega, xt, vt, theta, mg, v))


def _rhs(p, omega, xt, vt, theta, mg, v):
    lam = p.speed_ratio * omega / v
    cp = _surrogate_scalar(p.cp_coeffs, lam, theta, BETZ_LIMIT)
    ct = _surrogate_scalar(p.ct_coeffs, lam, theta, CT_UPPER)
    half_rho_a = 0.5 * p.rho * p.area
    ng2_jt = p.ng * p.ng / p.jt
    domega = ng2_jt * (half_rho_a * v ** 3 * cp / omega - mg)
    dvt = (half_rho_a * v * v * ct - p.dt * vt - p.kt * xt) / p.mt
    return domega, vt, dvt


def output_map(params, x, u, v):
    """Measured outputs ``(omega, lambda, p, xt)``; ``p = eta * omega * mg``."""
    v = float(v)
    if v <= 0:
        raise DomainError(f"wind speed must be positive, got {v}")
    omega = x[0]
    return OutputVec(omega, params.speed_ratio * omega / v,
                     params.eta * omega * u[1], x[1])


def integrate_step(params, x, u, v, dt):
    """Advance the plant by one fixed RK4 step with ``u`` and ``v`` held.

    Raises
    ------
    IntegrationFault
        If generator speed drops below ``OMEGA_FLOOR`` at any stage.  The
        fault carries the state passed in.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    w, xt, vt = float(x[0]), float(x[1]), float(x[2])
    theta, mg, v = float(u[0]), float(u[1]), float(v)
    if w < OMEGA_FLOOR or not math.isfinite(w):
        raise IntegrationFault(f"generator speed {w} below floor", last_state=np.array(x, dtype=float))
    try:
        k1 = _rhs(params, w, xt, vt, theta, mg, v)
        w2 = w + 0.5 * dt * k1[0]
        _guard(w2, x)
        k2 = _rhs(params, w2, xt + 0.5 * dt * k1[1], vt + 0.5 * dt * k1[2], theta, mg, v)
        w3 = w + 0.5 * dt * k2[0]
        _guard(w3, x)
        k3 = _rhs(params, w3, xt + 0.5 * dt * k2[1], vt + 0.5 * dt * k2[2], theta, mg, v)
        w4 = w + dt * k3[0]
        _guard(w4, x)
        k4 = _rhs(params, w4, xt + dt * k3[1], vt + dt * k3[2], theta, mg, v)
    except (ZeroDivisionError, OverflowError) as exc:
        raise IntegrationFault(str(exc), last_state=np.array(x, dtype=float)) from exc
    h6 = dt / 6.0
    new = np.array([
        w + h6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        xt + h6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        vt + h6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
    ])
    _guard(new[0], x)
    if not np.all(np.isfinite(new)):
        raise IntegrationFault("non-finite state", last_state=np.array(x, dtype=float))
    return new


def _guard(omega, x):
    if not omega >= OMEGA_FLOOR:
        raise IntegrationFault(f"generator speed {omega} below floor {OMEGA_FLOOR}",
                               last_state=np.array(x, dtype=float))


# ---------------------------------------------------------------------------
# wind

def wind_sample(scenario, t_grid):
    """Ornstein-Uhlenbeck wind series on a uniform time grid.

    Stationary mean is ``mean_speed`` and stationary standard deviation
    ``turbulence_intensity * mean_speed``.  Values are reflected at
    ``WIND_FLOOR``.  The first sample is drawn from the stationary law.
    """
    t = np.asarray(t_grid, dtype=float)
    n = t.size
    mean = scenario.mean_speed
    sigma = scenario.turbulence_intensity * mean
    if n == 0:
        return np.empty(0)
    if sigma == 0.0:
        return np.full(n, float(mean))
    steps = np.diff(t)
    if n > 1 and not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise DomainError("t_grid must be uniform")
    rng = np.random.default_rng(scenario.seed)
    noise = rng.standard_normal(n)
    dev = np.empty(n)
    dev[0] = sigma * noise[0]
    if n > 1:
        decay = math.exp(-steps[0] / scenario.correlation_time)
        kick = sigma * math.sqrt(1.0 - decay * decay)
        # AR(1) recursion dev[k] = decay * dev[k-1] + kick * noise[k]
        dev[1:], _ = lfilter([1.0], [1.0, -decay], kick * noise[1:], zi=[decay * dev[0]])
    out = mean + dev
    below = out < WIND_FLOOR
    out[below] = 2 * WIND_FLOOR - out[below]
    return np.maximum(out, WIND_FLOOR)


def clamp_input(params, u, u_prev, dt):
    """Saturation followed by slew-rate limiting relative to ``u_prev``."""
    lo_t, hi_t = params.theta_range
    lo_m, hi_m = params.mg_range
    theta = min(max(float(u[0]), lo_t), hi_t)
    mg = min(max(float(u[1]), lo_m), hi_m)
    if u_prev is not None:
        dth = params.theta_rate * dt
        dmg = params.mg_rate * dt
        theta = min(max(theta, u_prev[0] - dth), u_prev[0] + dth)
        mg = min(max(mg, u_prev[1] - dmg), u_prev[1] + dmg)
        theta = min(max(theta, lo_t), hi_t)
        mg = min(max(mg, lo_m), hi_m)
    return np.array([theta, mg])
