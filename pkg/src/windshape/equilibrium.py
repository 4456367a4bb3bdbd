"""Steady operating points for power maximization and power tracking."""

import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import model
from .errors import (ConfigurationError, DomainError, EnvelopeError,
                     InfeasibleReferenceError)
from .model import InputVec, OutputVec, StateVec

LUT_POINTS = 200
LUT_PMIN_FRACTION = 0.05
_PITCH_SCAN_STEP = 0.25  # deg
_CP_TOL = 1e-12


@dataclass(frozen=True)
class OperatingPoint:
    x0: StateVec
    u0: InputVec
    y0: OutputVec
    v0: float
    region: int
    p_ref: Optional[float] = None

    @property
    def x(self):
        return np.array(self.x0, dtype=float)

    @property
    def u(self):
        return np.array(self.u0, dtype=float)

    @property
    def y(self):
        return np.array(self.y0, dtype=float)


@dataclass(frozen=True)
class PowerSpeedLUT:
    """Monotone power -> generator-speed table.

    Interpolation is linear in ``omega**3`` so that the cubic optimal-torque
    branch is reproduced exactly between nodes.  ``theta`` is populated when
    the table was built for a particular wind speed ``v0``.
    """

    power: np.ndarray
    omega: np.ndarray
    theta: Optional[np.ndarray] = None
    v0: Optional[float] = None

    def __call__(self, p):
        cube = np.interp(p, self.power, self.omega ** 3)
        return np.cbrt(cube)


# ---------------------------------------------------------------------------
# power maximization

@functools.lru_cache(maxsize=32)
def cp_maximizer(params):
    """Global maximizer ``(lambda*, theta*)`` of the power coefficient.

    An exhaustive 0.01 grid over lambda in [1, 15] and pitch in
    ``[theta_min, min(30, theta_max)]`` is refined by nested bounded
    golden-section searches.  Pitch may sit on its lower actuator bound;
    a maximizer on any other grid edge means the surrogate coefficients are
    unusable.
    """
    lo_t = params.theta_range[0]
    hi_t = min(30.0, params.theta_range[1])
    lam_grid = np.arange(100, 1501) / 100.0
    theta_grid = lo_t + np.arange(int(round((hi_t - lo_t) * 100)) + 1) / 100.0
    lam_mesh, theta_mesh = np.meshgrid(lam_grid, theta_grid, indexing="ij")
    values = model.cp_eval(params, lam_mesh, theta_mesh)
    i, j = np.unravel_index(np.argmax(values), values.shape)
    if i in (0, lam_grid.size - 1) or j == theta_grid.size - 1:
        raise ConfigurationError(
            f"Cp maximum on search boundary at lambda={lam_grid[i]}, "
            f"theta={theta_grid[j]}; check cp_coeffs")

    def best_theta(lam):
        if j == 0 and model.cp_partials(params, lam, lo_t)[2] <= 0:
            return lo_t
        a = max(lo_t, theta_grid[j] - 0.02)
        b = min(hi_t, theta_grid[j] + 0.02)
        res = minimize_scalar(lambda t: -model.cp_eval(params, lam, t),
                              bounds=(a, b), method="bounded",
                              options={"xatol": 1e-10})
        return float(res.x)

    res = minimize_scalar(lambda lam: -model.cp_eval(params, lam, best_theta(lam)),
                          bounds=(lam_grid[i] - 0.02, lam_grid[i] + 0.02),
                          method="bounded", options={"xatol": 1e-10})
    lam_star = float(res.x)
    return lam_star, best_theta(lam_star)


def cp_star(params):
    lam, theta = cp_maximizer(params)
    return model.cp_eval(params, lam, theta)


def available_power(params, v):
    """Electrical power at the Cp maximum, ignoring the speed limit."""
    return 0.5 * params.rho * params.area * params.eta * v ** 3 * cp_star(params)


def _tower_position(params, v0, lam, theta):
    ct = model.ct_eval(params, lam, theta)
    return 0.5 * params.rho * params.area * v0 ** 2 * ct / params.kt


def _check_inputs(params, theta, mg):
    lo_t, hi_t = params.theta_range
    lo_m, hi_m = params.mg_range
    if not lo_t <= theta <= hi_t:
        raise EnvelopeError(f"equilibrium pitch {theta:.4g} deg outside {params.theta_range}")
    if not lo_m <= mg <= hi_m:
        raise EnvelopeError(f"equilibrium torque {mg:.6g} N m outside {params.mg_range}")


def _make_point(params, omega, theta, mg, v0, region, p_ref=None, power=None):
    lam = params.speed_ratio * omega / v0
    xt = _tower_position(params, v0, lam, theta)
    if power is None:
        power = params.eta * omega * mg
    return OperatingPoint(
        x0=StateVec(omega, xt, 0.0),
        u0=InputVec(theta, mg),
        y0=OutputVec(omega, lam, power, xt),
        v0=float(v0), region=region, p_ref=p_ref)


def equilibrium_region2(params, v0):
    """Power-maximizing equilibrium at wind speed ``v0``."""
    if not v0 > 0:
        raise DomainError("wind speed must be positive")
    lam_star, theta_star = cp_maximizer(params)
    omega = params.ng * lam_star * v0 / params.r
    if omega > params.omega_max:
        raise EnvelopeError(
            f"region-2 speed {omega:.4g} rad/s exceeds omega_max at V={v0}")
    cp = model.cp_eval(params, lam_star, theta_star)
    mg = 0.5 * params.rho * params.area * v0 ** 3 / omega * cp
    _check_inputs(params, theta_star, mg)
    return _make_point(params, omega, theta_star, mg, v0, region=2)


def equilibrium_speed_limited(params, v0):
    """Maximum-power equilibrium with generator speed held at ``omega_max``.

    Used by the simulator when the power-maximizing speed would exceed the
    limit.
    """
    omega = params.omega_max
    lam = params.speed_ratio * omega / v0
    theta = theta_peak(params, lam)
    cp = model.cp_eval(params, lam, theta)
    mg = min(0.5 * params.rho * params.area * v0 ** 3 / omega * cp, params.mg_range[1])
    if mg < 0.5 * params.rho * params.area * v0 ** 3 / omega * cp:
        return equilibrium_region3(params, v0, params.eta * omega * mg)
    return _make_point(params, omega, theta, mg, v0, region=2)


# ---------------------------------------------------------------------------
# power tracking

def _pitch_grid(params):
    lo, hi = params.theta_range
    n = max(2, int(math.ceil((hi - lo) / _PITCH_SCAN_STEP)) + 1)
    return np.linspace(lo, hi, n)


def theta_peak(params, lam):
    """Pitch within the actuator range maximizing Cp at fixed lambda."""
    grid = _pitch_grid(params)
    values = model.cp_eval(params, np.full_like(grid, lam), grid)
    k = int(np.argmax(values))
    lo_t = params.theta_range[0]
    if k == 0 and model.cp_partials(params, lam, lo_t)[2] <= 0:
        return lo_t
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda t: -model.cp_eval(params, lam, t), bounds=(a, b),
                          method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def solve_pitch(params, lam, cp_target):
    """Largest pitch angle with ``Cp(lam, theta) = cp_target``.

    Brent root finding on a bracket located from a coarse pitch grid.

    Raises
    ------
    InfeasibleReferenceError
        If no pitch in the actuator range reaches the target.
    """
    grid = _pitch_grid(params)
    values = model.cp_eval(params, np.full_like(grid, lam), grid)
    tol = _CP_TOL * max(cp_target, 1e-3)
    above = np.nonzero(values >= cp_target - tol)[0]
    if above.size:
        k = int(above[-1])
        if k == grid.size - 1:
            raise InfeasibleReferenceError(
                f"Cp target {cp_target:.4g} exceeded even at maximum pitch (lambda={lam:.4g})")
        a, b = float(grid[k]), float(grid[k + 1])
    else:
        peak = theta_peak(params, lam)
        if model.cp_eval(params, lam, peak) < cp_target - tol:
            raise InfeasibleReferenceError(
                f"Cp target {cp_target:.4g} above max_theta Cp at lambda={lam:.4g}")
        a = peak
        b = float(grid[np.searchsorted(grid, peak, side="right")])
    cp = model.cp_unchecked
    if abs(cp(params, lam, a) - cp_target) <= tol:
        return a
    if cp(params, lam, b) - cp_target >= 0:
        return b
    return float(brentq(lambda t: cp(params, lam, t) - cp_target, a, b,
                        xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200))


@functools.lru_cache(maxsize=32)
def speed_lut(params):
    """Power -> speed table over ``[0, p_rated]`` (wind independent).

    Below the knee the table follows the optimal-torque curve ``P = k w^3``
    that keeps lambda at its optimum; above it speed is held at
    ``omega_max``.
    """
    lam_star, _ = cp_maximizer(params)
    k = optimal_torque_gain(params, lam_star)
    p_knee = k * params.omega_max ** 3
    power = np.linspace(0.0, params.p_rated, LUT_POINTS)
    if 0 < p_knee < params.p_rated:
        power = np.unique(np.append(power, p_knee))
    omega = np.minimum(np.cbrt(power / k), params.omega_max)
    return PowerSpeedLUT(power=power, omega=omega)


def optimal_torque_gain(params, lam_star=None):
    """Gain ``k`` with ``P = k omega^3`` along the maximum-Cp curve."""
    if lam_star is None:
        lam_star = cp_maximizer(params)[0]
    return (0.5 * params.rho * params.area * params.eta * cp_star(params)
            * (params.speed_ratio / lam_star) ** 3)


def build_lut(params, v0, points=LUT_POINTS):
    """Power/speed/pitch table valid at wind speed ``v0``.

    Power spans ``[0.05 p_rated, P_top]`` with ``P_top`` the smaller of rated
    power and the region-2 power at ``v0``.  Each entry carries the pitch that
    solves the Cp balance at ``v0``.
    """
    if not v0 > 0:
        raise DomainError("wind speed must be positive")
    curve = speed_lut(params)
    p_min = LUT_PMIN_FRACTION * params.p_rated
    p_top = params.p_rated
    try:
        p_top = min(p_top, equilibrium_region2(params, v0).y0.p)
    except EnvelopeError:
        pass
    if p_top <= p_min:
        raise InfeasibleReferenceError(f"no feasible power above {p_min:.4g} W at V={v0}")
    power = np.linspace(p_min, p_top, points)
    knee = optimal_torque_gain(params) * params.omega_max ** 3
    if p_min < knee < p_top:
        power = np.unique(np.append(power, knee))
    omega = curve(power)
    theta = []
    keep = []
    for idx, (p, w) in enumerate(zip(power, omega)):
        lam = params.speed_ratio * w / v0
        target = cp_target(params, p, v0)
        try:
            theta.append(solve_pitch(params, lam, target))
            keep.append(idx)
        except InfeasibleReferenceError:
            break
    if not keep:
        raise InfeasibleReferenceError(f"no feasible LUT entry at V={v0}")
    keep = np.array(keep)
    return PowerSpeedLUT(power=power[keep], omega=omega[keep],
                         theta=np.array(theta), v0=float(v0))


def cp_target(params, p, v0):
    """Cp required for electrical power ``p`` at wind speed ``v0``."""
    return 2.0 * p / (params.rho * params.area * params.eta * v0 ** 3)


def equilibrium_region3(params, v0, p_ref):
    """Power-tracking equilibrium delivering exactly ``p_ref``."""
    if not v0 > 0:
        raise DomainError("wind speed must be positive")
    if not p_ref > 0:
        raise InfeasibleReferenceError("power reference must be positive")
    if p_ref > params.p_rated * (1 + 1e-12):
        raise EnvelopeError(f"power reference {p_ref:.6g} W above rating")
    omega = float(speed_lut(params)(p_ref))
    lam = params.speed_ratio * omega / v0
    theta = solve_pitch(params, lam, cp_target(params, p_ref, v0))
    mg = p_ref / (params.eta * omega)
    _check_inputs(params, theta, mg)
    return _make_point(params, omega, theta, mg, v0, region=3,
                       p_ref=float(p_ref), power=float(p_ref))


def scaled_residual(params, op):
    """Infinity norm of the state derivative at ``op`` in relative units.

    The speed equation is divided by its torque term and the tower equation
    by the spring force scale, so 1e-8 means eight correct digits.
    """
    f = model.dynamics(params, op.x0, op.u0, op.v0)
    torque_scale = params.ng ** 2 / params.jt * max(abs(op.u0.mg), 1.0)
    force_scale = max(params.kt * abs(op.x0.xt), 1.0) / params.mt
    return max(abs(f[0]) / torque_scale, abs(f[1]), abs(f[2]) / force_scale)
