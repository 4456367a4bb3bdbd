"""Closed-loop simulation of the switched controller on the nonlinear plant, and metrics."""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import equilibrium as eq
from . import model
from .errors import (ConfigurationError, EnvelopeError, InfeasibleReferenceError,
                     IntegrationFault, WindshapeError)
from .model import InputVec, WindScenario
from .switching import (DiscreteController, ModeSelector, SwitchConfig, SwitchEvent,
                        bumpless_init, input_jump, step_switched)

log = logging.getLogger(__name__)

DEFAULT_DT = 0.004
DESIGN_LIFE = 20 * 365.25 * 86400.0  # s
LIFETIME_CYCLES = 1e7
TRACE_HEADER = ("t", "V", "omega", "xt", "vt", "theta", "mg", "p", "lambda", "mode", "p_ref")
EVENT_HEADER = ("t", "from_mode", "to_mode", "theta_before", "mg_before",
                "theta_after", "mg_after", "theta_command", "mg_command", "cost",
                "gradient_norm")


class UndefinedMetricError(WindshapeError):
    """A metric was requested on a trace that has no samples for it."""


def _breakpoints(value, name):
    """Normalize a constant or a sequence of ``(t, value)`` pairs."""
    if np.isscalar(value):
        return ((0.0, float(value)),)
    pts = tuple((float(t), float(v)) for t, v in value)
    if not pts:
        raise ConfigurationError(f"{name} needs at least one breakpoint")
    times = [t for t, _ in pts]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigurationError(f"{name} breakpoints must have increasing times")
    return pts


@dataclass(frozen=True)
class Scenario:
    """A closed-loop experiment.

    ``p_ref`` is a constant or piecewise-constant ``(t, value)`` steps.
    ``wind_profile`` optionally replaces the constant mean wind by a
    piecewise-linear ``(t, value)`` trend; turbulence is added on top.
    """

    wind: WindScenario = field(default_factory=WindScenario)
    p_ref: object = 2.0e6
    duration: Optional[float] = None
    dt: float = DEFAULT_DT
    switch_cfg: SwitchConfig = field(default_factory=SwitchConfig)
    wind_profile: Optional[tuple] = None
    filter_tau: float = 1.0
    bumpless: bool = True
    initial: Optional[eq.OperatingPoint] = None

    def __post_init__(self):
        duration = self.wind.duration if self.duration is None else float(self.duration)
        object.__setattr__(self, "duration", duration)
        if not self.dt > 0 or not duration > 0:
            raise ConfigurationError("dt and duration must be positive")
        steps = duration / self.dt
        if abs(steps - round(steps)) > 1e-6:
            raise ConfigurationError("dt must divide duration")
        object.__setattr__(self, "p_ref", _breakpoints(self.p_ref, "p_ref"))
        if any(p <= 0 for _, p in self.p_ref):
            raise ConfigurationError("p_ref must be positive")
        if self.wind_profile is not None:
            prof = _breakpoints(self.wind_profile, "wind_profile")
            if any(v <= 0 for _, v in prof):
                raise ConfigurationError("wind_profile speeds must be positive")
            object.__setattr__(self, "wind_profile", prof)
        if not self.filter_tau >= 0:
            raise ConfigurationError("filter_tau must be non-negative")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt))

    def time_grid(self):
        return np.arange(self.n_steps + 1) * self.dt

    def p_ref_at(self, t_grid):
        times = np.array([t for t, _ in self.p_ref])
        values = np.array([p for _, p in self.p_ref])
        idx = np.searchsorted(times, t_grid, side="right") - 1
        return values[np.clip(idx, 0, None)]

    def wind_series(self, t_grid):
        v = model.wind_sample(self.wind, t_grid)
        if self.wind_profile is None:
            return v
        times = [t for t, _ in self.wind_profile]
        values = [s for _, s in self.wind_profile]
        v = v - self.wind.mean_speed + np.interp(t_grid, times, values)
        below = v < model.WIND_FLOOR
        v[below] = 2 * model.WIND_FLOOR - v[below]
        return np.maximum(v, model.WIND_FLOOR)


@dataclass
class SimTrace:
    t: np.ndarray
    v: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    mode: np.ndarray
    p_ref: np.ndarray
    events: list = field(default_factory=list)
    fault: Optional[dict] = None
    event_jumps: list = field(default_factory=list)

    def __len__(self):
        return self.t.size

    def to_csv(self, path):
        cols = np.column_stack([self.t, self.v, self.x, self.u, self.y[:, 2],
                                self.y[:, 1], self.mode, self.p_ref])
        fmt = ["%.17g"] * 9 + ["%d", "%.17g"]
        np.savetxt(path, cols, fmt=fmt, delimiter=",", header=",".join(TRACE_HEADER),
                   comments="")

    def events_to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(EVENT_HEADER) + "\n")
            for e in self.events:
                row = [repr(e.t), str(e.from_mode), str(e.to_mode),
                       *(repr(float(c)) for c in (*e.u_before, *e.u_after, *e.u_command)),
                       repr(float(e.cost)), repr(float(e.gradient_norm))]
                fh.write(",".join(row) + "\n")


def read_trace_csv(path, params=None):
    """Load a trace written by :meth:`SimTrace.to_csv` (events are not included)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, v = data[:, 0], data[:, 1]
    x, u = data[:, 2:5], data[:, 5:7]
    y = np.column_stack([x[:, 0], data[:, 8], data[:, 7], x[:, 1]])
    return SimTrace(t=t, v=v, x=x, u=u, y=y, mode=data[:, 9].astype(int), p_ref=data[:, 10])


class _OperatingPointCache:
    """Equilibrium per mode, recomputed only when its inputs change."""

    def __init__(self, params):
        self.params = params
        self.keys = {}
        self.points = {}

    def get(self, mode, v, p_ref):
        key = (v, p_ref) if mode == 3 else (v,)
        if self.keys.get(mode) == key:
            return self.points[mode]
        op = self._solve(mode, v, p_ref)
        if op is None:
            op = self.points.get(mode) or self._solve(2, v, p_ref)
        self.keys[mode] = key
        self.points[mode] = op
        return op

    def _solve(self, mode, v, p_ref):
        p = self.params
        try:
            if mode == 3:
                return eq.equilibrium_region3(p, v, p_ref)
            try:
                return eq.equilibrium_region2(p, v)
            except EnvelopeError:
                return eq.equilibrium_speed_limited(p, v)
        except (EnvelopeError, InfeasibleReferenceError):
            return None


def run(scenario, controllers, params):
    """Simulate the switched loop.

    Parameters
    ----------
    scenario : Scenario
    controllers : mapping
        Mode (2 or 3) to a discrete controller realization whose sample time
        equals ``scenario.dt``.
    params : TurbineParams

    Returns
    -------
    SimTrace
        Truncated at the last valid sample if the plant leaves its domain;
        the fault is recorded in ``trace.fault``.
    """
    dt = scenario.dt
    for mode, K in controllers.items():
        if K.dt is None or abs(K.dt - dt) > 1e-12 * dt:
            raise ConfigurationError(f"controller {mode} sample time differs from dt")
    ctrl = {m: DiscreteController(K) for m, K in controllers.items()}
    t_grid = scenario.time_grid()
    wind = scenario.wind_series(t_grid)
    p_ref = scenario.p_ref_at(t_grid)
    n = t_grid.size

    xs = np.zeros((n, 3))
    us = np.zeros((n, 2))
    ys = np.zeros((n, 4))
    modes = np.zeros(n, dtype=int)
    cache = _OperatingPointCache(params)
    selector = ModeSelector(scenario.switch_cfg, params)
    alpha = 0.0 if scenario.filter_tau == 0 else math.exp(-dt / scenario.filter_tau)

    v_f = float(wind[0])
    mode = selector.update(0.0, v_f, float(p_ref[0]))
    op0 = scenario.initial or cache.get(mode, v_f, float(p_ref[0]))
    ctrl[mode].op = op0
    x = np.array(op0.x, dtype=float)
    u_prev = InputVec(*op0.u0)
    y_prev = None
    events, jumps = [], []
    fault = None
    last = n - 1

    for k in range(n):
        t = float(t_grid[k])
        v = float(wind[k])
        if k > 0:
            v_f = alpha * v_f + (1.0 - alpha) * v
        pr = float(p_ref[k])
        new_mode = selector.update(t, v_f, pr)
        op = cache.get(new_mode, v_f, pr)
        y_meas = np.asarray(model.output_map(params, x, u_prev, v), dtype=float)
        K = ctrl[new_mode]
        K.op = op
        switched = k > 0 and new_mode != mode
        if switched:
            if scenario.bumpless:
                init = bumpless_init(K, u_prev, y_prev)
                K.xi = init.xi
                cost, grad = init.cost, init.gradient_norm
            else:
                K.reset()
                cost, grad = float("nan"), float("nan")
        u, command = step_switched(ctrl, new_mode, y_meas, u_prev, params, dt)
        if switched:
            events.append(SwitchEvent(t=t, from_mode=mode, to_mode=new_mode,
                                      u_before=tuple(u_prev), u_after=tuple(u),
                                      u_command=tuple(command), cost=cost,
                                      gradient_norm=grad))
            jumps.append(input_jump(params, u_prev, command))
        mode = new_mode
        xs[k], us[k], modes[k] = x, u, mode
        ys[k] = model.output_map(params, x, u, v)
        u_prev, y_prev = InputVec(*u), y_meas
        if k == n - 1:
            break
        try:
            x = model.integrate_step(params, x, u, v, dt)
        except IntegrationFault as exc:
            fault = {"t": t, "message": str(exc), "state": [float(s) for s in exc.last_state]}
            log.warning("simulation fault at t=%.3f: %s", t, exc)
            last = k
            break

    sl = slice(0, last + 1)
    return SimTrace(t=t_grid[sl].copy(), v=wind[sl].copy(), x=xs[sl], u=us[sl], y=ys[sl],
                    mode=modes[sl], p_ref=p_ref[sl].copy(), events=events, fault=fault,
                    event_jumps=jumps)


# ---------------------------------------------------------------------------
# metrics

def rms_error(trace):
    """RMS of ``p - p_ref`` over samples where mode 3 is active."""
    sel = trace.mode == 3
    if not np.any(sel):
        raise UndefinedMetricError("trace has no mode-3 samples")
    err = trace.y[sel, 2] - trace.p_ref[sel]
    return float(np.sqrt(np.mean(err ** 2)))


def turning_points(series):
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return x
    keep = np.concatenate([[True], np.diff(x) != 0])
    x = x[keep]
    if x.size < 3:
        return x
    d = np.diff(x)
    interior = np.sign(d[1:]) != np.sign(d[:-1])
    return np.concatenate([[x[0]], x[1:-1][interior], [x[-1]]])


def rainflow(series):
    """Four-point rainflow counting.

    Returns a list of ``(range, mean, count)`` with ``count`` 1.0 for full
    cycles and 0.5 for the half cycles left in the residue.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 3:
        return []
    stack, cycles = [], []
    for p in turning_points(x):
        stack.append(float(p))
        while len(stack) >= 4:
            inner = abs(stack[-2] - stack[-3])
            if inner <= abs(stack[-3] - stack[-4]) and inner <= abs(stack[-1] - stack[-2]):
                cycles.append((inner, 0.5 * (stack[-2] + stack[-3]), 1.0))
                del stack[-3:-1]
            else:
                break
    for a, b in zip(stack, stack[1:]):
        cycles.append((abs(b - a), 0.5 * (a + b), 0.5))
    return cycles


def del_(series, woehler_m=4.0, ref_cycles=None):
    """Damage-equivalent load ``(sum n_i S_i^m / N_ref)^(1/m)``.

    Series too short to hold a cycle give 0; otherwise ``ref_cycles`` must
    be positive.
    """
    cycles = rainflow(series)
    if not cycles:
        return 0.0
    if ref_cycles is None or not ref_cycles > 0:
        raise ValueError("ref_cycles must be positive")
    damage = sum(n * s ** woehler_m for s, _, n in cycles)
    return float((damage / ref_cycles) ** (1.0 / woehler_m))


damage_equivalent_load = del_


def reference_cycles(duration, lifetime_cycles=LIFETIME_CYCLES, design_life=DESIGN_LIFE):
    """Lifetime reference cycle count scaled to a record of ``duration`` seconds."""
    return lifetime_cycles * duration / design_life


def tower_moment_proxy(trace, params, lever=None):
    """Tower-base fore-aft moment proxy ``Kt * xt * lever``."""
    lever = params.tower_lever if lever is None else lever
    return params.kt * trace.x[:, 1] * lever


@dataclass
class Metrics:
    rms_tracking_error: Optional[float]
    total_energy: float
    mode_occupancy: dict
    del_tower: float
    max_overshoot: Optional[float]
    switch_count: int
    duration: float
    fault: Optional[dict] = None

    def to_dict(self):
        return {
            "rms_tracking_error": self.rms_tracking_error,
            "total_energy": self.total_energy,
            "mode_occupancy": {str(k): v for k, v in sorted(self.mode_occupancy.items())},
            "del_tower": self.del_tower,
            "max_overshoot": self.max_overshoot,
            "switch_count": self.switch_count,
            "duration": self.duration,
            "fault": self.fault,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(rms_tracking_error=d["rms_tracking_error"], total_energy=d["total_energy"],
                   mode_occupancy={int(k): v for k, v in d["mode_occupancy"].items()},
                   del_tower=d["del_tower"], max_overshoot=d["max_overshoot"],
                   switch_count=d["switch_count"], duration=d["duration"], fault=d.get("fault"))


def compute_metrics(trace, params, woehler_m=4.0):
    duration = float(trace.t[-1] - trace.t[0]) if len(trace) > 1 else 0.0
    p = trace.y[:, 2]
    energy = float(np.sum(0.5 * (p[1:] + p[:-1]) * np.diff(trace.t))) if len(trace) > 1 else 0.0
    occupancy = {m: float(np.mean(trace.mode == m)) for m in (2, 3)}
    try:
        rms = rms_error(trace)
        sel = trace.mode == 3
        overshoot = float(max(0.0, np.max(p[sel] - trace.p_ref[sel])))
    except UndefinedMetricError:
        rms = overshoot = None
    proxy = tower_moment_proxy(trace, params)
    ref = reference_cycles(max(duration, trace.t[1] - trace.t[0] if len(trace) > 1 else 1.0))
    return Metrics(rms_tracking_error=rms, total_energy=energy, mode_occupancy=occupancy,
                   del_tower=del_(proxy, woehler_m, ref), max_overshoot=overshoot,
                   switch_count=len(trace.events), duration=duration, fault=trace.fault)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_metrics_json(path, metrics):
    write_json(path, metrics.to_dict())


def read_metrics_json(path):
    with open(path) as fh:
        return Metrics.from_dict(json.load(fh))
