"""Command-line front end: synthesis, robustness sweep and batch simulation.

Exit codes are 0 on success, 1 on a runtime fault and 2 on a configuration
error.
"""

import argparse
import configparser
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import equilibrium as eq
from . import loopshape as ls
from . import sim
from .errors import ConfigurationError, SynthesisError, WindshapeError
from .model import TurbineParams, WindScenario
from .switching import SwitchConfig

log = logging.getLogger("windshape")

EXIT_OK, EXIT_FAULT, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("synthesize", "sweep", "simulate", "all")


class ConfigError(ConfigurationError):
    """Configuration problem tied to a file location."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DesignConfig:
    region2_wind: float = 7.5
    region3_wind: float = 11.0
    region3_power: float = 3.0e6
    gamma_factor: float = ls.DEFAULT_GAMMA_FACTOR
    dt: float = sim.DEFAULT_DT


@dataclass
class SweepConfig:
    v_min: float = 4.0
    v_max: float = 16.0
    v_points: int = 20
    p_min: float = 0.2e6
    p_max: float = 3.4e6
    p_points: int = 20


@dataclass
class ScenarioConfig:
    mean_speed: float = 10.0
    turbulence_intensity: float = 0.07
    correlation_time: float = 10.0
    duration: float = 120.0
    p_ref: str = "2.0e6"
    wind_profile: str = ""
    filter_tau: float = 1.0
    bumpless: bool = True
    beta_rel: float = 1.05
    dwell: float = 1.0


@dataclass
class RunConfig:
    params: TurbineParams = field(default_factory=TurbineParams)
    design: DesignConfig = field(default_factory=DesignConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    weights: dict = field(default_factory=lambda: {2: ls.default_weights(2),
                                                    3: ls.default_weights(3)})
    seeds: tuple = (0,)
    out: str = "windshape-out"
    command: str = "all"
    config_path: Optional[str] = None
    weights_path: Optional[str] = None


_TURBINE_SCALARS = ("rho", "r", "ng", "jt", "mt", "dt", "kt", "eta", "theta_rate",
                    "mg_rate", "p_rated", "omega_max", "tower_lever")
_TURBINE_PAIRS = {"theta_range": ("theta_min", "theta_max"), "mg_range": ("mg_min", "mg_max")}


def _line_of(path, section, key):
    """Best-effort line number of ``key`` inside ``[section]``."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError:
        return None
    current = None
    for i, raw in enumerate(lines, 1):
        text = raw.strip()
        if text.startswith("[") and text.endswith("]"):
            current = text[1:-1].strip().lower()
        elif current == section.lower() and "=" in text:
            if text.split("=", 1)[0].strip().lower() == key.lower():
                return i
    return None


def _convert(path, section, key, raw, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(","))
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw.strip()!r} as "
                          f"{getattr(kind, '__name__', kind)}",
                          path, _line_of(path, section, key)) from None


def _apply_section(parser, path, section, target):
    if not parser.has_section(section):
        return
    known = {f.name: f.type for f in fields(target)}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}", path,
                              _line_of(path, section, key))
        kind = known[key] if known[key] in (float, int, bool, str) else str
        setattr(target, key, _convert(path, section, key, raw, kind))


def _parse_turbine(parser, path):
    if not parser.has_section("turbine"):
        return TurbineParams()
    kwargs, pairs = {}, {}
    allowed = set(_TURBINE_SCALARS) | {"cp_coeffs", "ct_coeffs"}
    allowed |= {k for pair in _TURBINE_PAIRS.values() for k in pair}
    for key, raw in parser.items("turbine"):
        if key not in allowed:
            raise ConfigError(f"[turbine] unknown key {key!r}", path,
                              _line_of(path, "turbine", key))
        if key in ("cp_coeffs", "ct_coeffs"):
            kwargs[key] = _convert(path, "turbine", key, raw, tuple)
        elif key in _TURBINE_SCALARS:
            kwargs[key] = _convert(path, "turbine", key, raw, float)
        else:
            pairs[key] = _convert(path, "turbine", key, raw, float)
    defaults = TurbineParams()
    for name, (lo_key, hi_key) in _TURBINE_PAIRS.items():
        lo, hi = getattr(defaults, name)
        if lo_key in pairs or hi_key in pairs:
            kwargs[name] = (pairs.get(lo_key, lo), pairs.get(hi_key, hi))
    try:
        return TurbineParams(**kwargs)
    except ConfigurationError as exc:
        raise ConfigError(f"[turbine] {exc}", path) from None


def load_weights(path):
    """Read ``{"region2": {...}, "region3": {...}}`` weight definitions."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON (column {exc.colno}): {exc.msg}", path,
                          exc.lineno) from None
    except OSError as exc:
        raise ConfigError(f"cannot read weights file: {exc.strerror}", path) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", path)
    out = {}
    for region in (2, 3):
        key = f"region{region}"
        if key not in data:
            out[region] = ls.default_weights(region)
            continue
        try:
            out[region] = ls.WeightSpec.from_dict(data[key], where=key)
        except ConfigurationError as exc:
            raise ConfigError(str(exc), path) from None
    return out


def load_config(path=None, weights_path=None):
    """Build a :class:`RunConfig` from an INI file and an optional weights JSON."""
    cfg = RunConfig(config_path=path)
    weights_from_ini = None
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
        except configparser.ParsingError as exc:
            line = exc.errors[0][0] if exc.errors else None
            raise ConfigError("malformed line", path, line) from None
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ConfigError(exc.message.splitlines()[0], path, line) from None
        for section in parser.sections():
            if section not in ("turbine", "design", "sweep", "scenario", "run"):
                raise ConfigError(f"unknown section [{section}]", path)
        cfg.params = _parse_turbine(parser, path)
        _apply_section(parser, path, "design", cfg.design)
        _apply_section(parser, path, "sweep", cfg.sweep)
        _apply_section(parser, path, "scenario", cfg.scenario)
        if parser.has_section("run"):
            for key, raw in parser.items("run"):
                if key == "seeds":
                    cfg.seeds = parse_seeds(raw, path, _line_of(path, "run", key))
                elif key == "weights":
                    base = os.path.dirname(os.path.abspath(path))
                    weights_from_ini = os.path.join(base, raw.strip())
                else:
                    raise ConfigError(f"[run] unknown key {key!r}", path,
                                      _line_of(path, "run", key))
    wpath = weights_path or weights_from_ini
    if wpath is not None:
        cfg.weights = load_weights(wpath)
        cfg.weights_path = wpath
    _validate(cfg)
    return cfg


def _validate(cfg):
    where = cfg.config_path
    d, s, c = cfg.design, cfg.sweep, cfg.scenario
    if not d.gamma_factor > 1:
        raise ConfigError("gamma_factor must exceed 1", where)
    if not d.dt > 0:
        raise ConfigError("[design] dt must be positive", where)
    if not (s.v_min > 0 and s.v_max > s.v_min and s.p_min > 0 and s.p_max > s.p_min):
        raise ConfigError("[sweep] ranges must be positive and increasing", where)
    if s.v_points < 2 or s.p_points < 2:
        raise ConfigError("[sweep] needs at least 2 points per axis", where)
    try:
        SwitchConfig(beta_rel=c.beta_rel, hysteresis_hold=c.dwell)
        parse_profile(c.p_ref, "p_ref")
        if c.wind_profile.strip():
            parse_profile(c.wind_profile, "wind_profile")
        build_scenario(cfg, 0)
    except ConfigurationError as exc:
        raise ConfigError(f"[scenario] {exc}", where) from None


def parse_seeds(text, path=None, line=None):
    try:
        seeds = tuple(int(s) for s in str(text).replace(" ", "").split(",") if s)
    except ValueError:
        raise ConfigError(f"seeds must be integers, got {text!r}", path, line) from None
    if not seeds:
        raise ConfigError("at least one seed is required", path, line)
    return seeds


def parse_profile(text, name):
    """``"2e6"`` or ``"0:2e6, 100:1.6e6"`` into a constant or breakpoints."""
    text = str(text).strip()
    try:
        if ":" not in text:
            return float(text)
        pts = []
        for item in text.split(","):
            t, v = item.split(":")
            pts.append((float(t), float(v)))
        return tuple(pts)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {text!r}") from None


def build_scenario(cfg, seed):
    c = cfg.scenario
    wind = WindScenario(mean_speed=c.mean_speed, turbulence_intensity=c.turbulence_intensity,
                        correlation_time=c.correlation_time, seed=seed, duration=c.duration)
    profile = parse_profile(c.wind_profile, "wind_profile") if c.wind_profile.strip() else None
    if isinstance(profile, float):
        profile = ((0.0, profile),)
    return sim.Scenario(wind=wind, p_ref=parse_profile(c.p_ref, "p_ref"), dt=cfg.design.dt,
                        switch_cfg=SwitchConfig(beta_rel=c.beta_rel, hysteresis_hold=c.dwell),
                        wind_profile=profile, filter_tau=c.filter_tau, bumpless=c.bumpless)


# ---------------------------------------------------------------------------
# commands

def design_points(cfg):
    p = cfg.params
    return {2: eq.equilibrium_region2(p, cfg.design.region2_wind),
            3: eq.equilibrium_region3(p, cfg.design.region3_wind, cfg.design.region3_power)}


def design_controllers(cfg):
    designs = {}
    for region, op in design_points(cfg).items():
        try:
            designs[region] = ls.design_region(cfg.params, op, cfg.weights[region],
                                               cfg.design.gamma_factor, cfg.design.dt)
        except SynthesisError as exc:
            raise SynthesisError(f"K{region}: {exc.args[0]}", exc.step) from None
    return designs


def _ss_dict(G):
    d = {"A": G.A.tolist(), "B": G.B.tolist(), "C": G.C.tolist(), "D": G.D.tolist()}
    d["dt"] = G.dt
    return d


def cmd_synthesize(cfg, designs=None):
    designs = designs or design_controllers(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    controllers, report = {}, {}
    for region, d in sorted(designs.items()):
        r = d.result
        controllers[f"K{region}"] = {"continuous": _ss_dict(r.K), "discrete": _ss_dict(r.K_discrete),
                                     "augmented": _ss_dict(r.K_aug)}
        report[f"K{region}"] = {
            "operating_point": {"V": d.op.v0, "region": d.op.region, "p_ref": d.op.p_ref,
                                "x0": list(d.op.x0), "u0": list(d.op.u0), "y0": list(d.op.y0)},
            "weights": d.weights.to_dict(),
            "gamma_min": r.gamma_min, "gamma_sub": r.gamma_sub, "margin": r.margin,
            "achieved_cost": r.achieved_cost,
            "order": {"shaped_plant": r.G_shaped.nstates, "K_aug": r.K_aug.nstates,
                      "K": r.K.nstates},
        }
    sim.write_json(os.path.join(cfg.out, "controllers.json"), controllers)
    sim.write_json(os.path.join(cfg.out, "synthesis_report.json"), report)
    for region in sorted(designs):
        rep = report[f"K{region}"]
        print(f"K{region}: gamma_min={rep['gamma_min']:.6g} gamma_sub={rep['gamma_sub']:.6g} "
              f"margin={rep['margin']:.4f}")
    return designs


def sweep_grid(cfg):
    s = cfg.sweep
    return (np.linspace(s.v_min, s.v_max, s.v_points), np.linspace(s.p_min, s.p_max, s.p_points))


def sweep_summary(points, designs):
    feasible = [q for q in points if q.feasible]
    out = {"grid_points": len(points), "feasible_points": len(feasible)}
    certified = {}
    for region, d in sorted(designs.items()):
        g = d.result.gamma_sub
        cert = [q for q in feasible if q.margins[region] < 1.0 / g]
        certified[region] = cert
        out[f"K{region}"] = {
            "certified": len(cert),
            "stable": sum(bool(q.stable[region]) for q in feasible),
            "counterexamples": sum(not q.stable[region] for q in cert),
        }
    both = [q for q in feasible if all(q.margins[r] < 1.0 / designs[r].result.gamma_sub
                                       for r in designs)]
    out["overlap_points"] = len(both)
    out["overlap_fraction"] = len(both) / len(feasible) if feasible else 0.0
    return out


def cmd_sweep(cfg, designs=None):
    designs = designs or design_controllers(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    v_grid, p_grid = sweep_grid(cfg)
    points = ls.robustness_sweep(cfg.params, [designs[2], designs[3]], v_grid, p_grid)
    ls.write_sweep_csv(os.path.join(cfg.out, "sweep.csv"), points)
    summary = sweep_summary(points, designs)
    sim.write_json(os.path.join(cfg.out, "sweep_summary.json"), summary)
    print(f"sweep: {summary['feasible_points']}/{summary['grid_points']} feasible, "
          f"overlap fraction {summary['overlap_fraction']:.4f}")
    return points, summary


_AGG_KEYS = ("rms_tracking_error", "total_energy", "del_tower", "max_overshoot")


def aggregate_metrics(per_seed):
    """Mean/min/max of each scalar metric across seeds that ran without fault."""
    ok = {s: m for s, m in per_seed.items() if m is not None and m.fault is None}
    agg = {"seeds": sorted(per_seed), "succeeded": sorted(ok),
           "faults": {str(s): (m.fault if m is not None else "not run")
                      for s, m in sorted(per_seed.items()) if m is None or m.fault is not None}}
    for key in _AGG_KEYS:
        vals = [getattr(m, key) for _, m in sorted(ok.items()) if getattr(m, key) is not None]
        agg[key] = ({"mean": float(np.mean(vals)), "min": float(np.min(vals)),
                     "max": float(np.max(vals))} if vals else None)
    occ = [m.mode_occupancy for _, m in sorted(ok.items())]
    agg["mode_occupancy"] = ({str(r): float(np.mean([o[r] for o in occ])) for r in (2, 3)}
                             if occ else None)
    agg["switch_count"] = {str(s): m.switch_count for s, m in sorted(ok.items())}
    return agg


def _simulate_seed(cfg, controllers, seed):
    scenario = build_scenario(cfg, seed)
    trace = sim.run(scenario, controllers, cfg.params)
    trace.to_csv(os.path.join(cfg.out, f"trace_seed{seed}.csv"))
    trace.events_to_csv(os.path.join(cfg.out, f"events_seed{seed}.csv"))
    metrics = sim.compute_metrics(trace, cfg.params)
    sim.write_metrics_json(os.path.join(cfg.out, f"metrics_seed{seed}.json"), metrics)
    return metrics


def cmd_simulate(cfg, designs=None):
    designs = designs or design_controllers(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    controllers = {r: d.result.K_discrete for r, d in designs.items()}
    threads = min(ls._thread_count(), len(cfg.seeds))

    def one(seed):
        try:
            return _simulate_seed(cfg, controllers, seed)
        except WindshapeError as exc:
            log.error("seed %d failed: %s", seed, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, cfg.seeds))
    else:
        results = [one(s) for s in cfg.seeds]
    per_seed = dict(zip(cfg.seeds, results))
    agg = aggregate_metrics(per_seed)
    sim.write_json(os.path.join(cfg.out, "metrics_aggregate.json"), agg)
    print(f"simulate: {len(agg['succeeded'])}/{len(cfg.seeds)} seeds succeeded")
    return agg


def build_parser():
    ap = argparse.ArgumentParser(prog="windshape", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file with [turbine], [design], [sweep], "
                    "[scenario] and [run] sections")
    ap.add_argument("--weights", help="JSON file with region2/region3 weight definitions")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seeds", default=None, help="comma-separated seed list")
    ap.add_argument("--command", choices=COMMANDS, default="all")
    ap.add_argument("--gamma-factor", type=float, default=None)
    ap.add_argument("--beta-rel", type=float, default=None)
    ap.add_argument("--dwell", type=float, default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args):
    cfg = load_config(args.config, args.weights)
    if args.out is not None:
        cfg.out = args.out
    if args.seeds is not None:
        cfg.seeds = parse_seeds(args.seeds)
    if args.gamma_factor is not None:
        cfg.design.gamma_factor = args.gamma_factor
    if args.beta_rel is not None:
        cfg.scenario.beta_rel = args.beta_rel
    if args.dwell is not None:
        cfg.scenario.dwell = args.dwell
    cfg.command = args.command
    _validate(cfg)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        designs = design_controllers(cfg)
        if cfg.command in ("synthesize", "all"):
            cmd_synthesize(cfg, designs)
        if cfg.command in ("sweep", "all"):
            cmd_sweep(cfg, designs)
        if cfg.command in ("simulate", "all"):
            agg = cmd_simulate(cfg, designs)
            if not agg["succeeded"]:
                print("error: every seed faulted", file=sys.stderr)
                return EXIT_FAULT
    except SynthesisError as exc:
        print(f"synthesis failed at {exc}", file=sys.stderr)
        return EXIT_FAULT
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WindshapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
