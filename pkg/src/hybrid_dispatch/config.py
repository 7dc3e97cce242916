"""YAML run configuration: one section per device plus run settings.

Example::

    seed: 7
    costs: {load_shed_penalty: 2.0, dg_fuel_price: 0.4}
    dg: {p_max: 50}
    bes: {p_max: 50, soc_max: 200}
    ldes: {soc_max: 1000, soc_final_target: 500}
    site: {wind_capacity: 100, solar_capacity: 100, load_peak: 150}
    scenarios: {count: 8, generator: {horizon: 720, scarcity_start: 400, scarcity_length: 168}}
    oco: {alpha0: 0.05, c: 0.5}
    tracking: {theta: null, source: kernel}
    kernel: {windows: [1, 2, 4, 6, 8]}
    solver: {feasibility_tol: 1.0e-9}
    faults: [{start: 500, duration: 336, asset: wind, multiplier: 0.0}]

Missing sections take defaults; unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .core import (BesParams, CostParams, DgParams, LdesParams, MicrogridConfig, NonconvexCurve,
                   Violation, validate_config)
from .learner import DEFAULT_SIGMA_MULTIPLIERS, KERNELS
from .online import FaultEvent, OcoConfig, TrackingConfig
from .program import SolverSettings
from .scenarios import SyntheticGenConfig


class ConfigError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(f"{v.field}: {v.rule}" for v in self.violations))


@dataclass(frozen=True)
class KernelSettings:
    windows: tuple[int, ...] = (1, 2, 4, 6, 8, 12)
    sigma_multipliers: tuple[float, ...] = tuple(DEFAULT_SIGMA_MULTIPLIERS)
    kernel: str = "gaussian"


@dataclass(frozen=True)
class ScenarioSettings:
    count: int = 8
    directory: str | None = None
    generator: SyntheticGenConfig | None = field(default_factory=SyntheticGenConfig)
    test_index: int | None = None   # index of the held-out evaluation scenario (default: count)


@dataclass(frozen=True)
class AppConfig:
    microgrid: MicrogridConfig = field(default_factory=MicrogridConfig)
    scenarios: ScenarioSettings = field(default_factory=ScenarioSettings)
    oco: OcoConfig = field(default_factory=OcoConfig)
    tracking: TrackingConfig = field(default_factory=lambda: TrackingConfig(theta=0.0))
    theta_from_schedule: bool = True
    kernel: KernelSettings = field(default_factory=KernelSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    faults: tuple[FaultEvent, ...] = ()
    hull_m: int | None = None
    mpc_horizon: int = 168
    mape: float = 0.0
    seed: int = 0
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def horizon(self) -> int:
        gen = self.scenarios.generator
        return gen.horizon if gen is not None else self.oco.horizon

    @property
    def theta(self) -> float:
        return self.oco.theta if self.theta_from_schedule else self.tracking.theta

    @property
    def m(self) -> int:
        return self.hull_m if self.hull_m is not None else self.oco.hull_m


def _take(section: dict, cls, name: str, errors: list, **extra):
    allowed = {f.name for f in fields(cls)}
    kw = {}
    for k, v in (section or {}).items():
        if k not in allowed:
            errors.append(Violation(f"{name}.{k}", "unknown key"))
            continue
        kw[k] = tuple(v) if isinstance(v, list) else v
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        errors.append(Violation(name, str(exc)))
        return None


def _curve(d, name, errors):
    if d is None:
        return None
    d = dict(d)
    if "params" in d:
        d["params"] = tuple(float(x) for x in d["params"])
    if d.get("z") is None:
        d["z"] = float("nan")
    return _take(d, NonconvexCurve, name, errors)


SECTIONS = {"seed", "costs", "dg", "bes", "ldes", "site", "scenarios", "oco", "tracking",
            "kernel", "solver", "faults", "hull", "mpc"}


def parse_config(raw: dict | None) -> AppConfig:
    """Build and validate an :class:`AppConfig`; raises :class:`ConfigError`."""
    raw = dict(raw or {})
    errors: list[Violation] = []
    for k in raw:
        if k not in SECTIONS:
            errors.append(Violation(k, "unknown section"))
    seed = int(raw.get("seed", 0))

    ld_raw = dict(raw.get("ldes") or {})
    curves = {}
    for key in ("charge_curve", "discharge_curve"):
        if key in ld_raw:
            curves[key] = _curve(ld_raw.pop(key), f"ldes.{key}", errors)
    costs = _take(raw.get("costs"), CostParams, "costs", errors)
    dg = _take(raw.get("dg"), DgParams, "dg", errors)
    bes = _take(raw.get("bes"), BesParams, "bes", errors)
    ldes = _take(ld_raw, LdesParams, "ldes", errors, **{k: v for k, v in curves.items() if v is not None})
    site = dict(raw.get("site") or {})
    for k in site:
        if k not in ("wind_capacity", "solar_capacity", "load_peak"):
            errors.append(Violation(f"site.{k}", "unknown key"))
    mg = None
    if None not in (costs, dg, bes, ldes):
        mg = MicrogridConfig(costs, dg, bes, ldes,
                             **{k: float(v) for k, v in site.items()
                                if k in ("wind_capacity", "solar_capacity", "load_peak")})
        errors.extend(validate_config(mg))

    sc_raw = dict(raw.get("scenarios") or {})
    gen_raw = sc_raw.pop("generator", {}) if "generator" in sc_raw or "directory" not in sc_raw else None
    gen = None
    if gen_raw is not None:
        gen_raw = dict(gen_raw or {})
        gen_raw.setdefault("seed", seed)
        if mg is not None:
            gen_raw.setdefault("wind_capacity", mg.wind_capacity)
            gen_raw.setdefault("solar_capacity", mg.solar_capacity)
            gen_raw.setdefault("load_peak", mg.load_peak)
        gen = _take(gen_raw, SyntheticGenConfig, "scenarios.generator", errors)
    scen = _take(sc_raw, ScenarioSettings, "scenarios", errors, generator=gen)
    if scen is not None and scen.count < 2:
        errors.append(Violation("scenarios.count", "need at least 2 scenarios"))

    oco_raw = dict(raw.get("oco") or {})
    if gen is not None:
        oco_raw.setdefault("horizon", gen.horizon)
    oco = _take(oco_raw, OcoConfig, "oco", errors)

    tr_raw = dict(raw.get("tracking") or {})
    from_schedule = tr_raw.get("theta") is None
    tr_raw["theta"] = float(tr_raw.get("theta") or 0.0)
    tracking = _take(tr_raw, TrackingConfig, "tracking", errors)

    kernel = _take(raw.get("kernel"), KernelSettings, "kernel", errors)
    if kernel is not None:
        if kernel.kernel not in KERNELS:
            errors.append(Violation("kernel.kernel", f"must be one of {sorted(KERNELS)}"))
        if not kernel.windows or min(kernel.windows) < 1:
            errors.append(Violation("kernel.windows", "need positive window lengths"))
    solver = _take(raw.get("solver"), SolverSettings, "solver", errors)

    faults = []
    for j, f in enumerate(raw.get("faults") or []):
        ev = _take(f, FaultEvent, f"faults[{j}]", errors)
        if ev is not None:
            faults.append(ev)
            if oco is not None and ev.stop > oco.horizon:
                errors.append(Violation(f"faults[{j}]", "window exceeds horizon"))

    hull = dict(raw.get("hull") or {})
    mpc = dict(raw.get("mpc") or {})
    for k in hull:
        if k != "m":
            errors.append(Violation(f"hull.{k}", "unknown key"))
    for k in mpc:
        if k not in ("horizon", "mape"):
            errors.append(Violation(f"mpc.{k}", "unknown key"))
    hull_m = hull.get("m")
    if hull_m is not None and int(hull_m) < 2:
        errors.append(Violation("hull.m", "need at least 2 vertices"))
    mpc_h = int(mpc.get("horizon", 168))
    if mpc_h < 1:
        errors.append(Violation("mpc.horizon", "must be positive"))
    mape = float(mpc.get("mape", 0.0))
    if not 0.0 <= mape < 1.0:
        errors.append(Violation("mpc.mape", "must lie in [0, 1)"))
    if errors:
        raise ConfigError(errors)
    return AppConfig(mg, scen, oco, tracking, from_schedule, kernel, solver, tuple(faults),
                     None if hull_m is None else int(hull_m), mpc_h, mape, seed, raw)


def load_config(path) -> AppConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([Violation(str(path), f"invalid YAML: {exc}")]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([Violation(str(path), "top level must be a mapping")])
    return parse_config(raw)


def config_hash(cfg: AppConfig | dict) -> str:
    """SHA-256 of the canonical JSON form of the raw configuration."""
    raw = cfg.raw if isinstance(cfg, AppConfig) else cfg
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def with_overrides(cfg: AppConfig, *, seed: int | None = None) -> AppConfig:
    """Apply a seed override to the run and the scenario generator."""
    if seed is None:
        return cfg
    raw = dict(cfg.raw)
    raw["seed"] = seed
    sc = dict(raw.get("scenarios") or {})
    if "generator" in sc or "directory" not in sc:
        gen = dict(sc.get("generator") or {})
        gen["seed"] = seed
        sc["generator"] = gen
        raw["scenarios"] = sc
    return parse_config(raw)
