"""Microgrid parameters, nonconvex LDES conversion curves and their inner hull."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

# Lower heating value of hydrogen, kWh/kg.
H2_LHV_KWH_PER_KG = 33.33

# Dense-grid size used by the hull error oracle.
ERROR_GRID_POINTS = 20001

CURVE_FAMILIES = ("concave_rational", "convex_rational", "linear", "power", "tabulated")


class CurveDomainError(ValueError):
    """Power requested outside the curve's domain."""


class HullParameterError(ValueError):
    """Invalid hull construction parameter."""


class HullConsistencyError(ValueError):
    """Hull vertices do not belong to the supplied curve."""


@dataclass(frozen=True)
class CostParams:
    load_shed_penalty: float = 2.0        # c_l, $/kWh
    dg_fuel_price: float = 0.4            # c_d, $/kWh
    bes_degradation: float = 0.02         # c_b, $/kWh discharged
    ldes_degradation: float = 0.02        # c_h, $/kWh discharged
    contract_violation_penalty: float = 10.0  # $/kg of final-SoC shortfall


@dataclass(frozen=True)
class DgParams:
    p_min: float = 0.0
    p_max: float = 50.0


@dataclass(frozen=True)
class BesParams:
    p_max: float = 50.0
    soc_min: float = 0.0
    soc_max: float = 200.0
    eta_charge: float = 0.9
    eta_discharge: float = 0.9
    soc_init: float = 100.0


@dataclass(frozen=True)
class NonconvexCurve:
    """Power (kW) to hydrogen rate (kg/h) map of an electrolyzer or fuel cell.

    Families
    --------
    ``concave_rational``  rate = a*p - b*p**2/(p + d)   (electrolyzer, charge side)
    ``convex_rational``   rate = a*p + b*p**2/(p + d)   (fuel cell, discharge side)
    ``linear``            rate = a*p
    ``power``             rate = a*p**k
    ``tabulated``         cubic spline through (powers, rates); params holds both
                          columns concatenated.

    ``z`` bounds the absolute second derivative on the domain. It is derived
    analytically for the rational families and by finite differences for
    tabulated data when not supplied.
    """

    family: str
    params: tuple[float, ...]
    p_lo: float
    p_hi: float
    z: float = float("nan")

    def __post_init__(self):
        if self.family not in CURVE_FAMILIES:
            raise ValueError(f"unknown curve family {self.family!r}")
        if not self.p_hi > self.p_lo:
            raise ValueError("curve domain must satisfy p_hi > p_lo")
        if np.isnan(self.z):
            object.__setattr__(self, "z", _second_derivative_bound(self))

    def __call__(self, power):
        return evaluate_curve(self, power)

    def _raw(self, p):
        p = np.asarray(p, dtype=float)
        if self.family == "concave_rational":
            a, b, d = self.params
            return a * p - b * p**2 / (p + d)
        if self.family == "convex_rational":
            a, b, d = self.params
            return a * p + b * p**2 / (p + d)
        if self.family == "linear":
            (a,) = self.params
            return a * p
        if self.family == "power":
            a, k = self.params
            return a * np.power(p, k)
        return _spline(self)(p)


@lru_cache(maxsize=64)
def _spline_from(params: tuple[float, ...]) -> CubicSpline:
    n = len(params) // 2
    return CubicSpline(np.asarray(params[:n]), np.asarray(params[n:]), bc_type="natural")


def _spline(curve: NonconvexCurve) -> CubicSpline:
    return _spline_from(curve.params)


def _second_derivative_bound(curve: NonconvexCurve) -> float:
    if curve.family in ("concave_rational", "convex_rational"):
        _, b, d = curve.params
        # |2 b d^2 / (p + d)^3| is largest at the low end of the domain
        return 2.0 * abs(b) * d**2 / (curve.p_lo + d) ** 3
    if curve.family == "linear":
        return 0.0
    if curve.family == "power":
        a, k = curve.params
        if k in (0.0, 1.0):
            return 0.0
        if k < 2.0 and curve.p_lo <= 0.0:
            return float("inf")
        ends = np.array([curve.p_lo, curve.p_hi])
        return float(np.max(np.abs(a * k * (k - 1) * ends ** (k - 2))))
    grid = np.linspace(curve.p_lo, curve.p_hi, ERROR_GRID_POINTS)
    vals = curve._raw(grid)
    step = grid[1] - grid[0]
    second = np.diff(vals, 2) / step**2
    return float(np.max(np.abs(second)))


def evaluate_curve(curve: NonconvexCurve, power):
    """Hydrogen rate (kg/h) at ``power`` (kW); raises outside the domain."""
    p = np.asarray(power, dtype=float)
    tol = 1e-9 * max(1.0, abs(curve.p_hi))
    if np.any(p < curve.p_lo - tol) or np.any(p > curve.p_hi + tol):
        raise CurveDomainError(
            f"power outside curve domain [{curve.p_lo}, {curve.p_hi}]"
        )
    out = curve._raw(np.clip(p, curve.p_lo, curve.p_hi))
    return float(out) if out.ndim == 0 else out


def default_charge_curve(p_max: float = 100.0, lhv: float = H2_LHV_KWH_PER_KG) -> NonconvexCurve:
    """Electrolyzer stand-in: efficiency 0.9 near zero load, 0.6 at rated power."""
    d = 10.0 * p_max
    a = 0.9 / lhv
    b = (a - 0.6 / lhv) * (p_max + d) / p_max
    return NonconvexCurve("concave_rational", (a, b, d), 0.0, p_max)


def default_discharge_curve(p_max: float = 100.0, lhv: float = H2_LHV_KWH_PER_KG) -> NonconvexCurve:
    """Fuel-cell stand-in: hydrogen consumed per kW output, efficiency 0.9 -> 0.6."""
    d = 10.0 * p_max
    a = 1.0 / (0.9 * lhv)
    b = (1.0 / (0.6 * lhv) - a) * (p_max + d) / p_max
    return NonconvexCurve("convex_rational", (a, b, d), 0.0, p_max)


@dataclass(frozen=True)
class LdesParams:
    p_min: float = 0.0
    p_max: float = 100.0
    soc_min: float = 0.0
    soc_max: float = 1000.0
    soc_init: float = 200.0
    soc_final_target: float = 500.0
    charge_curve: NonconvexCurve = field(default_factory=default_charge_curve)
    discharge_curve: NonconvexCurve = field(default_factory=default_discharge_curve)


@dataclass(frozen=True)
class MicrogridConfig:
    costs: CostParams = field(default_factory=CostParams)
    dg: DgParams = field(default_factory=DgParams)
    bes: BesParams = field(default_factory=BesParams)
    ldes: LdesParams = field(default_factory=LdesParams)
    wind_capacity: float = 100.0
    solar_capacity: float = 100.0
    load_peak: float = 150.0


@dataclass(frozen=True)
class SystemState:
    t: int
    bes_soc: float
    ldes_soc: float

    @classmethod
    def initial(cls, config: MicrogridConfig) -> "SystemState":
        return cls(0, config.bes.soc_init, config.ldes.soc_init)


@dataclass(frozen=True)
class CurveHull:
    """On-curve vertices of one conversion direction, sorted by power."""

    power: np.ndarray
    hydrogen: np.ndarray

    @property
    def m(self) -> int:
        return len(self.power)

    def combine(self, weights) -> tuple[float, float]:
        """(power, hydrogen) implied by a convex combination of the vertices."""
        w = np.asarray(weights, dtype=float)
        return float(w @ self.power), float(w @ self.hydrogen)

    def chord(self, power):
        """Piecewise-linear interpolation through the vertices."""
        return np.interp(power, self.power, self.hydrogen)


@dataclass(frozen=True)
class ConvexHullModel:
    charge: CurveHull
    discharge: CurveHull

    @property
    def m(self) -> int:
        return self.charge.m


def build_convex_hull(curve: NonconvexCurve, m: int) -> CurveHull:
    """Sample ``m`` vertices on a uniform power grid spanning the curve domain."""
    if int(m) != m or m < 2:
        raise HullParameterError(f"hull needs at least 2 vertices, got {m}")
    power = np.linspace(curve.p_lo, curve.p_hi, int(m))
    hydrogen = np.asarray(evaluate_curve(curve, power), dtype=float)
    power.setflags(write=False)
    hydrogen.setflags(write=False)
    return CurveHull(power, hydrogen)


def build_ldes_hull(ldes: LdesParams, m: int) -> ConvexHullModel:
    return ConvexHullModel(
        build_convex_hull(ldes.charge_curve, m),
        build_convex_hull(ldes.discharge_curve, m),
    )


def hull_approximation_error(curve: NonconvexCurve, hull: CurveHull,
                             n_grid: int = ERROR_GRID_POINTS) -> float:
    """Largest vertical gap between the curve and the hull's chord interpolation."""
    if n_grid < 10_000:
        raise ValueError("error oracle needs at least 1e4 grid points")
    tol = 1e-9 * max(1.0, abs(curve.p_hi))
    if abs(hull.power[0] - curve.p_lo) > tol or abs(hull.power[-1] - curve.p_hi) > tol:
        raise HullConsistencyError("hull power range does not match curve domain")
    on_curve = np.asarray(evaluate_curve(curve, hull.power))
    if not np.allclose(on_curve, hull.hydrogen, rtol=1e-9, atol=1e-12):
        raise HullConsistencyError("hull vertices are not on the curve")
    grid = np.linspace(curve.p_lo, curve.p_hi, n_grid)
    return float(np.max(np.abs(evaluate_curve(curve, grid) - hull.chord(grid))))


def hull_error_bound(curve: NonconvexCurve, m: int) -> float:
    """2 Z (p_hi - p_lo)^2 / (m - 1)^2."""
    return 2.0 * curve.z * (curve.p_hi - curve.p_lo) ** 2 / (m - 1) ** 2


def hull_gap(curve: NonconvexCurve, hull: CurveHull, weights) -> float:
    """|curve(p) - sum w_m H_m| at the power implied by ``weights`` (kg/h)."""
    p, h = hull.combine(weights)
    p = min(max(p, curve.p_lo), curve.p_hi)
    return abs(float(evaluate_curve(curve, p)) - h)


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def _curve_violations(name: str, curve: NonconvexCurve) -> list[Violation]:
    out = []
    grid = np.linspace(curve.p_lo, curve.p_hi, 2001)
    vals = curve._raw(grid)
    if curve.p_lo <= 0.0 <= curve.p_hi and abs(float(curve._raw(0.0))) > 1e-12:
        out.append(Violation(name, "curve must be 0 at zero power"))
    if np.any(np.diff(vals) <= 0.0):
        out.append(Violation(name, "curve must be strictly increasing"))
    if not np.isfinite(curve.z) and curve.family not in ("power",):
        out.append(Violation(name, "second-derivative bound must be finite"))
    return out


def validate_config(config: MicrogridConfig) -> list[Violation]:
    """Return every violated invariant; an empty list means the config is valid."""
    v: list[Violation] = []
    c = config.costs
    for name in ("load_shed_penalty", "dg_fuel_price", "bes_degradation",
                 "ldes_degradation", "contract_violation_penalty"):
        if getattr(c, name) < 0:
            v.append(Violation(f"costs.{name}", "must be nonnegative"))
    if not c.load_shed_penalty > c.dg_fuel_price:
        v.append(Violation("costs.load_shed_penalty", "must exceed dg_fuel_price"))

    dg = config.dg
    if not 0.0 <= dg.p_min <= dg.p_max:
        v.append(Violation("dg.p_min", "0 <= p_min <= p_max"))

    b = config.bes
    if not 0.0 < b.eta_charge <= 1.0:
        v.append(Violation("bes.eta_charge", "0 < eta <= 1"))
    if not 0.0 < b.eta_discharge <= 1.0:
        v.append(Violation("bes.eta_discharge", "0 < eta <= 1"))
    if not b.p_max > 0.0:
        v.append(Violation("bes.p_max", "must be positive"))
    if not b.soc_min <= b.soc_max:
        v.append(Violation("bes.soc_min", "soc_min <= soc_max"))
    if not b.soc_min <= b.soc_init <= b.soc_max:
        v.append(Violation("bes.soc_init", "soc_min <= soc_init <= soc_max"))

    h = config.ldes
    if not h.p_max > 0.0:
        v.append(Violation("ldes.p_max", "must be positive"))
    if not 0.0 <= h.p_min <= h.p_max:
        v.append(Violation("ldes.p_min", "0 <= p_min <= p_max"))
    if not h.soc_min <= h.soc_max:
        v.append(Violation("ldes.soc_min", "soc_min <= soc_max"))
    if not h.soc_min <= h.soc_init <= h.soc_max:
        v.append(Violation("ldes.soc_init", "soc_min <= soc_init <= soc_max"))
    if not h.soc_min <= h.soc_final_target <= h.soc_max:
        v.append(Violation("ldes.soc_final_target", "soc_min <= target <= soc_max"))
    v += _curve_violations("ldes.charge_curve", h.charge_curve)
    v += _curve_violations("ldes.discharge_curve", h.discharge_curve)
    if abs(h.charge_curve.p_hi - h.p_max) > 1e-9 or abs(h.discharge_curve.p_hi - h.p_max) > 1e-9:
        v.append(Violation("ldes.charge_curve", "curve domain must end at ldes.p_max"))
    return v


def default_config(**overrides) -> MicrogridConfig:
    """The reference test system: 100 kW wind, 100 kW solar, 150 kW peak load,
    50 kW DG, 50 kW/200 kWh BES, 100 kW/1000 kg LDES."""
    return MicrogridConfig(**overrides)


def fractions_to_state(config: MicrogridConfig, bes_frac: float, ldes_frac: float) -> SystemState:
    return SystemState(0, bes_frac * config.bes.soc_max, ldes_frac * config.ldes.soc_max)
