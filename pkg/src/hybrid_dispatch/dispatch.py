"""Hindsight (full-horizon), single-period and reference-tracking dispatch.

All three share one per-period block of variables::

    r, l, d, b+, b-, e, h, lambda-[M], lambda+[M]

and the same rows (power balance, BES and LDES state equations, two
conversion simplices). The full-horizon model adds the final LDES contract
row; the tracking model adds ``theta * (h - h_ref)**2``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ConvexHullModel, MicrogridConfig, SystemState, evaluate_curve
from .program import (
    INF,
    ConvexProgram,
    InfeasibleProgramError,
    ProgramBuilder,
    SolverSettings,
    solve_program,
    strict_convexity_regularizer,
)

BALANCE = "power balance"
STORAGE = "storage bounds"
CONTRACT = "contract"

X_FIELDS = ("r", "l", "d")
Y_FIELDS = ("b_plus", "b_minus", "e", "h")
SCALARS = X_FIELDS + Y_FIELDS


@dataclass(frozen=True)
class Availability:
    """Per-hour capacity multipliers in [0, 1] for dispatchable assets."""

    dg: np.ndarray | None = None
    bes: np.ndarray | None = None
    ldes: np.ndarray | None = None

    def factor(self, asset: str, T: int) -> np.ndarray:
        v = getattr(self, asset)
        return np.ones(T) if v is None else np.asarray(v, dtype=float)[:T]


@dataclass(frozen=True)
class Layout:
    T: int
    M: int

    @property
    def width(self) -> int:
        return 7 + 2 * self.M

    def col(self, name: str) -> np.ndarray:
        k = {"r": 0, "l": 1, "d": 2, "b_plus": 3, "b_minus": 4, "e": 5, "h": 6}[name]
        return np.arange(self.T) * self.width + k

    def lam(self, direction: str) -> np.ndarray:
        off = 7 if direction == "minus" else 7 + self.M
        return (np.arange(self.T) * self.width)[:, None] + off + np.arange(self.M)[None, :]


@dataclass(frozen=True)
class DispatchDecision:
    """One hour of dispatch. Powers in kW, BES SoC in kWh, LDES SoC in kg."""

    r: float
    l: float
    d: float
    b_plus: float
    b_minus: float
    e: float
    h: float
    lam_minus: np.ndarray
    lam_plus: np.ndarray
    ldes_charge: float = 0.0
    ldes_discharge: float = 0.0
    objective: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return np.array([self.r, self.l, self.d])


@dataclass
class TrajectoryBundle:
    """Hindsight-optimal decisions of one scenario over its horizon."""

    scenario_id: str
    r: np.ndarray
    l: np.ndarray
    d: np.ndarray
    b_plus: np.ndarray
    b_minus: np.ndarray
    e: np.ndarray
    h: np.ndarray
    lam_minus: np.ndarray
    lam_plus: np.ndarray
    period_cost: np.ndarray
    total_cost: float
    status: str
    wall_time: float
    hull_m: int
    e_init: float
    h_init: float
    start_hour: int = 0

    @property
    def T(self) -> int:
        return len(self.h)

    @property
    def h_star(self) -> np.ndarray:
        return self.h

    def decision(self, t: int, hull: ConvexHullModel | None = None) -> DispatchDecision:
        lm, lp = self.lam_minus[t].copy(), self.lam_plus[t].copy()
        pc = float(lm @ hull.charge.power) if hull is not None else 0.0
        pd = float(lp @ hull.discharge.power) if hull is not None else 0.0
        return DispatchDecision(
            float(self.r[t]), float(self.l[t]), float(self.d[t]),
            float(self.b_plus[t]), float(self.b_minus[t]),
            float(self.e[t]), float(self.h[t]), lm, lp, pc, pd,
            float(self.period_cost[t]))


@dataclass(frozen=True)
class ScenarioFailure:
    scenario_id: str
    groups: tuple[str, ...]
    message: str


@dataclass
class BatchResult:
    bundles: list[TrajectoryBundle]
    failures: list[ScenarioFailure]


def _check_state(config: MicrogridConfig, state: SystemState, tol: float = 1e-6):
    b, h = config.bes, config.ldes
    if not b.soc_min - tol <= state.bes_soc <= b.soc_max + tol:
        raise ValueError(f"BES SoC {state.bes_soc} outside [{b.soc_min}, {b.soc_max}]")
    if not h.soc_min - tol <= state.ldes_soc <= h.soc_max + tol:
        raise ValueError(f"LDES SoC {state.ldes_soc} outside [{h.soc_min}, {h.soc_max}]")


def assemble_dispatch(config: MicrogridConfig, hull: ConvexHullModel, load, renewable,
                      state: SystemState, *, contract_target: float | None = None,
                      theta: float = 0.0, reference=None,
                      availability: Availability | None = None,
                      pinned: dict | None = None) -> tuple[ConvexProgram, Layout]:
    """Build the dispatch program over ``len(load)`` hours starting from ``state``.

    Parameters
    ----------
    contract_target : float, optional
        Lower bound on the LDES SoC after the last hour.
    theta, reference
        Tracking weight ($/kg^2) and per-hour LDES reference (kg); NaN entries
        are not tracked.
    pinned : dict, optional
        Field name -> array of fixed values (``lam_minus``/``lam_plus`` are
        ``(T, M)``), used to hold inter-temporal decisions.
    """
    load = np.asarray(load, dtype=float)
    renewable = np.asarray(renewable, dtype=float)
    T, M = len(load), hull.m
    lay = Layout(T, M)
    avail = availability or Availability()
    c, dg, bes, ld = config.costs, config.dg, config.bes, config.ldes
    pc, hc = hull.charge.power, hull.charge.hydrogen
    pd, hd = hull.discharge.power, hull.discharge.hydrogen

    a_dg, a_bes, a_ld = (avail.factor(k, T) for k in ("dg", "bes", "ldes"))
    d_hi = dg.p_max * a_dg
    lam_hi_c = np.where(pc[None, :] <= a_ld[:, None] * ld.p_max + 1e-9, 1.0, 0.0)
    lam_hi_d = np.where(pd[None, :] <= a_ld[:, None] * ld.p_max + 1e-9, 1.0, 0.0)

    n = T * lay.width
    lb = np.zeros(n)
    ub = np.full(n, INF)
    cost = np.zeros(n)
    ub[lay.col("r")] = renewable
    ub[lay.col("l")] = load
    lb[lay.col("d")] = np.minimum(dg.p_min, d_hi)
    ub[lay.col("d")] = d_hi
    ub[lay.col("b_plus")] = bes.p_max * a_bes
    ub[lay.col("b_minus")] = bes.p_max * a_bes
    lb[lay.col("e")], ub[lay.col("e")] = bes.soc_min, bes.soc_max
    lb[lay.col("h")], ub[lay.col("h")] = ld.soc_min, ld.soc_max
    ub[lay.lam("minus")] = lam_hi_c
    ub[lay.lam("plus")] = lam_hi_d
    cost[lay.col("l")] = c.load_shed_penalty
    cost[lay.col("d")] = c.dg_fuel_price
    cost[lay.col("b_plus")] = c.bes_degradation
    cost[lay.lam("plus")] = c.ldes_degradation * pd[None, :]

    if pinned:
        for name, val in pinned.items():
            idx = lay.lam(name[4:]) if name.startswith("lam_") else lay.col(name)
            lb[idx] = ub[idx] = np.asarray(val, dtype=float).reshape(idx.shape)

    b = ProgramBuilder()
    b.add_vars(n, lb, ub, cost)

    rows = b.add_rows(T, load, load, BALANCE)
    for name, coef in (("r", 1.0), ("l", 1.0), ("d", 1.0), ("b_plus", 1.0), ("b_minus", -1.0)):
        b.add_coef(rows, lay.col(name), coef)
    b.add_coef(rows[:, None], lay.lam("plus"), pd[None, :])
    b.add_coef(rows[:, None], lay.lam("minus"), -pc[None, :])

    rhs = np.zeros(T)
    rhs[0] = state.bes_soc
    rows = b.add_rows(T, rhs, rhs, STORAGE)
    b.add_coef(rows, lay.col("e"), 1.0)
    b.add_coef(rows[1:], lay.col("e")[:-1], -1.0)
    b.add_coef(rows, lay.col("b_minus"), -bes.eta_charge)
    b.add_coef(rows, lay.col("b_plus"), 1.0 / bes.eta_discharge)

    rhs = np.zeros(T)
    rhs[0] = state.ldes_soc
    rows = b.add_rows(T, rhs, rhs, STORAGE)
    b.add_coef(rows, lay.col("h"), 1.0)
    b.add_coef(rows[1:], lay.col("h")[:-1], -1.0)
    b.add_coef(rows[:, None], lay.lam("minus"), -hc[None, :])
    b.add_coef(rows[:, None], lay.lam("plus"), hd[None, :])

    for direction in ("minus", "plus"):
        rows = b.add_rows(T, 1.0, 1.0, STORAGE)
        b.add_coef(np.repeat(rows, M), lay.lam(direction).ravel(), 1.0)

    if contract_target is not None:
        row = b.add_rows(1, contract_target, INF, CONTRACT)
        b.add_coef(row, lay.col("h")[-1:], 1.0)

    prog = b.build({"T": T, "M": M})
    if theta < 0:
        raise ValueError("tracking weight theta must be nonnegative")
    if theta > 0 and reference is not None:
        ref = np.broadcast_to(np.asarray(reference, dtype=float), (T,))
        mask = ~np.isnan(ref)
        hcols = lay.col("h")[mask]
        quad = prog.quad.copy()
        lin = prog.c.copy()
        quad[hcols] += theta
        lin[hcols] += -2.0 * theta * ref[mask]
        prog = replace(prog, quad=quad, c=lin,
                       offset=prog.offset + float(theta * np.sum(ref[mask] ** 2)))
    return prog, lay


def unpack(lay: Layout, hull: ConvexHullModel, x: np.ndarray) -> dict[str, np.ndarray]:
    out = {k: x[lay.col(k)] for k in SCALARS}
    out["lam_minus"] = x[lay.lam("minus")]
    out["lam_plus"] = x[lay.lam("plus")]
    out["ldes_charge"] = out["lam_minus"] @ hull.charge.power
    out["ldes_discharge"] = out["lam_plus"] @ hull.discharge.power
    return out


def period_cost(config: MicrogridConfig, hull: ConvexHullModel, l, d, b_plus, lam_plus):
    """Per-hour cost of the convex (hull) model, $."""
    c = config.costs
    lam_plus = np.asarray(lam_plus, dtype=float)
    return (c.load_shed_penalty * np.asarray(l) + c.dg_fuel_price * np.asarray(d)
            + c.bes_degradation * np.asarray(b_plus)
            + c.ldes_degradation * (lam_plus @ hull.discharge.power))


def hydrogen_benefit(config: MicrogridConfig, hull: ConvexHullModel, lam_minus, lam_plus):
    """Extra hydrogen (kg/h) the true curves deliver over the hull model.

    Positive when the curve produces more on charge, or consumes less on
    discharge, than the chord combination books.
    """
    ld = config.ldes
    lam_minus = np.atleast_2d(lam_minus)
    lam_plus = np.atleast_2d(lam_plus)
    pc = np.clip(lam_minus @ hull.charge.power, ld.charge_curve.p_lo, ld.charge_curve.p_hi)
    pd = np.clip(lam_plus @ hull.discharge.power, ld.discharge_curve.p_lo, ld.discharge_curve.p_hi)
    gain_c = evaluate_curve(ld.charge_curve, pc) - lam_minus @ hull.charge.hydrogen
    gain_d = lam_plus @ hull.discharge.hydrogen - evaluate_curve(ld.discharge_curve, pd)
    return np.asarray(gain_c + gain_d, dtype=float)


def realized_cost(config: MicrogridConfig, hull: ConvexHullModel, l, d, b_plus,
                  lam_minus, lam_plus):
    """Per-hour cost re-priced through the true conversion curves.

    The hydrogen the hull model leaves on the table is credited at the LDES
    degradation price per kg, the pricing used by the hull error bound.
    """
    base = period_cost(config, hull, l, d, b_plus, lam_plus)
    return base - config.costs.ldes_degradation * hydrogen_benefit(config, hull, lam_minus, lam_plus)


def solve_oed(config: MicrogridConfig, scenario, hull: ConvexHullModel,
              settings: SolverSettings | None = None, *, state: SystemState | None = None,
              availability: Availability | None = None, regularize: float = 0.0,
              contract_target: float | None = None) -> TrajectoryBundle:
    """Full-horizon hindsight dispatch under the inner hull model.

    Raises
    ------
    InfeasibleProgramError
        With ``groups`` naming power balance, storage bounds or contract.
    """
    settings = settings or SolverSettings()
    state = state or SystemState.initial(config)
    _check_state(config, state)
    target = config.ldes.soc_final_target if contract_target is None else contract_target
    prog, lay = assemble_dispatch(config, hull, scenario.load, scenario.renewable, state,
                                  contract_target=target, availability=availability)
    if regularize:
        cols = np.concatenate([lay.col(k) for k in X_FIELDS])
        prog = strict_convexity_regularizer(prog, regularize, cols)
    sol = solve_program(prog, settings)
    v = unpack(lay, hull, sol.x)
    pcost = period_cost(config, hull, v["l"], v["d"], v["b_plus"], v["lam_plus"])
    return TrajectoryBundle(
        scenario_id=str(scenario.scenario_id),
        r=v["r"], l=v["l"], d=v["d"], b_plus=v["b_plus"], b_minus=v["b_minus"],
        e=v["e"], h=v["h"], lam_minus=v["lam_minus"], lam_plus=v["lam_plus"],
        period_cost=pcost, total_cost=float(pcost.sum()), status=sol.status,
        wall_time=sol.wall_time, hull_m=hull.m, e_init=state.bes_soc,
        h_init=state.ldes_soc, start_hour=state.t)


def _solve_one(args):
    config, scenario, hull, settings, state, availability = args
    try:
        return solve_oed(config, scenario, hull, settings, state=state, availability=availability)
    except InfeasibleProgramError as exc:
        return ScenarioFailure(str(scenario.scenario_id), tuple(exc.groups), str(exc))
    except Exception as exc:  # noqa: BLE001 - isolate per-scenario failures
        return ScenarioFailure(str(scenario.scenario_id), (), f"{type(exc).__name__}: {exc}")


def batch_generate_trajectories(config: MicrogridConfig, scenarios, hull: ConvexHullModel,
                                settings: SolverSettings | None = None, *, jobs: int = 1,
                                state: SystemState | None = None,
                                availability: Availability | None = None) -> BatchResult:
    """Solve every scenario independently; failures are collected, not raised."""
    if len(scenarios) < 1:
        raise ValueError("need at least one scenario")
    settings = settings or SolverSettings()
    work = [(config, s, hull, settings, state, availability) for s in scenarios]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, work))
    else:
        results = [_solve_one(w) for w in work]
    return BatchResult(
        [r for r in results if isinstance(r, TrajectoryBundle)],
        [r for r in results if isinstance(r, ScenarioFailure)])


def _single(config, hull, state, load, renewable, settings, **kw) -> DispatchDecision:
    _check_state(config, state)
    regularize = kw.pop("regularize", 0.0)
    prog, lay = assemble_dispatch(config, hull, [load], [renewable], state, **kw)
    if regularize:
        cols = np.concatenate([lay.col(k) for k in X_FIELDS])
        prog = strict_convexity_regularizer(prog, regularize, cols)
    sol = solve_program(prog, settings or SolverSettings())
    v = unpack(lay, hull, sol.x)
    return DispatchDecision(
        *(float(v[k][0]) for k in SCALARS), v["lam_minus"][0], v["lam_plus"][0],
        float(v["ldes_charge"][0]), float(v["ldes_discharge"][0]), sol.objective,
        dict(prog.metadata))


def solve_sed(config: MicrogridConfig, state: SystemState, load: float, renewable: float,
              hull: ConvexHullModel, fixed_y: DispatchDecision | None = None,
              settings: SolverSettings | None = None, *, regularize: float = 0.0,
              availability: Availability | None = None) -> DispatchDecision:
    """Single-hour dispatch; with ``fixed_y`` only ``r, l, d`` are free."""
    pinned = None
    if fixed_y is not None:
        pinned = {k: [getattr(fixed_y, k)] for k in Y_FIELDS}
        pinned["lam_minus"] = np.asarray(fixed_y.lam_minus)[None, :]
        pinned["lam_plus"] = np.asarray(fixed_y.lam_plus)[None, :]
    return _single(config, hull, state, load, renewable, settings, pinned=pinned,
                   regularize=regularize, availability=availability)


def solve_ted(config: MicrogridConfig, state: SystemState, load: float, renewable: float,
              reference: float, theta: float, hull: ConvexHullModel,
              settings: SolverSettings | None = None, *,
              availability: Availability | None = None) -> DispatchDecision:
    """Single-hour dispatch plus ``theta * (h - reference)**2``."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    ld = config.ldes
    if not ld.soc_min - 1e-9 <= reference <= ld.soc_max + 1e-9:
        raise ValueError(f"reference {reference} outside [{ld.soc_min}, {ld.soc_max}]")
    return _single(config, hull, state, load, renewable, settings, theta=theta,
                   reference=[reference], availability=availability)


@dataclass
class AuditReport:
    errors: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.errors


def audit_trajectory(config: MicrogridConfig, hull: ConvexHullModel, load, renewable,
                     traj, e_init: float, h_init: float, *, contract_target: float | None = None,
                     tol: float = 1e-6, availability: Availability | None = None) -> AuditReport:
    """Re-check a decision sequence against every constraint with plain numpy.

    ``traj`` is any object exposing ``r, l, d, b_plus, b_minus, e, h,
    lam_minus, lam_plus`` as arrays (a bundle or a stacked run log).
    """
    errs: list[str] = []
    warns: list[str] = []
    load = np.asarray(load, float)
    renewable = np.asarray(renewable, float)
    T = len(load)
    avail = availability or Availability()
    g = {k: np.asarray(getattr(traj, k), float) for k in SCALARS}
    lm = np.atleast_2d(np.asarray(traj.lam_minus, float))
    lp = np.atleast_2d(np.asarray(traj.lam_plus, float))
    dg, bes, ld = config.dg, config.bes, config.ldes

    def check(name, bad):
        if np.any(bad):
            errs.append(f"{name} violated at hours {np.flatnonzero(bad)[:5].tolist()}")

    check("renewable cap", (g["r"] < -tol) | (g["r"] > renewable + tol))
    check("load shed cap", (g["l"] < -tol) | (g["l"] > load + tol))
    d_hi = dg.p_max * avail.factor("dg", T)
    check("dg box", (g["d"] < np.minimum(dg.p_min, d_hi) - tol) | (g["d"] > d_hi + tol))
    b_hi = bes.p_max * avail.factor("bes", T)
    for k in ("b_plus", "b_minus"):
        check(f"bes {k} box", (g[k] < -tol) | (g[k] > b_hi + tol))
    check("bes soc box", (g["e"] < bes.soc_min - tol) | (g["e"] > bes.soc_max + tol))
    check("ldes soc box", (g["h"] < ld.soc_min - tol) | (g["h"] > ld.soc_max + tol))
    for name, lam in (("charge", lm), ("discharge", lp)):
        check(f"{name} simplex sign", np.any(lam < -tol, axis=1))
        check(f"{name} simplex sum", np.abs(lam.sum(axis=1) - 1.0) > tol)
    pc = lm @ hull.charge.power
    pd = lp @ hull.discharge.power
    p_hi = ld.p_max * avail.factor("ldes", T)
    check("ldes power box", (pc > p_hi + tol) | (pd > p_hi + tol))
    bal = g["r"] + g["l"] + g["d"] + g["b_plus"] - g["b_minus"] + pd - pc - load
    check("power balance", np.abs(bal) > tol)
    e_prev = np.concatenate([[e_init], g["e"][:-1]])
    de = g["e"] - e_prev - bes.eta_charge * g["b_minus"] + g["b_plus"] / bes.eta_discharge
    check("bes dynamics", np.abs(de) > tol)
    h_prev = np.concatenate([[h_init], g["h"][:-1]])
    dh = g["h"] - h_prev - lm @ hull.charge.hydrogen + lp @ hull.discharge.hydrogen
    check("ldes dynamics", np.abs(dh) > tol)
    if contract_target is not None and g["h"][-1] < contract_target - tol:
        errs.append(f"contract: final LDES SoC {g['h'][-1]:.6f} < {contract_target}")
    simult = np.flatnonzero(g["b_plus"] * g["b_minus"] > tol)
    if simult.size:
        warns.append(f"simultaneous BES charge/discharge at {simult.size} hours")
    simult = np.flatnonzero((pc > tol) & (pd > tol))
    if simult.size:
        warns.append(f"simultaneous LDES charge/discharge at {simult.size} hours")
    return AuditReport(errs, warns)


# --------------------------------------------------------------------------- IO

BUNDLE_COLUMNS = ("t", "h_star_kg", "e_star_kwh", "cost_usd", "r_kw", "l_kw", "d_kw",
                  "b_plus_kw", "b_minus_kw")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bundle(bundle: TrajectoryBundle, path) -> Path:
    path = Path(path)
    M = bundle.lam_minus.shape[1]
    header = list(BUNDLE_COLUMNS) + [f"lam_minus_{m}" for m in range(M)] \
        + [f"lam_plus_{m}" for m in range(M)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(bundle.T):
            row = [str(bundle.start_hour + t)] + [_fmt(v) for v in (
                bundle.h[t], bundle.e[t], bundle.period_cost[t], bundle.r[t], bundle.l[t],
                bundle.d[t], bundle.b_plus[t], bundle.b_minus[t])]
            row += [_fmt(v) for v in bundle.lam_minus[t]] + [_fmt(v) for v in bundle.lam_plus[t]]
            w.writerow(row)
    return path


def read_bundle(path, scenario_id: str, meta: dict) -> TrajectoryBundle:
    """Inverse of :func:`write_bundle`; ``meta`` holds the manifest entry."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    M = sum(1 for h in header if h.startswith("lam_minus_"))
    k = len(BUNDLE_COLUMNS)
    cost = data[:, 3]
    return TrajectoryBundle(
        scenario_id=scenario_id, r=data[:, 4], l=data[:, 5], d=data[:, 6],
        b_plus=data[:, 7], b_minus=data[:, 8], e=data[:, 2], h=data[:, 1],
        lam_minus=data[:, k:k + M], lam_plus=data[:, k + M:k + 2 * M], period_cost=cost,
        total_cost=float(meta.get("total_cost", cost.sum())), status=meta.get("status", "optimal"),
        wall_time=float(meta.get("wall_time", 0.0)), hull_m=M,
        e_init=float(meta["e_init"]), h_init=float(meta["h_init"]),
        start_hour=int(data[0, 0]) if len(data) else 0)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path
