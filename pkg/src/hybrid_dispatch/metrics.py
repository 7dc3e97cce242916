"""Regret, its four-way decomposition, change rates and run summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ConvexHullModel, MicrogridConfig, SystemState
from .dispatch import TrajectoryBundle, period_cost, realized_cost, solve_ted
from .online import OcoModel, RunLog, StaticSet
from .program import SolverSettings

COMPONENTS = ("hull", "oco", "penalty", "optimality_gap")


@dataclass
class BoundConstants:
    F: float
    J: float
    diameter: float
    gamma_limit: float
    gamma0: float | None = None

    @property
    def gamma_ok(self) -> bool | None:
        return None if self.gamma0 is None else bool(self.gamma0 < self.gamma_limit)

    def line(self) -> str:
        if self.gamma0 is None:
            return f"F={self.F:.6g} J={self.J:.6g} d(X)={self.diameter:.6g}"
        verdict = "PASS" if self.gamma_ok else "FAIL"
        return (f"{verdict}: gamma0={self.gamma0:.6g} vs 1/sqrt(2J)={self.gamma_limit:.6g} "
                f"(F={self.F:.6g} J={self.J:.6g} d(X)={self.diameter:.6g})")


@dataclass
class RegretReport:
    total: float
    cumulative: np.ndarray
    components: dict = field(default_factory=dict)
    change_rate: np.ndarray | None = None
    trailing_mean: np.ndarray | None = None
    path_length: float = float("nan")
    bounds: BoundConstants | None = None

    def closure_error(self) -> float:
        """Relative gap between the component sum and the total."""
        if not self.components:
            return 0.0
        s = sum(self.components.values())
        return abs(s - self.total) / max(1.0, abs(self.total))

    def to_json(self) -> dict:
        out = {"total": self.total, "components": dict(self.components),
               "path_length": self.path_length,
               "final_trailing_change_rate": (float(self.trailing_mean[-1])
                                              if self.trailing_mean is not None and len(self.trailing_mean)
                                              else None)}
        if self.bounds is not None:
            out["bounds"] = {"F": self.bounds.F, "J": self.bounds.J, "diameter": self.bounds.diameter,
                             "gamma_limit": self.bounds.gamma_limit, "gamma0": self.bounds.gamma0,
                             "gamma_ok": self.bounds.gamma_ok}
        return out

    def csv_rows(self):
        yield ["t", "cumulative_regret_usd", "change_rate_usd_per_h", "trailing_mean_usd_per_h"]
        for t, v in enumerate(self.cumulative):
            rate = self.change_rate[t - 1] if (self.change_rate is not None and t >= 1) else float("nan")
            tm = self.trailing_mean[t - 1] if (self.trailing_mean is not None and t >= 1) else float("nan")
            yield [str(t), repr(float(v)), repr(float(rate)), repr(float(tm))]


@dataclass
class PerformanceSummary:
    annual_cost: float
    load_loss: float
    final_soc: float
    shortfall: float
    contract_penalty: float
    reference_rmse: float
    wall_time: float
    operating_cost: float = 0.0

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def _oracle_realized(config, hull, oracle: TrajectoryBundle) -> np.ndarray:
    return np.asarray(realized_cost(config, hull, oracle.l, oracle.d, oracle.b_plus,
                                    oracle.lam_minus, oracle.lam_plus), dtype=float)


def dynamic_regret(log: RunLog, oracle: TrajectoryBundle, config: MicrogridConfig,
                   hull: ConvexHullModel) -> RegretReport:
    """Cumulative realised-cost gap of the run's settled decisions to the hindsight plan."""
    if log.T != oracle.T:
        raise ValueError(f"horizon mismatch: run has {log.T} hours, oracle {oracle.T}")
    gap = np.asarray(log.realized_cost, float) - _oracle_realized(config, hull, oracle)
    cum = np.cumsum(gap)
    rate, trail = regret_change_rate(cum)
    return RegretReport(float(cum[-1]), cum, {}, rate, trail, path_length(log))


def regret_change_rate(cumulative, window: int = 168) -> tuple[np.ndarray, np.ndarray]:
    """First differences of a cumulative series and their trailing mean.

    The trailing mean at index ``j`` averages the last ``window`` differences
    (fewer at the start of the series).
    """
    cum = np.asarray(cumulative, dtype=float)
    if len(cum) < 2:
        raise ValueError("need at least two points")
    rate = np.diff(cum)
    cs = np.concatenate([[0.0], np.cumsum(rate)])
    j = np.arange(1, len(rate) + 1)
    lo = np.maximum(j - window, 0)
    trail = (cs[j] - cs[lo]) / (j - lo)
    return rate, trail


def path_length(log) -> float:
    x = np.column_stack([log.r, log.l, log.d, log.b_plus, log.b_minus, log.lam_minus, log.lam_plus])
    return float(np.linalg.norm(np.diff(x, axis=0), axis=1).sum())


def tracking_optima(log: RunLog, config: MicrogridConfig, hull: ConvexHullModel, theta: float,
                    reference, settings: SolverSettings | None = None) -> dict:
    """Per-hour tracking-dispatch optimum from the run's own state with realised data."""
    ref = np.asarray(reference, dtype=float)
    T = log.T
    h = np.zeros(T)
    cost = np.zeros(T)
    e_prev, h_prev = log.e_init, log.h_init
    ld = config.ldes
    for t in range(T):
        state = SystemState(t, e_prev, h_prev)
        if theta > 0 and np.isfinite(ref[t]):
            r, th = float(np.clip(ref[t], ld.soc_min, ld.soc_max)), theta
        else:
            r, th = ld.soc_min, 0.0
        try:
            dec = solve_ted(config, state, log.load[t], log.renewable[t], r, th, hull, settings)
        except Exception as exc:
            raise RuntimeError(f"tracking optimum unavailable at hour {t}: {exc}") from exc
        h[t] = dec.h
        cost[t] = float(period_cost(config, hull, dec.l, dec.d, dec.b_plus, dec.lam_plus))
        e_prev, h_prev = log.e[t], log.h[t]
    return {"h": h, "cost": cost}


def regret_decomposition(log: RunLog, oracle: TrajectoryBundle, config: MicrogridConfig,
                         hull: ConvexHullModel, theta: float, reference,
                         settings: SolverSettings | None = None, *, dagger: dict | None = None
                         ) -> RegretReport:
    """Split the dynamic regret into hull, OCO, tracking-penalty and optimality-gap terms.

    With ``f~`` the hull-model cost, ``f^`` the realised cost, ``f = f~ + theta (h - ref)^2``
    and ``x+`` the per-hour tracking optimum from the run's state:

    * hull    = sum[(f^ - f~)(run) - (f^ - f~)(oracle)]
    * oco     = sum[f(run) - f(x+)]
    * penalty = sum theta[(h+ - ref)^2 - (h - ref)^2]
    * gap     = sum[f~(x+) - f~(oracle)]

    The four telescope to the total regret. Hours without a finite reference
    carry no tracking term.
    """
    rep = dynamic_regret(log, oracle, config, hull)
    ref = np.asarray(reference, dtype=float)
    if len(ref) != log.T:
        raise ValueError("reference length differs from the run horizon")
    dag = dagger or tracking_optima(log, config, hull, theta, ref, settings)
    w = np.where(np.isfinite(ref), theta, 0.0)
    r0 = np.where(np.isfinite(ref), ref, 0.0)
    f_run_hull = np.asarray(log.cost, float)
    f_run_real = np.asarray(log.realized_cost, float)
    f_orc_hull = np.asarray(oracle.period_cost, float)
    f_orc_real = _oracle_realized(config, hull, oracle)
    trk_run = w * (np.asarray(log.h) - r0) ** 2
    trk_dag = w * (dag["h"] - r0) ** 2
    rep.components = {
        "hull": float(np.sum((f_run_real - f_run_hull) - (f_orc_real - f_orc_hull))),
        "oco": float(np.sum(f_run_hull + trk_run - dag["cost"] - trk_dag)),
        "penalty": float(np.sum(trk_dag - trk_run)),
        "optimality_gap": float(np.sum(dag["cost"] - f_orc_hull)),
    }
    return rep


def summarize(log, config: MicrogridConfig, hindsight_h=None) -> PerformanceSummary:
    ld = config.ldes
    shortfall = max(0.0, ld.soc_final_target - float(log.h[-1]))
    penalty = shortfall * config.costs.contract_violation_penalty
    op = float(np.sum(log.realized_cost))
    rmse = float("nan")
    if hindsight_h is not None:
        ref = np.asarray(log.reference, float)
        ok = np.isfinite(ref)
        if ok.any():
            diff = (ref[ok] - np.asarray(hindsight_h, float)[ok]) / ld.soc_max
            rmse = float(np.sqrt(np.mean(diff**2)))
    return PerformanceSummary(op + penalty, float(np.sum(log.l)), float(log.h[-1]) / ld.soc_max,
                              shortfall, penalty, rmse, float(log.wall_time), op)


def verify_bound_constants(config: MicrogridConfig, hull: ConvexHullModel,
                           X: StaticSet | None = None, *, load_max: float | None = None,
                           renewable_max: float | None = None, theta: float = 0.0,
                           gamma0: float | None = None) -> BoundConstants:
    """Bound constants over the per-unit decision set.

    ``J`` is the larger of the cost-gradient and balance-gradient norms,
    ``F`` the larger of the cost and balance magnitudes over the corners of
    X's box and ``d(X)`` the box diagonal.
    """
    model = OcoModel(config, hull)
    X = X or model.static_set(SystemState.initial(config))
    lb, ub = np.asarray(X.lb, float), np.asarray(X.ub, float)
    if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
        raise ValueError("decision set is unbounded")
    L = config.load_peak if load_max is None else load_max
    R = (config.wind_capacity + config.solar_capacity) if renewable_max is None else renewable_max
    n = len(lb)
    cost = model.cost_coef(L)
    bal = model.balance(L, R).G[1]
    if n != model.n:
        raise ValueError(f"decision set has {n} coordinates, model expects {model.n}")
    span = config.ldes.soc_max - config.ldes.soc_min
    track = 2.0 * theta * span * np.abs(model.dh)
    J = max(float(np.linalg.norm(np.abs(cost) + track)), float(np.linalg.norm(bal)))
    corner = np.maximum(np.abs(lb), np.abs(ub))
    F = max(float(np.abs(cost) @ corner + theta * span**2), float(np.abs(bal) @ corner + L))
    diam = float(np.linalg.norm(ub - lb))
    limit = 1.0 / math.sqrt(2.0 * J) if J > 0 else math.inf
    return BoundConstants(F, J, diam, limit, gamma0)
