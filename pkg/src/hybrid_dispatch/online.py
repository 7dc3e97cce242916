"""Non-anticipatory hourly control: virtual-queue OCO with experts, baselines,
settlement against realised data and fault-triggered reference regeneration.

The OCO iterate is a per-unit vector::

    z = [phi_r, phi_l, delta_d, beta_plus, beta_minus, lambda-[M], lambda+[M]]

with ``r = phi_r * R``, ``l = phi_l * L``, ``d = delta_d * D_max`` and
``b = beta * B_max``. The static set X holds the boxes, the two conversion
simplices and the SoC slabs implied by the known previous SoC. Only the power
balance (which needs the unknown current load and renewables) is relaxed,
as a deficit/surplus pair ``g(z) = (-u, u)`` with ``u`` the imbalance.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ConvexHullModel, MicrogridConfig, SystemState
from .dispatch import (
    Availability,
    DispatchDecision,
    TrajectoryBundle,
    assemble_dispatch,
    batch_generate_trajectories,
    hydrogen_benefit,
    period_cost,
    solve_ted,
    unpack,
)
from .learner import KernelReference, RegressionDataset, average_reference
from .program import (
    INF,
    InfeasibleProgramError,
    ProgramBuilder,
    SolverError,
    SolverSettings,
    solve_program,
)
from .scenarios import ForecastSeries, ScenarioSeries, apply_capacity_fault, compute_netload

ASSETS = ("wind", "solar", "dg", "bes", "ldes")


class StepError(RuntimeError):
    def __init__(self, expert: int, message: str):
        self.expert = expert
        super().__init__(f"expert {expert}: {message}")


class HardInfeasibility(RuntimeError):
    """Realised hour cannot be balanced even with full shedding."""


# --------------------------------------------------------------------------- configuration

def expert_count(kappa: float, T: int) -> int:
    """N = floor(kappa * log2(1 + T)) + 1."""
    return int(math.floor(kappa * math.log2(1 + T) + 1e-12)) + 1


def initial_weights(N: int) -> np.ndarray:
    """rho_i = (N + 1) / (i (i + 1) N), i = 1..N; sums to one."""
    i = np.arange(1, N + 1, dtype=float)
    return (N + 1) / (i * (i + 1) * N)


@dataclass(frozen=True)
class OcoConfig:
    alpha0: float = 0.5
    beta0: float = 0.05
    gamma0: float = 0.03
    c: float = 0.5
    kappa: float = 0.5
    theta0: float = 0.005
    m0: float = 0.2
    s0: float = 0.1
    horizon: int = 8760

    def __post_init__(self):
        if not self.alpha0 > 0 or not self.beta0 > 0:
            raise ValueError("alpha0 and beta0 must be positive")
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if not 0.0 < self.c < 1.0:
            raise ValueError("c must lie in (0, 1)")
        if not 0.0 <= self.kappa <= self.c:
            raise ValueError("kappa must lie in [0, c]")
        if not (self.theta0 > 0 and self.m0 > 0 and self.s0 > 0):
            raise ValueError("theta0, m0 and s0 must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def N(self) -> int:
        return expert_count(self.kappa, self.horizon)

    @property
    def gamma(self) -> float:
        return self.gamma0 / self.horizon**self.c

    @property
    def theta(self) -> float:
        return self.theta0 * self.horizon**self.c

    @property
    def hull_m(self) -> int:
        return max(2, int(round(self.m0 * self.horizon**self.c)))

    @property
    def scenario_count(self) -> int:
        return max(2, int(round(self.s0 * self.horizon**self.c)))

    def alpha(self, i: int, t: int) -> float:
        """Step size of expert ``i`` (1-based) at time ``t`` (1-based)."""
        return self.alpha0 * 2.0 ** (i - 1) / t**self.c

    def beta(self, i: int, t: int) -> float:
        return self.beta0 / math.sqrt(self.alpha(i, t))


@dataclass(frozen=True)
class TrackingConfig:
    theta: float = 0.0
    source: str = "kernel"

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if self.source not in ("kernel", "average", "none"):
            raise ValueError(f"unknown reference source {self.source!r}")


@dataclass(frozen=True)
class FaultEvent:
    start: int
    duration: int
    asset: str
    multiplier: float = 0.0

    def __post_init__(self):
        if self.asset not in ASSETS:
            raise ValueError(f"unknown asset {self.asset!r}")
        if not 0.0 <= self.multiplier <= 1.0:
            raise ValueError("fault multiplier must lie in [0, 1]")
        if self.start < 0 or self.duration < 1:
            raise ValueError("fault window must start at >= 0 and last >= 1 hour")

    @property
    def stop(self) -> int:
        return self.start + self.duration

    def validate(self, T: int):
        if self.stop > T:
            raise ValueError(f"fault window [{self.start}, {self.stop}) exceeds horizon {T}")


def fault_availability(events, T: int) -> Availability:
    mult = {a: np.ones(T) for a in ("dg", "bes", "ldes")}
    for ev in events:
        if ev.asset in mult:
            mult[ev.asset][ev.start:ev.stop] = np.minimum(mult[ev.asset][ev.start:ev.stop], ev.multiplier)
    return Availability(mult["dg"], mult["bes"], mult["ldes"])


def apply_faults(series: ScenarioSeries, events) -> ScenarioSeries:
    for ev in events:
        if ev.asset in ("wind", "solar"):
            series = apply_capacity_fault(series, ev.asset, ev.start, ev.stop, ev.multiplier)
    return series


# --------------------------------------------------------------------------- per-unit model

@dataclass(frozen=True)
class StaticSet:
    """Box plus linear rows: ``lb <= z <= ub``, ``row_lo <= A z <= row_hi``."""

    lb: np.ndarray
    ub: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray

    def contains(self, z, tol: float = 1e-7) -> bool:
        z = np.asarray(z, dtype=float)
        az = self.A @ z
        return bool(np.all(z >= self.lb - tol) and np.all(z <= self.ub + tol)
                    and np.all(az >= self.row_lo - tol) and np.all(az <= self.row_hi + tol))

    @property
    def box_widths(self) -> np.ndarray:
        return self.ub - self.lb


@dataclass(frozen=True)
class RelaxedConstraints:
    """Affine constraints ``g(z) = G z - h <= 0`` handled by virtual queues."""

    G: np.ndarray
    h: np.ndarray

    def value(self, z) -> np.ndarray:
        return self.G @ np.asarray(z, dtype=float) - self.h


class OcoModel:
    """Maps the per-unit iterate to physical decisions, costs and sets."""

    def __init__(self, config: MicrogridConfig, hull: ConvexHullModel):
        self.config, self.hull = config, hull
        self.M = hull.m
        self.n = 5 + 2 * self.M
        self.lm = slice(5, 5 + self.M)
        self.lp = slice(5 + self.M, 5 + 2 * self.M)
        self.dh = np.zeros(self.n)
        self.dh[self.lm] = hull.charge.hydrogen
        self.dh[self.lp] = -hull.discharge.hydrogen

    def x_init(self) -> np.ndarray:
        """Idle storage, full renewable use, DG at its minimum."""
        dg = self.config.dg
        z = np.zeros(self.n)
        z[0] = 1.0
        z[2] = dg.p_min / dg.p_max if dg.p_max > 0 else 0.0
        z[self.lm.start] = 1.0
        z[self.lp.start] = 1.0
        return z

    def to_physical(self, z, load: float, renewable: float) -> dict:
        c = self.config
        z = np.asarray(z, dtype=float)
        lm, lp = z[self.lm].copy(), z[self.lp].copy()
        return {
            "r": z[0] * renewable, "l": z[1] * load, "d": z[2] * c.dg.p_max,
            "b_plus": z[3] * c.bes.p_max, "b_minus": z[4] * c.bes.p_max,
            "lam_minus": lm, "lam_plus": lp,
            "ldes_charge": float(lm @ self.hull.charge.power),
            "ldes_discharge": float(lp @ self.hull.discharge.power),
        }

    def balance(self, load: float, renewable: float) -> RelaxedConstraints:
        """Deficit and surplus rows of the power balance for one hour."""
        c = self.config
        a = np.zeros(self.n)
        a[0], a[1], a[2] = renewable, load, c.dg.p_max
        a[3], a[4] = c.bes.p_max, -c.bes.p_max
        a[self.lm] = -self.hull.charge.power
        a[self.lp] = self.hull.discharge.power
        return RelaxedConstraints(np.stack([-a, a]), np.array([-load, load]))

    def cost_coef(self, load: float) -> np.ndarray:
        c = self.config
        k = c.costs
        g = np.zeros(self.n)
        g[1] = k.load_shed_penalty * load
        g[2] = k.dg_fuel_price * c.dg.p_max
        g[3] = k.bes_degradation * c.bes.p_max
        g[self.lp] = k.ldes_degradation * self.hull.discharge.power
        return g

    def ldes_soc(self, z, h_prev: float) -> float:
        return float(h_prev + self.dh @ np.asarray(z, dtype=float))

    def gradient(self, z, load: float, h_prev: float, theta: float, ref) -> np.ndarray:
        g = self.cost_coef(load)
        if theta > 0 and ref is not None and np.isfinite(ref):
            g = g + 2.0 * theta * (self.ldes_soc(z, h_prev) - ref) * self.dh
        return g

    def objective(self, z, load: float, h_prev: float, theta: float, ref) -> float:
        val = float(self.cost_coef(load) @ z)
        if theta > 0 and ref is not None and np.isfinite(ref):
            val += theta * (self.ldes_soc(z, h_prev) - ref) ** 2
        return val

    def static_set(self, state: SystemState, hour: int = 0,
                   availability: Availability | None = None) -> StaticSet:
        c, hull = self.config, self.hull
        av = availability or Availability()
        a_dg = float(av.factor("dg", hour + 1)[hour]) if av.dg is not None else 1.0
        a_bes = float(av.factor("bes", hour + 1)[hour]) if av.bes is not None else 1.0
        a_ld = float(av.factor("ldes", hour + 1)[hour]) if av.ldes is not None else 1.0
        lb, ub = np.zeros(self.n), np.ones(self.n)
        if c.dg.p_max > 0:
            lb[2] = min(c.dg.p_min / c.dg.p_max, a_dg)
        ub[2] = a_dg
        ub[3] = ub[4] = a_bes
        cap = a_ld * c.ldes.p_max + 1e-9
        ub[self.lm] = (hull.charge.power <= cap).astype(float)
        ub[self.lp] = (hull.discharge.power <= cap).astype(float)
        A = np.zeros((4, self.n))
        A[0, self.lm] = 1.0
        A[1, self.lp] = 1.0
        A[2, 3] = -c.bes.p_max / c.bes.eta_discharge
        A[2, 4] = c.bes.p_max * c.bes.eta_charge
        A[3] = self.dh
        lo = np.array([1.0, 1.0, c.bes.soc_min - state.bes_soc, c.ldes.soc_min - state.ldes_soc])
        hi = np.array([1.0, 1.0, c.bes.soc_max - state.bes_soc, c.ldes.soc_max - state.ldes_soc])
        return StaticSet(lb, ub, A, lo, hi)


def prox_step(z_prev, grad, alpha: float, beta: float, Q, relaxed: RelaxedConstraints | None,
              X: StaticSet, settings: SolverSettings | None = None) -> np.ndarray:
    """argmin over X of alpha<grad, z - z_prev> + alpha*beta<Q, [g(z)]_+> + |z - z_prev|^2.

    The clipped term uses one nonnegative epigraph slack per relaxed row.
    """
    z_prev = np.asarray(z_prev, dtype=float)
    n = len(z_prev)
    b = ProgramBuilder()
    zi = b.add_vars(n, X.lb, X.ub, alpha * np.asarray(grad, dtype=float) - 2.0 * z_prev)
    b.offset = float(z_prev @ z_prev - alpha * np.dot(grad, z_prev))
    rows = b.add_rows(len(X.row_lo), X.row_lo, X.row_hi, "static")
    nzr, nzc = np.nonzero(X.A)
    b.add_coef(rows[nzr], zi[nzc], X.A[nzr, nzc])
    if relaxed is not None and len(relaxed.h):
        Q = np.asarray(Q, dtype=float)
        s = b.add_vars(len(relaxed.h), 0.0, INF, alpha * beta * Q)
        rr = b.add_rows(len(relaxed.h), -INF, relaxed.h, "relaxed")
        nzr, nzc = np.nonzero(relaxed.G)
        b.add_coef(rr[nzr], zi[nzc], relaxed.G[nzr, nzc])
        b.add_coef(rr, s, -1.0)
    prog = b.build()
    quad = prog.quad.copy()
    quad[zi] = 1.0
    from dataclasses import replace
    prog = replace(prog, quad=quad)
    sol = solve_program(prog, settings or PROX_SETTINGS, backend="highs")
    return np.clip(sol.x[zi], X.lb, X.ub)


PROX_SETTINGS = SolverSettings(1e-9, 1e-8)


# --------------------------------------------------------------------------- experts

@dataclass
class ExpertBank:
    cfg: OcoConfig
    z: np.ndarray          # (N, n) current iterates
    Q: np.ndarray          # (N, J) virtual queues
    rho: np.ndarray        # (N,) meta-weights
    t: int = 1             # algorithm time of the current iterates
    losses: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.rho)

    @property
    def aggregate(self) -> np.ndarray:
        return self.rho @ self.z

    def alphas(self, t: int | None = None) -> np.ndarray:
        t = self.t if t is None else t
        return np.array([self.cfg.alpha(i, t) for i in range(1, self.N + 1)])

    def betas(self, t: int | None = None) -> np.ndarray:
        t = self.t if t is None else t
        return np.array([self.cfg.beta(i, t) for i in range(1, self.N + 1)])


def init_experts(cfg: OcoConfig, x_init, X: StaticSet | None = None, n_relaxed: int = 2) -> ExpertBank:
    x_init = np.asarray(x_init, dtype=float)
    if X is not None and not X.contains(x_init):
        raise ValueError("initial iterate is not in the static set X")
    N = cfg.N
    return ExpertBank(cfg, np.tile(x_init, (N, 1)), np.zeros((N, n_relaxed)), initial_weights(N))


def update_virtual_queue(bank: ExpertBank, i: int, residual) -> np.ndarray:
    """Q_i += beta_{i,t-1} * residual for expert ``i`` (0-based); residual is [g]_+."""
    residual = np.asarray(residual, dtype=float)
    if np.any(residual < 0):
        raise ValueError("queue residual must be componentwise nonnegative (clipped)")
    bank.Q[i] = bank.Q[i] + bank.cfg.beta(i + 1, bank.t) * residual
    return bank.Q[i]


def expert_prox_step(bank: ExpertBank, i: int, grad, relaxed: RelaxedConstraints,
                     X: StaticSet, settings: SolverSettings | None = None) -> np.ndarray:
    alpha = bank.cfg.alpha(i + 1, bank.t)
    beta = bank.cfg.beta(i + 1, bank.t)
    try:
        return prox_step(bank.z[i], grad, alpha, beta, bank.Q[i], relaxed, X, settings)
    except (InfeasibleProgramError, SolverError) as exc:
        raise StepError(i, str(exc)) from exc


def surrogate_losses(bank: ExpertBank, grad_at_aggregate) -> np.ndarray:
    """l_i = <grad f(x), x_i - x> with x the aggregated iterate."""
    x = bank.aggregate
    return (bank.z - x) @ np.asarray(grad_at_aggregate, dtype=float)


def aggregate_experts(bank: ExpertBank, losses, gamma: float, new_iterates=None):
    """Exponential-weights update; returns (rho, aggregated iterate)."""
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    expo = -gamma * losses
    w = bank.rho * np.exp(expo - np.max(expo))
    rho = w / w.sum()
    z = bank.z if new_iterates is None else np.asarray(new_iterates)
    return rho, rho @ z


@dataclass
class OnlineStepLog:
    t: int
    reference: float
    iterates: np.ndarray
    losses: np.ndarray
    rho: np.ndarray
    decision: np.ndarray
    queues: np.ndarray
    prev_load: float
    prev_renewable: float


class OcoController:
    """Owns the expert bank and performs one non-anticipatory step per hour."""

    def __init__(self, config: MicrogridConfig, hull: ConvexHullModel, cfg: OcoConfig,
                 theta: float, settings: SolverSettings | None = None,
                 initial_state: SystemState | None = None):
        self.model = OcoModel(config, hull)
        self.cfg = cfg
        self.theta = theta
        self.settings = settings or PROX_SETTINGS
        state = initial_state or SystemState.initial(config)
        X0 = self.model.static_set(state)
        self.bank = init_experts(cfg, self.model.x_init(), X0)

    def step(self, state: SystemState, reference: float | None, prev_load: float,
             prev_renewable: float, hour: int, availability: Availability | None = None
             ) -> tuple[np.ndarray, OnlineStepLog]:
        """Next aggregated iterate from data of the previous hour only.

        ``state`` is the SoC after the previous hour; realised data of the
        current hour is deliberately not an argument.
        """
        m, bank = self.model, self.bank
        relaxed = m.balance(prev_load, prev_renewable)
        X = m.static_set(state, hour, availability)
        theta = self.theta if reference is not None else 0.0
        # queues from the previous iterates' violations
        for i in range(bank.N):
            update_virtual_queue(bank, i, np.maximum(relaxed.value(bank.z[i]), 0.0))
        grads = [m.gradient(bank.z[i], prev_load, state.ldes_soc, theta, reference) for i in range(bank.N)]
        new = np.stack([expert_prox_step(bank, i, grads[i], relaxed, X, self.settings)
                        for i in range(bank.N)])
        g_agg = m.gradient(bank.aggregate, prev_load, state.ldes_soc, theta, reference)
        losses = surrogate_losses(bank, g_agg)
        rho, x = aggregate_experts(bank, losses, self.cfg.gamma, new)
        bank.z, bank.rho, bank.losses = new, rho, losses
        bank.t += 1
        log = OnlineStepLog(hour, float("nan") if reference is None else reference, new.copy(),
                            losses, rho.copy(), x.copy(), bank.Q.copy(), prev_load, prev_renewable)
        return x, log


def oco_step(controller: OcoController, state: SystemState, reference, prev_load, prev_renewable,
             hour: int, availability: Availability | None = None):
    return controller.step(state, reference, prev_load, prev_renewable, hour, availability)


# --------------------------------------------------------------------------- settlement

@dataclass
class SettleResult:
    decision: DispatchDecision
    cost: float            # hull-model cost, $
    realized_cost: float   # cost re-priced through the true curves, $
    residual: np.ndarray   # [deficit, surplus] of the committed plan, kW
    released_ldes: bool = False


def settle(config: MicrogridConfig, hull: ConvexHullModel, plan: dict, load: float,
           renewable: float, state: SystemState, *, hour: int = 0,
           availability: Availability | None = None,
           settings: SolverSettings | None = None) -> SettleResult:
    """Cheapest feasible adjustment of a committed plan to realised data.

    LDES conversion weights stay at the plan's values; ``r, l, d, b+, b-`` are
    re-optimised at their costs plus an L1 deviation penalty of
    ``1e-3 * c_d`` per kW. If that is infeasible the LDES weights are
    released under a large deviation penalty and the result is flagged.
    """
    c = config.costs
    pc, pd = hull.charge.power, hull.discharge.power
    lam_m = np.asarray(plan["lam_minus"], float)
    lam_p = np.asarray(plan["lam_plus"], float)
    u = (plan["r"] + plan["l"] + plan["d"] + plan["b_plus"] - plan["b_minus"]
         + lam_p @ pd - lam_m @ pc - load)
    residual = np.array([max(-u, 0.0), max(u, 0.0)])
    if abs(u) <= 1e-9 and _plan_feasible(config, hull, plan, load, renewable, state, hour, availability):
        dec = _decision(config, hull, plan, state)
        return SettleResult(dec, float(period_cost(config, hull, dec.l, dec.d, dec.b_plus, lam_p)),
                            _realized(config, hull, dec), residual)
    try:
        dec = _settle_lp(config, hull, plan, load, renewable, state, hour, availability, settings, False)
        released = False
    except InfeasibleProgramError:
        try:
            dec = _settle_lp(config, hull, plan, load, renewable, state, hour, availability, settings, True)
        except InfeasibleProgramError as exc:
            raise HardInfeasibility(f"hour {hour}: cannot balance realised data ({exc})") from exc
        released = True
    cost = float(period_cost(config, hull, dec.l, dec.d, dec.b_plus, dec.lam_plus))
    return SettleResult(dec, cost, _realized(config, hull, dec), residual, released)


def _realized(config, hull, dec: DispatchDecision) -> float:
    base = float(period_cost(config, hull, dec.l, dec.d, dec.b_plus, dec.lam_plus))
    gain = float(hydrogen_benefit(config, hull, dec.lam_minus, dec.lam_plus)[0])
    return base - config.costs.ldes_degradation * gain


def _decision(config, hull, plan, state) -> DispatchDecision:
    b = config.bes
    lam_m = np.asarray(plan["lam_minus"], float)
    lam_p = np.asarray(plan["lam_plus"], float)
    e = state.bes_soc + b.eta_charge * plan["b_minus"] - plan["b_plus"] / b.eta_discharge
    h = state.ldes_soc + lam_m @ hull.charge.hydrogen - lam_p @ hull.discharge.hydrogen
    return DispatchDecision(float(plan["r"]), float(plan["l"]), float(plan["d"]),
                            float(plan["b_plus"]), float(plan["b_minus"]), float(e), float(h),
                            lam_m, lam_p, float(lam_m @ hull.charge.power),
                            float(lam_p @ hull.discharge.power))


def _plan_feasible(config, hull, plan, load, renewable, state, hour, availability, tol=1e-9) -> bool:
    av = availability or Availability()
    a = lambda k: 1.0 if getattr(av, k) is None else float(getattr(av, k)[hour])
    dec = _decision(config, hull, plan, state)
    dg, bes, ld = config.dg, config.bes, config.ldes
    return (-tol <= dec.r <= renewable + tol and -tol <= dec.l <= load + tol
            and min(dg.p_min, dg.p_max * a("dg")) - tol <= dec.d <= dg.p_max * a("dg") + tol
            and -tol <= dec.b_plus <= bes.p_max * a("bes") + tol
            and -tol <= dec.b_minus <= bes.p_max * a("bes") + tol
            and bes.soc_min - tol <= dec.e <= bes.soc_max + tol
            and ld.soc_min - tol <= dec.h <= ld.soc_max + tol)


def _settle_lp(config, hull, plan, load, renewable, state, hour, availability, settings, release):
    c = config.costs
    av = availability or Availability()
    sl = lambda v: None if v is None else np.asarray(v)[hour:hour + 1]
    av1 = Availability(sl(av.dg), sl(av.bes), sl(av.ldes))
    pinned = None if release else {"lam_minus": np.asarray(plan["lam_minus"])[None, :],
                                   "lam_plus": np.asarray(plan["lam_plus"])[None, :]}
    prog, lay = assemble_dispatch(config, hull, [load], [renewable], state,
                                  availability=av1, pinned=pinned)
    b = ProgramBuilder()
    b.add_vars(prog.n, prog.lb, prog.ub, prog.c)
    rows = b.add_rows(len(prog.row_lo), prog.row_lo, prog.row_hi, "dispatch")
    coo = prog.A.tocoo()
    b.add_coef(rows[coo.row], coo.col, coo.data)
    w = 1e-3 * c.dg_fuel_price
    targets = [(lay.col(k)[0], plan[k], w) for k in ("r", "l", "d", "b_plus", "b_minus")]
    if release:
        big = 10.0 * c.load_shed_penalty * config.ldes.p_max
        targets += [(j, v, big) for j, v in zip(lay.lam("minus")[0], plan["lam_minus"])]
        targets += [(j, v, big) for j, v in zip(lay.lam("plus")[0], plan["lam_plus"])]
    for col, val, weight in targets:
        dp = b.add_vars(1, 0.0, INF, weight)
        dm = b.add_vars(1, 0.0, INF, weight)
        row = b.add_rows(1, val, val, "deviation")
        b.add_coef(row, [col], 1.0)
        b.add_coef(row, dp, -1.0)
        b.add_coef(row, dm, 1.0)
    sol = solve_program(b.build(), settings or SolverSettings())
    v = unpack(lay, hull, sol.x[: prog.n])
    return DispatchDecision(*(float(v[k][0]) for k in ("r", "l", "d", "b_plus", "b_minus", "e", "h")),
                            v["lam_minus"][0], v["lam_plus"][0], float(v["ldes_charge"][0]),
                            float(v["ldes_discharge"][0]))


# --------------------------------------------------------------------------- MPC

def mpc_step(config: MicrogridConfig, state: SystemState, forecast_load, forecast_renewable,
             reference: float | None, theta: float, hull: ConvexHullModel, K: int,
             settings: SolverSettings | None = None, *, contract_target: float | None = None,
             availability: Availability | None = None) -> DispatchDecision:
    """Solve a ``K``-hour look-ahead with terminal tracking; return its first hour.

    With ``contract_target`` set the final-SoC contract is enforced when the
    window reaches the end of the horizon; if that is infeasible the window is
    re-solved with the target tracked instead.
    """
    fl = np.asarray(forecast_load, dtype=float)
    fr = np.asarray(forecast_renewable, dtype=float)
    if len(fl) < K or len(fr) < K:
        raise ValueError("forecast window shorter than the look-ahead")
    ref = np.full(K, np.nan)
    th = theta if reference is not None else 0.0
    if reference is not None:
        ref[-1] = reference
    kw = dict(availability=availability)
    try:
        prog, lay = assemble_dispatch(config, hull, fl[:K], fr[:K], state, theta=th, reference=ref,
                                      contract_target=contract_target, **kw)
        sol = solve_program(prog, settings or SolverSettings())
    except InfeasibleProgramError:
        if contract_target is None:
            raise
        ref[-1] = contract_target
        prog, lay = assemble_dispatch(config, hull, fl[:K], fr[:K], state,
                                      theta=max(theta, 1.0), reference=ref, **kw)
        sol = solve_program(prog, settings or SolverSettings())
    v = unpack(lay, hull, sol.x)
    return DispatchDecision(*(float(v[k][0]) for k in ("r", "l", "d", "b_plus", "b_minus", "e", "h")),
                            v["lam_minus"][0], v["lam_plus"][0], float(v["ldes_charge"][0]),
                            float(v["ldes_discharge"][0]), float(sol.objective))


# --------------------------------------------------------------------------- references

class ReferenceSource:
    """Online SoC reference: kernel regression, scenario average, or none."""

    def __init__(self, kind: str, dataset: RegressionDataset | None = None,
                 kernel: KernelReference | None = None):
        if kind not in ("kernel", "average", "none"):
            raise ValueError(f"unknown reference source {kind!r}")
        if kind == "kernel" and kernel is None:
            raise ValueError("kernel reference requires a trained learner")
        if kind == "average" and dataset is None and kernel is None:
            raise ValueError("average reference requires a dataset")
        self.kind = kind
        self.kernel = kernel
        self._dataset = dataset

    @property
    def dataset(self) -> RegressionDataset | None:
        return self.kernel.dataset if self.kernel is not None else self._dataset

    def swap_dataset(self, ds: RegressionDataset):
        if self.kernel is not None:
            self.kernel = KernelReference(ds, self.kernel.params, self.kernel.underflow_hours)
        self._dataset = ds

    def at(self, t: int, netload_hist, soc_hist, target_hour: int | None = None) -> float | None:
        if self.kind == "none":
            return None
        ds = self.dataset
        th = t if target_hour is None else min(target_hour, ds.T - 1)
        if self.kind == "average" or t == 0:
            return average_reference(ds, th)
        return self.kernel.predict(t, netload_hist, soc_hist, th)


# --------------------------------------------------------------------------- run loop

LOG_FIELDS = ("r", "l", "d", "b_plus", "b_minus", "e", "h")


@dataclass
class RunLog:
    """Hourly record of a closed-loop run (settled decisions unless noted)."""

    method: str
    reference_kind: str
    scenario_id: str
    load: np.ndarray
    renewable: np.ndarray
    reference: np.ndarray
    plan: dict
    r: np.ndarray
    l: np.ndarray
    d: np.ndarray
    b_plus: np.ndarray
    b_minus: np.ndarray
    e: np.ndarray
    h: np.ndarray
    lam_minus: np.ndarray
    lam_plus: np.ndarray
    cost: np.ndarray
    realized_cost: np.ndarray
    residual: np.ndarray
    released: np.ndarray
    fault_active: np.ndarray
    queues: np.ndarray | None
    rho: np.ndarray | None
    iterates: np.ndarray | None
    e_init: float
    h_init: float
    theta: float
    events: list = field(default_factory=list)
    wall_time: float = 0.0
    hull_m: int = 0

    @property
    def T(self) -> int:
        return len(self.h)

    def csv_rows(self):
        cols = ["t", "load_kw", "renewable_kw", "reference_kg", "r_kw", "l_kw", "d_kw",
                "b_plus_kw", "b_minus_kw", "e_kwh", "h_kg", "ldes_charge_kw",
                "ldes_discharge_kw", "cost_usd", "realized_cost_usd", "deficit_kw",
                "surplus_kw", "ldes_released", "fault_active", "queue_sum"]
        yield cols
        pc = self.lam_minus @ self._pc
        pd = self.lam_plus @ self._pd
        qsum = self.queues.sum(axis=(1, 2)) if self.queues is not None else np.zeros(self.T)
        for t in range(self.T):
            yield [str(t)] + [repr(float(v)) for v in (
                self.load[t], self.renewable[t], self.reference[t], self.r[t], self.l[t],
                self.d[t], self.b_plus[t], self.b_minus[t], self.e[t], self.h[t], pc[t], pd[t],
                self.cost[t], self.realized_cost[t], self.residual[t, 0], self.residual[t, 1])] \
                + [str(int(self.released[t])), str(int(self.fault_active[t])), repr(float(qsum[t]))]

    def attach_hull(self, hull: ConvexHullModel):
        self._pc, self._pd = hull.charge.power, hull.discharge.power
        return self


def _netload_frac(series: ScenarioSeries, ref: ReferenceSource) -> np.ndarray:
    ds = ref.dataset
    if ds is None:
        return np.zeros(series.T)
    return compute_netload(series, ds.stats).values


def run_online(config: MicrogridConfig, scenario: ScenarioSeries, hull: ConvexHullModel,
               method: str = "oco", reference: ReferenceSource | None = None, *,
               oco: OcoConfig | None = None, theta: float | None = None,
               forecast: ForecastSeries | None = None, mpc_horizon: int = 168,
               faults=(), training: list[ScenarioSeries] | None = None,
               settings: SolverSettings | None = None, jobs: int = 1,
               keep_iterates: bool = False) -> RunLog:
    """Closed-loop simulation over the scenario horizon.

    Per hour: update the reference from realised history, decide without the
    current hour's data (OCO, MPC on forecasts) or with it (myopic SED),
    settle against realised data, and advance the state. Fault events swap
    in regenerated references at their start hour (requires ``training``).
    """
    t0 = time.perf_counter()
    if method not in ("oco", "mpc", "sed"):
        raise ValueError(f"unknown method {method!r}")
    reference = reference or ReferenceSource("none")
    T = scenario.T
    oco = oco or OcoConfig(horizon=T)
    theta = oco.theta if theta is None else theta
    faults = list(faults)
    for ev in faults:
        ev.validate(T)
    truth = apply_faults(scenario, faults)
    avail = fault_availability(faults, T)
    L, R = truth.load, truth.renewable
    nl = _netload_frac(truth, reference)
    soc_max = config.ldes.soc_max
    settings = settings or SolverSettings()
    if method == "mpc" and forecast is None:
        forecast = ForecastSeries(L.copy(), R.copy(), 0.0)

    state = SystemState.initial(config)
    ctrl = OcoController(config, hull, oco, theta, initial_state=state) if method == "oco" else None
    model = ctrl.model if ctrl else OcoModel(config, hull)
    M = hull.m
    out = {k: np.zeros(T) for k in LOG_FIELDS}
    lam_m, lam_p = np.zeros((T, M)), np.zeros((T, M))
    plan_log = {k: np.zeros(T) for k in ("r", "l", "d", "b_plus", "b_minus", "ldes_charge", "ldes_discharge")}
    cost, rcost = np.zeros(T), np.zeros(T)
    resid = np.zeros((T, 2))
    released = np.zeros(T, dtype=bool)
    refs = np.full(T, np.nan)
    queues = np.zeros((T, oco.N, 2)) if ctrl else None
    rhos = np.zeros((T, oco.N)) if ctrl else None
    iters = np.zeros((T, oco.N, model.n)) if (ctrl and keep_iterates) else None
    fault_active = np.zeros(T, dtype=bool)
    for ev in faults:
        fault_active[ev.start:ev.stop] = True
    events: list[dict] = []
    soc_hist = np.zeros(T)
    pending = sorted(faults, key=lambda ev: ev.start)

    for k in range(T):
        while pending and pending[0].start == k:
            ev = pending.pop(0)
            info = {"hour": k, "event": "fault", "asset": ev.asset, "duration": ev.duration,
                    "multiplier": ev.multiplier}
            if training and reference.kind != "none":
                res = handle_fault(ev, state, config, training, hull, reference, settings=settings,
                                   jobs=jobs, horizon=T, prior_faults=[f for f in faults if f.start < k])
                info.update(regenerated=res.ok, failures=len(res.batch.failures) if res.batch else 0,
                            warning=res.warning)
            events.append(info)

        ref = reference.at(k, nl, soc_hist) if reference.kind != "none" else None
        if ref is not None:
            ref = float(np.clip(ref, config.ldes.soc_min, config.ldes.soc_max))
            refs[k] = ref

        if method == "oco":
            if k == 0:
                z = ctrl.bank.aggregate
            else:
                z, slog = ctrl.step(state, ref, L[k - 1], R[k - 1], k, avail)
            plan = model.to_physical(z, L[k], R[k])
            queues[k] = ctrl.bank.Q
            rhos[k] = ctrl.bank.rho
            if iters is not None:
                iters[k] = ctrl.bank.z
        elif method == "sed":
            sl = lambda v: None if v is None else v[k:k + 1]
            av1 = Availability(sl(avail.dg), sl(avail.bes), sl(avail.ldes))
            if ref is None:
                dec = solve_ted(config, state, L[k], R[k], config.ldes.soc_min, 0.0, hull, settings,
                                availability=av1)
            else:
                dec = solve_ted(config, state, L[k], R[k], ref, theta, hull, settings, availability=av1)
            plan = _plan_from_decision(dec)
        else:
            K = min(mpc_horizon, T - k)
            sl = lambda v: None if v is None else v[k:k + K]
            av1 = Availability(sl(avail.dg), sl(avail.bes), sl(avail.ldes))
            fl, fr = forecast.load[k:k + K], forecast.renewable[k:k + K]
            term = None
            if ref is not None:
                term = reference.at(k, nl, soc_hist, target_hour=k + K - 1)
                term = float(np.clip(term, config.ldes.soc_min, config.ldes.soc_max))
            target = config.ldes.soc_final_target if k + K >= T else None
            dec = mpc_step(config, state, fl, fr, term, theta, hull, K, settings,
                           contract_target=target, availability=av1)
            plan = _plan_from_decision(dec)

        res = settle(config, hull, plan, L[k], R[k], state, hour=k, availability=avail, settings=settings)
        d = res.decision
        for f in LOG_FIELDS:
            out[f][k] = getattr(d, f)
        lam_m[k], lam_p[k] = d.lam_minus, d.lam_plus
        for f in plan_log:
            plan_log[f][k] = plan[f]
        cost[k], rcost[k], resid[k], released[k] = res.cost, res.realized_cost, res.residual, res.released_ldes
        state = SystemState(k + 1, d.e, d.h)
        soc_hist[k] = d.h / soc_max

    log = RunLog(method, reference.kind, scenario.scenario_id, L.copy(), R.copy(), refs, plan_log,
                 out["r"], out["l"], out["d"], out["b_plus"], out["b_minus"], out["e"], out["h"],
                 lam_m, lam_p, cost, rcost, resid, released, fault_active, queues, rhos, iters,
                 config.bes.soc_init, config.ldes.soc_init, theta if reference.kind != "none" else 0.0,
                 events, time.perf_counter() - t0, hull.m)
    return log.attach_hull(hull)


def _plan_from_decision(dec: DispatchDecision) -> dict:
    return {"r": dec.r, "l": dec.l, "d": dec.d, "b_plus": dec.b_plus, "b_minus": dec.b_minus,
            "lam_minus": dec.lam_minus, "lam_plus": dec.lam_plus,
            "ldes_charge": dec.ldes_charge, "ldes_discharge": dec.ldes_discharge}


def bundle_as_log(bundle: TrajectoryBundle, scenario: ScenarioSeries, config: MicrogridConfig,
                  hull: ConvexHullModel) -> RunLog:
    """Wrap a hindsight solution as a run log (the perfect-foresight row)."""
    T = bundle.T
    from .dispatch import realized_cost
    rc = realized_cost(config, hull, bundle.l, bundle.d, bundle.b_plus, bundle.lam_minus, bundle.lam_plus)
    plan = {"r": bundle.r, "l": bundle.l, "d": bundle.d, "b_plus": bundle.b_plus,
            "b_minus": bundle.b_minus, "ldes_charge": bundle.lam_minus @ hull.charge.power,
            "ldes_discharge": bundle.lam_plus @ hull.discharge.power}
    log = RunLog("perfect", "hindsight", scenario.scenario_id, scenario.load.copy(),
                 scenario.renewable.copy(), bundle.h.copy(), plan, bundle.r, bundle.l, bundle.d,
                 bundle.b_plus, bundle.b_minus, bundle.e, bundle.h, bundle.lam_minus, bundle.lam_plus,
                 bundle.period_cost, np.asarray(rc), np.zeros((T, 2)), np.zeros(T, bool),
                 np.zeros(T, bool), None, None, None, bundle.e_init, bundle.h_init, 0.0, [],
                 bundle.wall_time, bundle.hull_m)
    return log.attach_hull(hull)


# --------------------------------------------------------------------------- faults

@dataclass
class FaultResult:
    ok: bool
    batch: object | None
    dataset: RegressionDataset | None
    warning: str = ""


def regenerate_references(event: FaultEvent, state: SystemState, config: MicrogridConfig,
                          scenarios: list[ScenarioSeries], hull: ConvexHullModel,
                          settings: SolverSettings | None = None, *, jobs: int = 1,
                          horizon: int | None = None, prior_faults=()):
    """Re-solve every scenario from ``state`` over the remaining horizon with the fault applied."""
    k = state.t
    T = horizon or scenarios[0].T
    if event.start < k:
        raise ValueError("fault starts before the current hour")
    events = list(prior_faults) + [event]
    faulted = [apply_faults(s, events).window(k, T, s.scenario_id) for s in scenarios]
    av = fault_availability(events, T)
    sl = lambda v: None if v is None else v[k:T]
    batch = batch_generate_trajectories(config, faulted, hull, settings, jobs=jobs, state=state,
                                        availability=Availability(sl(av.dg), sl(av.bes), sl(av.ldes)))
    return faulted, batch


def handle_fault(event: FaultEvent, state: SystemState, config: MicrogridConfig,
                 scenarios: list[ScenarioSeries], hull: ConvexHullModel,
                 reference: ReferenceSource, settings: SolverSettings | None = None, *,
                 jobs: int = 1, horizon: int | None = None, prior_faults=()) -> FaultResult:
    """Regenerate hindsight trajectories from the live state and swap the learner's dataset.

    On any regeneration failure the prior references are kept and a warning
    is issued. The expert bank is not touched.
    """
    k = state.t
    try:
        faulted, batch = regenerate_references(event, state, config, scenarios, hull, settings,
                                               jobs=jobs, horizon=horizon, prior_faults=prior_faults)
    except Exception as exc:  # noqa: BLE001
        msg = f"fault regeneration failed: {exc}; keeping prior references"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return FaultResult(False, None, None, msg)
    if batch.failures:
        msg = (f"fault regeneration infeasible for {len(batch.failures)} scenario(s); "
               "keeping prior references")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return FaultResult(False, batch, None, msg)
    ds = reference.dataset
    by_id = {b.scenario_id: b for b in batch.bundles}
    order = [by_id[s] for s in ds.scenario_ids] if ds.scenario_ids else batch.bundles
    nl = np.stack([compute_netload(f, ds.stats).values for f in faulted])
    if ds.scenario_ids:
        pos = {f.scenario_id: j for j, f in enumerate(faulted)}
        nl = nl[[pos[s] for s in ds.scenario_ids]]
    soc = np.stack([b.h for b in order]) / ds.soc_max
    new = ds.with_tail(k, nl, soc)
    reference.swap_dataset(new)
    return FaultResult(True, batch, new)
